#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fpt/model.hpp"
#include "fpt/rng.hpp"

namespace fpt {

enum class TaskKind { bit_memory, bit_xor, listops, image_patches, image_flat, labeled_sequences };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

enum class ImageFormat { idx, cifar };

struct TaskConfig {
    TaskKind kind = TaskKind::bit_xor;
    std::uint64_t seed = 0;

    // bit memory
    std::size_t n_strings = 5;
    std::size_t string_length = 1000;
    std::size_t chunk = 50;
    float mask_prob = 0.5f;

    // bit xor
    std::size_t xor_bits = 5;

    // listops
    std::size_t max_depth = 10;
    std::size_t max_args = 10;
    /// Probability that an operand is itself a sub-expression (below max_depth).
    float branch_prob = 0.25f;
    std::size_t max_len = 512;
    std::size_t max_retries = 100;

    // file-backed datasets
    ImageFormat image_format = ImageFormat::idx;
    std::filesystem::path train_path;
    std::filesystem::path train_labels_path;  // IDX only
    std::filesystem::path test_path;
    std::filesystem::path test_labels_path;
    std::size_t image_side = 32;
    std::size_t patch = 4;
    std::string alphabet = "ACDEFGHIKLMNPQRSTVWYBXZUO";
    std::size_t n_classes = 10;

    /// Finite training pool for synthetic tasks (0 = unbounded stream), and a
    /// cap on loaded examples for file-backed ones (0 = all).
    std::size_t train_size = 0;
    std::size_t test_size = 1000;

    void validate() const;

    Readout readout() const;
    std::size_t d_in() const;
    /// Classes for last-token tasks, bits per answer token for per-token ones.
    std::size_t d_out() const;
    /// Upper bound on sequence length.
    std::size_t length() const;
};

nlohmann::json task_to_json(const TaskConfig& cfg);
/// Strict: unknown keys are a ConfigError.
TaskConfig task_from_json(const nlohmann::json& j);

/// One example. Tokens are row-major length x d_in.
struct TaskInstance {
    std::size_t length = 0;
    std::size_t d_in = 0;
    std::vector<float> tokens;
    int label = -1;
    std::vector<std::size_t> answer_positions;
    /// Bits in {0,1}, bits-per-answer values for each answer position.
    std::vector<float> bit_targets;

    float token(std::size_t t, std::size_t k) const { return tokens[t * d_in + k]; }
};

/// Pads to the longest example.
Batch collate(std::span<const TaskInstance> examples);

// ------------------------------------------------------------------ synthetic

/// Bits are encoded -1/+1 with 0 marking a masked query bit.
TaskInstance gen_bit_memory(const TaskConfig& cfg, Rng& rng);
TaskInstance gen_bit_xor(const TaskConfig& cfg, Rng& rng);
TaskInstance gen_listops(const TaskConfig& cfg, Rng& rng);

// ------------------------------------------------------------------ listops

/// Vocabulary: digits 0-9, then [MAX, [MIN, [MED, [SM, then ].
enum ListOpsSymbol : int { kMax = 10, kMin = 11, kMed = 12, kSumMod = 13, kClose = 14 };
inline constexpr std::size_t kListOpsVocab = 15;

/// Accepts "[ MAX 4 3 ]" or "[MAX 4 3 ]" spellings.
std::vector<int> listops_tokenize(std::string_view text);
std::string listops_to_string(std::span<const int> ids);
/// Throws GenerationError on a malformed expression.
int listops_evaluate(std::span<const int> ids);
std::vector<int> listops_ids(const TaskInstance& instance);

// ------------------------------------------------------------------ file datasets

/// 8-bit images, row-major, channel-planar (CIFAR) or single channel (IDX).
struct ImageSet {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;

    std::size_t count() const { return labels.size(); }
    std::span<const std::uint8_t> image(std::size_t i) const;
};

ImageSet read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
ImageSet read_cifar_batch(const std::filesystem::path& path);
ImageSet read_images(const TaskConfig& cfg, bool train);

/// image_side x image_side grayscale in [0,1]: BT.601 luma for colour, centred
/// zero padding (or centre crop) to the side length.
std::vector<float> to_grayscale_square(const ImageSet& set, std::size_t index, std::size_t side);
/// Raster-ordered patch tokens, each patch flattened row-major.
std::vector<float> patchify(std::span<const float> image, std::size_t side, std::size_t patch);

struct PixelStats {
    double mean = 0.0;
    double std = 1.0;
};

PixelStats pixel_stats(const ImageSet& set, std::size_t side);

/// Patch tokens (patch^2 dims), standardized by `stats`.
std::vector<TaskInstance> load_image_patches(const ImageSet& set, const TaskConfig& cfg, const PixelStats& stats);
/// One pixel per token.
std::vector<TaskInstance> load_image_flat_lra(const ImageSet& set, const TaskConfig& cfg, const PixelStats& stats);

struct SequenceSet {
    std::vector<TaskInstance> examples;
    std::size_t skipped = 0;
};

/// Lines "SEQ<TAB>LABEL"; one-hot tokens over cfg.alphabet. Records of length
/// >= max_len are skipped and counted.
SequenceSet load_labeled_sequences(const std::filesystem::path& path, const TaskConfig& cfg);

// ------------------------------------------------------------------ task sources

/// Train and test example source. Synthetic tasks generate example i from a
/// stream split off the task seed ("train"/"test"), so the two never share a
/// draw; file tasks index the loaded split.
class Task {
public:
    virtual ~Task() = default;

    const TaskConfig& config() const noexcept { return cfg_; }
    Readout readout() const { return cfg_.readout(); }
    std::size_t d_in() const { return cfg_.d_in(); }
    std::size_t d_out() const { return cfg_.d_out(); }

    virtual TaskInstance train_example(std::uint64_t index) const = 0;
    virtual TaskInstance test_example(std::uint64_t index) const = 0;
    /// nullopt for an unbounded stream.
    virtual std::optional<std::size_t> train_size() const = 0;
    virtual std::size_t test_size() const = 0;

protected:
    explicit Task(TaskConfig cfg) : cfg_(std::move(cfg)) {}
    TaskConfig cfg_;
};

class SyntheticTask : public Task {
public:
    explicit SyntheticTask(TaskConfig cfg);
    TaskInstance train_example(std::uint64_t index) const override;
    TaskInstance test_example(std::uint64_t index) const override;
    std::optional<std::size_t> train_size() const override;
    std::size_t test_size() const override { return cfg_.test_size; }

private:
    TaskInstance generate(std::string_view split, std::uint64_t index) const;
};

class InMemoryTask : public Task {
public:
    InMemoryTask(TaskConfig cfg, std::vector<TaskInstance> train, std::vector<TaskInstance> test);
    TaskInstance train_example(std::uint64_t index) const override;
    TaskInstance test_example(std::uint64_t index) const override;
    std::optional<std::size_t> train_size() const override { return train_.size(); }
    std::size_t test_size() const override { return test_.size(); }

private:
    std::vector<TaskInstance> train_;
    std::vector<TaskInstance> test_;
};

/// Builds the source for `cfg`, loading files where needed.
std::shared_ptr<Task> make_task(const TaskConfig& cfg);

}  // namespace fpt
