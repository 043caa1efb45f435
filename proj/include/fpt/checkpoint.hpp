#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fpt/errors.hpp"
#include "fpt/model.hpp"

namespace fpt {

/// Container layout (all integers little-endian):
///
///   "FPTC" | u32 version | u64 header length | UTF-8 JSON header | payload
///
/// The header holds the model spec (absent for plain tensor bundles such as
/// optimizer state), free-form metadata, and the tensor index: name, group,
/// dtype ("f32"), shape, byte offset into the payload, byte size and CRC-32 of
/// the tensor bytes. The payload is the tensors' little-endian float32 values
/// concatenated in index order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    ParamGroup group = ParamGroup::attention;
    Tensor tensor;
};

struct Checkpoint {
    std::optional<ModelSpec> spec;
    std::vector<CheckpointTensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const CheckpointTensor* find(std::string_view name) const;
    const ModelSpec& model_spec() const;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
/// Strict: unknown keys are a ConfigError.
ModelSpec spec_from_json(const nlohmann::json& j);

/// Checkpoint view of a model. Tensors are shared, not copied.
Checkpoint to_checkpoint(const Model& model);
/// Model holding copies of the checkpoint's tensors; names must match the
/// spec's registry exactly.
Model model_from_checkpoint(const Checkpoint& ckpt);

/// Atomic write (temp file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
void save(const Model& model, const std::filesystem::path& path, nlohmann::json meta = nlohmann::json::object());

/// Reads and verifies every tensor's checksum.
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Reads straight into a freshly allocated model. Never returns a partial model.
Model load(const std::filesystem::path& path);

/// Raw payload bytes of a container file, for byte-level comparisons.
std::vector<char> read_payload_bytes(const std::filesystem::path& path);

// ------------------------------------------------------------------ foreign import

/// Pairs of (foreign name, native name).
struct NameMap {
    std::vector<std::pair<std::string, std::string>> entries;

    /// Tab-separated "foreign<TAB>native" lines ('#' comments), or a JSON
    /// object {foreign: native} when the file ends in .json.
    static NameMap read(const std::filesystem::path& path);
    static NameMap identity(const ModelSpec& spec);
};

class ImportError : public CheckpointError {
public:
    explicit ImportError(std::vector<std::string> problems);
    const std::vector<std::string>& problems() const noexcept { return problems_; }

private:
    std::vector<std::string> problems_;
};

/// Reads a foreign weight file (safetensors with F32 tensors, or a native
/// container), renames its tensors through `map`, and validates names and
/// shapes against `target`. Every problem is collected into one ImportError.
Checkpoint import_foreign(const std::filesystem::path& path, const NameMap& map, const ModelSpec& target);

}  // namespace fpt
