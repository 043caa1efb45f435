#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fpt/harness.hpp"
#include "fpt/model.hpp"
#include "fpt/tasks.hpp"

namespace fpt {

// ------------------------------------------------------------------ attention

/// Eval-mode attention of every layer and head for one example.
/// Throws UnsupportedModelError for LSTM models.
std::vector<AttentionRecord> extract_attention(const Model& model, const TaskInstance& instance);

/// Head index used for the mean-over-heads matrix of a layer.
inline constexpr std::size_t kMeanHead = static_cast<std::size_t>(-1);

/// One record per layer, averaging that layer's heads. Tagged with kMeanHead.
std::vector<AttentionRecord> mean_over_heads(const std::vector<AttentionRecord>& records);

/// Columns layer,head,row,col,value. The mean-over-heads matrix has head -1.
void write_attention_csv(std::ostream& out, const std::vector<AttentionRecord>& records);

/// Mean attention mass that answer token n+i puts on positions {i, n+i},
/// averaged over i, from the layer-0 mean-over-heads matrix of each example.
/// Also returns the matching uniform baseline 2/(n+i+1) averaged the same way.
struct XorAttentionMass {
    double mass = 0.0;
    double baseline = 0.0;
};

XorAttentionMass xor_attention_mass(const Model& model, const Task& task, std::size_t n_examples);

// ------------------------------------------------------------------ reservoir mode

/// Readout-position hidden state (n_dim floats) and label per training example.
struct FeatureCache {
    std::size_t n_dim = 0;
    std::vector<float> features;
    std::vector<int> labels;
    std::string fingerprint;

    std::size_t rows() const { return labels.size(); }
    std::span<const float> row(std::size_t i) const { return {features.data() + i * n_dim, n_dim}; }
};

/// Identifies the trunk (every non-output tensor), the task and the row count.
std::string cache_fingerprint(const Model& model, const Task& task, std::size_t rows);

/// One eval-mode pass over the first `rows` training examples.
FeatureCache build_feature_cache(const Model& model, const Task& task, std::size_t rows, std::size_t batch_size = 64);

void save_feature_cache(const FeatureCache& cache, const std::filesystem::path& path);
FeatureCache load_feature_cache(const std::filesystem::path& path);

struct ReservoirReport {
    TrainReport report;
    /// Epoch 1 includes building the cache.
    std::vector<double> epoch_seconds;
    FeatureCache cache;
};

/// Trains only the output head on cached trunk features for `epochs` passes
/// over a finite training pool, visiting batches in the same order as
/// train(). A supplied cache must match the model and task, otherwise
/// StaleCacheError. Needs a last-token classification task.
ReservoirReport reservoir_train(Model& model, const Task& task, const TrainConfig& cfg, std::size_t epochs,
                                const FeatureCache* cache = nullptr);

// ------------------------------------------------------------------ depth sweep

struct DepthRow {
    std::size_t depth = 0;
    TrainReport report;
};

/// For each depth: keep the first `depth` layers of `base`, draw a fresh
/// orthogonal input layer and output head from `seed`, apply `policy` and
/// train. `base` itself is left untouched.
std::vector<DepthRow> depth_sweep(const Model& base, const std::vector<std::size_t>& depths, const FreezePolicy& policy,
                                  const Task& task, const TrainConfig& cfg, std::uint64_t seed);

// ------------------------------------------------------------------ reports

/// Writes curves.csv (run,step,split,metric,value), ablation.csv (one row per
/// report, in order) and summary.json under `dir`.
void emit_report(const std::vector<TrainReport>& reports, const std::filesystem::path& dir);

struct CurveRow {
    std::string run;
    std::size_t step = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
};

std::vector<CurveRow> read_curves_csv(const std::filesystem::path& path);

struct AblationRow {
    std::string run;
    std::size_t trainable_params = 0;
    double final_test_accuracy = 0.0;
    double final_train_accuracy = 0.0;
    std::string steps_to_convergence;  // empty when not converged
    bool diverged = false;
};

std::vector<AblationRow> read_ablation_csv(const std::filesystem::path& path);

}  // namespace fpt
