#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpt/checkpoint.hpp"
#include "fpt/model.hpp"
#include "fpt/policy.hpp"
#include "fpt/tasks.hpp"

namespace fpt {

struct TrainConfig {
    float learning_rate = 1e-3f;
    std::size_t batch_size = 16;
    std::size_t max_steps = 1000;
    std::size_t eval_interval = 100;
    std::size_t eval_set_size = 512;
    std::size_t eval_batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t convergence_window = 5;
    double convergence_tol = 0.01;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    /// Stop once held-out accuracy reaches this value.
    std::optional<double> target_accuracy;

    void validate() const;
};

nlohmann::json train_to_json(const TrainConfig& cfg);
/// Strict: unknown keys are a ConfigError.
TrainConfig train_from_json(const nlohmann::json& j);

// ------------------------------------------------------------------ optimizer

struct AdamState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::size_t t = 0;
};

/// One bias-corrected Adam update of every tensor in `params` from its
/// gradient (a tensor without a gradient counts as zero gradient).
void adam_step(std::span<Tensor> params, AdamState& state, const TrainConfig& cfg);

/// Optimizer state as a tensor bundle next to a checkpoint.
void save_adam_state(const AdamState& state, const std::filesystem::path& path);
AdamState load_adam_state(const std::filesystem::path& path);

// ------------------------------------------------------------------ loss and evaluation

struct StepOutput {
    Tensor loss;
    std::size_t correct = 0;
    std::size_t total = 0;
};

/// Cross-entropy on the last token for classification tasks, mean binary
/// cross-entropy over answer bits for per-token tasks. Accuracy is per example
/// or per bit respectively.
StepOutput compute_loss(const Model& model, const Batch& batch, const ForwardOptions& options);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t count = 0;
};

/// Eval-mode pass over the first `n` test (or train) examples.
EvalResult evaluate(const Model& model, const Task& task, std::size_t n, std::size_t batch_size, bool train_split = false);

// ------------------------------------------------------------------ batch order

/// Example indices per step. Finite pools are visited in a fresh permutation
/// each epoch; streams are consumed in order.
class BatchOrder {
public:
    BatchOrder(std::optional<std::size_t> pool, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::uint64_t> indices(std::size_t step);
    std::optional<std::size_t> pool() const noexcept { return pool_; }

private:
    const std::vector<std::uint64_t>& permutation(std::uint64_t epoch);

    std::optional<std::size_t> pool_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::map<std::uint64_t, std::vector<std::uint64_t>> perms_;
};

// ------------------------------------------------------------------ convergence

struct Convergence {
    static constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();
    bool converged = false;
    std::size_t step = kNever;
};

/// First step whose trailing moving average (window evaluations, shorter at
/// the start) lies within tol of the mean of the last quarter of the curve.
Convergence steps_to_convergence(std::span<const std::size_t> steps, std::span<const double> values,
                                 std::size_t window, double tol);

// ------------------------------------------------------------------ training

struct CurvePoint {
    std::size_t step = 0;
    double train_loss = 0.0;  // mean over the batches since the previous point, NaN at step 0
    double train_accuracy = 0.0;
    double test_loss = 0.0;
    double test_accuracy = 0.0;
};

struct TrainReport {
    std::string name;
    std::vector<CurvePoint> curve;
    Convergence convergence;
    std::size_t steps_run = 0;
    double final_test_accuracy = 0.0;
    double final_train_accuracy = 0.0;
    bool diverged = false;
    std::size_t trainable_params = 0;
    std::size_t frozen_params = 0;
    std::string frozen_hash_before;
    std::string frozen_hash_after;
    double wall_seconds = 0.0;
    std::vector<double> epoch_seconds;
    nlohmann::json config = nlohmann::json::object();

    bool frozen_intact() const { return frozen_hash_before == frozen_hash_after; }
    std::vector<std::size_t> steps() const;
    std::vector<double> test_accuracies() const;
    /// SHA-256 over everything except wall-clock timings.
    std::string fingerprint() const;
};

nlohmann::json report_to_json(const TrainReport& report, bool with_timing = true);

/// Applies `policy`, then optimizes the trainable partition on `task`,
/// evaluating every eval_interval steps. A non-finite loss stops the run with
/// diverged set. The frozen partition is hashed before and after.
TrainReport train(Model& model, const FreezePolicy& policy, const Task& task, const TrainConfig& cfg);

/// Throws ConfigError when the model cannot consume the task.
void check_compatible(const ModelSpec& spec, const TaskConfig& task);
void check_compatible(const ModelSpec& spec, const Task& task);

// ------------------------------------------------------------------ surrogate pretraining

enum class SurrogateKind { char_lm, bit_memory };

std::string_view to_string(SurrogateKind kind);
SurrogateKind parse_surrogate_kind(std::string_view name);

struct PretrainSource {
    std::string corpus;
    std::filesystem::path corpus_path;  // read when corpus is empty
    std::size_t seq_len = 64;
    TaskConfig task;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<double> losses;
    std::string vocab;
    TrainReport report;
};

/// Sorted distinct characters of the corpus.
std::string char_vocab(std::string_view corpus);

/// Trains every group of `model` on the surrogate objective and returns a
/// snapshot checkpoint. char_lm needs a model with d_in = d_out = vocabulary
/// size and per-token readout.
PretrainResult pretrain_surrogate(SurrogateKind kind, Model& model, const PretrainSource& source,
                                  const TrainConfig& cfg);

/// Runs independent jobs on up to `jobs` threads; results keep job order.
std::vector<TrainReport> run_parallel(const std::vector<std::function<TrainReport()>>& work, std::size_t jobs);

}  // namespace fpt
