#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fpt/model.hpp"

namespace fpt {

struct Checkpoint;

// ------------------------------------------------------------------ freezing

/// Named set of trainable parameter groups; every other group is frozen.
struct FreezePolicy {
    std::string name;
    std::set<ParamGroup> trainable;

    bool trains(ParamGroup g) const { return trainable.count(g) != 0; }
    /// Throws ConfigError unless the output head is trainable.
    void validate() const;
};

/// input, output, layernorm, positions trainable; attention and feedforward frozen.
FreezePolicy fpt_policy();
FreezePolicy output_only_policy();
FreezePolicy full_policy();

/// Named policies: "fpt", "output_only", "full", "plus_layernorm",
/// "plus_input", "plus_positions", "fpt_plus_feedforward",
/// "fpt_plus_attention", "output_layernorm", or a '+'/',' separated group list
/// such as "output+layernorm".
FreezePolicy policy_by_name(std::string_view name);

/// Successively adds layernorm, input and positions to the output head.
std::vector<FreezePolicy> ablation_chain();

struct TrainablePartition {
    std::vector<Parameter*> trainable;
    std::vector<Parameter*> frozen;
};

/// Flags trainable tensors as requiring gradients and every other tensor as
/// frozen. Throws ConfigError when nothing would be trained.
TrainablePartition apply_policy(Model& model, const FreezePolicy& policy);

struct ParamCounts {
    std::map<ParamGroup, std::size_t> by_group;
    std::size_t total = 0;
    std::size_t trainable = 0;
    std::size_t frozen = 0;
    /// Final layer norm share of the layernorm group (2 * n_dim).
    std::size_t final_layernorm = 0;

    double trainable_fraction() const { return total ? static_cast<double>(trainable) / total : 0.0; }
};

/// Counts by enumerating the registry.
ParamCounts count_params(const Model& model, const FreezePolicy& policy);

/// Closed-form group sizes for a spec:
///   input      d_in*n + n
///   output     n*d_out
///   layernorm  4*n*layers + 2*n (final norm), LSTM 2*n*layers + 2*n
///   positions  max_len*n
///   attention  (4n^2 + 4n)*layers
///   feedforward (8n^2 + 5n)*layers, LSTM (8n^2 + 4n)*layers
std::size_t formula_group_count(const ModelSpec& spec, ParamGroup group);

// ------------------------------------------------------------------ init

enum class InitKind { default_gaussian, orthogonal_input, statistics_only, from_checkpoint };

std::string_view to_string(InitKind kind);
InitKind parse_init_kind(std::string_view name);

/// How parameters are drawn when a model is built.
///
/// default_gaussian: GPT-2 defaults (weights N(0, sigma), biases 0, layer
/// norm gamma 1 / beta 0; LSTM cells uniform(+-1/sqrt(n))), input layer
/// Gaussian as well. orthogonal_input: the same but with an orthogonal input
/// layer. statistics_only: every tensor redrawn from the per-tensor mean/std
/// of `source`. from_checkpoint: trunk copied from `source`, input and head
/// fresh (orthogonal input) when their shapes differ.
struct InitScheme {
    InitKind kind = InitKind::orthogonal_input;
    float sigma = 0.02f;
    std::shared_ptr<const Checkpoint> source;

    void validate() const;
};

/// Applies `scheme` to an allocated model, deriving one stream per tensor name.
void initialize(Model& model, const InitScheme& scheme, std::uint64_t seed);

/// Orthonormal columns (m >= n) or rows (m < n) via QR of a Gaussian draw.
void init_orthogonal(Tensor& w, Rng& rng);

/// Redraws each tensor of `target` as Gaussian noise rescaled so its sample
/// mean and std equal those of the same-named tensor in `source`. Throws
/// ConfigError on architecture mismatch.
void init_statistics_only(Model& target, const Checkpoint& source, Rng& rng);

// ------------------------------------------------------------------ statistics

struct TensorStats {
    double mean = 0.0;
    double std = 0.0;
    std::size_t count = 0;
};

TensorStats tensor_stats(std::span<const float> values);

struct LayerStatRow {
    std::size_t layer = 0;
    std::string kind;  // e.g. "attn.qkv.weight"
    ParamGroup group = ParamGroup::attention;
    TensorStats stats;
};

/// One row per (layer, tensor) for the attention and feedforward groups.
std::vector<LayerStatRow> layer_statistics(const Checkpoint& ckpt);

void write_layer_statistics_csv(std::ostream& out, const std::vector<LayerStatRow>& rows);

}  // namespace fpt
