#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fpt/ops.hpp"
#include "fpt/rng.hpp"
#include "fpt/tensor.hpp"

namespace fpt {

enum class Family { transformer, lstm };
enum class Readout { last_token, per_token };

/// The unit of freezing decisions. Every parameter belongs to exactly one.
enum class ParamGroup { input, output, layernorm, positions, attention, feedforward };

inline constexpr std::array<ParamGroup, 6> kAllGroups = {ParamGroup::input,     ParamGroup::output,
                                                         ParamGroup::layernorm, ParamGroup::positions,
                                                         ParamGroup::attention, ParamGroup::feedforward};

std::string_view to_string(ParamGroup group);
ParamGroup parse_group(std::string_view name);
std::string_view to_string(Family family);
Family parse_family(std::string_view name);
std::string_view to_string(Readout readout);
Readout parse_readout(std::string_view name);

struct ModelSpec {
    Family family = Family::transformer;
    std::size_t n_layers = 12;
    std::size_t n_dim = 768;
    std::size_t n_heads = 12;
    std::size_t max_len = 1024;
    std::size_t d_in = 16;
    std::size_t d_out = 10;
    bool lstm_residual = false;
    bool lstm_positional = false;
    float dropout = 0.1f;
    Readout readout = Readout::last_token;

    /// Throws ConfigError on an inconsistent spec.
    void validate() const;
    bool has_positions() const { return family == Family::transformer || lstm_positional; }

    bool operator==(const ModelSpec&) const = default;

    /// GPT-2 sizes used for the scaling experiments (small/base, medium, large).
    static ModelSpec gpt2_small();
    static ModelSpec gpt2_medium();
    static ModelSpec gpt2_large();
};

struct Parameter {
    std::string name;
    ParamGroup group;
    Tensor tensor;
};

/// Named, group-tagged parameter list. Names are unique.
class ParamRegistry {
public:
    void add(std::string name, ParamGroup group, Tensor tensor);

    const std::vector<Parameter>& params() const noexcept { return params_; }
    std::vector<Parameter>& params() noexcept { return params_; }
    const Parameter* find(std::string_view name) const;
    const Parameter& at(std::string_view name) const;

    std::size_t count(ParamGroup group) const;
    std::size_t total() const;

private:
    std::vector<Parameter> params_;
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
};

struct TransformerBlock {
    LayerNormParams ln1;
    Tensor qkv_w, qkv_b;    // [n, 3n], [3n]
    Tensor proj_w, proj_b;  // [n, n], [n]
    LayerNormParams ln2;
    Tensor fc_w, fc_b;        // [n, 4n], [4n]
    Tensor fc_out_w, fc_out_b;  // [4n, n], [n]
};

struct LstmLayer {
    LayerNormParams ln;
    Tensor w_ih;  // [n, 4n], gate order i, f, g, o
    Tensor w_hh;  // [n, 4n]
    Tensor bias;  // [4n]
};

/// Zero-padded token batch. Row b*length + t holds token t of example b.
struct Batch {
    std::size_t size = 0;
    std::size_t length = 0;
    std::size_t d_in = 0;
    std::vector<float> tokens;
    std::vector<std::size_t> lengths;
    /// Class label per example (last-token tasks).
    std::vector<int> labels;
    /// Answer token indices per example (per-token tasks).
    std::vector<std::vector<std::size_t>> answer_positions;
    /// Bit targets in {0,1}, d_out per answer position, examples concatenated.
    std::vector<float> bit_targets;

    /// Flat row indices the readout consumes, in example order.
    std::vector<std::size_t> readout_rows(Readout readout) const;
};

/// Post-softmax attention weights of one head for one example.
struct AttentionRecord {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t length = 0;
    std::vector<float> weights;  // length x length, row-major

    float at(std::size_t row, std::size_t col) const { return weights[row * length + col]; }
};

struct ForwardOptions {
    bool train = false;
    Rng* rng = nullptr;  // required when train and dropout > 0
    /// When set, receives one record per (example, layer, head) in that order.
    std::vector<AttentionRecord>* attention = nullptr;
};

struct InitScheme;

/// A GPT-2 style decoder or a stacked LSTM, with group-tagged parameters.
///
/// Copies share parameter storage; use clone() for an independent model.
class Model {
public:
    const ModelSpec& spec() const noexcept { return spec_; }
    const ParamRegistry& registry() const noexcept { return registry_; }
    ParamRegistry& registry() noexcept { return registry_; }

    /// Logits: [B, d_out] for last_token readout, [B, l, d_out] for per_token.
    Tensor forward(const Batch& batch, const ForwardOptions& options = {}) const;
    /// Final-norm hidden states, [B, l, n_dim].
    Tensor hidden(const Batch& batch, const ForwardOptions& options = {}) const;
    /// Hidden states at the rows the readout consumes, [R, n_dim].
    Tensor readout_features(const Batch& batch, const ForwardOptions& options = {}) const;
    /// Linear output head applied to [R, n_dim] features.
    Tensor head(const Tensor& features) const;

    Model clone() const;

    // Structured views (shared with the registry).
    Tensor input_w, input_b;
    Tensor positions;  // [max_len, n] when present
    std::vector<TransformerBlock> blocks;
    std::vector<LstmLayer> lstm_layers;
    LayerNormParams final_ln;
    Tensor head_w;  // [n, d_out]

    /// Rebuilds the registry from the structured views.
    void rebuild_registry();

    Model() = default;
    explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
    ModelSpec& mutable_spec() noexcept { return spec_; }

private:
    Tensor embed(const Batch& batch, const ForwardOptions& options) const;
    Tensor transformer_trunk(Tensor x, const Batch& batch, const ForwardOptions& options) const;
    Tensor lstm_trunk(Tensor x, const Batch& batch, const ForwardOptions& options) const;

    ModelSpec spec_;
    ParamRegistry registry_;
};

/// Allocates every parameter (zero-filled) for `spec`, without initializing.
Model allocate_model(const ModelSpec& spec);

Model build_transformer(const ModelSpec& spec, const InitScheme& init, std::uint64_t seed);
Model build_lstm(const ModelSpec& spec, const InitScheme& init, std::uint64_t seed);
/// Dispatches on spec.family.
Model build_model(const ModelSpec& spec, const InitScheme& init, std::uint64_t seed);

/// First `depth` blocks (or LSTM layers) of `model`, sharing their storage,
/// with a fresh output head drawn from `seed`.
Model truncate_layers(const Model& model, std::size_t depth, std::uint64_t seed);

/// Fresh head weights, N(0, sigma), drawn from the "head.weight" stream of seed.
void reset_head(Model& model, std::uint64_t seed, float sigma = 0.02f);

}  // namespace fpt
