#include "fpt/model.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "fpt/errors.hpp"
#include "fpt/policy.hpp"

namespace fpt {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view name, const std::array<std::pair<std::string_view, E>, N>& table, const char* what) {
    for (const auto& [key, value] : table) {
        if (key == name) {
            return value;
        }
    }
    throw ConfigError(fmt::format("unknown {} '{}'", what, name));
}

constexpr std::array<std::pair<std::string_view, ParamGroup>, 6> kGroupNames = {{
    {"input", ParamGroup::input},
    {"output", ParamGroup::output},
    {"layernorm", ParamGroup::layernorm},
    {"positions", ParamGroup::positions},
    {"attention", ParamGroup::attention},
    {"feedforward", ParamGroup::feedforward},
}};

}  // namespace

std::string_view to_string(ParamGroup group) {
    for (const auto& [key, value] : kGroupNames) {
        if (value == group) {
            return key;
        }
    }
    return "?";
}

ParamGroup parse_group(std::string_view name) { return parse_enum(name, kGroupNames, "parameter group"); }

std::string_view to_string(Family family) { return family == Family::transformer ? "transformer" : "lstm"; }

Family parse_family(std::string_view name) {
    return parse_enum<Family, 2>(name, {{{"transformer", Family::transformer}, {"lstm", Family::lstm}}},
                                 "model family");
}

std::string_view to_string(Readout readout) { return readout == Readout::last_token ? "last_token" : "per_token"; }

Readout parse_readout(std::string_view name) {
    return parse_enum<Readout, 2>(name, {{{"last_token", Readout::last_token}, {"per_token", Readout::per_token}}},
                                  "readout mode");
}

// ------------------------------------------------------------------ ModelSpec

void ModelSpec::validate() const {
    if (n_layers == 0 || n_dim == 0 || max_len == 0 || d_in == 0 || d_out == 0) {
        throw ConfigError(fmt::format("model spec has a zero dimension (layers {}, dim {}, max_len {}, d_in {}, d_out {})",
                                      n_layers, n_dim, max_len, d_in, d_out));
    }
    if (family == Family::transformer) {
        if (n_heads == 0 || n_dim % n_heads != 0) {
            throw ConfigError(fmt::format("n_dim {} is not divisible by n_heads {}", n_dim, n_heads));
        }
        if (lstm_residual || lstm_positional) {
            throw ConfigError("lstm_residual/lstm_positional set on a transformer spec");
        }
    }
    if (!(dropout >= 0.0f && dropout < 1.0f)) {
        throw ConfigError(fmt::format("dropout rate {} outside [0, 1)", dropout));
    }
}

ModelSpec ModelSpec::gpt2_small() {
    ModelSpec s;
    s.n_layers = 12;
    s.n_dim = 768;
    s.n_heads = 12;
    return s;
}

ModelSpec ModelSpec::gpt2_medium() {
    ModelSpec s;
    s.n_layers = 24;
    s.n_dim = 1024;
    s.n_heads = 16;
    return s;
}

ModelSpec ModelSpec::gpt2_large() {
    ModelSpec s;
    s.n_layers = 36;
    s.n_dim = 1280;
    s.n_heads = 20;
    return s;
}

// ------------------------------------------------------------------ ParamRegistry

void ParamRegistry::add(std::string name, ParamGroup group, Tensor tensor) {
    if (find(name) != nullptr) {
        throw ConfigError(fmt::format("parameter '{}' registered twice", name));
    }
    params_.push_back({std::move(name), group, std::move(tensor)});
}

const Parameter* ParamRegistry::find(std::string_view name) const {
    auto it = std::find_if(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
    return it == params_.end() ? nullptr : &*it;
}

const Parameter& ParamRegistry::at(std::string_view name) const {
    const auto* p = find(name);
    if (p == nullptr) {
        throw ConfigError(fmt::format("no parameter named '{}'", name));
    }
    return *p;
}

std::size_t ParamRegistry::count(ParamGroup group) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.group == group) {
            n += p.tensor.numel();
        }
    }
    return n;
}

std::size_t ParamRegistry::total() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += p.tensor.numel();
    }
    return n;
}

// ------------------------------------------------------------------ Batch

std::vector<std::size_t> Batch::readout_rows(Readout readout) const {
    std::vector<std::size_t> rows;
    if (readout == Readout::last_token) {
        rows.reserve(size);
        for (std::size_t b = 0; b < size; ++b) {
            rows.push_back(b * length + lengths[b] - 1);
        }
    } else {
        for (std::size_t b = 0; b < size; ++b) {
            for (auto pos : answer_positions[b]) {
                rows.push_back(b * length + pos);
            }
        }
    }
    return rows;
}

// ------------------------------------------------------------------ Model

void Model::rebuild_registry() {
    registry_ = ParamRegistry{};
    auto& r = registry_;
    r.add("input.weight", ParamGroup::input, input_w);
    r.add("input.bias", ParamGroup::input, input_b);
    if (positions.defined()) {
        r.add("positions", ParamGroup::positions, positions);
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const auto p = fmt::format("blocks.{}.", i);
        r.add(p + "ln1.gamma", ParamGroup::layernorm, b.ln1.gamma);
        r.add(p + "ln1.beta", ParamGroup::layernorm, b.ln1.beta);
        r.add(p + "attn.qkv.weight", ParamGroup::attention, b.qkv_w);
        r.add(p + "attn.qkv.bias", ParamGroup::attention, b.qkv_b);
        r.add(p + "attn.proj.weight", ParamGroup::attention, b.proj_w);
        r.add(p + "attn.proj.bias", ParamGroup::attention, b.proj_b);
        r.add(p + "ln2.gamma", ParamGroup::layernorm, b.ln2.gamma);
        r.add(p + "ln2.beta", ParamGroup::layernorm, b.ln2.beta);
        r.add(p + "mlp.fc.weight", ParamGroup::feedforward, b.fc_w);
        r.add(p + "mlp.fc.bias", ParamGroup::feedforward, b.fc_b);
        r.add(p + "mlp.proj.weight", ParamGroup::feedforward, b.fc_out_w);
        r.add(p + "mlp.proj.bias", ParamGroup::feedforward, b.fc_out_b);
    }
    for (std::size_t i = 0; i < lstm_layers.size(); ++i) {
        const auto& l = lstm_layers[i];
        const auto p = fmt::format("lstm.{}.", i);
        r.add(p + "ln.gamma", ParamGroup::layernorm, l.ln.gamma);
        r.add(p + "ln.beta", ParamGroup::layernorm, l.ln.beta);
        r.add(p + "w_ih", ParamGroup::feedforward, l.w_ih);
        r.add(p + "w_hh", ParamGroup::feedforward, l.w_hh);
        r.add(p + "bias", ParamGroup::feedforward, l.bias);
    }
    r.add("final_ln.gamma", ParamGroup::layernorm, final_ln.gamma);
    r.add("final_ln.beta", ParamGroup::layernorm, final_ln.beta);
    r.add("head.weight", ParamGroup::output, head_w);
}

Model Model::clone() const {
    Model m = *this;
    for (auto& p : m.registry_.params()) {
        bool rg = p.tensor.requires_grad();
        p.tensor = p.tensor.clone();
        p.tensor.set_requires_grad(rg);
    }
    // Re-point the structured views at the cloned tensors.
    auto get = [&](const std::string& name) { return m.registry_.at(name).tensor; };
    m.input_w = get("input.weight");
    m.input_b = get("input.bias");
    if (positions.defined()) {
        m.positions = get("positions");
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        auto& b = m.blocks[i];
        const auto p = fmt::format("blocks.{}.", i);
        b.ln1 = {get(p + "ln1.gamma"), get(p + "ln1.beta")};
        b.qkv_w = get(p + "attn.qkv.weight");
        b.qkv_b = get(p + "attn.qkv.bias");
        b.proj_w = get(p + "attn.proj.weight");
        b.proj_b = get(p + "attn.proj.bias");
        b.ln2 = {get(p + "ln2.gamma"), get(p + "ln2.beta")};
        b.fc_w = get(p + "mlp.fc.weight");
        b.fc_b = get(p + "mlp.fc.bias");
        b.fc_out_w = get(p + "mlp.proj.weight");
        b.fc_out_b = get(p + "mlp.proj.bias");
    }
    for (std::size_t i = 0; i < lstm_layers.size(); ++i) {
        auto& l = m.lstm_layers[i];
        const auto p = fmt::format("lstm.{}.", i);
        l.ln = {get(p + "ln.gamma"), get(p + "ln.beta")};
        l.w_ih = get(p + "w_ih");
        l.w_hh = get(p + "w_hh");
        l.bias = get(p + "bias");
    }
    m.final_ln = {get("final_ln.gamma"), get("final_ln.beta")};
    m.head_w = get("head.weight");
    return m;
}

Tensor Model::head(const Tensor& features) const { return linear(features, head_w); }

Tensor Model::hidden(const Batch& batch, const ForwardOptions& options) const {
    if (batch.length > spec_.max_len) {
        throw LengthError(fmt::format("sequence length {} exceeds max_len {}", batch.length, spec_.max_len));
    }
    if (batch.d_in != spec_.d_in) {
        throw ShapeError(fmt::format("batch token dimension {} does not match model d_in {}", batch.d_in, spec_.d_in));
    }
    if (options.train && spec_.dropout > 0.0f && options.rng == nullptr) {
        throw ConfigError("train-mode forward with dropout needs an rng");
    }
    Tensor x = embed(batch, options);
    x = spec_.family == Family::transformer ? transformer_trunk(std::move(x), batch, options)
                                            : lstm_trunk(std::move(x), batch, options);
    x = layer_norm(x, final_ln.gamma, final_ln.beta);
    return reshape(x, {batch.size, batch.length, spec_.n_dim});
}

Tensor Model::readout_features(const Batch& batch, const ForwardOptions& options) const {
    const auto rows = batch.readout_rows(spec_.readout);
    return index_rows(hidden(batch, options), rows);
}

Tensor Model::forward(const Batch& batch, const ForwardOptions& options) const {
    if (spec_.readout == Readout::last_token) {
        return head(readout_features(batch, options));
    }
    return head(hidden(batch, options));
}

Tensor Model::embed(const Batch& batch, const ForwardOptions& options) const {
    const std::size_t rows = batch.size * batch.length;
    Tensor tokens = Tensor::from({rows, batch.d_in}, batch.tokens);
    Tensor x = linear(tokens, input_w, input_b);
    if (positions.defined()) {
        std::vector<std::size_t> idx(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            idx[r] = r % batch.length;
        }
        x = add(x, index_rows(positions, idx));
    }
    if (options.train && spec_.dropout > 0.0f) {
        x = dropout(x, spec_.dropout, true, *options.rng);
    }
    return x;
}

// ------------------------------------------------------------------ construction

Model allocate_model(const ModelSpec& spec) {
    spec.validate();
    const std::size_t n = spec.n_dim;
    Model m(spec);
    auto ln = [n] { return LayerNormParams{Tensor::zeros({n}), Tensor::zeros({n})}; };
    m.input_w = Tensor::zeros({spec.d_in, n});
    m.input_b = Tensor::zeros({n});
    if (spec.has_positions()) {
        m.positions = Tensor::zeros({spec.max_len, n});
    }
    if (spec.family == Family::transformer) {
        for (std::size_t i = 0; i < spec.n_layers; ++i) {
            TransformerBlock b;
            b.ln1 = ln();
            b.qkv_w = Tensor::zeros({n, 3 * n});
            b.qkv_b = Tensor::zeros({3 * n});
            b.proj_w = Tensor::zeros({n, n});
            b.proj_b = Tensor::zeros({n});
            b.ln2 = ln();
            b.fc_w = Tensor::zeros({n, 4 * n});
            b.fc_b = Tensor::zeros({4 * n});
            b.fc_out_w = Tensor::zeros({4 * n, n});
            b.fc_out_b = Tensor::zeros({n});
            m.blocks.push_back(std::move(b));
        }
    } else {
        for (std::size_t i = 0; i < spec.n_layers; ++i) {
            LstmLayer l;
            l.ln = ln();
            l.w_ih = Tensor::zeros({n, 4 * n});
            l.w_hh = Tensor::zeros({n, 4 * n});
            l.bias = Tensor::zeros({4 * n});
            m.lstm_layers.push_back(std::move(l));
        }
    }
    m.final_ln = ln();
    m.head_w = Tensor::zeros({n, spec.d_out});
    m.rebuild_registry();
    return m;
}

Model build_transformer(const ModelSpec& spec, const InitScheme& init, std::uint64_t seed) {
    if (spec.family != Family::transformer) {
        throw ConfigError("build_transformer called with a non-transformer spec");
    }
    Model m = allocate_model(spec);
    initialize(m, init, seed);
    return m;
}

Model build_lstm(const ModelSpec& spec, const InitScheme& init, std::uint64_t seed) {
    if (spec.family != Family::lstm) {
        throw ConfigError("build_lstm called with a non-LSTM spec");
    }
    Model m = allocate_model(spec);
    initialize(m, init, seed);
    return m;
}

Model build_model(const ModelSpec& spec, const InitScheme& init, std::uint64_t seed) {
    return spec.family == Family::transformer ? build_transformer(spec, init, seed) : build_lstm(spec, init, seed);
}

void reset_head(Model& model, std::uint64_t seed, float sigma) {
    const auto& s = model.spec();
    Rng rng = Rng(seed).split("head.weight");
    std::vector<float> w(s.n_dim * s.d_out);
    for (auto& v : w) {
        v = rng.normal(0.0f, sigma);
    }
    model.head_w = Tensor::from({s.n_dim, s.d_out}, std::move(w));
    model.rebuild_registry();
}

Model truncate_layers(const Model& model, std::size_t depth, std::uint64_t seed) {
    const auto& s = model.spec();
    if (depth < 1 || depth > s.n_layers) {
        throw ConfigError(fmt::format("truncation depth {} outside [1, {}]", depth, s.n_layers));
    }
    Model out = model;
    out.mutable_spec().n_layers = depth;
    if (s.family == Family::transformer) {
        out.blocks.resize(depth);
    } else {
        out.lstm_layers.resize(depth);
    }
    reset_head(out, seed);
    return out;
}

}  // namespace fpt
