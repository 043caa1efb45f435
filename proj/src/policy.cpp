#include "fpt/policy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "fpt/checkpoint.hpp"
#include "fpt/errors.hpp"

namespace fpt {

// ------------------------------------------------------------------ freezing

void FreezePolicy::validate() const {
    if (!trains(ParamGroup::output)) {
        throw ConfigError(fmt::format("policy '{}' does not train the output head", name));
    }
}

FreezePolicy fpt_policy() {
    return {"fpt", {ParamGroup::input, ParamGroup::output, ParamGroup::layernorm, ParamGroup::positions}};
}

FreezePolicy output_only_policy() { return {"output_only", {ParamGroup::output}}; }

FreezePolicy full_policy() { return {"full", {kAllGroups.begin(), kAllGroups.end()}}; }

std::vector<FreezePolicy> ablation_chain() {
    return {
        output_only_policy(),
        {"plus_layernorm", {ParamGroup::output, ParamGroup::layernorm}},
        {"plus_input", {ParamGroup::output, ParamGroup::layernorm, ParamGroup::input}},
        {"plus_positions", {ParamGroup::output, ParamGroup::layernorm, ParamGroup::input, ParamGroup::positions}},
    };
}

FreezePolicy policy_by_name(std::string_view name) {
    if (name == "fpt") {
        return fpt_policy();
    }
    if (name == "output_only") {
        return output_only_policy();
    }
    if (name == "full") {
        return full_policy();
    }
    for (const auto& p : ablation_chain()) {
        if (p.name == name) {
            return p;
        }
    }
    if (name == "output_layernorm") {
        return {"output_layernorm", {ParamGroup::output, ParamGroup::layernorm}};
    }
    if (name == "fpt_plus_feedforward" || name == "fpt_plus_attention") {
        auto p = fpt_policy();
        p.name = std::string(name);
        p.trainable.insert(name == "fpt_plus_feedforward" ? ParamGroup::feedforward : ParamGroup::attention);
        return p;
    }
    FreezePolicy p{std::string(name), {}};
    std::string token;
    for (std::size_t i = 0; i <= name.size(); ++i) {
        if (i == name.size() || name[i] == '+' || name[i] == ',') {
            if (token.empty()) {
                throw ConfigError(fmt::format("unknown policy '{}'", name));
            }
            p.trainable.insert(parse_group(token));
            token.clear();
        } else {
            token.push_back(name[i]);
        }
    }
    return p;
}

TrainablePartition apply_policy(Model& model, const FreezePolicy& policy) {
    TrainablePartition part;
    std::size_t trainable_scalars = 0;
    for (auto& p : model.registry().params()) {
        const bool on = policy.trains(p.group);
        p.tensor.set_requires_grad(on);
        if (on) {
            part.trainable.push_back(&p);
            trainable_scalars += p.tensor.numel();
        } else {
            part.frozen.push_back(&p);
        }
    }
    if (trainable_scalars == 0) {
        throw ConfigError(fmt::format("policy '{}' leaves nothing trainable in this model", policy.name));
    }
    return part;
}

ParamCounts count_params(const Model& model, const FreezePolicy& policy) {
    ParamCounts c;
    for (auto g : kAllGroups) {
        c.by_group[g] = 0;
    }
    for (const auto& p : model.registry().params()) {
        const auto n = p.tensor.numel();
        c.by_group[p.group] += n;
        c.total += n;
        (policy.trains(p.group) ? c.trainable : c.frozen) += n;
    }
    c.final_layernorm = 2 * model.spec().n_dim;
    return c;
}

std::size_t formula_group_count(const ModelSpec& s, ParamGroup group) {
    const std::size_t n = s.n_dim, layers = s.n_layers;
    const bool lstm = s.family == Family::lstm;
    switch (group) {
        case ParamGroup::input:
            return s.d_in * n + n;
        case ParamGroup::output:
            return n * s.d_out;
        case ParamGroup::layernorm:
            return (lstm ? 2 : 4) * n * layers + 2 * n;
        case ParamGroup::positions:
            return s.has_positions() ? s.max_len * n : 0;
        case ParamGroup::attention:
            return lstm ? 0 : (4 * n * n + 4 * n) * layers;
        case ParamGroup::feedforward:
            return lstm ? 4 * (n * n + n * n + n) * layers : (8 * n * n + 5 * n) * layers;
    }
    return 0;
}

// ------------------------------------------------------------------ init

std::string_view to_string(InitKind kind) {
    switch (kind) {
        case InitKind::default_gaussian:
            return "default_gaussian";
        case InitKind::orthogonal_input:
            return "orthogonal_input";
        case InitKind::statistics_only:
            return "statistics_only";
        case InitKind::from_checkpoint:
            return "from_checkpoint";
    }
    return "?";
}

InitKind parse_init_kind(std::string_view name) {
    for (auto k : {InitKind::default_gaussian, InitKind::orthogonal_input, InitKind::statistics_only,
                   InitKind::from_checkpoint}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw ConfigError(fmt::format("unknown init scheme '{}'", name));
}

void InitScheme::validate() const {
    if ((kind == InitKind::statistics_only || kind == InitKind::from_checkpoint) && !source) {
        throw ConfigError(fmt::format("init scheme '{}' requires a source checkpoint", to_string(kind)));
    }
    if (!(sigma >= 0.0f)) {
        throw ConfigError("init sigma must be non-negative");
    }
}

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void fill_gaussian(Tensor& t, Rng& rng, float mean, float stddev) {
    for (auto& v : t.data()) {
        v = rng.normal(mean, stddev);
    }
}

void default_init(Model& model, bool orthogonal_input, float sigma, std::uint64_t seed) {
    const Rng base(seed);
    const float lstm_bound = 1.0f / std::sqrt(static_cast<float>(model.spec().n_dim));
    for (auto& p : model.registry().params()) {
        Rng rng = base.split(p.name);
        auto& t = p.tensor;
        if (p.name.rfind("lstm.", 0) == 0 && !ends_with(p.name, ".gamma") && !ends_with(p.name, ".beta")) {
            for (auto& v : t.data()) {
                v = rng.uniform(-lstm_bound, lstm_bound);
            }
        } else if (ends_with(p.name, ".gamma")) {
            std::fill(t.data().begin(), t.data().end(), 1.0f);
        } else if (ends_with(p.name, ".beta") || ends_with(p.name, ".bias")) {
            std::fill(t.data().begin(), t.data().end(), 0.0f);
        } else if (p.name == "input.weight" && orthogonal_input) {
            init_orthogonal(t, rng);
        } else {
            fill_gaussian(t, rng, 0.0f, sigma);
        }
    }
}

void require_same_trunk(const ModelSpec& target, const ModelSpec& source) {
    if (target.family != source.family || target.n_layers != source.n_layers || target.n_dim != source.n_dim ||
        (target.family == Family::transformer && target.n_heads != source.n_heads) ||
        target.lstm_residual != source.lstm_residual || target.lstm_positional != source.lstm_positional) {
        throw ConfigError(fmt::format(
            "architecture mismatch: target {} {}x{} ({} heads) vs source {} {}x{} ({} heads)", to_string(target.family),
            target.n_layers, target.n_dim, target.n_heads, to_string(source.family), source.n_layers, source.n_dim,
            source.n_heads));
    }
}

void copy_from_checkpoint(Model& model, const Checkpoint& source) {
    require_same_trunk(model.spec(), source.model_spec());
    for (auto& p : model.registry().params()) {
        const auto* src = source.find(p.name);
        const bool task_specific = p.group == ParamGroup::input || p.group == ParamGroup::output;
        if (src == nullptr) {
            throw ConfigError(fmt::format("source checkpoint has no tensor '{}'", p.name));
        }
        auto dst = p.tensor.data();
        const auto values = src->tensor.data();
        if (src->tensor.shape() == p.tensor.shape()) {
            std::copy(values.begin(), values.end(), dst.begin());
        } else if (p.group == ParamGroup::positions && src->tensor.size(1) == p.tensor.size(1) &&
                   src->tensor.size(0) >= p.tensor.size(0)) {
            std::copy_n(values.begin(), dst.size(), dst.begin());
        } else if (!task_specific) {
            throw ConfigError(fmt::format("tensor '{}' has shape {} in the source but {} in the target", p.name,
                                          shape_str(src->tensor.shape()), shape_str(p.tensor.shape())));
        }
    }
}

}  // namespace

void initialize(Model& model, const InitScheme& scheme, std::uint64_t seed) {
    scheme.validate();
    switch (scheme.kind) {
        case InitKind::default_gaussian:
            default_init(model, false, scheme.sigma, seed);
            break;
        case InitKind::orthogonal_input:
            default_init(model, true, scheme.sigma, seed);
            break;
        case InitKind::statistics_only: {
            Rng rng(seed);
            init_statistics_only(model, *scheme.source, rng);
            break;
        }
        case InitKind::from_checkpoint:
            default_init(model, true, scheme.sigma, seed);
            copy_from_checkpoint(model, *scheme.source);
            break;
    }
}

void init_orthogonal(Tensor& w, Rng& rng) {
    if (w.dim() != 2) {
        throw ShapeError(fmt::format("orthogonal init needs a 2-D tensor, got {}", shape_str(w.shape())));
    }
    const auto m = static_cast<Eigen::Index>(w.size(0));
    const auto n = static_cast<Eigen::Index>(w.size(1));
    const Eigen::Index tall = std::max(m, n), wide = std::min(m, n);
    Eigen::MatrixXd g(tall, wide);
    for (Eigen::Index j = 0; j < wide; ++j) {
        for (Eigen::Index i = 0; i < tall; ++i) {
            g(i, j) = rng.normal();
        }
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall, wide);
    const Eigen::MatrixXd r = qr.matrixQR().topRows(wide).triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < wide; ++j) {
        if (r(j, j) < 0) {
            q.col(j) *= -1.0;
        }
    }
    auto out = w.data();
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(i * n + j)] = static_cast<float>(m >= n ? q(i, j) : q(j, i));
        }
    }
}

void init_statistics_only(Model& target, const Checkpoint& source, Rng& rng) {
    require_same_trunk(target.spec(), source.model_spec());
    for (auto& p : target.registry().params()) {
        const auto* src = source.find(p.name);
        if (src == nullptr) {
            throw ConfigError(fmt::format("source checkpoint has no tensor '{}'", p.name));
        }
        const auto st = tensor_stats(src->tensor.data());
        Rng stream = rng.split(p.name);
        fill_gaussian(p.tensor, stream, 0.0f, 1.0f);
        // Standardize the draw so its sample moments equal the source's.
        auto d = p.tensor.data();
        const auto drawn = tensor_stats(d);
        for (auto& v : d) {
            const double z = drawn.std > 0.0 ? (v - drawn.mean) / drawn.std : 0.0;
            v = static_cast<float>(st.mean + z * st.std);
        }
    }
}

// ------------------------------------------------------------------ statistics

TensorStats tensor_stats(std::span<const float> values) {
    TensorStats s;
    s.count = values.size();
    if (values.empty()) {
        return s;
    }
    double total = 0.0;
    for (float v : values) {
        total += v;
    }
    s.mean = total / static_cast<double>(values.size());
    double sq = 0.0;
    for (float v : values) {
        const double d = v - s.mean;
        sq += d * d;
    }
    s.std = std::sqrt(sq / static_cast<double>(values.size()));
    return s;
}

std::vector<LayerStatRow> layer_statistics(const Checkpoint& ckpt) {
    std::vector<LayerStatRow> rows;
    for (const auto& t : ckpt.tensors) {
        if (t.group != ParamGroup::attention && t.group != ParamGroup::feedforward) {
            continue;
        }
        const auto first = t.name.find('.');
        const auto second = first == std::string::npos ? std::string::npos : t.name.find('.', first + 1);
        if (second == std::string::npos) {
            continue;
        }
        LayerStatRow row;
        row.layer = std::stoul(t.name.substr(first + 1, second - first - 1));
        row.kind = t.name.substr(second + 1);
        row.group = t.group;
        row.stats = tensor_stats(t.tensor.data());
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_layer_statistics_csv(std::ostream& out, const std::vector<LayerStatRow>& rows) {
    out << "layer,kind,group,mean,std,count\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{:.9g},{:.9g},{}\n", r.layer, r.kind, to_string(r.group), r.stats.mean,
                           r.stats.std, r.stats.count);
    }
}

}  // namespace fpt
