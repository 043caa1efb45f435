#include "fpt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "fpt/errors.hpp"
#include "fpt/hashing.hpp"

namespace fpt {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0f)) {
        throw ConfigError(fmt::format("learning rate must be positive, got {}", learning_rate));
    }
    if (batch_size == 0 || eval_batch_size == 0) {
        throw ConfigError("batch sizes must be at least 1");
    }
    if (eval_interval == 0 || eval_set_size == 0) {
        throw ConfigError("eval_interval and eval_set_size must be at least 1");
    }
    if (convergence_window == 0 || convergence_tol < 0.0) {
        throw ConfigError("convergence window must be >= 1 and tolerance >= 0");
    }
    if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f || !(eps > 0.0f)) {
        throw ConfigError("Adam needs betas in [0, 1) and eps > 0");
    }
}

json train_to_json(const TrainConfig& c) {
    json j = {{"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"eval_interval", c.eval_interval},
              {"eval_set_size", c.eval_set_size},
              {"eval_batch_size", c.eval_batch_size},
              {"seed", c.seed},
              {"convergence_window", c.convergence_window},
              {"convergence_tol", c.convergence_tol},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps}};
    j["target_accuracy"] = c.target_accuracy ? json(*c.target_accuracy) : json(nullptr);
    return j;
}

TrainConfig train_from_json(const json& j) {
    if (!j.is_object()) {
        throw ConfigError("train config must be a JSON object");
    }
    TrainConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "learning_rate") c.learning_rate = v.get<float>();
            else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "max_steps") c.max_steps = v.get<std::size_t>();
            else if (key == "eval_interval") c.eval_interval = v.get<std::size_t>();
            else if (key == "eval_set_size") c.eval_set_size = v.get<std::size_t>();
            else if (key == "eval_batch_size") c.eval_batch_size = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "convergence_window") c.convergence_window = v.get<std::size_t>();
            else if (key == "convergence_tol") c.convergence_tol = v.get<double>();
            else if (key == "beta1") c.beta1 = v.get<float>();
            else if (key == "beta2") c.beta2 = v.get<float>();
            else if (key == "eps") c.eps = v.get<float>();
            else if (key == "target_accuracy") {
                if (v.is_null()) c.target_accuracy.reset();
                else c.target_accuracy = v.get<double>();
            }
            else throw ConfigError(fmt::format("unknown train key '{}'", key));
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad train config: {}", e.what()));
    }
    return c;
}

// ------------------------------------------------------------------ optimizer

void adam_step(std::span<Tensor> params, AdamState& state, const TrainConfig& cfg) {
    if (state.m.empty() && state.t == 0) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0f);
            state.v.emplace_back(p.numel(), 0.0f);
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError(fmt::format("optimizer state has {} slots for {} parameters", state.m.size(), params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
            throw ShapeError(fmt::format("optimizer slot {} holds {} values for a {} tensor", i, state.m[i].size(),
                                         shape_str(params[i].shape())));
        }
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.t));
    const auto step_size = static_cast<float>(cfg.learning_rate / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float b1 = cfg.beta1, b2 = cfg.beta2;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto w = p.data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool has = p.has_grad();
        const float* g = has ? std::as_const(p).grad().data() : nullptr;
        for (std::size_t k = 0; k < w.size(); ++k) {
            const float gk = has ? g[k] : 0.0f;
            m[k] = b1 * m[k] + (1.0f - b1) * gk;
            v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
            const float denom = std::sqrt(v[k]) * inv_sqrt_bc2 + cfg.eps;
            w[k] -= step_size * m[k] / denom;
        }
    }
}

void save_adam_state(const AdamState& state, const std::filesystem::path& path) {
    Checkpoint c;
    c.meta = {{"kind", "adam_state"}, {"t", state.t}};
    for (std::size_t i = 0; i < state.m.size(); ++i) {
        c.tensors.push_back({fmt::format("m.{}", i), ParamGroup::output, Tensor::from({state.m[i].size()}, state.m[i])});
        c.tensors.push_back({fmt::format("v.{}", i), ParamGroup::output, Tensor::from({state.v[i].size()}, state.v[i])});
    }
    save_checkpoint(c, path);
}

AdamState load_adam_state(const std::filesystem::path& path) {
    const Checkpoint c = read_checkpoint(path);
    if (c.meta.value("kind", "") != "adam_state" || c.tensors.size() % 2 != 0) {
        throw CheckpointError(CheckpointError::Kind::header, fmt::format("'{}' is not optimizer state", path.string()));
    }
    AdamState s;
    s.t = c.meta.at("t").get<std::size_t>();
    for (std::size_t i = 0; i < c.tensors.size(); i += 2) {
        const auto m = c.tensors[i].tensor.data();
        const auto v = c.tensors[i + 1].tensor.data();
        s.m.emplace_back(m.begin(), m.end());
        s.v.emplace_back(v.begin(), v.end());
    }
    return s;
}

// ------------------------------------------------------------------ loss and evaluation

StepOutput compute_loss(const Model& model, const Batch& batch, const ForwardOptions& options) {
    StepOutput out;
    Tensor logits = model.head(model.readout_features(batch, options));
    const auto ld = logits.data();
    if (model.spec().readout == Readout::last_token) {
        out.loss = cross_entropy(logits, batch.labels);
        const std::size_t c = logits.size(1);
        for (std::size_t b = 0; b < batch.size; ++b) {
            const auto* row = ld.data() + b * c;
            const auto pred = static_cast<int>(std::max_element(row, row + c) - row);
            out.correct += pred == batch.labels[b] ? 1 : 0;
        }
        out.total = batch.size;
    } else {
        if (batch.bit_targets.size() != logits.numel()) {
            throw ShapeError(fmt::format("{} bit targets for {} answer logits", batch.bit_targets.size(),
                                         logits.numel()));
        }
        out.loss = bce_with_logits(logits, batch.bit_targets);
        for (std::size_t k = 0; k < ld.size(); ++k) {
            out.correct += (ld[k] > 0.0f) == (batch.bit_targets[k] > 0.5f) ? 1 : 0;
        }
        out.total = ld.size();
    }
    return out;
}

EvalResult evaluate(const Model& model, const Task& task, std::size_t n, std::size_t batch_size, bool train_split) {
    NoGradGuard no_grad;
    EvalResult r;
    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0;
    std::vector<TaskInstance> examples;
    for (std::size_t start = 0; start < n; start += batch_size) {
        examples.clear();
        for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) {
            examples.push_back(train_split ? task.train_example(i) : task.test_example(i));
        }
        const auto out = compute_loss(model, collate(examples), {});
        loss_sum += static_cast<double>(out.loss.item()) * static_cast<double>(examples.size());
        correct += out.correct;
        total += out.total;
    }
    r.count = n;
    r.loss = n ? loss_sum / static_cast<double>(n) : 0.0;
    r.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    return r;
}

// ------------------------------------------------------------------ batch order

BatchOrder::BatchOrder(std::optional<std::size_t> pool, std::size_t batch_size, std::uint64_t seed)
    : pool_(pool), batch_size_(batch_size), seed_(seed) {
    if (pool_ && *pool_ == 0) {
        throw ConfigError("empty training pool");
    }
}

const std::vector<std::uint64_t>& BatchOrder::permutation(std::uint64_t epoch) {
    auto it = perms_.find(epoch);
    if (it != perms_.end()) {
        return it->second;
    }
    // keep only the neighbourhood of the current epoch
    while (perms_.size() > 2) {
        perms_.erase(perms_.begin());
    }
    std::vector<std::uint64_t> p(*pool_);
    std::iota(p.begin(), p.end(), 0);
    Rng rng = Rng(seed_).split("order").split(epoch);
    for (std::size_t i = p.size(); i > 1; --i) {
        std::swap(p[i - 1], p[rng.below(i)]);
    }
    return perms_.emplace(epoch, std::move(p)).first->second;
}

std::vector<std::uint64_t> BatchOrder::indices(std::size_t step) {
    std::vector<std::uint64_t> out(batch_size_);
    for (std::size_t k = 0; k < batch_size_; ++k) {
        const std::uint64_t pos = static_cast<std::uint64_t>(step) * batch_size_ + k;
        out[k] = pool_ ? permutation(pos / *pool_)[pos % *pool_] : pos;
    }
    return out;
}

// ------------------------------------------------------------------ convergence

Convergence steps_to_convergence(std::span<const std::size_t> steps, std::span<const double> values,
                                 std::size_t window, double tol) {
    if (values.empty() || steps.size() != values.size()) {
        throw ConfigError("convergence needs a non-empty curve with one step per value");
    }
    if (window == 0) {
        throw ConfigError("convergence window must be at least 1");
    }
    const std::size_t n = values.size();
    const std::size_t tail = std::max<std::size_t>(1, (n + 3) / 4);
    const double plateau = std::accumulate(values.end() - static_cast<std::ptrdiff_t>(tail), values.end(), 0.0) /
                           static_cast<double>(tail);
    double running = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        running += values[k];
        if (k >= window) {
            running -= values[k - window];
        }
        const double avg = running / static_cast<double>(std::min(k + 1, window));
        if (std::abs(avg - plateau) <= tol + 1e-12) {
            return {true, steps[k]};
        }
    }
    return {};
}

// ------------------------------------------------------------------ training

std::vector<std::size_t> TrainReport::steps() const {
    std::vector<std::size_t> s;
    for (const auto& p : curve) {
        s.push_back(p.step);
    }
    return s;
}

std::vector<double> TrainReport::test_accuracies() const {
    std::vector<double> s;
    for (const auto& p : curve) {
        s.push_back(p.test_accuracy);
    }
    return s;
}

json report_to_json(const TrainReport& r, bool with_timing) {
    json curve = json::array();
    for (const auto& p : r.curve) {
        curve.push_back({{"step", p.step},
                         {"train_loss", std::isfinite(p.train_loss) ? json(p.train_loss) : json(nullptr)},
                         {"train_accuracy", std::isfinite(p.train_accuracy) ? json(p.train_accuracy) : json(nullptr)},
                         {"test_loss", std::isfinite(p.test_loss) ? json(p.test_loss) : json(nullptr)},
                         {"test_accuracy", p.test_accuracy}});
    }
    json j = {{"name", r.name},
              {"curve", std::move(curve)},
              {"converged", r.convergence.converged},
              {"steps_to_convergence", r.convergence.converged ? json(r.convergence.step) : json(nullptr)},
              {"steps_run", r.steps_run},
              {"final_test_accuracy", r.final_test_accuracy},
              {"final_train_accuracy", r.final_train_accuracy},
              {"diverged", r.diverged},
              {"trainable_params", r.trainable_params},
              {"frozen_params", r.frozen_params},
              {"frozen_hash_before", r.frozen_hash_before},
              {"frozen_hash_after", r.frozen_hash_after},
              {"frozen_intact", r.frozen_intact()},
              {"config", r.config}};
    if (with_timing) {
        j["wall_seconds"] = r.wall_seconds;
        j["epoch_seconds"] = r.epoch_seconds;
    }
    return j;
}

std::string TrainReport::fingerprint() const {
    Sha256 h;
    const std::string text = report_to_json(*this, false).dump();
    h.update(text.data(), text.size());
    return h.hex();
}

void check_compatible(const ModelSpec& spec, const TaskConfig& task) {
    if (spec.d_in != task.d_in()) {
        throw ConfigError(fmt::format("model d_in {} does not match task token dimension {}", spec.d_in, task.d_in()));
    }
    if (spec.d_out != task.d_out()) {
        throw ConfigError(fmt::format("model d_out {} does not match task output size {}", spec.d_out, task.d_out()));
    }
    if (spec.readout != task.readout()) {
        throw ConfigError(fmt::format("model readout {} does not match task readout {}", to_string(spec.readout),
                                      to_string(task.readout())));
    }
    if (task.length() > spec.max_len) {
        throw ConfigError(fmt::format("task sequences reach {} tokens, model max_len is {}", task.length(),
                                      spec.max_len));
    }
}

void check_compatible(const ModelSpec& spec, const Task& task) { check_compatible(spec, task.config()); }

TrainReport train(Model& model, const FreezePolicy& policy, const Task& task, const TrainConfig& cfg) {
    cfg.validate();
    check_compatible(model.spec(), task);
    const auto t0 = Clock::now();

    TrainReport report;
    report.name = policy.name;
    report.config = {{"model", spec_to_json(model.spec())},
                     {"policy", policy.name},
                     {"task", task_to_json(task.config())},
                     {"train", train_to_json(cfg)}};

    auto partition = apply_policy(model, policy);
    for (const auto* p : partition.trainable) {
        report.trainable_params += p->tensor.numel();
    }
    for (const auto* p : partition.frozen) {
        report.frozen_params += p->tensor.numel();
    }
    report.frozen_hash_before = hash_parameters(partition.frozen);

    std::vector<Tensor> params;
    for (auto* p : partition.trainable) {
        params.push_back(p->tensor);
    }
    AdamState state;
    Rng dropout_rng = Rng(cfg.seed).split("dropout");
    BatchOrder order(task.train_size(), cfg.batch_size, cfg.seed);
    const std::size_t n_eval = std::min(cfg.eval_set_size, task.test_size());

    double loss_acc = 0.0;
    std::size_t batches = 0, correct = 0, total = 0;
    auto record = [&](std::size_t step) {
        const auto ev = evaluate(model, task, n_eval, cfg.eval_batch_size);
        CurvePoint p;
        p.step = step;
        p.train_loss = batches ? loss_acc / static_cast<double>(batches) : std::nan("");
        p.train_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : std::nan("");
        p.test_loss = ev.loss;
        p.test_accuracy = ev.accuracy;
        report.curve.push_back(p);
        loss_acc = 0.0;
        batches = correct = total = 0;
        return ev.accuracy;
    };

    record(0);
    auto epoch_start = Clock::now();
    std::uint64_t seen = 0;
    std::vector<TaskInstance> examples;
    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        examples.clear();
        for (auto idx : order.indices(step - 1)) {
            examples.push_back(task.train_example(idx));
        }
        const Batch batch = collate(examples);
        for (auto& p : params) {
            p.zero_grad();
        }
        const auto out = compute_loss(model, batch, {true, &dropout_rng, nullptr});
        const float loss = out.loss.item();
        report.steps_run = step;
        if (!std::isfinite(loss)) {
            report.diverged = true;
            break;
        }
        out.loss.backward();
        adam_step(params, state, cfg);
        loss_acc += loss;
        ++batches;
        correct += out.correct;
        total += out.total;

        if (const auto pool = task.train_size()) {
            seen += cfg.batch_size;
            while (seen >= *pool) {
                seen -= *pool;
                report.epoch_seconds.push_back(seconds_since(epoch_start));
                epoch_start = Clock::now();
            }
        }
        if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
            const double acc = record(step);
            if (cfg.target_accuracy && acc >= *cfg.target_accuracy) {
                break;
            }
        }
    }
    if (report.diverged && batches > 0) {
        record(report.steps_run);
    }

    report.final_test_accuracy = report.curve.back().test_accuracy;
    report.final_train_accuracy =
        evaluate(model, task, std::min(cfg.eval_set_size, task.train_size().value_or(cfg.eval_set_size)),
                 cfg.eval_batch_size, true)
            .accuracy;
    const auto steps = report.steps();
    const auto accs = report.test_accuracies();
    report.convergence = steps_to_convergence(steps, accs, cfg.convergence_window, cfg.convergence_tol);
    report.frozen_hash_after = hash_parameters(partition.frozen);
    report.wall_seconds = seconds_since(t0);
    return report;
}

// ------------------------------------------------------------------ surrogate pretraining

std::string_view to_string(SurrogateKind kind) { return kind == SurrogateKind::char_lm ? "char_lm" : "bit_memory"; }

SurrogateKind parse_surrogate_kind(std::string_view name) {
    if (name == "char_lm") {
        return SurrogateKind::char_lm;
    }
    if (name == "bit_memory") {
        return SurrogateKind::bit_memory;
    }
    throw ConfigError(fmt::format("unknown pretraining objective '{}'", name));
}

std::string char_vocab(std::string_view corpus) {
    std::set<char> chars(corpus.begin(), corpus.end());
    return {chars.begin(), chars.end()};
}

namespace {

PretrainResult pretrain_char_lm(Model& model, const PretrainSource& source, const TrainConfig& cfg) {
    std::string corpus = source.corpus;
    if (corpus.empty()) {
        std::ifstream in(source.corpus_path, std::ios::binary);
        if (!in) {
            throw ConfigError(fmt::format("cannot read corpus '{}'", source.corpus_path.string()));
        }
        std::ostringstream ss;
        ss << in.rdbuf();
        corpus = ss.str();
    }
    if (corpus.size() < 2) {
        throw ConfigError("corpus needs at least two characters");
    }
    PretrainResult result;
    result.vocab = char_vocab(corpus);
    const std::size_t v = result.vocab.size();
    const auto& spec = model.spec();
    if (spec.d_in != v || spec.d_out != v || spec.readout != Readout::per_token) {
        throw ConfigError(fmt::format("char_lm needs a per-token model with d_in = d_out = {} (vocabulary size)", v));
    }
    std::array<int, 256> code{};
    for (std::size_t k = 0; k < v; ++k) {
        code[static_cast<unsigned char>(result.vocab[k])] = static_cast<int>(k);
    }
    const std::size_t len = std::min({source.seq_len, corpus.size() - 1, spec.max_len});

    auto partition = apply_policy(model, full_policy());
    std::vector<Tensor> params;
    for (auto* p : partition.trainable) {
        params.push_back(p->tensor);
    }
    AdamState state;
    Rng rng = Rng(cfg.seed).split("char_lm");
    Rng dropout_rng = Rng(cfg.seed).split("dropout");
    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
        Batch batch;
        batch.size = cfg.batch_size;
        batch.length = len;
        batch.d_in = v;
        batch.tokens.assign(batch.size * len * v, 0.0f);
        std::vector<int> targets;
        for (std::size_t b = 0; b < batch.size; ++b) {
            const std::size_t start = rng.below(corpus.size() - len);
            for (std::size_t t = 0; t < len; ++t) {
                const auto c = static_cast<std::size_t>(code[static_cast<unsigned char>(corpus[start + t])]);
                batch.tokens[(b * len + t) * v + c] = 1.0f;
                targets.push_back(code[static_cast<unsigned char>(corpus[start + t + 1])]);
            }
            batch.lengths.push_back(len);
        }
        for (auto& p : params) {
            p.zero_grad();
        }
        Tensor logits = model.head(reshape(model.hidden(batch, {true, &dropout_rng, nullptr}), {batch.size * len, spec.n_dim}));
        Tensor loss = cross_entropy(logits, targets);
        const float value = loss.item();
        result.losses.push_back(value);
        if (!std::isfinite(value)) {
            result.report.diverged = true;
            break;
        }
        loss.backward();
        adam_step(params, state, cfg);
    }
    result.report.name = "char_lm";
    result.report.steps_run = result.losses.size();
    result.checkpoint = to_checkpoint(model.clone());
    result.checkpoint.meta = {{"pretrain", "char_lm"}, {"vocab", result.vocab}, {"steps", result.losses.size()}};
    return result;
}

}  // namespace

PretrainResult pretrain_surrogate(SurrogateKind kind, Model& model, const PretrainSource& source,
                                  const TrainConfig& cfg) {
    cfg.validate();
    if (kind == SurrogateKind::char_lm) {
        return pretrain_char_lm(model, source, cfg);
    }
    if (source.task.kind != TaskKind::bit_memory) {
        throw ConfigError("bit_memory pretraining needs a bit_memory task config");
    }
    const SyntheticTask task(source.task);
    PretrainResult result;
    result.report = train(model, full_policy(), task, cfg);
    for (const auto& p : result.report.curve) {
        result.losses.push_back(p.test_loss);
    }
    result.checkpoint = to_checkpoint(model.clone());
    result.checkpoint.meta = {{"pretrain", "bit_memory"}, {"final_test_accuracy", result.report.final_test_accuracy}};
    return result;
}

std::vector<TrainReport> run_parallel(const std::vector<std::function<TrainReport()>>& work, std::size_t jobs) {
    std::vector<TrainReport> results(work.size());
    std::vector<std::exception_ptr> errors(work.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < work.size(); i = next++) {
            try {
                results[i] = work[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(jobs, work.size()));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n; ++t) {
        threads.emplace_back(worker);
    }
    worker();
    for (auto& t : threads) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return results;
}

}  // namespace fpt
