#include "fpt/analysis.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "fpt/checkpoint.hpp"
#include "fpt/errors.hpp"
#include "fpt/hashing.hpp"

namespace fpt {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

// ------------------------------------------------------------------ attention

std::vector<AttentionRecord> extract_attention(const Model& model, const TaskInstance& instance) {
    if (model.spec().family != Family::transformer) {
        throw UnsupportedModelError("attention maps need a transformer model");
    }
    NoGradGuard no_grad;
    std::vector<AttentionRecord> records;
    const TaskInstance one[] = {instance};
    ForwardOptions opts;
    opts.attention = &records;
    model.hidden(collate(one), opts);
    return records;
}

std::vector<AttentionRecord> mean_over_heads(const std::vector<AttentionRecord>& records) {
    std::map<std::size_t, std::pair<AttentionRecord, std::size_t>> by_layer;
    for (const auto& r : records) {
        if (r.head == kMeanHead) {
            continue;
        }
        auto [it, fresh] = by_layer.try_emplace(r.layer);
        auto& [acc, count] = it->second;
        if (fresh) {
            acc = {r.layer, kMeanHead, r.length, std::vector<float>(r.weights.size(), 0.0f)};
        }
        if (acc.weights.size() != r.weights.size()) {
            throw ShapeError("attention records of one layer disagree on length");
        }
        for (std::size_t k = 0; k < r.weights.size(); ++k) {
            acc.weights[k] += r.weights[k];
        }
        ++count;
    }
    std::vector<AttentionRecord> out;
    for (auto& [layer, entry] : by_layer) {
        for (auto& w : entry.first.weights) {
            w /= static_cast<float>(entry.second);
        }
        out.push_back(std::move(entry.first));
    }
    return out;
}

void write_attention_csv(std::ostream& out, const std::vector<AttentionRecord>& records) {
    out << "layer,head,row,col,value\n";
    for (const auto& r : records) {
        const std::string head = r.head == kMeanHead ? "-1" : std::to_string(r.head);
        for (std::size_t i = 0; i < r.length; ++i) {
            for (std::size_t j = 0; j < r.length; ++j) {
                fmt::print(out, "{},{},{},{},{}\n", r.layer, head, i, j, r.at(i, j));
            }
        }
    }
}

XorAttentionMass xor_attention_mass(const Model& model, const Task& task, std::size_t n_examples) {
    if (task.config().kind != TaskKind::bit_xor) {
        throw ConfigError("attention mass check needs a bit_xor task");
    }
    const std::size_t n = task.config().xor_bits;
    XorAttentionMass m;
    for (std::size_t k = 0; k < n_examples; ++k) {
        const auto layers = mean_over_heads(extract_attention(model, task.test_example(k)));
        const auto& first = layers.front();
        for (std::size_t i = 0; i < n; ++i) {
            m.mass += first.at(n + i, i) + first.at(n + i, n + i);
            m.baseline += 2.0 / static_cast<double>(n + i + 1);
        }
    }
    const double count = static_cast<double>(n_examples * n);
    m.mass /= count;
    m.baseline /= count;
    return m;
}

// ------------------------------------------------------------------ reservoir mode

std::string cache_fingerprint(const Model& model, const Task& task, std::size_t rows) {
    std::vector<const Parameter*> trunk;
    for (const auto& p : model.registry().params()) {
        if (p.group != ParamGroup::output) {
            trunk.push_back(&p);
        }
    }
    Sha256 h;
    const std::string parts =
        hash_parameters(trunk) + spec_to_json(model.spec()).dump() + task_to_json(task.config()).dump() +
        std::to_string(rows);
    h.update(parts.data(), parts.size());
    return h.hex();
}

FeatureCache build_feature_cache(const Model& model, const Task& task, std::size_t rows, std::size_t batch_size) {
    if (task.readout() != Readout::last_token || model.spec().readout != Readout::last_token) {
        throw ConfigError("feature caches need a last-token classification task");
    }
    NoGradGuard no_grad;
    FeatureCache cache;
    cache.n_dim = model.spec().n_dim;
    cache.features.reserve(rows * cache.n_dim);
    std::vector<TaskInstance> examples;
    for (std::size_t start = 0; start < rows; start += batch_size) {
        examples.clear();
        for (std::size_t i = start; i < std::min(rows, start + batch_size); ++i) {
            examples.push_back(task.train_example(i));
            cache.labels.push_back(examples.back().label);
        }
        const auto f = model.readout_features(collate(examples), {});
        cache.features.insert(cache.features.end(), f.data().begin(), f.data().end());
    }
    cache.fingerprint = cache_fingerprint(model, task, rows);
    return cache;
}

void save_feature_cache(const FeatureCache& cache, const fs::path& path) {
    Checkpoint c;
    c.meta = {{"kind", "feature_cache"}, {"fingerprint", cache.fingerprint}, {"n_dim", cache.n_dim}};
    std::vector<float> labels(cache.labels.begin(), cache.labels.end());
    c.tensors.push_back({"features", ParamGroup::output, Tensor::from({cache.rows(), cache.n_dim}, cache.features)});
    c.tensors.push_back({"labels", ParamGroup::output, Tensor::from({cache.rows()}, std::move(labels))});
    save_checkpoint(c, path);
}

FeatureCache load_feature_cache(const fs::path& path) {
    const Checkpoint c = read_checkpoint(path);
    const auto* f = c.find("features");
    const auto* l = c.find("labels");
    if (c.meta.value("kind", "") != "feature_cache" || f == nullptr || l == nullptr) {
        throw CheckpointError(CheckpointError::Kind::header, fmt::format("'{}' is not a feature cache", path.string()));
    }
    FeatureCache cache;
    cache.n_dim = c.meta.at("n_dim").get<std::size_t>();
    cache.fingerprint = c.meta.at("fingerprint").get<std::string>();
    cache.features.assign(f->tensor.data().begin(), f->tensor.data().end());
    for (float v : l->tensor.data()) {
        cache.labels.push_back(static_cast<int>(v));
    }
    return cache;
}

namespace {

EvalResult evaluate_cached(const Model& model, const FeatureCache& cache, std::size_t batch_size) {
    NoGradGuard no_grad;
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < cache.rows(); start += batch_size) {
        const std::size_t b = std::min(cache.rows(), start + batch_size) - start;
        Tensor x = Tensor::from({b, cache.n_dim}, std::vector<float>(cache.features.begin() + static_cast<std::ptrdiff_t>(start * cache.n_dim),
                                                                   cache.features.begin() + static_cast<std::ptrdiff_t>((start + b) * cache.n_dim)));
        const std::span<const int> labels(cache.labels.data() + start, b);
        Tensor logits = model.head(x);
        loss += static_cast<double>(cross_entropy(logits, labels).item()) * static_cast<double>(b);
        const auto ld = logits.data();
        const std::size_t c = logits.size(1);
        for (std::size_t r = 0; r < b; ++r) {
            const auto* row = ld.data() + r * c;
            correct += static_cast<int>(std::max_element(row, row + c) - row) == labels[r] ? 1 : 0;
        }
    }
    const double n = static_cast<double>(cache.rows());
    return {loss / n, static_cast<double>(correct) / n, cache.rows()};
}

}  // namespace

ReservoirReport reservoir_train(Model& model, const Task& task, const TrainConfig& cfg, std::size_t epochs,
                                const FeatureCache* cache) {
    cfg.validate();
    check_compatible(model.spec(), task);
    const auto pool = task.train_size();
    if (!pool) {
        throw ConfigError("reservoir training needs a finite training pool");
    }
    if (*pool % cfg.batch_size != 0) {
        throw ConfigError(fmt::format("training pool {} is not a multiple of batch size {}", *pool, cfg.batch_size));
    }
    ReservoirReport out;
    auto& report = out.report;
    report.name = "reservoir";
    report.config = {{"model", spec_to_json(model.spec())},
                     {"policy", "output_only"},
                     {"task", task_to_json(task.config())},
                     {"train", train_to_json(cfg)},
                     {"epochs", epochs}};
    auto partition = apply_policy(model, output_only_policy());
    for (const auto* p : partition.trainable) {
        report.trainable_params += p->tensor.numel();
    }
    for (const auto* p : partition.frozen) {
        report.frozen_params += p->tensor.numel();
    }
    report.frozen_hash_before = hash_parameters(partition.frozen);

    const auto t_start = Clock::now();
    auto epoch_start = t_start;
    if (cache != nullptr) {
        if (cache->fingerprint != cache_fingerprint(model, task, *pool)) {
            throw StaleCacheError("feature cache was built from a different trunk, task or pool size");
        }
        out.cache = *cache;
    } else {
        out.cache = build_feature_cache(model, task, *pool, cfg.eval_batch_size);
    }
    const auto build_seconds = std::chrono::duration<double>(Clock::now() - t_start).count();

    // held-out features, untimed
    FeatureCache test_cache;
    {
        NoGradGuard no_grad;
        test_cache.n_dim = model.spec().n_dim;
        const std::size_t n_eval = std::min(cfg.eval_set_size, task.test_size());
        std::vector<TaskInstance> examples;
        for (std::size_t start = 0; start < n_eval; start += cfg.eval_batch_size) {
            examples.clear();
            for (std::size_t i = start; i < std::min(n_eval, start + cfg.eval_batch_size); ++i) {
                examples.push_back(task.test_example(i));
                test_cache.labels.push_back(examples.back().label);
            }
            const auto f = model.readout_features(collate(examples), {});
            test_cache.features.insert(test_cache.features.end(), f.data().begin(), f.data().end());
        }
    }
    auto record = [&](std::size_t step) {
        const auto ev = evaluate_cached(model, test_cache, cfg.eval_batch_size);
        CurvePoint p;
        p.step = step;
        p.train_loss = std::nan("");
        p.train_accuracy = std::nan("");
        p.test_loss = ev.loss;
        p.test_accuracy = ev.accuracy;
        report.curve.push_back(p);
    };
    record(0);

    std::vector<Tensor> params{model.head_w};
    AdamState state;
    BatchOrder order(pool, cfg.batch_size, cfg.seed);
    const std::size_t steps_per_epoch = *pool / cfg.batch_size;
    const std::size_t n = out.cache.n_dim;
    double epoch_train = 0.0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        epoch_start = Clock::now();
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t step = epoch * steps_per_epoch + s;
            const auto idx = order.indices(step);
            std::vector<float> feats(idx.size() * n);
            std::vector<int> labels(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                const auto row = out.cache.row(idx[k]);
                std::copy(row.begin(), row.end(), feats.begin() + static_cast<std::ptrdiff_t>(k * n));
                labels[k] = out.cache.labels[idx[k]];
            }
            model.head_w.zero_grad();
            Tensor loss = cross_entropy(model.head(Tensor::from({idx.size(), n}, std::move(feats))), labels);
            if (!std::isfinite(loss.item())) {
                report.diverged = true;
                break;
            }
            loss.backward();
            adam_step(params, state, cfg);
            report.steps_run = step + 1;
        }
        epoch_train = std::chrono::duration<double>(Clock::now() - epoch_start).count();
        out.epoch_seconds.push_back(epoch == 0 ? epoch_train + build_seconds : epoch_train);
        if (report.diverged) {
            break;
        }
        record(report.steps_run);
    }
    report.epoch_seconds = out.epoch_seconds;
    report.final_test_accuracy = report.curve.back().test_accuracy;
    report.final_train_accuracy = evaluate_cached(model, out.cache, cfg.eval_batch_size).accuracy;
    const auto steps = report.steps();
    const auto accs = report.test_accuracies();
    report.convergence = steps_to_convergence(steps, accs, cfg.convergence_window, cfg.convergence_tol);
    report.frozen_hash_after = hash_parameters(partition.frozen);
    report.wall_seconds = std::chrono::duration<double>(Clock::now() - t_start).count();
    return out;
}

// ------------------------------------------------------------------ depth sweep

std::vector<DepthRow> depth_sweep(const Model& base, const std::vector<std::size_t>& depths, const FreezePolicy& policy,
                                  const Task& task, const TrainConfig& cfg, std::uint64_t seed) {
    std::vector<DepthRow> rows;
    for (auto depth : depths) {
        Model m = truncate_layers(base.clone(), depth, seed);
        Rng rng = Rng(seed).split("input.weight");
        init_orthogonal(m.input_w, rng);
        std::fill(m.input_b.data().begin(), m.input_b.data().end(), 0.0f);
        DepthRow row;
        row.depth = depth;
        row.report = train(m, policy, task, cfg);
        row.report.name = fmt::format("depth_{}", depth);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ------------------------------------------------------------------ reports

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write '{}'", path.string()));
    }
    return out;
}

void check_run_name(const std::string& name) {
    if (name.find_first_of(",\n\r") != std::string::npos) {
        throw ConfigError(fmt::format("run name '{}' contains a comma or newline", name));
    }
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

}  // namespace

void emit_report(const std::vector<TrainReport>& reports, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
    }
    auto curves = open_out(dir / "curves.csv");
    auto ablation = open_out(dir / "ablation.csv");
    curves << "run,step,split,metric,value\n";
    ablation << "run,trainable_params,final_test_accuracy,final_train_accuracy,steps_to_convergence,diverged\n";
    json summary = json::array();
    for (const auto& r : reports) {
        check_run_name(r.name);
        for (const auto& p : r.curve) {
            if (std::isfinite(p.train_loss)) {
                fmt::print(curves, "{},{},train,loss,{}\n", r.name, p.step, p.train_loss);
            }
            if (std::isfinite(p.train_accuracy)) {
                fmt::print(curves, "{},{},train,accuracy,{}\n", r.name, p.step, p.train_accuracy);
            }
            fmt::print(curves, "{},{},test,loss,{}\n", r.name, p.step, p.test_loss);
            fmt::print(curves, "{},{},test,accuracy,{}\n", r.name, p.step, p.test_accuracy);
        }
        fmt::print(ablation, "{},{},{},{},{},{}\n", r.name, r.trainable_params, r.final_test_accuracy,
                   r.final_train_accuracy, r.convergence.converged ? std::to_string(r.convergence.step) : "",
                   r.diverged ? 1 : 0);
        auto j = report_to_json(r);
        j["fingerprint"] = r.fingerprint();
        summary.push_back(std::move(j));
    }
    auto out = open_out(dir / "summary.json");
    out << summary.dump(2) << '\n';
    if (!curves || !ablation || !out) {
        throw Error(fmt::format("writing reports under '{}' failed", dir.string()));
    }
}

std::vector<CurveRow> read_curves_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot read '{}'", path.string()));
    }
    std::vector<CurveRow> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto c = split_csv(line);
        if (c.size() != 5) {
            throw RecordError("curves row needs 5 columns", rows.size() + 2, 0);
        }
        rows.push_back({c[0], std::stoull(c[1]), c[2], c[3], std::stod(c[4])});
    }
    return rows;
}

std::vector<AblationRow> read_ablation_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot read '{}'", path.string()));
    }
    std::vector<AblationRow> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto c = split_csv(line);
        if (c.size() != 6) {
            throw RecordError("ablation row needs 6 columns", rows.size() + 2, 0);
        }
        rows.push_back({c[0], std::stoull(c[1]), std::stod(c[2]), std::stod(c[3]), c[4], c[5] == "1"});
    }
    return rows;
}

}  // namespace fpt
