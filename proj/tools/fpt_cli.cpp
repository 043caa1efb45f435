// fpt: command-line front end. Every subcommand reads an experiment config
// (JSON), applies --set/--seed/--out and writes its outputs under the output
// directory. Exit codes: 0 success, 1 configuration error, 2 divergence,
// 3 any other failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "fpt/analysis.hpp"
#include "fpt/checkpoint.hpp"
#include "fpt/config.hpp"
#include "fpt/errors.hpp"

namespace fs = std::filesystem;
using namespace fpt;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kDiverged = 2;
constexpr int kFailure = 3;

struct CommonArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::size_t jobs = 1;
    std::string checkpoint;
    std::size_t examples = 1;
};

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) {
        throw Error(fmt::format("cannot write '{}'", p.string()));
    }
    return f;
}

void prepare_out(const ExperimentConfig& cfg, std::string_view command) {
    std::error_code ec;
    fs::create_directories(cfg.out, ec);
    if (ec) {
        throw ConfigError(fmt::format("cannot create output directory '{}': {}", cfg.out.string(), ec.message()));
    }
    // The resolved config is itself a valid config file, so a run can be
    // repeated with `--config <out>/config.json`.
    auto f = open_out(cfg.out / "config.json");
    f << config_to_json(cfg).dump(2) << '\n';
    fmt::print("{}: writing to {}\n", command, cfg.out.string());
}

ExperimentConfig resolve(const CommonArgs& a, bool needs_task = true) {
    std::optional<fs::path> out;
    if (a.out) {
        out = fs::path(*a.out);
    }
    auto cfg = load_config(a.config, a.overrides, a.seed, out);
    if (needs_task) {
        check_compatible(cfg.model, cfg.task);
    }
    return cfg;
}

Model build(const ExperimentConfig& cfg) { return build_model(cfg.model, make_init_scheme(cfg), cfg.seed); }

int finish(const std::vector<TrainReport>& reports, const fs::path& dir) {
    emit_report(reports, dir);
    bool diverged = false;
    for (const auto& r : reports) {
        fmt::print("{}: test_accuracy={:.4f} train_accuracy={:.4f} trainable={} converged_at={} fingerprint={}\n",
                   r.name, r.final_test_accuracy, r.final_train_accuracy, r.trainable_params,
                   r.convergence.converged ? std::to_string(r.convergence.step) : "never", r.fingerprint());
        if (!r.frozen_intact()) {
            throw Error(fmt::format("run '{}' modified frozen parameters", r.name));
        }
        diverged = diverged || r.diverged;
    }
    if (diverged) {
        std::fprintf(stderr, "error: training diverged (non-finite loss)\n");
        return kDiverged;
    }
    return kOk;
}

int cmd_train(const CommonArgs& a) {
    const auto cfg = resolve(a);
    prepare_out(cfg, "train");
    const auto task = make_task(cfg.task);
    Model model = build(cfg);
    auto report = train(model, policy_by_name(cfg.policy), *task, cfg.train);
    save(model, cfg.out / "model.fptc", {{"policy", cfg.policy}, {"fingerprint", report.fingerprint()}});
    return finish({report}, cfg.out);
}

int cmd_pretrain(const CommonArgs& a) {
    auto cfg = resolve(a, false);
    PretrainSource source;
    source.seq_len = cfg.pretrain.seq_len;
    source.task = cfg.task;
    if (cfg.pretrain.kind == SurrogateKind::char_lm) {
        std::ifstream in(cfg.pretrain.corpus_path, std::ios::binary);
        if (!in) {
            throw ConfigError(fmt::format("cannot read corpus '{}'", cfg.pretrain.corpus_path.string()));
        }
        std::ostringstream ss;
        ss << in.rdbuf();
        source.corpus = ss.str();
        const auto v = char_vocab(source.corpus).size();
        cfg.model.d_in = v;
        cfg.model.d_out = v;
        cfg.model.readout = Readout::per_token;
    } else {
        check_compatible(cfg.model, cfg.task);
    }
    prepare_out(cfg, "pretrain");
    Model model = build(cfg);
    auto result = pretrain_surrogate(cfg.pretrain.kind, model, source, cfg.train);
    save_checkpoint(result.checkpoint, cfg.out / "pretrained.fptc");
    {
        auto f = open_out(cfg.out / "pretrain_loss.csv");
        f << "step,loss\n";
        for (std::size_t i = 0; i < result.losses.size(); ++i) {
            fmt::print(f, "{},{}\n", i, result.losses[i]);
        }
    }
    if (!result.losses.empty()) {
        fmt::print("pretrain: {} steps, final loss {:.4f}\n", result.losses.size(), result.losses.back());
    }
    if (cfg.pretrain.kind == SurrogateKind::char_lm) {
        if (result.report.diverged) {
            std::fprintf(stderr, "error: pretraining diverged (non-finite loss)\n");
            return kDiverged;
        }
        return kOk;
    }
    return finish({result.report}, cfg.out);
}

int cmd_ablate(const CommonArgs& a) {
    const auto cfg = resolve(a);
    std::vector<FreezePolicy> policies;
    if (cfg.policies.empty()) {
        policies = ablation_chain();
    } else {
        for (const auto& name : cfg.policies) {
            policies.push_back(policy_by_name(name));
        }
    }
    prepare_out(cfg, "ablate");
    const auto task = make_task(cfg.task);
    const auto init = make_init_scheme(cfg);
    std::vector<std::function<TrainReport()>> work;
    for (const auto& p : policies) {
        work.emplace_back([&cfg, &task, &init, p] {
            Model model = build_model(cfg.model, init, cfg.seed);
            return train(model, p, *task, cfg.train);
        });
    }
    return finish(run_parallel(work, std::max<std::size_t>(a.jobs, 1)), cfg.out);
}

int cmd_depth_sweep(const CommonArgs& a) {
    const auto cfg = resolve(a);
    std::vector<std::size_t> depths = cfg.depths;
    if (depths.empty()) {
        for (std::size_t d = 1; d <= cfg.model.n_layers; ++d) {
            depths.push_back(d);
        }
    }
    prepare_out(cfg, "depth-sweep");
    const auto task = make_task(cfg.task);
    const Model base = build(cfg);
    auto rows = depth_sweep(base, depths, policy_by_name(cfg.policy), *task, cfg.train, cfg.seed);
    std::vector<TrainReport> reports;
    for (auto& row : rows) {
        row.report.name = fmt::format("depth_{}", row.depth);
        reports.push_back(std::move(row.report));
    }
    return finish(reports, cfg.out);
}

int cmd_reservoir(const CommonArgs& a) {
    const auto cfg = resolve(a);
    prepare_out(cfg, "reservoir");
    const auto task = make_task(cfg.task);
    Model model = build(cfg);
    std::optional<FeatureCache> cached;
    const auto cache_path = cfg.out / "features.bin";
    if (fs::exists(cache_path)) {
        cached = load_feature_cache(cache_path);
    }
    std::optional<ReservoirReport> run;
    try {
        run = reservoir_train(model, *task, cfg.train, cfg.epochs, cached ? &*cached : nullptr);
    } catch (const StaleCacheError&) {
        fmt::print("reservoir: cached features are stale, rebuilding\n");
        run = reservoir_train(model, *task, cfg.train, cfg.epochs);
    }
    auto& result = *run;
    save_feature_cache(result.cache, cache_path);
    {
        auto f = open_out(cfg.out / "epoch_seconds.csv");
        f << "epoch,seconds\n";
        for (std::size_t i = 0; i < result.epoch_seconds.size(); ++i) {
            fmt::print(f, "{},{}\n", i + 1, result.epoch_seconds[i]);
        }
    }
    result.report.name = "reservoir";
    return finish({result.report}, cfg.out);
}

int cmd_attn(const CommonArgs& a) {
    const auto cfg = resolve(a);
    prepare_out(cfg, "attn");
    const auto task = make_task(cfg.task);
    std::optional<TrainReport> report;
    Model model;
    if (!a.checkpoint.empty()) {
        model = fpt::load(a.checkpoint);
        check_compatible(model.spec(), *task);
    } else {
        model = build(cfg);
        report = train(model, policy_by_name(cfg.policy), *task, cfg.train);
    }
    std::vector<AttentionRecord> records;
    for (std::size_t i = 0; i < a.examples; ++i) {
        auto r = extract_attention(model, task->test_example(i));
        auto m = mean_over_heads(r);
        records.insert(records.end(), r.begin(), r.end());
        records.insert(records.end(), m.begin(), m.end());
    }
    {
        auto f = open_out(cfg.out / "attention.csv");
        write_attention_csv(f, records);
    }
    if (cfg.task.kind == TaskKind::bit_xor) {
        const auto mass = xor_attention_mass(model, *task, std::min<std::size_t>(task->test_size(), 256));
        auto f = open_out(cfg.out / "xor_attention.json");
        f << json{{"mass", mass.mass}, {"baseline", mass.baseline}}.dump(2) << '\n';
        fmt::print("attn: layer-1 mass on counterpart bits {:.3f} (uniform baseline {:.3f})\n", mass.mass,
                   mass.baseline);
    }
    if (report) {
        return finish({*report}, cfg.out);
    }
    return kOk;
}

int cmd_stats(const CommonArgs& a) {
    const auto cfg = resolve(a, false);
    fs::path source = a.checkpoint.empty() ? cfg.init_source : fs::path(a.checkpoint);
    if (source.empty()) {
        throw ConfigError("stats needs --checkpoint or init.source");
    }
    prepare_out(cfg, "stats");
    const auto rows = layer_statistics(read_checkpoint(source));
    auto f = open_out(cfg.out / "layer_stats.csv");
    write_layer_statistics_csv(f, rows);
    fmt::print("stats: {} rows from {}\n", rows.size(), source.string());
    return kOk;
}

int cmd_count(const CommonArgs& a) {
    const auto cfg = resolve(a, false);
    prepare_out(cfg, "count");
    Model model = allocate_model(cfg.model);
    std::vector<std::string> names = cfg.policies;
    if (names.empty()) {
        names.push_back(cfg.policy);
    }
    json out = json::array();
    for (const auto& name : names) {
        const auto counts = count_params(model, policy_by_name(name));
        json groups = json::object();
        for (const auto& [g, n] : counts.by_group) {
            groups[std::string(to_string(g))] = n;
            fmt::print("{:<12} {:<12} {:>12} (formula {})\n", name, to_string(g), n,
                       formula_group_count(cfg.model, g));
        }
        fmt::print("{:<12} trainable {} of {} ({:.4f}%)\n", name, counts.trainable, counts.total,
                   100.0 * counts.trainable_fraction());
        out.push_back({{"policy", name},
                       {"groups", groups},
                       {"total", counts.total},
                       {"trainable", counts.trainable},
                       {"frozen", counts.frozen},
                       {"final_layernorm", counts.final_layernorm},
                       {"trainable_fraction", counts.trainable_fraction()}});
    }
    auto f = open_out(cfg.out / "counts.json");
    f << out.dump(2) << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frozen pretrained transformer experiments"};
    app.require_subcommand(1);
    CommonArgs args;

    struct Command {
        const char* name;
        const char* help;
        int (*run)(const CommonArgs&);
    };
    const std::vector<Command> commands = {
        {"train", "train one configuration and save the final model", cmd_train},
        {"pretrain", "surrogate pretraining (char_lm or bit_memory)", cmd_pretrain},
        {"ablate", "train a list of freeze policies on one task", cmd_ablate},
        {"depth-sweep", "train truncated copies of the model at several depths", cmd_depth_sweep},
        {"reservoir", "output-only training on cached trunk features", cmd_reservoir},
        {"attn", "export attention maps (training first unless --checkpoint)", cmd_attn},
        {"stats", "per-layer weight statistics of a checkpoint", cmd_stats},
        {"count", "parameter counts per group and policy", cmd_count},
    };
    int (*selected)(const CommonArgs&) = nullptr;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", args.config, "experiment config (JSON)")->required();
        sub->add_option("--set", args.overrides, "override, key.path=value")->take_all();
        sub->add_option("--seed", args.seed, "seed for model, task and training streams");
        sub->add_option("--out", args.out, "output directory");
        if (std::string_view(c.name) == "ablate") {
            sub->add_option("--jobs", args.jobs, "parallel runs")->check(CLI::PositiveNumber);
        }
        if (std::string_view(c.name) == "attn" || std::string_view(c.name) == "stats") {
            sub->add_option("--checkpoint", args.checkpoint, "read this checkpoint instead");
        }
        if (std::string_view(c.name) == "attn") {
            sub->add_option("--examples", args.examples, "test examples to export");
        }
        sub->callback([&selected, run = c.run] { selected = run; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        return selected(args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
}
