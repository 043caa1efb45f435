#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <regex>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "fpt/analysis.hpp"
#include "fpt/config.hpp"
#include "fpt/policy.hpp"

using namespace fpt;
using nlohmann::json;
using fpt::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(FPT_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
        throw std::runtime_error("popen failed");
    }
    Result r;
    std::array<char, 512> buf{};
    while (fgets(buf.data(), buf.size(), pipe)) {
        r.output += buf.data();
    }
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

ExperimentConfig xor_config() {
    ExperimentConfig c;
    c.task.kind = TaskKind::bit_xor;
    c.task.xor_bits = 3;
    c.task.test_size = 64;
    c.model.n_layers = 1;
    c.model.n_dim = 16;
    c.model.n_heads = 2;
    c.model.max_len = 8;
    c.model.d_in = 1;
    c.model.d_out = 1;
    c.model.readout = Readout::per_token;
    c.train.max_steps = 20;
    c.train.eval_interval = 10;
    c.train.eval_set_size = 32;
    c.train.batch_size = 8;
    c.seed = 5;
    c.task.seed = 5;
    c.train.seed = 5;
    return c;
}

fs::path write_config(const fs::path& dir, const ExperimentConfig& c, const std::string& name = "cfg.json") {
    const auto p = dir / name;
    std::ofstream(p) << config_to_json(c).dump(2);
    return p;
}

std::string fingerprint_of(const std::string& output) {
    static const std::regex re("fingerprint=([0-9a-f]{64})");
    std::smatch m;
    if (!std::regex_search(output, m, re)) {
        return {};
    }
    return m[1];
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

}  // namespace

TEST(Cli, MissingConfigExitsOneNamingPath) {
    TempDir dir;
    const auto p = dir / "missing.json";
    const auto r = run("train --config " + p.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find(p.string()), std::string::npos) << r.output;
}

TEST(Cli, NoSubcommandIsUsageError) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate --config x.json").code, 1);
}

TEST(Cli, UnknownConfigKeyExitsOne) {
    TempDir dir;
    auto j = config_to_json(xor_config());
    j["train"]["momentum"] = 0.5;
    const auto p = dir / "bad.json";
    std::ofstream(p) << j.dump();
    const auto r = run("train --config " + p.string() + " --out " + (dir / "o").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("momentum"), std::string::npos) << r.output;
    EXPECT_FALSE(fs::exists(dir / "o" / "model.fptc"));
}

TEST(Cli, IncompatibleModelExitsOne) {
    TempDir dir;
    const auto p = write_config(dir.path(), xor_config());
    EXPECT_EQ(run("train --config " + p.string() + " --set model.d_in=3").code, 1);
    EXPECT_EQ(run("train --config " + p.string() + " --set model.max_len=4").code, 1);
}

TEST(Cli, TrainWritesOutputsAndSeedControlsFingerprint) {
    TempDir dir;
    const auto p = write_config(dir.path(), xor_config());
    const auto a = run("train --config " + p.string() + " --out " + (dir / "a").string() + " --seed 11");
    ASSERT_EQ(a.code, 0) << a.output;
    const auto b = run("train --config " + p.string() + " --out " + (dir / "b").string() + " --seed 11");
    ASSERT_EQ(b.code, 0) << b.output;
    const auto c = run("train --config " + p.string() + " --out " + (dir / "c").string() + " --seed 12");
    ASSERT_EQ(c.code, 0) << c.output;

    const auto fa = fingerprint_of(a.output);
    ASSERT_FALSE(fa.empty()) << a.output;
    EXPECT_EQ(fa, fingerprint_of(b.output));
    EXPECT_NE(fa, fingerprint_of(c.output));

    for (const char* f : {"model.fptc", "summary.json", "curves.csv", "ablation.csv", "config.json"}) {
        EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    }
    const auto summary = read_json(dir / "a" / "summary.json");
    ASSERT_EQ(summary.size(), 1u);
    EXPECT_EQ(summary[0]["fingerprint"], fa);

    const auto resolved = config_from_json(read_json(dir / "a" / "config.json"));
    EXPECT_EQ(resolved.seed, 11u);
    EXPECT_EQ(resolved.task.seed, 11u);
    EXPECT_EQ(resolved.train.seed, 11u);

    // The resolved config reproduces the run on its own.
    const auto again = run("train --config " + (dir / "a" / "config.json").string() + " --out " +
                           (dir / "d").string());
    ASSERT_EQ(again.code, 0) << again.output;
    EXPECT_EQ(fingerprint_of(again.output), fa);
}

TEST(Cli, OverridesReachTheRun) {
    TempDir dir;
    const auto p = write_config(dir.path(), xor_config());
    const auto r = run("train --config " + p.string() + " --out " + (dir / "o").string() +
                       " --set train.max_steps=10 --set policy=output_only");
    ASSERT_EQ(r.code, 0) << r.output;
    const auto resolved = config_from_json(read_json(dir / "o" / "config.json"));
    EXPECT_EQ(resolved.train.max_steps, 10u);
    EXPECT_EQ(resolved.policy, "output_only");
    const auto rows = read_curves_csv(dir / "o" / "curves.csv");
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(rows.back().step, 10u);
}

TEST(Cli, DivergenceExitsTwo) {
    TempDir dir;
    const auto p = write_config(dir.path(), xor_config());
    const auto r = run("train --config " + p.string() + " --out " + (dir / "o").string() +
                       " --set train.learning_rate=1e30 --set policy=full");
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_TRUE(fs::exists(dir / "o" / "summary.json"));
}

TEST(Cli, AblateKeepsPolicyOrderWithJobs) {
    TempDir dir;
    auto c = xor_config();
    c.policies = {"output_only", "fpt", "full"};
    const auto p = write_config(dir.path(), c);
    const auto r = run("ablate --jobs 2 --config " + p.string() + " --out " + (dir / "o").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = read_ablation_csv(dir / "o" / "ablation.csv");
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].run, "output_only");
    EXPECT_EQ(rows[1].run, "fpt");
    EXPECT_EQ(rows[2].run, "full");
    EXPECT_LT(rows[0].trainable_params, rows[1].trainable_params);
    EXPECT_LT(rows[1].trainable_params, rows[2].trainable_params);
}

TEST(Cli, DepthSweepNamesRuns) {
    TempDir dir;
    auto c = xor_config();
    c.model.n_layers = 2;
    c.depths = {1, 2};
    c.train.max_steps = 4;
    c.train.eval_interval = 2;
    const auto p = write_config(dir.path(), c);
    const auto r = run("depth-sweep --config " + p.string() + " --out " + (dir / "o").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = read_ablation_csv(dir / "o" / "ablation.csv");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].run, "depth_1");
    EXPECT_EQ(rows[1].run, "depth_2");
}

TEST(Cli, CountMatchesEnumeration) {
    TempDir dir;
    auto c = xor_config();
    c.policies = {"fpt", "full"};
    const auto p = write_config(dir.path(), c);
    const auto r = run("count --config " + p.string() + " --out " + (dir / "o").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto counts = read_json(dir / "o" / "counts.json");
    ASSERT_EQ(counts.size(), 2u);
    const Model m = allocate_model(c.model);
    const auto fpt = count_params(m, fpt_policy());
    EXPECT_EQ(counts[0]["trainable"].get<std::size_t>(), fpt.trainable);
    EXPECT_EQ(counts[0]["total"].get<std::size_t>(), fpt.total);
    EXPECT_EQ(counts[1]["trainable"].get<std::size_t>(), fpt.total);
}

TEST(Cli, StatsAndAttentionFromCheckpoint) {
    TempDir dir;
    const auto p = write_config(dir.path(), xor_config());
    ASSERT_EQ(run("train --config " + p.string() + " --out " + (dir / "t").string()).code, 0);
    const auto ckpt = (dir / "t" / "model.fptc").string();

    const auto s = run("stats --config " + p.string() + " --out " + (dir / "s").string() + " --checkpoint " + ckpt);
    ASSERT_EQ(s.code, 0) << s.output;
    std::ifstream stats(dir / "s" / "layer_stats.csv");
    std::string header;
    std::getline(stats, header);
    EXPECT_FALSE(header.empty());

    const auto a = run("attn --config " + p.string() + " --out " + (dir / "a").string() + " --checkpoint " + ckpt +
                       " --examples 2");
    ASSERT_EQ(a.code, 0) << a.output;
    EXPECT_TRUE(fs::exists(dir / "a" / "attention.csv"));
    const auto mass = read_json(dir / "a" / "xor_attention.json");
    double baseline = 0.0;
    for (int i = 0; i < 3; ++i) baseline += 2.0 / (3.0 + i + 1.0);
    EXPECT_NEAR(mass["baseline"].get<double>(), baseline / 3.0, 1e-9);
}

TEST(Cli, StatsWithoutSourceExitsOne) {
    TempDir dir;
    const auto p = write_config(dir.path(), xor_config());
    EXPECT_EQ(run("stats --config " + p.string() + " --out " + (dir / "s").string()).code, 1);
}
