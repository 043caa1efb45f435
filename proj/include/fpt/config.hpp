#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fpt/harness.hpp"
#include "fpt/model.hpp"
#include "fpt/policy.hpp"
#include "fpt/tasks.hpp"

namespace fpt {

struct PretrainSection {
    SurrogateKind kind = SurrogateKind::bit_memory;
    std::filesystem::path corpus_path;
    std::size_t seq_len = 64;
};

/// Everything one experiment needs. Files are JSON objects with the sections
/// model, init, policy, task, train, out, seed and the per-command sections
/// depths, policies, epochs and pretrain. Unknown keys are rejected.
struct ExperimentConfig {
    ModelSpec model;
    InitKind init = InitKind::orthogonal_input;
    float init_sigma = 0.02f;
    std::filesystem::path init_source;
    std::string policy = "fpt";
    TaskConfig task;
    TrainConfig train;
    std::filesystem::path out = "runs/out";
    std::uint64_t seed = 0;

    std::vector<std::size_t> depths;
    std::vector<std::string> policies;
    std::size_t epochs = 10;
    PretrainSection pretrain;

    /// Throws ConfigError before any compute happens.
    void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Applies "dotted.key=value"; the value is read as JSON when it parses,
/// otherwise as a string.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// Reads `path`, applies overrides, then `seed` (which also reseeds the task
/// and training streams) and `out`, and validates.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                             std::optional<std::uint64_t> seed = std::nullopt,
                             std::optional<std::filesystem::path> out = std::nullopt);

/// Reads the source checkpoint when the scheme needs one.
InitScheme make_init_scheme(const ExperimentConfig& cfg);

}  // namespace fpt
