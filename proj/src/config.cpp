#include "fpt/config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "fpt/checkpoint.hpp"
#include "fpt/errors.hpp"

namespace fpt {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::validate() const {
    model.validate();
    task.validate();
    train.validate();
    policy_by_name(policy).validate();
    for (const auto& p : policies) {
        policy_by_name(p).validate();
    }
    if ((init == InitKind::statistics_only || init == InitKind::from_checkpoint) && init_source.empty()) {
        throw ConfigError(fmt::format("init '{}' needs init_source", to_string(init)));
    }
    for (auto d : depths) {
        if (d < 1 || d > model.n_layers) {
            throw ConfigError(fmt::format("depth {} outside [1, {}]", d, model.n_layers));
        }
    }
    // char_lm pretraining sizes the model from its corpus instead of the task.
    if (pretrain.kind != SurrogateKind::char_lm) {
        check_compatible(model, task);
    }
}

json config_to_json(const ExperimentConfig& c) {
    return {{"model", spec_to_json(c.model)},
            {"init", {{"kind", std::string(to_string(c.init))}, {"sigma", c.init_sigma}, {"source", c.init_source.string()}}},
            {"policy", c.policy},
            {"task", task_to_json(c.task)},
            {"train", train_to_json(c.train)},
            {"out", c.out.string()},
            {"seed", c.seed},
            {"depths", c.depths},
            {"policies", c.policies},
            {"epochs", c.epochs},
            {"pretrain",
             {{"kind", std::string(to_string(c.pretrain.kind))},
              {"corpus_path", c.pretrain.corpus_path.string()},
              {"seq_len", c.pretrain.seq_len}}}};
}

ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) {
        throw ConfigError("experiment config must be a JSON object");
    }
    ExperimentConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "model") {
                c.model = spec_from_json(v);
            } else if (key == "init") {
                for (const auto& [k, x] : v.items()) {
                    if (k == "kind") c.init = parse_init_kind(x.get<std::string>());
                    else if (k == "sigma") c.init_sigma = x.get<float>();
                    else if (k == "source") c.init_source = x.get<std::string>();
                    else throw ConfigError(fmt::format("unknown init key '{}'", k));
                }
            } else if (key == "policy") {
                c.policy = v.get<std::string>();
            } else if (key == "task") {
                c.task = task_from_json(v);
            } else if (key == "train") {
                c.train = train_from_json(v);
            } else if (key == "out") {
                c.out = v.get<std::string>();
            } else if (key == "seed") {
                c.seed = v.get<std::uint64_t>();
            } else if (key == "depths") {
                c.depths = v.get<std::vector<std::size_t>>();
            } else if (key == "policies") {
                c.policies = v.get<std::vector<std::string>>();
            } else if (key == "epochs") {
                c.epochs = v.get<std::size_t>();
            } else if (key == "pretrain") {
                for (const auto& [k, x] : v.items()) {
                    if (k == "kind") c.pretrain.kind = parse_surrogate_kind(x.get<std::string>());
                    else if (k == "corpus_path") c.pretrain.corpus_path = x.get<std::string>();
                    else if (k == "seq_len") c.pretrain.seq_len = x.get<std::size_t>();
                    else throw ConfigError(fmt::format("unknown pretrain key '{}'", k));
                }
            } else {
                throw ConfigError(fmt::format("unknown config key '{}'", key));
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad experiment config: {}", e.what()));
    }
    return c;
}

void apply_override(json& j, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError(fmt::format("override '{}' is not key=value", assignment));
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) {
            throw ConfigError(fmt::format("override key '{}' has an empty component", key));
        }
        if (!node->is_object()) {
            throw ConfigError(fmt::format("override '{}' descends into a non-object", key));
        }
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) {
            *node = json::object();
        }
        start = dot + 1;
    }
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides,
                             std::optional<std::uint64_t> seed, std::optional<fs::path> out) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config file '{}' is not valid JSON: {}", path.string(), e.what()));
    }
    for (const auto& o : overrides) {
        apply_override(j, o);
    }
    ExperimentConfig cfg = config_from_json(j);
    if (seed) {
        cfg.seed = *seed;
        cfg.task.seed = *seed;
        cfg.train.seed = *seed;
    }
    if (out) {
        cfg.out = *out;
    }
    cfg.validate();
    return cfg;
}

InitScheme make_init_scheme(const ExperimentConfig& cfg) {
    InitScheme s;
    s.kind = cfg.init;
    s.sigma = cfg.init_sigma;
    if (!cfg.init_source.empty()) {
        s.source = std::make_shared<const Checkpoint>(read_checkpoint(cfg.init_source));
    }
    s.validate();
    return s;
}

}  // namespace fpt
