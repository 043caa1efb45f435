#include "fpt/tasks.hpp"

#include <algorithm>
#include <array>
#include <utility>

#include <fmt/format.h>

#include "fpt/errors.hpp"

namespace fpt {

namespace {

constexpr std::array<std::pair<std::string_view, TaskKind>, 6> kTaskNames = {{
    {"bit_memory", TaskKind::bit_memory},
    {"bit_xor", TaskKind::bit_xor},
    {"listops", TaskKind::listops},
    {"image_patches", TaskKind::image_patches},
    {"image_flat", TaskKind::image_flat},
    {"labeled_sequences", TaskKind::labeled_sequences},
}};

bool is_synthetic(TaskKind kind) {
    return kind == TaskKind::bit_memory || kind == TaskKind::bit_xor || kind == TaskKind::listops;
}

float bit_code(bool bit) { return bit ? 1.0f : -1.0f; }

}  // namespace

std::string_view to_string(TaskKind kind) {
    for (const auto& [name, k] : kTaskNames) {
        if (k == kind) {
            return name;
        }
    }
    return "?";
}

TaskKind parse_task_kind(std::string_view name) {
    for (const auto& [n, k] : kTaskNames) {
        if (n == name) {
            return k;
        }
    }
    throw ConfigError(fmt::format("unknown task '{}'", name));
}

// ------------------------------------------------------------------ config

void TaskConfig::validate() const {
    switch (kind) {
        case TaskKind::bit_memory:
            if (n_strings == 0 || string_length == 0 || chunk == 0) {
                throw ConfigError("bit memory needs positive n_strings, string_length and chunk");
            }
            if (string_length % chunk != 0) {
                throw ConfigError(fmt::format("chunk {} does not divide string length {}", chunk, string_length));
            }
            if (mask_prob < 0.0f || mask_prob > 1.0f) {
                throw ConfigError(fmt::format("mask probability {} outside [0, 1]", mask_prob));
            }
            break;
        case TaskKind::bit_xor:
            if (xor_bits == 0) {
                throw ConfigError("bit xor needs at least one bit");
            }
            break;
        case TaskKind::listops:
            if (max_depth < 1 || max_args < 2 || max_len < 5) {
                throw ConfigError("listops needs max_depth >= 1, max_args >= 2 and max_len >= 5");
            }
            if (branch_prob < 0.0f || branch_prob > 1.0f) {
                throw ConfigError(fmt::format("branch probability {} outside [0, 1]", branch_prob));
            }
            break;
        case TaskKind::image_patches:
        case TaskKind::image_flat:
            if (image_side == 0 || patch == 0 || image_side % patch != 0) {
                throw ConfigError(fmt::format("patch {} does not tile image side {}", patch, image_side));
            }
            if (n_classes == 0) {
                throw ConfigError("image task needs n_classes >= 1");
            }
            break;
        case TaskKind::labeled_sequences: {
            if (alphabet.empty() || max_len == 0 || n_classes == 0) {
                throw ConfigError("labeled sequences need an alphabet, max_len and n_classes");
            }
            std::string sorted = alphabet;
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
                throw ConfigError(fmt::format("alphabet '{}' repeats a symbol", alphabet));
            }
            break;
        }
    }
    if (is_synthetic(kind) && test_size == 0) {
        throw ConfigError("synthetic task needs test_size >= 1");
    }
}

Readout TaskConfig::readout() const {
    return kind == TaskKind::bit_memory || kind == TaskKind::bit_xor ? Readout::per_token : Readout::last_token;
}

std::size_t TaskConfig::d_in() const {
    switch (kind) {
        case TaskKind::bit_memory: return chunk;
        case TaskKind::bit_xor: return 1;
        case TaskKind::listops: return kListOpsVocab;
        case TaskKind::image_patches: return patch * patch;
        case TaskKind::image_flat: return 1;
        case TaskKind::labeled_sequences: return alphabet.size();
    }
    return 0;
}

std::size_t TaskConfig::d_out() const {
    switch (kind) {
        case TaskKind::bit_memory: return chunk;
        case TaskKind::bit_xor: return 1;
        case TaskKind::listops: return 10;
        default: return n_classes;
    }
}

std::size_t TaskConfig::length() const {
    switch (kind) {
        case TaskKind::bit_memory: return (n_strings + 1) * (string_length / chunk);
        case TaskKind::bit_xor: return 2 * xor_bits;
        case TaskKind::image_patches: return (image_side / patch) * (image_side / patch);
        case TaskKind::image_flat: return image_side * image_side;
        // records of max_len or more symbols are skipped at load time
        case TaskKind::labeled_sequences: return max_len - 1;
        default: return max_len;
    }
}

nlohmann::json task_to_json(const TaskConfig& c) {
    return {{"kind", std::string(to_string(c.kind))},
            {"seed", c.seed},
            {"n_strings", c.n_strings},
            {"string_length", c.string_length},
            {"chunk", c.chunk},
            {"mask_prob", c.mask_prob},
            {"xor_bits", c.xor_bits},
            {"max_depth", c.max_depth},
            {"max_args", c.max_args},
            {"branch_prob", c.branch_prob},
            {"max_len", c.max_len},
            {"max_retries", c.max_retries},
            {"image_format", c.image_format == ImageFormat::idx ? "idx" : "cifar"},
            {"train_path", c.train_path.string()},
            {"train_labels_path", c.train_labels_path.string()},
            {"test_path", c.test_path.string()},
            {"test_labels_path", c.test_labels_path.string()},
            {"image_side", c.image_side},
            {"patch", c.patch},
            {"alphabet", c.alphabet},
            {"n_classes", c.n_classes},
            {"train_size", c.train_size},
            {"test_size", c.test_size}};
}

TaskConfig task_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("task config must be a JSON object");
    }
    TaskConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "kind") c.kind = parse_task_kind(v.get<std::string>());
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "n_strings") c.n_strings = v.get<std::size_t>();
            else if (key == "string_length") c.string_length = v.get<std::size_t>();
            else if (key == "chunk") c.chunk = v.get<std::size_t>();
            else if (key == "mask_prob") c.mask_prob = v.get<float>();
            else if (key == "xor_bits") c.xor_bits = v.get<std::size_t>();
            else if (key == "max_depth") c.max_depth = v.get<std::size_t>();
            else if (key == "max_args") c.max_args = v.get<std::size_t>();
            else if (key == "branch_prob") c.branch_prob = v.get<float>();
            else if (key == "max_len") c.max_len = v.get<std::size_t>();
            else if (key == "max_retries") c.max_retries = v.get<std::size_t>();
            else if (key == "image_format") {
                const auto f = v.get<std::string>();
                if (f != "idx" && f != "cifar") {
                    throw ConfigError(fmt::format("unknown image format '{}'", f));
                }
                c.image_format = f == "idx" ? ImageFormat::idx : ImageFormat::cifar;
            }
            else if (key == "train_path") c.train_path = v.get<std::string>();
            else if (key == "train_labels_path") c.train_labels_path = v.get<std::string>();
            else if (key == "test_path") c.test_path = v.get<std::string>();
            else if (key == "test_labels_path") c.test_labels_path = v.get<std::string>();
            else if (key == "image_side") c.image_side = v.get<std::size_t>();
            else if (key == "patch") c.patch = v.get<std::size_t>();
            else if (key == "alphabet") c.alphabet = v.get<std::string>();
            else if (key == "n_classes") c.n_classes = v.get<std::size_t>();
            else if (key == "train_size") c.train_size = v.get<std::size_t>();
            else if (key == "test_size") c.test_size = v.get<std::size_t>();
            else throw ConfigError(fmt::format("unknown task key '{}'", key));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("bad task config: {}", e.what()));
    }
    return c;
}

// ------------------------------------------------------------------ batches

Batch collate(std::span<const TaskInstance> examples) {
    if (examples.empty()) {
        throw ConfigError("cannot collate an empty batch");
    }
    Batch b;
    b.size = examples.size();
    b.d_in = examples.front().d_in;
    for (const auto& e : examples) {
        if (e.d_in != b.d_in) {
            throw ShapeError(fmt::format("examples disagree on token dimension ({} vs {})", e.d_in, b.d_in));
        }
        if (e.length == 0) {
            throw ShapeError("empty example in batch");
        }
        b.length = std::max(b.length, e.length);
    }
    b.tokens.assign(b.size * b.length * b.d_in, 0.0f);
    for (std::size_t i = 0; i < b.size; ++i) {
        const auto& e = examples[i];
        std::copy(e.tokens.begin(), e.tokens.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.length * b.d_in));
        b.lengths.push_back(e.length);
        b.labels.push_back(e.label);
        b.answer_positions.push_back(e.answer_positions);
        b.bit_targets.insert(b.bit_targets.end(), e.bit_targets.begin(), e.bit_targets.end());
    }
    return b;
}

// ------------------------------------------------------------------ bit tasks

TaskInstance gen_bit_memory(const TaskConfig& cfg, Rng& rng) {
    if (cfg.chunk == 0 || cfg.string_length % cfg.chunk != 0) {
        throw ConfigError(fmt::format("chunk {} does not divide string length {}", cfg.chunk, cfg.string_length));
    }
    const std::size_t per_string = cfg.string_length / cfg.chunk;
    TaskInstance inst;
    inst.d_in = cfg.chunk;
    inst.length = (cfg.n_strings + 1) * per_string;
    inst.tokens.reserve(inst.length * inst.d_in);

    std::vector<std::vector<bool>> strings(cfg.n_strings, std::vector<bool>(cfg.string_length));
    for (auto& s : strings) {
        for (std::size_t k = 0; k < s.size(); ++k) {
            s[k] = rng.bernoulli(0.5);
        }
        for (bool bit : s) {
            inst.tokens.push_back(bit_code(bit));
        }
    }
    const auto& query = strings[rng.below(cfg.n_strings)];
    for (bool bit : query) {
        inst.tokens.push_back(rng.bernoulli(cfg.mask_prob) ? 0.0f : bit_code(bit));
        inst.bit_targets.push_back(bit ? 1.0f : 0.0f);
    }
    for (std::size_t t = 0; t < per_string; ++t) {
        inst.answer_positions.push_back(cfg.n_strings * per_string + t);
    }
    return inst;
}

TaskInstance gen_bit_xor(const TaskConfig& cfg, Rng& rng) {
    const std::size_t n = cfg.xor_bits;
    TaskInstance inst;
    inst.d_in = 1;
    inst.length = 2 * n;
    std::vector<bool> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.bernoulli(0.5);
    }
    for (std::size_t i = 0; i < n; ++i) {
        b[i] = rng.bernoulli(0.5);
    }
    for (bool bit : a) {
        inst.tokens.push_back(bit_code(bit));
    }
    for (bool bit : b) {
        inst.tokens.push_back(bit_code(bit));
    }
    for (std::size_t i = 0; i < n; ++i) {
        inst.answer_positions.push_back(n + i);
        inst.bit_targets.push_back(a[i] != b[i] ? 1.0f : 0.0f);
    }
    return inst;
}

// ------------------------------------------------------------------ task sources

SyntheticTask::SyntheticTask(TaskConfig cfg) : Task(std::move(cfg)) {
    cfg_.validate();
    if (!is_synthetic(cfg_.kind)) {
        throw ConfigError(fmt::format("task '{}' is not synthetic", to_string(cfg_.kind)));
    }
}

TaskInstance SyntheticTask::generate(std::string_view split, std::uint64_t index) const {
    Rng rng = Rng(cfg_.seed).split(split).split(index);
    switch (cfg_.kind) {
        case TaskKind::bit_memory: return gen_bit_memory(cfg_, rng);
        case TaskKind::bit_xor: return gen_bit_xor(cfg_, rng);
        default: return gen_listops(cfg_, rng);
    }
}

TaskInstance SyntheticTask::train_example(std::uint64_t index) const {
    if (cfg_.train_size > 0) {
        index %= cfg_.train_size;
    }
    return generate("train", index);
}

TaskInstance SyntheticTask::test_example(std::uint64_t index) const { return generate("test", index); }

std::optional<std::size_t> SyntheticTask::train_size() const {
    if (cfg_.train_size == 0) {
        return std::nullopt;
    }
    return cfg_.train_size;
}

InMemoryTask::InMemoryTask(TaskConfig cfg, std::vector<TaskInstance> train, std::vector<TaskInstance> test)
    : Task(std::move(cfg)), train_(std::move(train)), test_(std::move(test)) {
    if (train_.empty()) {
        throw ConfigError("task has no training examples");
    }
}

TaskInstance InMemoryTask::train_example(std::uint64_t index) const { return train_[index % train_.size()]; }

TaskInstance InMemoryTask::test_example(std::uint64_t index) const {
    if (test_.empty()) {
        throw ConfigError("task has no test examples");
    }
    return test_[index % test_.size()];
}

std::shared_ptr<Task> make_task(const TaskConfig& cfg) {
    cfg.validate();
    if (is_synthetic(cfg.kind)) {
        return std::make_shared<SyntheticTask>(cfg);
    }
    auto cap = [](std::vector<TaskInstance> v, std::size_t n) {
        if (n > 0 && v.size() > n) {
            v.resize(n);
        }
        return v;
    };
    if (cfg.kind == TaskKind::labeled_sequences) {
        auto train = load_labeled_sequences(cfg.train_path, cfg);
        auto test = cfg.test_path.empty() ? SequenceSet{} : load_labeled_sequences(cfg.test_path, cfg);
        return std::make_shared<InMemoryTask>(cfg, cap(std::move(train.examples), cfg.train_size),
                                              cap(std::move(test.examples), cfg.test_size));
    }
    const ImageSet train_set = read_images(cfg, true);
    const PixelStats stats = pixel_stats(train_set, cfg.image_side);
    const ImageSet test_set = read_images(cfg, false);
    auto load = [&](const ImageSet& set) {
        return cfg.kind == TaskKind::image_patches ? load_image_patches(set, cfg, stats)
                                                   : load_image_flat_lra(set, cfg, stats);
    };
    return std::make_shared<InMemoryTask>(cfg, cap(load(train_set), cfg.train_size),
                                          cap(load(test_set), cfg.test_size));
}

}  // namespace fpt
