#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "fpt/errors.hpp"
#include "fpt/tasks.hpp"

namespace fpt {

namespace {

constexpr std::string_view kOpNames[] = {"MAX", "MIN", "MED", "SM"};

int apply_op(int op, std::vector<int>& args) {
    switch (op) {
        case kMax: return *std::max_element(args.begin(), args.end());
        case kMin: return *std::min_element(args.begin(), args.end());
        case kMed: {
            std::sort(args.begin(), args.end());
            return args[(args.size() - 1) / 2];  // lower median
        }
        default: return std::accumulate(args.begin(), args.end(), 0) % 10;
    }
}

struct Generator {
    const TaskConfig& cfg;
    Rng& rng;
    std::vector<int> ids;

    int expression(std::size_t depth) {
        const int op = kMax + static_cast<int>(rng.below(4));
        ids.push_back(op);
        const std::size_t n_args = 2 + rng.below(cfg.max_args - 1);
        std::vector<int> args;
        args.reserve(n_args);
        for (std::size_t a = 0; a < n_args; ++a) {
            if (depth + 1 < cfg.max_depth && rng.bernoulli(cfg.branch_prob)) {
                args.push_back(expression(depth + 1));
            } else {
                const int digit = static_cast<int>(rng.below(10));
                ids.push_back(digit);
                args.push_back(digit);
            }
        }
        ids.push_back(kClose);
        return apply_op(op, args);
    }
};

struct Evaluator {
    std::span<const int> ids;
    std::size_t pos = 0;

    int value() {
        if (pos >= ids.size()) {
            throw GenerationError("listops expression ends early");
        }
        const int id = ids[pos++];
        if (id >= 0 && id <= 9) {
            return id;
        }
        if (id < kMax || id > kSumMod) {
            throw GenerationError(fmt::format("unexpected listops symbol {} at {}", id, pos - 1));
        }
        std::vector<int> args;
        while (pos < ids.size() && ids[pos] != kClose) {
            args.push_back(value());
        }
        if (pos >= ids.size()) {
            throw GenerationError("listops operator is never closed");
        }
        ++pos;
        if (args.empty()) {
            throw GenerationError("listops operator without operands");
        }
        return apply_op(id, args);
    }
};

}  // namespace

TaskInstance gen_listops(const TaskConfig& cfg, Rng& rng) {
    if (cfg.max_depth < 1 || cfg.max_args < 2) {
        throw ConfigError("listops needs max_depth >= 1 and max_args >= 2");
    }
    for (std::size_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        Generator gen{cfg, rng, {}};
        const int label = gen.expression(0);
        if (gen.ids.size() > cfg.max_len) {
            continue;
        }
        TaskInstance inst;
        inst.d_in = kListOpsVocab;
        inst.length = gen.ids.size();
        inst.tokens.assign(inst.length * kListOpsVocab, 0.0f);
        for (std::size_t t = 0; t < inst.length; ++t) {
            inst.tokens[t * kListOpsVocab + static_cast<std::size_t>(gen.ids[t])] = 1.0f;
        }
        inst.label = label;
        return inst;
    }
    throw GenerationError(fmt::format("no listops expression within {} tokens after {} retries", cfg.max_len,
                                      cfg.max_retries));
}

std::vector<int> listops_tokenize(std::string_view text) {
    std::vector<int> ids;
    std::size_t i = 0;
    auto skip_space = [&] {
        while (i < text.size() && text[i] == ' ') {
            ++i;
        }
    };
    while (true) {
        skip_space();
        if (i >= text.size()) {
            break;
        }
        const char ch = text[i];
        if (ch >= '0' && ch <= '9') {
            ids.push_back(ch - '0');
            ++i;
        } else if (ch == ']') {
            ids.push_back(kClose);
            ++i;
        } else if (ch == '[') {
            ++i;
            skip_space();
            bool found = false;
            for (int k = 0; k < 4; ++k) {
                if (text.substr(i, kOpNames[k].size()) == kOpNames[k]) {
                    ids.push_back(kMax + k);
                    i += kOpNames[k].size();
                    found = true;
                    break;
                }
            }
            if (!found) {
                throw GenerationError(fmt::format("unknown listops operator at offset {}", i));
            }
        } else {
            throw GenerationError(fmt::format("unexpected character '{}' at offset {}", ch, i));
        }
    }
    return ids;
}

std::string listops_to_string(std::span<const int> ids) {
    std::string out;
    for (int id : ids) {
        if (!out.empty()) {
            out += ' ';
        }
        if (id >= 0 && id <= 9) {
            out += static_cast<char>('0' + id);
        } else if (id == kClose) {
            out += ']';
        } else if (id >= kMax && id <= kSumMod) {
            out += "[ ";
            out += kOpNames[id - kMax];
        } else {
            throw GenerationError(fmt::format("bad listops id {}", id));
        }
    }
    return out;
}

int listops_evaluate(std::span<const int> ids) {
    Evaluator ev{ids};
    const int v = ev.value();
    if (ev.pos != ids.size()) {
        throw GenerationError(fmt::format("trailing listops symbols after offset {}", ev.pos));
    }
    return v;
}

std::vector<int> listops_ids(const TaskInstance& inst) {
    std::vector<int> ids;
    ids.reserve(inst.length);
    for (std::size_t t = 0; t < inst.length; ++t) {
        const auto* row = inst.tokens.data() + t * inst.d_in;
        ids.push_back(static_cast<int>(std::max_element(row, row + inst.d_in) - row));
    }
    return ids;
}

}  // namespace fpt
