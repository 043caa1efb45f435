#include <cmath>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "fpt/errors.hpp"
#include "fpt/tasks.hpp"

namespace fpt {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::vector<std::uint8_t> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError(fmt::format("cannot open dataset file '{}'", path.string()));
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    if (off + 4 > b.size()) {
        throw FormatError("IDX header truncated", b.size());
    }
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

}  // namespace

std::span<const std::uint8_t> ImageSet::image(std::size_t i) const {
    const std::size_t n = rows * cols * channels;
    return {pixels.data() + i * n, n};
}

ImageSet read_idx(const fs::path& images, const fs::path& labels) {
    const auto img = slurp(images);
    if (const auto magic = be32(img, 0); magic != kIdxImages) {
        throw FormatError(fmt::format("'{}' has IDX magic {:#010x}, expected {:#010x}", images.string(), magic,
                                      kIdxImages),
                          0);
    }
    const std::size_t count = be32(img, 4);
    ImageSet set;
    set.rows = be32(img, 8);
    set.cols = be32(img, 12);
    const std::size_t expected = 16 + count * set.rows * set.cols;
    if (img.size() != expected) {
        throw FormatError(fmt::format("'{}' holds {} bytes, header implies {}", images.string(), img.size(), expected),
                          std::min(img.size(), expected));
    }
    set.pixels.assign(img.begin() + 16, img.end());

    const auto lab = slurp(labels);
    if (const auto magic = be32(lab, 0); magic != kIdxLabels) {
        throw FormatError(fmt::format("'{}' has IDX magic {:#010x}, expected {:#010x}", labels.string(), magic,
                                      kIdxLabels),
                          0);
    }
    if (const std::size_t n = be32(lab, 4); n != count) {
        throw FormatError(fmt::format("'{}' lists {} labels for {} images", labels.string(), n, count), 4);
    }
    if (lab.size() != 8 + count) {
        throw FormatError(fmt::format("'{}' holds {} bytes, header implies {}", labels.string(), lab.size(), 8 + count),
                          std::min(lab.size(), 8 + count));
    }
    set.labels.assign(lab.begin() + 8, lab.end());
    return set;
}

ImageSet read_cifar_batch(const fs::path& path) {
    const auto bytes = slurp(path);
    if (bytes.size() % kCifarRecord != 0) {
        const std::size_t last = bytes.size() - bytes.size() % kCifarRecord;
        throw FormatError(fmt::format("'{}' ends inside a {}-byte record", path.string(), kCifarRecord), last);
    }
    ImageSet set;
    set.rows = set.cols = kCifarSide;
    set.channels = 3;
    const std::size_t count = bytes.size() / kCifarRecord;
    set.pixels.reserve(count * (kCifarRecord - 1));
    for (std::size_t i = 0; i < count; ++i) {
        const auto* rec = bytes.data() + i * kCifarRecord;
        if (rec[0] > 9) {
            throw FormatError(fmt::format("CIFAR label {} out of range", rec[0]), i * kCifarRecord);
        }
        set.labels.push_back(rec[0]);
        set.pixels.insert(set.pixels.end(), rec + 1, rec + kCifarRecord);
    }
    return set;
}

ImageSet read_images(const TaskConfig& cfg, bool train) {
    const auto& path = train ? cfg.train_path : cfg.test_path;
    if (cfg.image_format == ImageFormat::cifar) {
        return read_cifar_batch(path);
    }
    return read_idx(path, train ? cfg.train_labels_path : cfg.test_labels_path);
}

std::vector<float> to_grayscale_square(const ImageSet& set, std::size_t index, std::size_t side) {
    const auto px = set.image(index);
    const std::size_t plane = set.rows * set.cols;
    std::vector<float> out(side * side, 0.0f);
    const auto off_r = static_cast<std::ptrdiff_t>(side) / 2 - static_cast<std::ptrdiff_t>(set.rows) / 2;
    const auto off_c = static_cast<std::ptrdiff_t>(side) / 2 - static_cast<std::ptrdiff_t>(set.cols) / 2;
    for (std::size_t r = 0; r < set.rows; ++r) {
        const auto rr = static_cast<std::ptrdiff_t>(r) + off_r;
        if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(side)) {
            continue;
        }
        for (std::size_t c = 0; c < set.cols; ++c) {
            const auto cc = static_cast<std::ptrdiff_t>(c) + off_c;
            if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(side)) {
                continue;
            }
            const std::size_t k = r * set.cols + c;
            float v;
            if (set.channels == 3) {
                v = 0.299f * px[k] + 0.587f * px[plane + k] + 0.114f * px[2 * plane + k];
            } else {
                v = px[k];
            }
            out[static_cast<std::size_t>(rr) * side + static_cast<std::size_t>(cc)] = v / 255.0f;
        }
    }
    return out;
}

std::vector<float> patchify(std::span<const float> image, std::size_t side, std::size_t patch) {
    if (patch == 0 || side % patch != 0 || image.size() != side * side) {
        throw ShapeError(fmt::format("cannot cut {}x{} patches from a {}-pixel image of side {}", patch, patch,
                                     image.size(), side));
    }
    const std::size_t grid = side / patch;
    std::vector<float> out;
    out.reserve(image.size());
    for (std::size_t pr = 0; pr < grid; ++pr) {
        for (std::size_t pc = 0; pc < grid; ++pc) {
            for (std::size_t i = 0; i < patch; ++i) {
                for (std::size_t j = 0; j < patch; ++j) {
                    out.push_back(image[(pr * patch + i) * side + pc * patch + j]);
                }
            }
        }
    }
    return out;
}

PixelStats pixel_stats(const ImageSet& set, std::size_t side) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < set.count(); ++i) {
        for (float v : to_grayscale_square(set, i, side)) {
            sum += v;
            sq += static_cast<double>(v) * v;
            ++n;
        }
    }
    if (n == 0) {
        return {};
    }
    PixelStats s;
    s.mean = sum / n;
    const double var = std::max(0.0, sq / n - s.mean * s.mean);
    s.std = var > 0.0 ? std::sqrt(var) : 1.0;
    return s;
}

namespace {

std::vector<TaskInstance> image_instances(const ImageSet& set, const TaskConfig& cfg, const PixelStats& stats,
                                          bool patches) {
    std::vector<TaskInstance> out;
    out.reserve(set.count());
    const auto mean = static_cast<float>(stats.mean);
    const auto inv_std = static_cast<float>(1.0 / stats.std);
    for (std::size_t i = 0; i < set.count(); ++i) {
        if (set.labels[i] < 0 || static_cast<std::size_t>(set.labels[i]) >= cfg.n_classes) {
            throw ConfigError(fmt::format("image {} has label {} outside [0, {})", i, set.labels[i], cfg.n_classes));
        }
        auto gray = to_grayscale_square(set, i, cfg.image_side);
        TaskInstance inst;
        if (patches) {
            inst.tokens = patchify(gray, cfg.image_side, cfg.patch);
            inst.d_in = cfg.patch * cfg.patch;
        } else {
            inst.tokens = std::move(gray);
            inst.d_in = 1;
        }
        for (auto& v : inst.tokens) {
            v = (v - mean) * inv_std;
        }
        inst.length = inst.tokens.size() / inst.d_in;
        inst.label = set.labels[i];
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace

std::vector<TaskInstance> load_image_patches(const ImageSet& set, const TaskConfig& cfg, const PixelStats& stats) {
    return image_instances(set, cfg, stats, true);
}

std::vector<TaskInstance> load_image_flat_lra(const ImageSet& set, const TaskConfig& cfg, const PixelStats& stats) {
    return image_instances(set, cfg, stats, false);
}

SequenceSet load_labeled_sequences(const fs::path& path, const TaskConfig& cfg) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open sequence file '{}'", path.string()));
    }
    std::array<int, 256> code;
    code.fill(-1);
    for (std::size_t k = 0; k < cfg.alphabet.size(); ++k) {
        code[static_cast<unsigned char>(cfg.alphabet[k])] = static_cast<int>(k);
    }
    const std::size_t dim = cfg.alphabet.size();

    SequenceSet set;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) {
            throw RecordError("record needs 'SEQ<TAB>LABEL'", lineno, 0);
        }
        const std::string_view seq(line.data(), tab);
        int label = 0;
        try {
            std::size_t used = 0;
            label = std::stoi(line.substr(tab + 1), &used);
            if (used != line.size() - tab - 1) {
                throw std::invalid_argument("trailing text");
            }
        } catch (const std::exception&) {
            throw RecordError(fmt::format("bad label '{}'", line.substr(tab + 1)), lineno, tab + 1);
        }
        if (label < 0 || static_cast<std::size_t>(label) >= cfg.n_classes) {
            throw RecordError(fmt::format("label {} outside [0, {})", label, cfg.n_classes), lineno, tab + 1);
        }
        if (seq.empty()) {
            throw RecordError("empty sequence", lineno, 0);
        }
        if (seq.size() >= cfg.max_len) {
            ++set.skipped;
            continue;
        }
        TaskInstance inst;
        inst.d_in = dim;
        inst.length = seq.size();
        inst.tokens.assign(seq.size() * dim, 0.0f);
        for (std::size_t t = 0; t < seq.size(); ++t) {
            const int k = code[static_cast<unsigned char>(seq[t])];
            if (k < 0) {
                throw RecordError(fmt::format("unknown symbol '{}'", seq[t]), lineno, t);
            }
            inst.tokens[t * dim + static_cast<std::size_t>(k)] = 1.0f;
        }
        inst.label = label;
        set.examples.push_back(std::move(inst));
    }
    return set;
}

}  // namespace fpt
