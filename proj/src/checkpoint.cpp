#include "fpt/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include <fmt/format.h>

#include "fpt/hashing.hpp"

namespace fpt {

namespace fs = std::filesystem;
using nlohmann::json;
using Kind = CheckpointError::Kind;

namespace {

constexpr char kMagic[4] = {'F', 'P', 'T', 'C'};

template <typename T>
T byteswap(T value) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

template <typename T>
void write_le(std::ostream& out, T value) {
    if constexpr (std::endian::native == std::endian::big) {
        value = byteswap(value);
    }
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        value = byteswap(value);
    }
    return value;
}

/// Writes floats as little-endian bytes.
void write_floats(std::ostream& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (float v : values) {
            write_le(out, std::bit_cast<std::uint32_t>(v));
        }
    }
}

std::uint32_t crc_le(std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        return crc32(values.data(), values.size_bytes());
    } else {
        std::vector<std::uint32_t> swapped(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            swapped[i] = byteswap(std::bit_cast<std::uint32_t>(values[i]));
        }
        return crc32(swapped.data(), swapped.size() * 4);
    }
}

void fix_endianness(std::span<float> values) {
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& v : values) {
            v = std::bit_cast<float>(byteswap(std::bit_cast<std::uint32_t>(v)));
        }
    }
}

Shape shape_from_json(const json& j) {
    Shape s;
    for (const auto& d : j) {
        s.push_back(d.get<std::size_t>());
    }
    return s;
}

struct IndexEntry {
    std::string name;
    ParamGroup group;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t nbytes;
    std::uint32_t crc;
};

struct Container {
    json header;
    std::vector<IndexEntry> index;
    std::uint64_t payload_start = 0;
    std::uint64_t file_size = 0;
};

void write_container(const fs::path& path, const std::optional<ModelSpec>& spec,
                     const std::vector<CheckpointTensor>& tensors, const json& meta) {
    json header;
    header["format"] = "FPTC";
    header["version"] = kCheckpointVersion;
    header["spec"] = spec ? spec_to_json(*spec) : json(nullptr);
    header["meta"] = meta;
    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        const auto nbytes = static_cast<std::uint64_t>(t.tensor.numel()) * 4;
        index.push_back({{"name", t.name},
                         {"group", std::string(to_string(t.group))},
                         {"dtype", "f32"},
                         {"shape", t.tensor.shape()},
                         {"offset", offset},
                         {"nbytes", nbytes},
                         {"crc32", crc_le(t.tensor.data())}});
        offset += nbytes;
    }
    header["tensors"] = std::move(index);
    const std::string text = header.dump();

    const fs::path tmp = path.string() + fmt::format(".tmp-{}", ::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError(Kind::io, fmt::format("cannot open '{}' for writing", tmp.string()));
        }
        out.write(kMagic, 4);
        write_le<std::uint32_t>(out, kCheckpointVersion);
        write_le<std::uint64_t>(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& t : tensors) {
            write_floats(out, t.tensor.data());
        }
        out.flush();
        if (!out) {
            throw CheckpointError(Kind::io, fmt::format("write to '{}' failed", tmp.string()));
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw CheckpointError(Kind::io, fmt::format("cannot move checkpoint into '{}': {}", path.string(), ec.message()));
    }
}

Container read_container_header(std::ifstream& in, const fs::path& path) {
    if (!in) {
        throw CheckpointError(Kind::io, fmt::format("cannot open checkpoint '{}'", path.string()));
    }
    Container c;
    in.seekg(0, std::ios::end);
    c.file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError(Kind::bad_magic, fmt::format("'{}' is not an FPTC container", path.string()));
    }
    const auto version = read_le<std::uint32_t>(in);
    if (!in || version != kCheckpointVersion) {
        throw CheckpointError(Kind::version, fmt::format("'{}' has container version {}, expected {}", path.string(),
                                                         version, kCheckpointVersion));
    }
    const auto header_len = read_le<std::uint64_t>(in);
    if (!in || header_len > c.file_size - 16) {
        throw CheckpointError(Kind::checksum, fmt::format("'{}' is truncated inside its header", path.string()));
    }
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    c.payload_start = 16 + header_len;
    try {
        c.header = json::parse(text);
        std::uint64_t expected = 0;
        for (const auto& e : c.header.at("tensors")) {
            IndexEntry entry{e.at("name").get<std::string>(),
                             parse_group(e.at("group").get<std::string>()),
                             shape_from_json(e.at("shape")),
                             e.at("offset").get<std::uint64_t>(),
                             e.at("nbytes").get<std::uint64_t>(),
                             e.at("crc32").get<std::uint32_t>()};
            if (e.at("dtype").get<std::string>() != "f32") {
                throw CheckpointError(Kind::header, fmt::format("tensor '{}' has unsupported dtype", entry.name));
            }
            if (entry.offset != expected || entry.nbytes != shape_numel(entry.shape) * 4) {
                throw CheckpointError(Kind::header,
                                      fmt::format("tensor '{}' has an inconsistent offset or size", entry.name));
            }
            expected += entry.nbytes;
            c.index.push_back(std::move(entry));
        }
        if (c.payload_start + expected != c.file_size) {
            throw CheckpointError(Kind::checksum,
                                  fmt::format("'{}' payload is {} bytes, index describes {}: integrity check failed",
                                              path.string(), c.file_size - std::min(c.file_size, c.payload_start),
                                              expected));
        }
    } catch (const json::exception& e) {
        throw CheckpointError(Kind::header, fmt::format("bad checkpoint header in '{}': {}", path.string(), e.what()));
    }
    return c;
}

void read_tensor_into(std::ifstream& in, const Container& c, const IndexEntry& e, std::span<float> dst) {
    in.seekg(static_cast<std::streamoff>(c.payload_start + e.offset));
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(e.nbytes));
    if (!in || crc32(dst.data(), e.nbytes) != e.crc) {
        throw CheckpointError(Kind::checksum, fmt::format("checksum mismatch in tensor '{}'", e.name));
    }
    fix_endianness(dst);
}

}  // namespace

// ------------------------------------------------------------------ spec json

json spec_to_json(const ModelSpec& s) {
    return {{"family", std::string(to_string(s.family))},
            {"n_layers", s.n_layers},
            {"n_dim", s.n_dim},
            {"n_heads", s.n_heads},
            {"max_len", s.max_len},
            {"d_in", s.d_in},
            {"d_out", s.d_out},
            {"lstm_residual", s.lstm_residual},
            {"lstm_positional", s.lstm_positional},
            {"dropout", s.dropout},
            {"readout", std::string(to_string(s.readout))}};
}

ModelSpec spec_from_json(const json& j) {
    if (!j.is_object()) {
        throw ConfigError("model spec must be a JSON object");
    }
    ModelSpec s;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "family") {
                s.family = parse_family(value.get<std::string>());
            } else if (key == "n_layers") {
                s.n_layers = value.get<std::size_t>();
            } else if (key == "n_dim") {
                s.n_dim = value.get<std::size_t>();
            } else if (key == "n_heads") {
                s.n_heads = value.get<std::size_t>();
            } else if (key == "max_len") {
                s.max_len = value.get<std::size_t>();
            } else if (key == "d_in") {
                s.d_in = value.get<std::size_t>();
            } else if (key == "d_out") {
                s.d_out = value.get<std::size_t>();
            } else if (key == "lstm_residual") {
                s.lstm_residual = value.get<bool>();
            } else if (key == "lstm_positional") {
                s.lstm_positional = value.get<bool>();
            } else if (key == "dropout") {
                s.dropout = value.get<float>();
            } else if (key == "readout") {
                s.readout = parse_readout(value.get<std::string>());
            } else {
                throw ConfigError(fmt::format("unknown model key '{}'", key));
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad model spec: {}", e.what()));
    }
    return s;
}

// ------------------------------------------------------------------ checkpoint

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const CheckpointTensor& t) { return t.name == name; });
    return it == tensors.end() ? nullptr : &*it;
}

const ModelSpec& Checkpoint::model_spec() const {
    if (!spec) {
        throw ConfigError("checkpoint carries no model spec");
    }
    return *spec;
}

Checkpoint to_checkpoint(const Model& model) {
    Checkpoint c;
    c.spec = model.spec();
    for (const auto& p : model.registry().params()) {
        c.tensors.push_back({p.name, p.group, p.tensor});
    }
    return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model m = allocate_model(ckpt.model_spec());
    std::set<std::string> known;
    for (auto& p : m.registry().params()) {
        known.insert(p.name);
        const auto* src = ckpt.find(p.name);
        if (src == nullptr) {
            throw CheckpointError(Kind::missing_tensor, fmt::format("checkpoint lacks tensor '{}'", p.name));
        }
        if (src->tensor.shape() != p.tensor.shape()) {
            throw CheckpointError(Kind::shape, fmt::format("tensor '{}' has shape {}, model expects {}", p.name,
                                                           shape_str(src->tensor.shape()),
                                                           shape_str(p.tensor.shape())));
        }
        auto v = src->tensor.data();
        std::copy(v.begin(), v.end(), p.tensor.data().begin());
    }
    for (const auto& t : ckpt.tensors) {
        if (!known.count(t.name)) {
            throw CheckpointError(Kind::unknown_tensor, fmt::format("unknown tensor '{}' in checkpoint", t.name));
        }
    }
    return m;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    write_container(path, ckpt.spec, ckpt.tensors, ckpt.meta);
}

void save(const Model& model, const fs::path& path, json meta) {
    auto c = to_checkpoint(model);
    c.meta = std::move(meta);
    save_checkpoint(c, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    const auto c = read_container_header(in, path);
    Checkpoint ckpt;
    if (!c.header.at("spec").is_null()) {
        ckpt.spec = spec_from_json(c.header.at("spec"));
    }
    ckpt.meta = c.header.value("meta", json::object());
    for (const auto& e : c.index) {
        auto t = Tensor::zeros(e.shape);
        read_tensor_into(in, c, e, t.data());
        ckpt.tensors.push_back({e.name, e.group, std::move(t)});
    }
    return ckpt;
}

Model load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    const auto c = read_container_header(in, path);
    if (c.header.at("spec").is_null()) {
        throw CheckpointError(Kind::header, fmt::format("'{}' holds no model spec", path.string()));
    }
    Model m = allocate_model(spec_from_json(c.header.at("spec")));
    std::map<std::string, const IndexEntry*> by_name;
    for (const auto& e : c.index) {
        if (m.registry().find(e.name) == nullptr) {
            throw CheckpointError(Kind::unknown_tensor, fmt::format("unknown tensor '{}' in '{}'", e.name, path.string()));
        }
        if (!by_name.emplace(e.name, &e).second) {
            throw CheckpointError(Kind::header, fmt::format("tensor '{}' listed twice", e.name));
        }
    }
    for (auto& p : m.registry().params()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw CheckpointError(Kind::missing_tensor, fmt::format("'{}' lacks tensor '{}'", path.string(), p.name));
        }
        const auto& e = *it->second;
        if (e.shape != p.tensor.shape() || e.group != p.group) {
            throw CheckpointError(Kind::shape, fmt::format("tensor '{}' is {} ({}), model expects {} ({})", p.name,
                                                           shape_str(e.shape), to_string(e.group),
                                                           shape_str(p.tensor.shape()), to_string(p.group)));
        }
        read_tensor_into(in, c, e, p.tensor.data());
    }
    return m;
}

std::vector<char> read_payload_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    const auto c = read_container_header(in, path);
    std::vector<char> bytes(c.file_size - c.payload_start);
    in.seekg(static_cast<std::streamoff>(c.payload_start));
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return bytes;
}

// ------------------------------------------------------------------ foreign import

NameMap NameMap::read(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open name map '{}'", path.string()));
    }
    NameMap map;
    if (path.extension() == ".json") {
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError(fmt::format("bad name map '{}': {}", path.string(), e.what()));
        }
        for (const auto& [k, v] : j.items()) {
            map.entries.emplace_back(k, v.get<std::string>());
        }
        return map;
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw RecordError("name map line needs 'foreign<TAB>native'", lineno, 0);
        }
        map.entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return map;
}

NameMap NameMap::identity(const ModelSpec& spec) {
    NameMap map;
    const Model shapes = allocate_model(spec);
    for (const auto& p : shapes.registry().params()) {
        map.entries.emplace_back(p.name, p.name);
    }
    return map;
}

ImportError::ImportError(std::vector<std::string> problems)
    : CheckpointError(Kind::missing_tensor, fmt::format("foreign import failed:\n  {}", fmt::join(problems, "\n  "))),
      problems_(std::move(problems)) {}

namespace {

std::map<std::string, Tensor> read_safetensors(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(Kind::io, fmt::format("cannot open '{}'", path.string()));
    }
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    const auto header_len = read_le<std::uint64_t>(in);
    if (!in || header_len > file_size - 8) {
        throw CheckpointError(Kind::header, fmt::format("'{}' is not a safetensors file", path.string()));
    }
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw CheckpointError(Kind::header, fmt::format("bad safetensors header in '{}': {}", path.string(), e.what()));
    }
    const std::uint64_t data_start = 8 + header_len;
    std::map<std::string, Tensor> out;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            continue;
        }
        if (info.at("dtype").get<std::string>() != "F32") {
            throw CheckpointError(Kind::header, fmt::format("tensor '{}' is {}, only F32 is supported", name,
                                                            info.at("dtype").get<std::string>()));
        }
        const Shape shape = shape_from_json(info.at("shape"));
        const auto begin = info.at("data_offsets")[0].get<std::uint64_t>();
        const auto end = info.at("data_offsets")[1].get<std::uint64_t>();
        if (end - begin != shape_numel(shape) * 4 || data_start + end > file_size) {
            throw CheckpointError(Kind::checksum, fmt::format("tensor '{}' extends past the end of '{}'", name,
                                                              path.string()));
        }
        auto t = Tensor::zeros(shape);
        in.seekg(static_cast<std::streamoff>(data_start + begin));
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(end - begin));
        fix_endianness(t.data());
        out.emplace(name, std::move(t));
    }
    return out;
}

bool is_native(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    char magic[4] = {};
    in.read(magic, 4);
    return in && std::memcmp(magic, kMagic, 4) == 0;
}

}  // namespace

Checkpoint import_foreign(const fs::path& path, const NameMap& map, const ModelSpec& target) {
    std::map<std::string, Tensor> foreign;
    if (is_native(path)) {
        for (auto& t : read_checkpoint(path).tensors) {
            foreign.emplace(t.name, t.tensor);
        }
    } else {
        foreign = read_safetensors(path);
    }

    const Model shape_model = allocate_model(target);
    std::map<std::string, std::string> native_to_foreign;
    std::vector<std::string> problems;
    for (const auto& [src, dst] : map.entries) {
        if (shape_model.registry().find(dst) == nullptr) {
            problems.push_back(fmt::format("map target '{}' (from '{}') is not a tensor of the target model", dst, src));
        } else if (!native_to_foreign.emplace(dst, src).second) {
            problems.push_back(fmt::format("'{}' is mapped more than once", dst));
        }
    }

    Checkpoint out;
    out.spec = target;
    out.meta = {{"imported_from", path.string()}};
    for (const auto& p : shape_model.registry().params()) {
        auto it = native_to_foreign.find(p.name);
        if (it == native_to_foreign.end()) {
            problems.push_back(fmt::format("unmapped: {}", p.name));
            continue;
        }
        auto f = foreign.find(it->second);
        if (f == foreign.end()) {
            problems.push_back(fmt::format("missing in file: '{}' (for {})", it->second, p.name));
            continue;
        }
        if (f->second.shape() != p.tensor.shape()) {
            problems.push_back(fmt::format("shape mismatch: {} is {} in the file, expected {}", p.name,
                                           shape_str(f->second.shape()), shape_str(p.tensor.shape())));
            continue;
        }
        out.tensors.push_back({p.name, p.group, f->second});
    }
    if (!problems.empty()) {
        throw ImportError(std::move(problems));
    }
    return out;
}

}  // namespace fpt
