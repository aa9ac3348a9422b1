#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "neuronfuse/dtypes.hpp"
#include "neuronfuse/errors.hpp"
#include "neuronfuse/tensor.hpp"

namespace nfuse {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Container file layout:
//   [8-byte little-endian u64: header length n]
//   [n bytes of UTF-8 JSON: tensor name -> {dtype, shape, data_offsets}]
//   [raw tensor payload]
// data_offsets are relative to the payload start (byte 8 + n). A store is
// either one such file or a directory of shard files plus an index file
// "model.safetensors.index.json" holding {"weight_map": {name: shard file}}.

inline constexpr const char* kIndexFileName = "model.safetensors.index.json";
inline constexpr uint64_t kDefaultShardBudget = 1ull << 30;
inline constexpr uint64_t kMaxHeaderBytes = 256ull << 20;

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<int64_t> shape;
    std::string shard;       // file name within the store root ("" until assigned)
    uint64_t byte_offset = 0; // relative to that shard's payload start
    uint64_t byte_length = 0;

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
};

namespace detail {

inline void read_exact(std::ifstream& in, void* dst, size_t n, const std::string& what) {
    in.read(reinterpret_cast<char*>(dst), std::streamsize(n));
    if (in.gcount() != std::streamsize(n))
        throw FormatError("unexpected end of file while reading " + what);
}

inline void validate_shape(const std::vector<int64_t>& shape, const std::string& name) {
    if (shape.empty() || shape.size() > 2)
        throw FormatError("tensor '" + name + "' has rank " + std::to_string(shape.size()) +
                          "; only 1-D and 2-D tensors are supported");
    for (int64_t d : shape)
        if (d <= 0)
            throw FormatError("tensor '" + name + "' has non-positive dimension");
}

// Parse one container file's header. Returns metas (offsets relative to the
// payload) plus the payload size and any __metadata__ object.
struct ContainerHeader {
    std::map<std::string, TensorMeta> tensors;
    uint64_t payload_size = 0;
    json metadata;
};

inline ContainerHeader read_container_header(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + file.string() + "'");
    in.seekg(0, std::ios::end);
    uint64_t file_size = uint64_t(in.tellg());
    in.seekg(0);

    uint8_t lenb[8];
    read_exact(in, lenb, 8, "header length of '" + file.string() + "'");
    uint64_t hlen = 0;
    for (int i = 7; i >= 0; --i) hlen = hlen << 8 | lenb[i];
    if (hlen > kMaxHeaderBytes || 8 + hlen > file_size)
        throw FormatError("header length " + std::to_string(hlen) + " at byte 0 of '" +
                          file.string() + "' exceeds file size " + std::to_string(file_size));

    std::string text(hlen, '\0');
    read_exact(in, text.data(), hlen, "header of '" + file.string() + "'");

    json h = json::parse(text, nullptr, false);
    if (h.is_discarded() || !h.is_object())
        throw FormatError("malformed JSON header at byte 8 of '" + file.string() + "'");

    ContainerHeader out;
    out.payload_size = file_size - 8 - hlen;

    for (auto& [name, entry] : h.items()) {
        if (name == "__metadata__") {
            out.metadata = entry;
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw FormatError("tensor '" + name + "' in '" + file.string() +
                              "' lacks dtype/shape/data_offsets");
        TensorMeta m;
        m.name = name;
        m.dtype = parse_dtype(entry["dtype"].get<std::string>());
        m.shape = entry["shape"].get<std::vector<int64_t>>();
        validate_shape(m.shape, name);
        auto off = entry["data_offsets"].get<std::vector<uint64_t>>();
        if (off.size() != 2 || off[1] < off[0])
            throw FormatError("tensor '" + name + "' has malformed data_offsets");
        m.byte_offset = off[0];
        m.byte_length = off[1] - off[0];
        uint64_t expect = uint64_t(m.numel()) * dtype_width(m.dtype);
        if (m.byte_length != expect)
            throw CorruptionError("tensor '" + name + "' declares " + std::to_string(m.byte_length) +
                                  " bytes but dtype x shape needs " + std::to_string(expect));
        if (off[1] > out.payload_size)
            throw CorruptionError("tensor '" + name + "' extends past the payload of '" +
                                  file.string() + "'");
        out.tensors.emplace(name, std::move(m));
    }

    // ranges within one shard must not overlap
    std::vector<const TensorMeta*> order;
    order.reserve(out.tensors.size());
    for (auto& [_, m] : out.tensors) order.push_back(&m);
    std::sort(order.begin(), order.end(),
              [](const TensorMeta* a, const TensorMeta* b) { return a->byte_offset < b->byte_offset; });
    for (size_t i = 1; i < order.size(); ++i)
        if (order[i]->byte_offset < order[i - 1]->byte_offset + order[i - 1]->byte_length)
            throw CorruptionError("tensors '" + order[i - 1]->name + "' and '" + order[i]->name +
                                  "' overlap in '" + file.string() + "'");
    return out;
}

inline std::string format_shape(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

} // namespace detail

// Read side. Opening parses headers only; tensor data is read on demand, so
// concurrent read_tensor calls are safe (each opens its own stream).
class WeightStore {
public:
    static WeightStore open(const fs::path& path) {
        WeightStore s;
        std::error_code ec;
        if (fs::is_directory(path, ec)) {
            s.root_ = path;
            fs::path index = path / kIndexFileName;
            if (!fs::exists(index))
                throw FormatError("directory '" + path.string() + "' has no " +
                                  std::string(kIndexFileName));
            std::ifstream in(index);
            if (!in)
                throw IoError("cannot open '" + index.string() + "'");
            json j = json::parse(in, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("weight_map") ||
                !j["weight_map"].is_object())
                throw FormatError("index '" + index.string() + "' lacks a weight_map object");

            std::map<std::string, std::string> weight_map;
            for (auto& [name, file] : j["weight_map"].items())
                weight_map.emplace(name, file.get<std::string>());

            std::map<std::string, detail::ContainerHeader> headers;
            for (auto& [name, file] : weight_map) {
                auto it = headers.find(file);
                if (it == headers.end()) {
                    it = headers.emplace(file, detail::read_container_header(path / file)).first;
                    s.shard_files_.push_back(file);
                }
                auto t = it->second.tensors.find(name);
                if (t == it->second.tensors.end())
                    throw CorruptionError("index maps '" + name + "' to '" + file +
                                          "' but that shard does not contain it");
                TensorMeta m = t->second;
                m.shard = file;
                s.manifest_.emplace(name, std::move(m));
            }
            // a shard tensor missing from the index would be unreachable
            for (auto& [file, h] : headers) {
                for (auto& [name, _] : h.tensors)
                    if (!weight_map.count(name))
                        throw CorruptionError("shard '" + file + "' contains '" + name +
                                              "' which the index does not list");
                if (!h.metadata.is_null() && s.metadata_.is_null()) s.metadata_ = h.metadata;
            }
        } else if (fs::exists(path)) {
            s.root_ = path.parent_path();
            auto h = detail::read_container_header(path);
            s.single_file_ = path;
            s.metadata_ = h.metadata;
            std::string file = path.filename().string();
            s.shard_files_.push_back(file);
            for (auto& [name, m] : h.tensors) {
                TensorMeta mm = m;
                mm.shard = file;
                s.manifest_.emplace(name, std::move(mm));
            }
        } else {
            throw IoError("no such file or directory: '" + path.string() + "'");
        }
        return s;
    }

    const std::map<std::string, TensorMeta>& manifest() const { return manifest_; }
    const std::vector<std::string>& shard_files() const { return shard_files_; }
    const json& metadata() const { return metadata_; }
    const fs::path& root() const { return root_; }

    bool contains(const std::string& name) const { return manifest_.count(name) != 0; }

    const TensorMeta& meta(const std::string& name) const {
        auto it = manifest_.find(name);
        if (it == manifest_.end())
            throw LookupError("no tensor named '" + name + "' in store");
        return it->second;
    }

    ByteBuf read_raw(const std::string& name) const {
        const TensorMeta& m = meta(name);
        fs::path file = shard_path(m.shard);
        std::ifstream in(file, std::ios::binary);
        if (!in)
            throw IoError("cannot open '" + file.string() + "'");
        uint8_t lenb[8];
        detail::read_exact(in, lenb, 8, "header length");
        uint64_t hlen = 0;
        for (int i = 7; i >= 0; --i) hlen = hlen << 8 | lenb[i];
        in.seekg(std::streamoff(8 + hlen + m.byte_offset));
        ByteBuf out(size_t(m.byte_length));
        detail::read_exact(in, out.data(), out.size(), "tensor '" + name + "'");
        return out;
    }

    // Weights widen to f32 exactly (f16/bf16 are subsets of f32).
    Tensor read_tensor(const std::string& name) const {
        const TensorMeta& m = meta(name);
        if (m.dtype == DType::U8)
            throw ValidationError("tensor '" + name + "' is a U8 mask; use read_mask");
        ByteBuf raw = read_raw(name);
        Tensor t;
        t.shape = m.shape;
        t.data.resize(size_t(m.numel()));
        decode_values(std::span<const uint8_t>(raw.data(), raw.size()), m.dtype,
                      std::span<float>(t.data.data(), t.data.size()));
        return t;
    }

    ByteBuf read_mask(const std::string& name) const {
        const TensorMeta& m = meta(name);
        if (m.dtype != DType::U8)
            throw ValidationError("tensor '" + name + "' is not a U8 mask");
        ByteBuf raw = read_raw(name);
        for (uint8_t b : raw)
            if (b > 1)
                throw CorruptionError("mask '" + name + "' holds a byte other than 0/1");
        return raw;
    }

    fs::path shard_path(const std::string& shard) const {
        if (single_file_ && single_file_->filename() == shard) return *single_file_;
        return root_ / shard;
    }

    int64_t total_parameters() const {
        int64_t n = 0;
        for (auto& [_, m] : manifest_) n += m.numel();
        return n;
    }

private:
    fs::path root_;
    std::optional<fs::path> single_file_;
    std::vector<std::string> shard_files_;
    std::map<std::string, TensorMeta> manifest_;
    json metadata_;
};

inline WeightStore open_store(const fs::path& path) { return WeightStore::open(path); }

// Pairwise compatibility: same names, same shapes. Dtypes may differ; all
// arithmetic happens in f32 anyway.
struct CompatReport {
    std::vector<std::string> matched;
    std::vector<std::string> missing_in_a;
    std::vector<std::string> missing_in_b;
    struct ShapeMismatch {
        std::string name;
        std::vector<int64_t> shape_a, shape_b;
    };
    std::vector<ShapeMismatch> shape_mismatches;

    bool compatible() const {
        return missing_in_a.empty() && missing_in_b.empty() && shape_mismatches.empty();
    }

    json to_json() const {
        json sm = json::array();
        for (auto& s : shape_mismatches)
            sm.push_back({{"name", s.name}, {"shape_a", s.shape_a}, {"shape_b", s.shape_b}});
        return json{{"compatible", compatible()},
                    {"matched", matched},
                    {"missing_in_a", missing_in_a},
                    {"missing_in_b", missing_in_b},
                    {"shape_mismatches", sm}};
    }
};

inline CompatReport validate_pair(const WeightStore& a, const WeightStore& b) {
    CompatReport r;
    for (auto& [name, ma] : a.manifest()) {
        auto it = b.manifest().find(name);
        if (it == b.manifest().end()) {
            r.missing_in_b.push_back(name);
        } else if (it->second.shape != ma.shape) {
            r.shape_mismatches.push_back({name, ma.shape, it->second.shape});
        } else {
            r.matched.push_back(name);
        }
    }
    for (auto& [name, _] : b.manifest())
        if (!a.manifest().count(name)) r.missing_in_a.push_back(name);
    return r;
}

// Write side. Tensors are declared up front (sorted by name), assigned to
// shards greedily first-fit against the payload budget, and streamed out in
// declaration order with a small staging buffer, so the writer never holds a
// whole encoded tensor.
struct PendingTensor {
    std::string name;
    DType dtype = DType::F32;
    std::vector<int64_t> shape;

    uint64_t byte_length() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return uint64_t(n) * dtype_width(dtype);
    }
};

class StoreWriter {
public:
    StoreWriter(fs::path dir, std::vector<PendingTensor> tensors,
                uint64_t shard_budget = kDefaultShardBudget, json extra_metadata = json())
        : dir_(std::move(dir)), tensors_(std::move(tensors)), metadata_(std::move(extra_metadata)) {
        if (shard_budget == 0)
            throw ConfigError("shard budget must be positive");
        for (size_t i = 1; i < tensors_.size(); ++i)
            if (tensors_[i - 1].name >= tensors_[i].name)
                throw ConfigError("writer requires tensors sorted by unique name");
        for (auto& t : tensors_)
            detail::validate_shape(t.shape, t.name);

        // first-fit: each tensor lands in the lowest-numbered shard with room;
        // a tensor larger than the budget gets a shard of its own
        std::vector<uint64_t> used;
        shard_of_.resize(tensors_.size());
        for (size_t i = 0; i < tensors_.size(); ++i) {
            uint64_t len = tensors_[i].byte_length();
            size_t s = used.size();
            for (size_t j = 0; j < used.size(); ++j) {
                if (used[j] + len <= shard_budget) {
                    s = j;
                    break;
                }
            }
            if (s == used.size()) used.push_back(0);
            shard_of_[i] = s;
            offset_of_.push_back(used[s]);
            used[s] += len;
        }
        shard_count_ = used.size() ? used.size() : 1;

        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (!fs::is_directory(dir_))
            throw IoError("cannot create output directory '" + dir_.string() + "'");
    }

    static std::string shard_name(size_t index, size_t count) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "model-%05zu-of-%05zu.safetensors", index + 1, count);
        return buf;
    }

    // Values are encoded through a fixed-size staging buffer in declaration
    // order. Must be called exactly once per declared tensor, in order.
    void put(const std::string& name, std::span<const float> values) {
        const PendingTensor& t = expect(name);
        if (values.size() != size_t(t.byte_length() / dtype_width(t.dtype)))
            throw ValidationError("tensor '" + name + "' value count mismatch");
        std::ofstream& out = stream_for(shard_of_[next_ - 1]);
        size_t w = dtype_width(t.dtype);
        std::vector<uint8_t> stage;
        constexpr size_t kChunk = 64 * 1024;
        for (size_t pos = 0; pos < values.size(); pos += kChunk) {
            size_t n = std::min(kChunk, values.size() - pos);
            stage.resize(n * w);
            encode_values(values.subspan(pos, n), t.dtype, stage);
            out.write(reinterpret_cast<const char*>(stage.data()), std::streamsize(stage.size()));
        }
        finish_tensor(out);
    }

    void put_raw(const std::string& name, std::span<const uint8_t> bytes) {
        const PendingTensor& t = expect(name);
        if (bytes.size() != t.byte_length())
            throw ValidationError("tensor '" + name + "' byte count mismatch");
        std::ofstream& out = stream_for(shard_of_[next_ - 1]);
        out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        finish_tensor(out);
    }

    // Close shards, write the index. Returns the finished store reopened.
    WeightStore finish() {
        if (next_ != tensors_.size())
            throw ValidationError("writer finished after " + std::to_string(next_) + " of " +
                                  std::to_string(tensors_.size()) + " tensors");
        for (auto& [idx, out] : open_) {
            out.close();
            if (!out)
                throw IoError("failed writing shard " + shard_name(idx, shard_count_));
        }
        open_.clear();

        json weight_map = json::object();
        for (size_t i = 0; i < tensors_.size(); ++i)
            weight_map[tensors_[i].name] = shard_name(shard_of_[i], shard_count_);
        json index{{"weight_map", weight_map}};
        fs::path index_path = dir_ / kIndexFileName;
        std::ofstream out(index_path, std::ios::binary | std::ios::trunc);
        out << index.dump();
        out.close();
        if (!out)
            throw IoError("failed writing '" + index_path.string() + "'");
        return WeightStore::open(dir_);
    }

private:
    const PendingTensor& expect(const std::string& name) {
        if (next_ >= tensors_.size() || tensors_[next_].name != name)
            throw ValidationError("writer expected tensor '" +
                                  (next_ < tensors_.size() ? tensors_[next_].name : "<none>") +
                                  "' but got '" + name + "'");
        return tensors_[next_++];
    }

    std::ofstream& stream_for(size_t shard) {
        auto it = open_.find(shard);
        if (it == open_.end()) {
            fs::path file = dir_ / shard_name(shard, shard_count_);
            auto [it2, _] = open_.emplace(shard, std::ofstream(file, std::ios::binary | std::ios::trunc));
            it = it2;
            if (!it->second)
                throw IoError("cannot create '" + file.string() + "'");
            write_header(it->second, shard);
            remaining_[shard] = 0;
            for (size_t i = 0; i < tensors_.size(); ++i)
                if (shard_of_[i] == shard) ++remaining_[shard];
        }
        return it->second;
    }

    void write_header(std::ofstream& out, size_t shard) {
        json h = json::object();
        if (!metadata_.is_null() && !metadata_.empty()) h["__metadata__"] = metadata_;
        for (size_t i = 0; i < tensors_.size(); ++i) {
            if (shard_of_[i] != shard) continue;
            h[tensors_[i].name] = {{"dtype", dtype_name(tensors_[i].dtype)},
                                   {"shape", tensors_[i].shape},
                                   {"data_offsets",
                                    {offset_of_[i], offset_of_[i] + tensors_[i].byte_length()}}};
        }
        std::string text = h.dump();
        uint64_t hlen = text.size();
        uint8_t lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = uint8_t(hlen >> (8 * i));
        out.write(reinterpret_cast<const char*>(lenb), 8);
        out.write(text.data(), std::streamsize(text.size()));
    }

    void finish_tensor(std::ofstream& out) {
        if (!out)
            throw IoError("write failure in '" + dir_.string() + "'");
        size_t shard = shard_of_[next_ - 1];
        if (--remaining_[shard] == 0) {
            auto it = open_.find(shard);
            it->second.close();
            if (!it->second)
                throw IoError("failed closing shard " + shard_name(shard, shard_count_));
            open_.erase(it);
        }
    }

    fs::path dir_;
    std::vector<PendingTensor> tensors_;
    json metadata_;
    std::vector<size_t> shard_of_;
    std::vector<uint64_t> offset_of_;
    size_t shard_count_ = 1;
    size_t next_ = 0;
    std::map<size_t, std::ofstream> open_;
    std::map<size_t, size_t> remaining_;
};

struct NamedTensor {
    Tensor data;
    DType dtype = DType::F32;
};

using TensorMap = std::map<std::string, NamedTensor>;

namespace detail {

inline void check_finite(const Tensor& t, const std::string& name) {
    for (size_t i = 0; i < t.data.size(); ++i)
        if (!std::isfinite(t.data[i]))
            throw ValidationError("non-finite value in tensor '" + name + "' at index " +
                                  std::to_string(i));
}

} // namespace detail

// Write a sharded store (directory with index) from in-memory tensors.
inline WeightStore write_store(const fs::path& dir, const TensorMap& tensors,
                               uint64_t shard_budget = kDefaultShardBudget,
                               const json& extra_metadata = json()) {
    std::vector<PendingTensor> metas;
    for (auto& [name, t] : tensors) {
        detail::check_finite(t.data, name);
        metas.push_back({name, t.dtype, t.data.shape});
    }
    StoreWriter w(dir, std::move(metas), shard_budget, extra_metadata);
    for (auto& [name, t] : tensors)
        w.put(name, std::span<const float>(t.data.data.data(), t.data.data.size()));
    return w.finish();
}

// Write a single container file (no index). Used for small fixtures.
inline void write_container(const fs::path& file, const TensorMap& tensors,
                            const json& extra_metadata = json()) {
    json h = json::object();
    if (!extra_metadata.is_null() && !extra_metadata.empty()) h["__metadata__"] = extra_metadata;
    uint64_t off = 0;
    for (auto& [name, t] : tensors) {
        detail::check_finite(t.data, name);
        detail::validate_shape(t.data.shape, name);
        uint64_t len = uint64_t(t.data.numel()) * dtype_width(t.dtype);
        h[name] = {{"dtype", dtype_name(t.dtype)},
                   {"shape", t.data.shape},
                   {"data_offsets", {off, off + len}}};
        off += len;
    }
    std::string text = h.dump();
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot create '" + file.string() + "'");
    uint8_t lenb[8];
    uint64_t hlen = text.size();
    for (int i = 0; i < 8; ++i) lenb[i] = uint8_t(hlen >> (8 * i));
    out.write(reinterpret_cast<const char*>(lenb), 8);
    out.write(text.data(), std::streamsize(text.size()));
    std::vector<uint8_t> bytes;
    for (auto& [name, t] : tensors) {
        bytes.resize(size_t(t.data.numel()) * dtype_width(t.dtype));
        encode_values(std::span<const float>(t.data.data.data(), t.data.data.size()), t.dtype, bytes);
        out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    }
    out.close();
    if (!out)
        throw IoError("failed writing '" + file.string() + "'");
}

} // namespace nfuse
