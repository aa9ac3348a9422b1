#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "neuronfuse/weight_store.hpp"

namespace nfuse {

// Task vector: delta = tuned - base, always f32 in memory and on disk.
// The optional mask marks which entries survived a suppression pass;
// mask false implies the stored value is exactly zero.
struct DeltaStore {
    std::map<std::string, Tensor> values;
    std::map<std::string, ByteBuf> mask;

    bool has_mask(const std::string& name) const { return mask.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end())
            throw LookupError("no delta tensor named '" + name + "'");
        return it->second;
    }
};

// Scaling coefficient applied to the delta at merge time.
struct AlphaScale {
    double value = 1.0;

    static AlphaScale checked(double v) {
        if (!std::isfinite(v) || v < 0.0 || v > 2.0)
            throw ConfigError("alpha must be a finite value in [0, 2], got " + std::to_string(v));
        return AlphaScale{v};
    }
};

inline Tensor compute_delta_tensor(const Tensor& base_t, const Tensor& tuned_t,
                                   const std::string& name) {
    if (base_t.shape != tuned_t.shape)
        throw ValidationError("shape mismatch for tensor '" + name + "'");
    Tensor d;
    d.shape = base_t.shape;
    d.data.resize(base_t.data.size());
    for (size_t i = 0; i < d.data.size(); ++i)
        d.data[i] = tuned_t.data[i] - base_t.data[i];
    return d;
}

// base + alpha * delta, accumulated in double and rounded once to f32.
// alpha == 0 short-circuits to an exact copy of base (hard merge).
inline Tensor merge_tensor(const Tensor& base_t, const Tensor& delta_t, double alpha,
                           const std::string& name) {
    if (base_t.shape != delta_t.shape)
        throw ValidationError("shape mismatch for tensor '" + name + "'");
    Tensor m;
    m.shape = base_t.shape;
    m.data.resize(base_t.data.size());
    if (alpha == 0.0) {
        m.data = base_t.data;
        return m;
    }
    for (size_t i = 0; i < m.data.size(); ++i) {
        float v = float(double(base_t.data[i]) + alpha * double(delta_t.data[i]));
        if (!std::isfinite(v))
            throw ValidationError("non-finite merge result in tensor '" + name + "' at index " +
                                  std::to_string(i));
        m.data[i] = v;
    }
    return m;
}

inline DeltaStore compute_delta(const WeightStore& base, const WeightStore& tuned) {
    CompatReport r = validate_pair(base, tuned);
    if (!r.compatible())
        throw CompatError("stores are not compatible", r.to_json().dump());
    DeltaStore d;
    for (const std::string& name : r.matched)
        d.values.emplace(name, compute_delta_tensor(base.read_tensor(name),
                                                    tuned.read_tensor(name), name));
    return d;
}

// Merge a full store: merged_t = narrow(base_t + alpha * delta_t) per tensor;
// tensors absent from the delta pass through as base + 0.
inline WeightStore apply_delta(const WeightStore& base, const DeltaStore& delta, AlphaScale alpha,
                               DType out_dtype, const fs::path& out_dir,
                               uint64_t shard_budget = kDefaultShardBudget) {
    std::vector<PendingTensor> metas;
    for (auto& [name, m] : base.manifest())
        metas.push_back({name, out_dtype, m.shape});
    StoreWriter w(out_dir, std::move(metas), shard_budget);
    for (auto& [name, m] : base.manifest()) {
        Tensor b = base.read_tensor(name);
        auto it = delta.values.find(name);
        Tensor out;
        if (it == delta.values.end()) {
            out = merge_tensor(b, b, 0.0, name);
        } else {
            out = merge_tensor(b, it->second, alpha.value, name);
        }
        w.put(name, std::span<const float>(out.data.data(), out.data.size()));
    }
    return w.finish();
}

// Re-emit base untouched (the merge that discards the tuned model).
inline WeightStore hard_merge(const WeightStore& base, DType out_dtype, const fs::path& out_dir,
                              uint64_t shard_budget = kDefaultShardBudget) {
    return apply_delta(base, DeltaStore{}, AlphaScale{0.0}, out_dtype, out_dir, shard_budget);
}

// Delta containers are plain stores whose metadata carries {"kind": "delta"};
// values are F32 and each optional mask is a U8 0/1 tensor named "<name>.mask".
inline void save_delta(const DeltaStore& delta, const fs::path& out_dir,
                       uint64_t shard_budget = kDefaultShardBudget) {
    std::vector<PendingTensor> metas;
    for (auto& [name, t] : delta.values) {
        if (name.size() > 5 && name.substr(name.size() - 5) == ".mask")
            throw ValidationError("delta tensor name '" + name + "' collides with mask naming");
        metas.push_back({name, DType::F32, t.shape});
        auto mit = delta.mask.find(name);
        if (mit != delta.mask.end()) {
            if (mit->second.size() != size_t(t.numel()))
                throw ValidationError("mask size mismatch for '" + name + "'");
            for (size_t i = 0; i < mit->second.size(); ++i)
                if (!mit->second[i] && t.data[i] != 0.0f)
                    throw ValidationError("mask for '" + name + "' clears index " +
                                          std::to_string(i) + " but its value is nonzero");
            metas.push_back({name + ".mask", DType::U8, t.shape});
        }
    }
    std::sort(metas.begin(), metas.end(),
              [](const PendingTensor& a, const PendingTensor& b) { return a.name < b.name; });
    StoreWriter w(out_dir, std::move(metas), shard_budget, json{{"kind", "delta"}});
    // writer wants declaration order, i.e. sorted; "<name>.mask" sorts right
    // after "<name>" only by accident, so drive puts off the sorted meta list
    std::vector<std::string> order;
    for (auto& [name, _] : delta.values) {
        order.push_back(name);
        if (delta.has_mask(name)) order.push_back(name + ".mask");
    }
    std::sort(order.begin(), order.end());
    for (const std::string& name : order) {
        if (name.size() > 5 && name.substr(name.size() - 5) == ".mask") {
            const ByteBuf& m = delta.mask.at(name.substr(0, name.size() - 5));
            w.put_raw(name, std::span<const uint8_t>(m.data(), m.size()));
        } else {
            const Tensor& t = delta.values.at(name);
            w.put(name, std::span<const float>(t.data.data(), t.data.size()));
        }
    }
    w.finish();
}

inline DeltaStore load_delta(const fs::path& path) {
    WeightStore s = open_store(path);
    if (!s.metadata().is_object() || s.metadata().value("kind", "") != "delta")
        throw FormatError("'" + path.string() + "' is not a delta container (missing kind flag)");
    DeltaStore d;
    for (auto& [name, m] : s.manifest()) {
        if (name.size() > 5 && name.substr(name.size() - 5) == ".mask") continue;
        if (m.dtype != DType::F32)
            throw FormatError("delta tensor '" + name + "' is " + dtype_name(m.dtype) +
                              "; delta containers store F32");
        d.values.emplace(name, s.read_tensor(name));
    }
    for (auto& [name, m] : s.manifest()) {
        if (!(name.size() > 5 && name.substr(name.size() - 5) == ".mask")) continue;
        std::string owner = name.substr(0, name.size() - 5);
        auto it = d.values.find(owner);
        if (it == d.values.end())
            throw FormatError("mask '" + name + "' has no matching value tensor");
        ByteBuf mask = s.read_mask(name);
        if (mask.size() != size_t(it->second.numel()))
            throw CorruptionError("mask '" + name + "' size disagrees with its tensor");
        for (size_t i = 0; i < mask.size(); ++i)
            if (!mask[i] && it->second.data[i] != 0.0f)
                throw CorruptionError("mask '" + name + "' clears index " + std::to_string(i) +
                                      " but the stored value is nonzero");
        d.mask.emplace(owner, std::move(mask));
    }
    return d;
}

// Streamed base/tuned diff straight to disk, one tensor resident at a time.
inline WeightStore write_delta(const WeightStore& base, const WeightStore& tuned,
                               const fs::path& out_dir,
                               uint64_t shard_budget = kDefaultShardBudget) {
    CompatReport r = validate_pair(base, tuned);
    if (!r.compatible())
        throw CompatError("stores are not compatible", r.to_json().dump());
    std::vector<PendingTensor> metas;
    for (const std::string& name : r.matched)
        metas.push_back({name, DType::F32, base.manifest().at(name).shape});
    StoreWriter w(out_dir, std::move(metas), shard_budget, json{{"kind", "delta"}});
    for (const std::string& name : r.matched) {
        Tensor d = compute_delta_tensor(base.read_tensor(name), tuned.read_tensor(name), name);
        w.put(name, std::span<const float>(d.data.data(), d.data.size()));
    }
    return w.finish();
}

} // namespace nfuse
