#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "neuronfuse/scores.hpp"
#include "neuronfuse/sparsify.hpp"

namespace nfuse {

// Restoration runs after suppression and only touches neurons the locate
// step selected. Two flavors:
//   replace: a selected neuron's slices revert to the raw delta, overriding
//            whatever the suppressor did (drops and rescales alike).
//   rescale: a selected neuron keeps only its surviving entries, scaled per
//            slice by C/C' so the slice's absolute sum returns to its
//            pre-suppression value; a slice whose survivors sum to zero
//            falls back to replace.
// Non-selected neurons keep the suppressor's output untouched.

enum class RestoreKind { None, Replace, Rescale };

inline const char* restore_name(RestoreKind r) {
    switch (r) {
        case RestoreKind::None:    return "none";
        case RestoreKind::Replace: return "replace";
        case RestoreKind::Rescale: return "rescale";
    }
    return "?";
}

inline RestoreKind parse_restore(const std::string& s) {
    if (s == "none")    return RestoreKind::None;
    if (s == "replace") return RestoreKind::Replace;
    if (s == "rescale") return RestoreKind::Rescale;
    throw ConfigError("unknown restore kind '" + s + "'");
}

// Distribution of the C/C' factors actually applied, for reporting.
struct RescaleStats {
    int64_t applied = 0;   // slices rescaled
    int64_t fallbacks = 0; // slices that fell back to replace (C' == 0)
    double min_factor = 0.0;
    double max_factor = 0.0;
    double sum_factor = 0.0;

    void record(double f) {
        if (applied == 0) {
            min_factor = max_factor = f;
        } else {
            if (f < min_factor) min_factor = f;
            if (f > max_factor) max_factor = f;
        }
        sum_factor += f;
        ++applied;
    }

    void merge(const RescaleStats& o) {
        if (o.applied) {
            if (applied == 0) {
                min_factor = o.min_factor;
                max_factor = o.max_factor;
            } else {
                min_factor = std::min(min_factor, o.min_factor);
                max_factor = std::max(max_factor, o.max_factor);
            }
            applied += o.applied;
            sum_factor += o.sum_factor;
        }
        fallbacks += o.fallbacks;
    }
};

namespace detail {

template <typename Fn>
inline void for_each_in_slice(const Tensor& t, NeuronAxis axis, int64_t i, Fn&& fn) {
    int64_t R = t.shape[0], C = t.shape[1];
    if (axis == NeuronAxis::Row) {
        for (int64_t c = 0; c < C; ++c) fn(size_t(i * C + c));
    } else {
        for (int64_t r = 0; r < R; ++r) fn(size_t(r * C + i));
    }
}

} // namespace detail

// Overwrite the selected slices of one suppressed tensor with the raw delta.
inline void restore_replace_tensor(SparseResult& sp, const Tensor& delta_t, NeuronAxis axis,
                                   std::span<const uint8_t> selected) {
    int64_t extent = axis == NeuronAxis::Row ? sp.values.shape[0] : sp.values.shape[1];
    if (int64_t(selected.size()) != extent)
        throw ValidationError("selection flag count disagrees with slice extent");
    for (int64_t i = 0; i < extent; ++i) {
        if (!selected[size_t(i)]) continue;
        detail::for_each_in_slice(sp.values, axis, i, [&](size_t j) {
            if (!sp.mask[j]) ++sp.survivor_count;
            sp.values.data[j] = delta_t.data[j];
            sp.mask[j] = 1;
        });
    }
}

// Rescale the surviving entries of the selected slices by this slice's
// C/C'. slice_c holds the pre-suppression sums; C' is recomputed from the
// suppressed values themselves.
inline void restore_rescale_tensor(SparseResult& sp, const Tensor& delta_t, NeuronAxis axis,
                                   std::span<const uint8_t> selected,
                                   std::span<const double> slice_c, RescaleStats& stats) {
    int64_t extent = axis == NeuronAxis::Row ? sp.values.shape[0] : sp.values.shape[1];
    if (int64_t(selected.size()) != extent || int64_t(slice_c.size()) != extent)
        throw ValidationError("selection or score extent disagrees with slice extent");
    for (int64_t i = 0; i < extent; ++i) {
        if (!selected[size_t(i)]) continue;
        double c_sup = 0.0;
        detail::for_each_in_slice(sp.values, axis, i,
                                  [&](size_t j) { c_sup += std::fabs(double(sp.values.data[j])); });
        if (c_sup == 0.0) {
            // nothing survived here; replace is the only way to bring C back
            ++stats.fallbacks;
            detail::for_each_in_slice(sp.values, axis, i, [&](size_t j) {
                if (!sp.mask[j]) ++sp.survivor_count;
                sp.values.data[j] = delta_t.data[j];
                sp.mask[j] = 1;
            });
            continue;
        }
        double f = slice_c[size_t(i)] / c_sup;
        stats.record(f);
        detail::for_each_in_slice(sp.values, axis, i, [&](size_t j) {
            if (sp.mask[j])
                sp.values.data[j] = float(double(sp.values.data[j]) * f);
        });
    }
}

namespace detail {

template <typename PerTensor>
inline DeltaStore restore_store(const DeltaStore& delta, const DeltaStore& suppressed,
                                const NeuronSelection& sel, const NeuronMap& map,
                                PerTensor&& per_tensor) {
    DeltaStore out;
    for (auto& [name, sup_t] : suppressed.values) {
        SparseResult sp;
        sp.values = sup_t;
        auto mit = suppressed.mask.find(name);
        if (mit != suppressed.mask.end()) {
            sp.mask = mit->second;
        } else {
            sp.mask.assign(size_t(sup_t.numel()), 0);
            for (size_t j = 0; j < sp.mask.size(); ++j)
                sp.mask[j] = sup_t.data[j] != 0.0f ? 1 : 0;
        }
        sp.survivor_count = 0;
        for (uint8_t b : sp.mask) sp.survivor_count += b;

        auto ait = map.assignments.find(name);
        if (ait != map.assignments.end() && !ait->second.group.empty()) {
            const std::string& gid = ait->second.group;
            NeuronAxis axis = role_axis(ait->second.role);
            std::vector<uint8_t> flags = sel.flags(gid, map.extent.at(gid));
            const Tensor& d = delta.at(name);
            per_tensor(name, sp, d, axis, flags);
        }
        out.mask[name] = std::move(sp.mask);
        out.values.emplace(name, std::move(sp.values));
    }
    return out;
}

} // namespace detail

// Whole-store restore passes (dense, in-memory; the merge engine streams the
// same per-tensor kernels instead).
inline DeltaStore restore_replace(const DeltaStore& delta, const DeltaStore& suppressed,
                                  const NeuronSelection& sel, const NeuronMap& map) {
    return detail::restore_store(delta, suppressed, sel, map,
                                 [](const std::string&, SparseResult& sp, const Tensor& d,
                                    NeuronAxis axis, std::span<const uint8_t> flags) {
                                     restore_replace_tensor(sp, d, axis, flags);
                                 });
}

inline DeltaStore restore_rescale(const DeltaStore& delta, const DeltaStore& suppressed,
                                  const NeuronSelection& sel, const NeuronMap& map,
                                  const ChangeScoreTable& scores, RescaleStats* stats = nullptr) {
    RescaleStats local;
    DeltaStore out = detail::restore_store(
        delta, suppressed, sel, map,
        [&](const std::string& name, SparseResult& sp, const Tensor& d, NeuronAxis axis,
            std::span<const uint8_t> flags) {
            auto sit = scores.slice.find(name);
            if (sit == scores.slice.end())
                throw ValidationError("score table lacks slice sums for '" + name + "'");
            restore_rescale_tensor(sp, d, axis, flags, sit->second, local);
        });
    if (stats) *stats = local;
    return out;
}

} // namespace nfuse
