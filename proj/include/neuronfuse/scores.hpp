#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "neuronfuse/delta.hpp"
#include "neuronfuse/neuron_map.hpp"

namespace nfuse {

// Change score of neuron i: the absolute sum of its delta entries across
// every slice it owns. Sums accumulate in double; with f32 inputs that keeps
// the score exact to well under the tolerances the tooling promises.

// Per-neuron absolute sums along one tensor's neuron axis.
inline std::vector<double> slice_abs_sums(const Tensor& t, NeuronAxis axis) {
    if (!t.is_matrix())
        throw ValidationError("slice sums need a 2-D tensor");
    int64_t R = t.shape[0], C = t.shape[1];
    std::vector<double> out(size_t(axis == NeuronAxis::Row ? R : C), 0.0);
    if (axis == NeuronAxis::Row) {
        for (int64_t r = 0; r < R; ++r) {
            double s = 0.0;
            const float* row = t.data.data() + r * C;
            for (int64_t c = 0; c < C; ++c) s += std::fabs(double(row[c]));
            out[size_t(r)] = s;
        }
    } else {
        for (int64_t r = 0; r < R; ++r) {
            const float* row = t.data.data() + r * C;
            for (int64_t c = 0; c < C; ++c) out[size_t(c)] += std::fabs(double(row[c]));
        }
    }
    return out;
}

struct ChangeScoreTable {
    std::map<std::string, std::vector<double>> group;      // C(i) per group
    std::map<std::string, std::vector<double>> slice;      // per-tensor C per neuron
    std::map<std::string, std::vector<double>> group_sup;  // C'(i), present after suppression scores
    std::map<std::string, std::vector<double>> slice_sup;
    bool has_sup = false;
};

// Streaming score builder: feed grouped delta tensors in any order, collate
// at the end. Group sums are formed from the per-slice sums in the group's
// canonical slice order, so results do not depend on feed order.
class ScoreAccumulator {
public:
    explicit ScoreAccumulator(const NeuronMap& map) : map_(&map) {}

    void add(const std::string& name, const Tensor& delta_t) {
        auto it = map_->assignments.find(name);
        if (it == map_->assignments.end() || it->second.group.empty()) return;
        NeuronAxis axis = role_axis(it->second.role);
        std::vector<double> sums = slice_abs_sums(delta_t, axis);
        if (int64_t(sums.size()) != map_->extent.at(it->second.group))
            throw ValidationError("tensor '" + name + "' slice count " +
                                  std::to_string(sums.size()) + " disagrees with group extent");
        slice_.emplace(name, std::move(sums));
    }

    // group scores = sum of slice scores in canonical order; every slice of
    // every group must have been fed
    void finish_into(std::map<std::string, std::vector<double>>& group_out,
                     std::map<std::string, std::vector<double>>& slice_out) {
        for (auto& [gid, slices] : map_->groups) {
            std::vector<double> g(size_t(map_->extent.at(gid)), 0.0);
            for (const SliceRef& s : slices) {
                auto it = slice_.find(s.tensor);
                if (it == slice_.end())
                    throw ValidationError("group " + gid + " is missing scores for tensor '" +
                                          s.tensor + "'");
                for (size_t i = 0; i < g.size(); ++i) g[i] += it->second[i];
            }
            group_out[gid] = std::move(g);
        }
        slice_out = std::move(slice_);
        slice_.clear();
    }

private:
    const NeuronMap* map_;
    std::map<std::string, std::vector<double>> slice_;
};

inline ChangeScoreTable change_scores(const DeltaStore& delta, const NeuronMap& map) {
    ScoreAccumulator acc(map);
    for (auto& [name, t] : delta.values) acc.add(name, t);
    ChangeScoreTable table;
    acc.finish_into(table.group, table.slice); // throws if any group slice is uncovered
    return table;
}

// Fill C'(i) from a suppressed delta (same grouping).
inline void add_suppressed_scores(ChangeScoreTable& table, const DeltaStore& suppressed,
                                  const NeuronMap& map) {
    ScoreAccumulator acc(map);
    for (auto& [name, t] : suppressed.values) acc.add(name, t);
    acc.finish_into(table.group_sup, table.slice_sup);
    table.has_sup = true;
}

enum class SelectionScope { PerGroup, Global };

inline const char* scope_name(SelectionScope s) {
    return s == SelectionScope::PerGroup ? "per_group" : "global";
}

inline SelectionScope parse_scope(const std::string& s) {
    if (s == "per_group") return SelectionScope::PerGroup;
    if (s == "global") return SelectionScope::Global;
    throw ConfigError("unknown selection scope '" + s + "'");
}

// Selection count: round half up, never negative, capped at n.
inline int64_t selection_count(double ratio, int64_t n) {
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw ConfigError("selection ratio must be in [0, 1]");
    int64_t c = int64_t(std::floor(ratio * double(n) + 0.5));
    return std::clamp<int64_t>(c, 0, n);
}

struct NeuronSelection {
    std::map<std::string, std::vector<uint32_t>> selected; // ascending indices per group
    double ratio_m = 0.0;
    SelectionScope scope = SelectionScope::PerGroup;

    int64_t total() const {
        int64_t n = 0;
        for (auto& [_, v] : selected) n += int64_t(v.size());
        return n;
    }

    std::vector<uint8_t> flags(const std::string& gid, int64_t n) const {
        std::vector<uint8_t> f(size_t(n), 0);
        auto it = selected.find(gid);
        if (it != selected.end())
            for (uint32_t i : it->second) f[i] = 1;
        return f;
    }
};

// Top-M% by change score. PerGroup takes round(M * extent) from each group;
// Global pools every (group, neuron) pair and takes round(M * total). Ties
// prefer the lower index (and lexically first group in the pooled case).
inline NeuronSelection select_top_neurons(const ChangeScoreTable& table, double ratio_m,
                                          SelectionScope scope = SelectionScope::PerGroup) {
    NeuronSelection sel;
    sel.ratio_m = ratio_m;
    sel.scope = scope;
    if (scope == SelectionScope::PerGroup) {
        for (auto& [gid, scores] : table.group) {
            int64_t n = int64_t(scores.size());
            int64_t count = selection_count(ratio_m, n);
            std::vector<uint32_t> idx(size_t(n));
            for (int64_t i = 0; i < n; ++i) idx[size_t(i)] = uint32_t(i);
            std::sort(idx.begin(), idx.end(), [&](uint32_t a, uint32_t b) {
                if (scores[a] != scores[b]) return scores[a] > scores[b];
                return a < b;
            });
            std::vector<uint32_t> take(idx.begin(), idx.begin() + count);
            std::sort(take.begin(), take.end());
            sel.selected.emplace(gid, std::move(take));
        }
    } else {
        struct Entry {
            double score;
            const std::string* gid;
            uint32_t idx;
        };
        std::vector<Entry> pool;
        int64_t total = 0;
        for (auto& [gid, scores] : table.group) {
            total += int64_t(scores.size());
            for (size_t i = 0; i < scores.size(); ++i)
                pool.push_back({scores[i], &gid, uint32_t(i)});
            sel.selected.emplace(gid, std::vector<uint32_t>{});
        }
        int64_t count = selection_count(ratio_m, total);
        std::sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) return a.score > b.score;
            if (*a.gid != *b.gid) return *a.gid < *b.gid;
            return a.idx < b.idx;
        });
        for (int64_t i = 0; i < count; ++i)
            sel.selected[*pool[size_t(i)].gid].push_back(pool[size_t(i)].idx);
        for (auto& [_, v] : sel.selected) std::sort(v.begin(), v.end());
    }
    return sel;
}

} // namespace nfuse
