#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "neuronfuse/errors.hpp"
#include "neuronfuse/weight_store.hpp"

namespace nfuse {

// A neuron owns one slice in each tensor of its group: FFN neuron k is the
// k-th row of the up/gate projections plus the k-th column of the down
// projection; attention neuron k is the k-th row of q/k/v plus the k-th
// column of the output projection. Row-parallel tensors expose neurons on
// rows, column-parallel on columns.

enum class RoleTag { FfnUp, FfnGate, FfnDown, AttnQ, AttnK, AttnV, AttnO, Embedding, Norm, Other };
enum class NeuronAxis { Row, Column, None };

inline NeuronAxis role_axis(RoleTag r) {
    switch (r) {
        case RoleTag::FfnUp:
        case RoleTag::FfnGate:
        case RoleTag::AttnQ:
        case RoleTag::AttnK:
        case RoleTag::AttnV:
            return NeuronAxis::Row;
        case RoleTag::FfnDown:
        case RoleTag::AttnO:
            return NeuronAxis::Column;
        default:
            return NeuronAxis::None;
    }
}

inline const char* role_name(RoleTag r) {
    switch (r) {
        case RoleTag::FfnUp:     return "ffn_up";
        case RoleTag::FfnGate:   return "ffn_gate";
        case RoleTag::FfnDown:   return "ffn_down";
        case RoleTag::AttnQ:     return "attn_q";
        case RoleTag::AttnK:     return "attn_k";
        case RoleTag::AttnV:     return "attn_v";
        case RoleTag::AttnO:     return "attn_o";
        case RoleTag::Embedding: return "embedding";
        case RoleTag::Norm:      return "norm";
        case RoleTag::Other:     return "other";
    }
    return "?";
}

inline RoleTag parse_role(const std::string& s) {
    if (s == "ffn_up")    return RoleTag::FfnUp;
    if (s == "ffn_gate")  return RoleTag::FfnGate;
    if (s == "ffn_down")  return RoleTag::FfnDown;
    if (s == "attn_q")    return RoleTag::AttnQ;
    if (s == "attn_k")    return RoleTag::AttnK;
    if (s == "attn_v")    return RoleTag::AttnV;
    if (s == "attn_o")    return RoleTag::AttnO;
    if (s == "embedding") return RoleTag::Embedding;
    if (s == "norm")      return RoleTag::Norm;
    if (s == "other")     return RoleTag::Other;
    throw ConfigError("unknown role '" + s + "'");
}

// Glob match recording what each '*' consumed. Only '*' is special; each
// failure re-extends the most recent star by one character, which is the
// classic complete algorithm for single-character-free wildcards.
inline bool glob_match(const std::string& pattern, const std::string& name,
                       std::vector<std::string>* captures = nullptr) {
    std::vector<std::string> caps;
    size_t p = 0, n = 0;
    size_t star_p = std::string::npos;
    size_t star_start = 0, star_len = 0;
    while (n < name.size()) {
        if (p < pattern.size() && pattern[p] == '*') {
            star_p = p++;
            star_start = n;
            star_len = 0;
            caps.push_back("");
        } else if (p < pattern.size() && pattern[p] == name[n]) {
            ++p;
            ++n;
        } else if (star_p != std::string::npos) {
            ++star_len;
            if (star_start + star_len > name.size()) return false;
            caps.back() = name.substr(star_start, star_len);
            p = star_p + 1;
            n = star_start + star_len;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') {
        ++p;
        caps.push_back("");
    }
    if (p != pattern.size()) return false;
    if (captures) *captures = std::move(caps);
    return true;
}

// Ordered template rules; the first matching pattern assigns the role.
// layer_capture is the 1-based index of the '*' that holds the layer number
// (0 means the rule carries no layer).
struct TemplateRule {
    std::string pattern;
    RoleTag role = RoleTag::Other;
    int layer_capture = 0;
};

struct ArchTemplate {
    std::vector<TemplateRule> rules;

    static ArchTemplate from_json(const json& j) {
        if (!j.is_object() || !j.contains("rules") || !j["rules"].is_array())
            throw ConfigError("architecture template needs a top-level rules array");
        ArchTemplate t;
        for (const json& r : j["rules"]) {
            if (!r.is_object() || !r.contains("pattern") || !r.contains("role"))
                throw ConfigError("template rule needs pattern and role");
            for (auto& [key, _] : r.items())
                if (key != "pattern" && key != "role" && key != "layer_capture")
                    throw ConfigError("unknown key '" + key + "' in template rule");
            TemplateRule rule;
            rule.pattern = r["pattern"].get<std::string>();
            rule.role = parse_role(r["role"].get<std::string>());
            rule.layer_capture = r.value("layer_capture", 0);
            if (rule.layer_capture < 0)
                throw ConfigError("layer_capture must be >= 0");
            t.rules.push_back(std::move(rule));
        }
        if (t.rules.empty())
            throw ConfigError("architecture template has no rules");
        return t;
    }

    static ArchTemplate load(const fs::path& path) {
        std::ifstream in(path);
        if (!in)
            throw IoError("cannot open template '" + path.string() + "'");
        json j = json::parse(in, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("template '" + path.string() + "' is not valid JSON");
        return from_json(j);
    }

    // Matches the common decoder-layer naming (numbered layers with
    // q/k/v/o projections and gate/up/down FFN projections).
    static ArchTemplate builtin() {
        ArchTemplate t;
        auto add = [&](const char* pat, RoleTag role, int cap) {
            t.rules.push_back({pat, role, cap});
        };
        add("model.layers.*.self_attn.q_proj.weight", RoleTag::AttnQ, 1);
        add("model.layers.*.self_attn.k_proj.weight", RoleTag::AttnK, 1);
        add("model.layers.*.self_attn.v_proj.weight", RoleTag::AttnV, 1);
        add("model.layers.*.self_attn.o_proj.weight", RoleTag::AttnO, 1);
        add("model.layers.*.mlp.gate_proj.weight", RoleTag::FfnGate, 1);
        add("model.layers.*.mlp.up_proj.weight", RoleTag::FfnUp, 1);
        add("model.layers.*.mlp.down_proj.weight", RoleTag::FfnDown, 1);
        add("model.embed_tokens.weight", RoleTag::Embedding, 0);
        add("lm_head.weight", RoleTag::Embedding, 0);
        add("*norm*.weight", RoleTag::Norm, 0);
        add("*", RoleTag::Other, 0);
        return t;
    }
};

// Resolve "builtin" or a file path.
inline ArchTemplate resolve_template(const std::string& ref) {
    if (ref.empty() || ref == "builtin") return ArchTemplate::builtin();
    return ArchTemplate::load(ref);
}

struct Assignment {
    RoleTag role = RoleTag::Other;
    int layer = -1;
    std::string group; // empty when the tensor carries no neuron group
};

struct SliceRef {
    std::string tensor;
    NeuronAxis axis = NeuronAxis::None;
};

struct NeuronMap {
    std::map<std::string, Assignment> assignments;
    std::map<std::string, std::vector<SliceRef>> groups;
    std::map<std::string, int64_t> extent;      // neurons per group
    std::map<std::string, int> group_layer;

    bool grouped(const std::string& tensor) const {
        auto it = assignments.find(tensor);
        return it != assignments.end() && !it->second.group.empty();
    }

    int64_t total_neurons() const {
        int64_t n = 0;
        for (auto& [_, e] : extent) n += e;
        return n;
    }
};

namespace detail {

inline int64_t neuron_extent(const TensorMeta& m, NeuronAxis axis) {
    return axis == NeuronAxis::Row ? m.shape[0] : m.shape[1];
}

} // namespace detail

// Assign every tensor a role via the template, then knit per-layer groups:
// up/gate/down share the FFN group; q and o share a group, k and v join it
// when their neuron extent matches (plain multi-head attention) and form
// their own group otherwise (grouped-query attention).
inline NeuronMap build_neuron_map(const std::map<std::string, TensorMeta>& manifest,
                                  const ArchTemplate& tmpl) {
    NeuronMap map;

    struct Slot {
        const TensorMeta* meta = nullptr;
    };
    // per layer: one slot per attention/ffn role
    std::map<int, std::map<RoleTag, const TensorMeta*>> layers;

    for (auto& [name, meta] : manifest) {
        const TemplateRule* hit = nullptr;
        std::vector<std::string> caps;
        for (const TemplateRule& rule : tmpl.rules) {
            if (glob_match(rule.pattern, name, &caps)) {
                hit = &rule;
                break;
            }
        }
        if (!hit)
            throw MappingError("template does not match tensor '" + name + "'");

        Assignment a;
        a.role = hit->role;
        if (hit->layer_capture > 0) {
            if (size_t(hit->layer_capture) > caps.size())
                throw ConfigError("rule '" + hit->pattern + "' captures only " +
                                  std::to_string(caps.size()) + " wildcards");
            const std::string& c = caps[size_t(hit->layer_capture - 1)];
            if (c.empty() || c.find_first_not_of("0123456789") != std::string::npos)
                throw MappingError("tensor '" + name + "' layer capture '" + c +
                                   "' is not a number");
            a.layer = std::stoi(c);
        }

        if (role_axis(a.role) != NeuronAxis::None) {
            if (meta.shape.size() != 2)
                throw MappingError("tensor '" + name + "' has role " + role_name(a.role) +
                                   " but is not 2-D");
            if (a.layer < 0)
                throw MappingError("tensor '" + name + "' has role " + role_name(a.role) +
                                   " but its rule captures no layer index");
            auto& slot = layers[a.layer][a.role];
            if (slot)
                throw MappingError("layer " + std::to_string(a.layer) + " has two tensors with role " +
                                   role_name(a.role) + ": '" + slot->name + "' and '" + name + "'");
            slot = &meta;
        }
        map.assignments.emplace(name, std::move(a));
    }

    auto add_group = [&](const std::string& gid, int layer,
                         std::vector<std::pair<const TensorMeta*, NeuronAxis>> slices) {
        int64_t n = -1;
        for (auto& [m, axis] : slices) {
            int64_t e = detail::neuron_extent(*m, axis);
            if (n < 0) n = e;
            if (e != n) {
                std::string what;
                for (auto& [mm, ax] : slices)
                    what += "  " + mm->name + " " + detail::format_shape(mm->shape) + "\n";
                throw MappingError("group " + gid + " mixes neuron extents:\n" + what);
            }
        }
        std::vector<SliceRef> refs;
        for (auto& [m, axis] : slices) {
            refs.push_back({m->name, axis});
            map.assignments[m->name].group = gid;
        }
        map.groups.emplace(gid, std::move(refs));
        map.extent.emplace(gid, n);
        map.group_layer.emplace(gid, layer);
    };

    for (auto& [layer, slots] : layers) {
        std::string lid = "L" + std::to_string(layer);

        std::vector<std::pair<const TensorMeta*, NeuronAxis>> ffn;
        for (RoleTag r : {RoleTag::FfnUp, RoleTag::FfnGate, RoleTag::FfnDown}) {
            auto it = slots.find(r);
            if (it != slots.end()) ffn.push_back({it->second, role_axis(r)});
        }
        if (!ffn.empty()) add_group(lid + ".ffn", layer, ffn);

        std::vector<std::pair<const TensorMeta*, NeuronAxis>> qo, kv;
        for (RoleTag r : {RoleTag::AttnQ, RoleTag::AttnO}) {
            auto it = slots.find(r);
            if (it != slots.end()) qo.push_back({it->second, role_axis(r)});
        }
        for (RoleTag r : {RoleTag::AttnK, RoleTag::AttnV}) {
            auto it = slots.find(r);
            if (it != slots.end()) kv.push_back({it->second, role_axis(r)});
        }
        if (!qo.empty() && !kv.empty()) {
            auto extent_of = [](std::vector<std::pair<const TensorMeta*, NeuronAxis>>& v) {
                return detail::neuron_extent(*v[0].first, v[0].second);
            };
            if (extent_of(qo) == extent_of(kv)) {
                std::vector<std::pair<const TensorMeta*, NeuronAxis>> all;
                for (RoleTag r : {RoleTag::AttnQ, RoleTag::AttnK, RoleTag::AttnV, RoleTag::AttnO}) {
                    auto it = slots.find(r);
                    if (it != slots.end()) all.push_back({it->second, role_axis(r)});
                }
                add_group(lid + ".attn", layer, all);
            } else {
                add_group(lid + ".attn.qo", layer, qo);
                add_group(lid + ".attn.kv", layer, kv);
            }
        } else if (!qo.empty()) {
            add_group(lid + ".attn.qo", layer, qo);
        } else if (!kv.empty()) {
            add_group(lid + ".attn.kv", layer, kv);
        }
    }
    return map;
}

} // namespace nfuse
