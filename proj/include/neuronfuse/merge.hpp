#pragma once

#include <chrono>
#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuronfuse/delta.hpp"
#include "neuronfuse/restore.hpp"
#include "neuronfuse/scores.hpp"
#include "neuronfuse/sparsify.hpp"

namespace nfuse {

// Merge methods. The first five pair a fixed suppressor with no restoration;
// neuron_fusion may combine any suppressor with replace/rescale restoration.
enum class MergeMethod { TaskArithmetic, Ties, Breadcrumbs, Dare, Della, NeuronFusion };

inline const char* method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Ties:           return "ties";
        case MergeMethod::Breadcrumbs:    return "breadcrumbs";
        case MergeMethod::Dare:           return "dare";
        case MergeMethod::Della:          return "della";
        case MergeMethod::NeuronFusion:   return "neuron_fusion";
    }
    return "?";
}

inline MergeMethod parse_method(const std::string& s) {
    if (s == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (s == "ties")            return MergeMethod::Ties;
    if (s == "breadcrumbs")     return MergeMethod::Breadcrumbs;
    if (s == "dare")            return MergeMethod::Dare;
    if (s == "della")           return MergeMethod::Della;
    if (s == "neuron_fusion")   return MergeMethod::NeuronFusion;
    throw ConfigError("unknown method '" + s + "'");
}

enum class CopyUnmatched { None, Base, Tuned };

inline const char* copy_unmatched_name(CopyUnmatched c) {
    switch (c) {
        case CopyUnmatched::None:  return "none";
        case CopyUnmatched::Base:  return "base";
        case CopyUnmatched::Tuned: return "tuned";
    }
    return "?";
}

inline DType parse_out_dtype(const std::string& s) {
    if (s == "f32")  return DType::F32;
    if (s == "f16")  return DType::F16;
    if (s == "bf16") return DType::BF16;
    throw ConfigError("out_dtype must be f32, f16, or bf16");
}

inline const char* out_dtype_name(DType d) {
    switch (d) {
        case DType::F32:  return "f32";
        case DType::F16:  return "f16";
        case DType::BF16: return "bf16";
        default:          return "?";
    }
}

struct MergeRecipe {
    std::string base_path;
    std::string tuned_path;
    std::string output_path;
    MergeMethod method = MergeMethod::TaskArithmetic;
    SparsifyConfig sparsify;
    RestoreKind restore = RestoreKind::None;
    double ratio_m = 0.0;
    SelectionScope scope = SelectionScope::PerGroup;
    AlphaScale alpha;
    DType out_dtype = DType::F32;
    uint64_t seed = 0;
    std::string template_ref = "builtin";
    CopyUnmatched copy_unmatched_from = CopyUnmatched::None;
    std::string persist_delta_path; // empty: delta is recomputed, never kept
    uint64_t shard_budget = kDefaultShardBudget;

    static MergeRecipe from_json(const json& j);
    static MergeRecipe load(const fs::path& path) {
        std::ifstream in(path);
        if (!in)
            throw IoError("cannot open recipe '" + path.string() + "'");
        json j = json::parse(in, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("recipe '" + path.string() + "' is not valid JSON");
        return from_json(j);
    }

    void validate() const {
        if (base_path.empty() || tuned_path.empty())
            throw ConfigError("recipe needs base_path and tuned_path");
        sparsify.validate();
        if (restore != RestoreKind::None && method != MergeMethod::NeuronFusion)
            throw ConfigError("restore requires method neuron_fusion");
        if (method == MergeMethod::NeuronFusion && restore != RestoreKind::None &&
            !(ratio_m >= 0.0 && ratio_m <= 1.0))
            throw ConfigError("ratio_m must be in [0, 1]");
        switch (method) {
            case MergeMethod::TaskArithmetic:
                if (sparsify.kind != SparsifyKind::Identity)
                    throw ConfigError("task_arithmetic implies the identity suppressor");
                break;
            case MergeMethod::Ties:
                if (sparsify.kind != SparsifyKind::TiesTrim)
                    throw ConfigError("method ties implies sparsify kind ties_trim");
                break;
            case MergeMethod::Breadcrumbs:
                if (sparsify.kind != SparsifyKind::Breadcrumbs)
                    throw ConfigError("method breadcrumbs implies sparsify kind breadcrumbs");
                break;
            case MergeMethod::Dare:
                if (sparsify.kind != SparsifyKind::Dare)
                    throw ConfigError("method dare implies sparsify kind dare");
                break;
            case MergeMethod::Della:
                if (sparsify.kind != SparsifyKind::Della)
                    throw ConfigError("method della implies sparsify kind della");
                break;
            case MergeMethod::NeuronFusion:
                break;
        }
    }

    // Recipe as resolved (defaults filled), echoed into the report.
    json resolved_json() const {
        json sp{{"kind", sparsify_kind_name(sparsify.kind)}, {"seed", sparsify.seed}};
        switch (sparsify.kind) {
            case SparsifyKind::Identity: break;
            case SparsifyKind::TiesTrim: sp["density_k"] = sparsify.density_k; break;
            case SparsifyKind::Breadcrumbs:
                sp["beta"] = sparsify.beta;
                sp["gamma"] = sparsify.gamma;
                break;
            case SparsifyKind::Dare: sp["drop_p"] = sparsify.drop_p; break;
            case SparsifyKind::Della:
                sp["mean_p"] = sparsify.mean_p;
                sp["epsilon"] = sparsify.epsilon;
                break;
        }
        json out{{"base_path", base_path},
                 {"tuned_path", tuned_path},
                 {"output_path", output_path},
                 {"method", method_name(method)},
                 {"sparsify", sp},
                 {"restore", restore_name(restore)},
                 {"ratio_m", ratio_m},
                 {"selection_scope", scope_name(scope)},
                 {"alpha", alpha.value},
                 {"out_dtype", out_dtype_name(out_dtype)},
                 {"seed", seed},
                 {"template", template_ref},
                 {"copy_unmatched_from", copy_unmatched_name(copy_unmatched_from)},
                 {"shard_budget", shard_budget}};
        if (!persist_delta_path.empty()) out["persist_delta_path"] = persist_delta_path;
        return out;
    }
};

// Strict parse: every key must be known, snake_case as written here.
inline MergeRecipe MergeRecipe::from_json(const json& j) {
    if (!j.is_object())
        throw ConfigError("recipe must be a JSON object");
    for (auto& [key, _] : j.items()) {
        static const char* known[] = {"base_path", "tuned_path", "output_path", "method",
                                      "sparsify", "restore", "ratio_m", "selection_scope",
                                      "alpha", "out_dtype", "seed", "template",
                                      "copy_unmatched_from", "persist_delta_path", "shard_budget"};
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok)
            throw ConfigError("unknown recipe key '" + key + "'");
    }
    MergeRecipe r;
    r.base_path = j.value("base_path", "");
    r.tuned_path = j.value("tuned_path", "");
    r.output_path = j.value("output_path", "");
    if (!j.contains("method"))
        throw ConfigError("recipe needs a method");
    r.method = parse_method(j["method"].get<std::string>());
    r.seed = j.value("seed", uint64_t(0));

    // method implies a default suppressor kind; neuron_fusion defaults to identity
    switch (r.method) {
        case MergeMethod::TaskArithmetic: r.sparsify.kind = SparsifyKind::Identity; break;
        case MergeMethod::Ties:           r.sparsify.kind = SparsifyKind::TiesTrim; break;
        case MergeMethod::Breadcrumbs:    r.sparsify.kind = SparsifyKind::Breadcrumbs; break;
        case MergeMethod::Dare:           r.sparsify.kind = SparsifyKind::Dare; break;
        case MergeMethod::Della:          r.sparsify.kind = SparsifyKind::Della; break;
        case MergeMethod::NeuronFusion:   r.sparsify.kind = SparsifyKind::Identity; break;
    }

    if (j.contains("sparsify")) {
        const json& sp = j["sparsify"];
        if (!sp.is_object())
            throw ConfigError("sparsify must be an object");
        for (auto& [key, _] : sp.items()) {
            static const char* known[] = {"kind", "density_k", "beta", "gamma",
                                          "drop_p", "mean_p", "epsilon", "seed"};
            bool ok = false;
            for (const char* k : known) ok = ok || key == k;
            if (!ok)
                throw ConfigError("unknown recipe key 'sparsify." + key + "'");
        }
        if (sp.contains("kind"))
            r.sparsify.kind = parse_sparsify_kind(sp["kind"].get<std::string>());

        // density_k is the shared "keep fraction" knob; the non-trim kinds
        // derive their primary parameter from it when not given explicitly:
        // beta = 1-K (gamma 0.01), drop_p = 1-K, mean_p = 1-K (epsilon 0.05)
        std::optional<double> k;
        if (sp.contains("density_k")) k = sp["density_k"].get<double>();
        switch (r.sparsify.kind) {
            case SparsifyKind::Identity:
                break;
            case SparsifyKind::TiesTrim:
                if (!k)
                    throw ConfigError("ties_trim needs density_k");
                r.sparsify.density_k = *k;
                break;
            case SparsifyKind::Breadcrumbs:
                if (sp.contains("beta"))
                    r.sparsify.beta = sp["beta"].get<double>();
                else if (k)
                    r.sparsify.beta = 1.0 - *k;
                else
                    throw ConfigError("breadcrumbs needs beta or density_k");
                r.sparsify.gamma = sp.value("gamma", 0.01);
                break;
            case SparsifyKind::Dare:
                if (sp.contains("drop_p"))
                    r.sparsify.drop_p = sp["drop_p"].get<double>();
                else if (k)
                    r.sparsify.drop_p = 1.0 - *k;
                else
                    throw ConfigError("dare needs drop_p or density_k");
                break;
            case SparsifyKind::Della:
                if (sp.contains("mean_p"))
                    r.sparsify.mean_p = sp["mean_p"].get<double>();
                else if (k)
                    r.sparsify.mean_p = 1.0 - *k;
                else
                    throw ConfigError("della needs mean_p or density_k");
                r.sparsify.epsilon = sp.value("epsilon", 0.05);
                break;
        }
        if (k) r.sparsify.density_k = *k;
        r.sparsify.seed = sp.value("seed", r.seed);
    } else {
        r.sparsify.seed = r.seed;
        if (r.method != MergeMethod::TaskArithmetic && r.method != MergeMethod::NeuronFusion)
            throw ConfigError(std::string("method ") + method_name(r.method) +
                              " needs a sparsify config");
    }

    if (j.contains("restore"))
        r.restore = parse_restore(j["restore"].get<std::string>());
    if (r.method == MergeMethod::NeuronFusion && r.restore != RestoreKind::None) {
        if (!j.contains("ratio_m"))
            throw ConfigError("neuron_fusion with restore needs ratio_m");
        r.ratio_m = j["ratio_m"].get<double>();
    } else if (j.contains("ratio_m")) {
        r.ratio_m = j["ratio_m"].get<double>();
    }
    if (j.contains("selection_scope"))
        r.scope = parse_scope(j["selection_scope"].get<std::string>());
    r.alpha = AlphaScale::checked(j.value("alpha", 1.0));
    if (j.contains("out_dtype"))
        r.out_dtype = parse_out_dtype(j["out_dtype"].get<std::string>());
    r.template_ref = j.value("template", std::string("builtin"));
    if (j.contains("copy_unmatched_from")) {
        std::string c = j["copy_unmatched_from"].get<std::string>();
        if (c == "none")       r.copy_unmatched_from = CopyUnmatched::None;
        else if (c == "base")  r.copy_unmatched_from = CopyUnmatched::Base;
        else if (c == "tuned") r.copy_unmatched_from = CopyUnmatched::Tuned;
        else
            throw ConfigError("copy_unmatched_from must be none, base, or tuned");
    }
    r.persist_delta_path = j.value("persist_delta_path", "");
    r.shard_budget = j.value("shard_budget", kDefaultShardBudget);
    r.validate();
    return r;
}

// Peak working set for a sequential run: three f32 copies of the largest
// tensor (base, delta, suppression scratch) plus the survivor mask, plus an
// upper bound on the score tables (C and C' in double for every matrix
// extent, both axes, since grouping is not known from the manifest alone).
inline uint64_t plan_memory(const std::map<std::string, TensorMeta>& manifest) {
    uint64_t largest = 0, largest_numel = 0, score_bound = 0;
    for (auto& [_, m] : manifest) {
        uint64_t n = uint64_t(m.numel());
        largest = std::max(largest, n * 4);
        largest_numel = std::max(largest_numel, n);
        if (m.shape.size() == 2)
            score_bound += uint64_t(m.shape[0] + m.shape[1]) * sizeof(double) * 2;
    }
    return 3 * largest + largest_numel + score_bound + (1u << 20);
}

struct TensorReportEntry {
    int64_t parameters = 0;
    int64_t survivor_count = 0; // after suppression, before restore
    double survivor_fraction = 0.0;
    double max_abs_delta = 0.0; // after restore
};

struct GroupReportEntry {
    int64_t neurons = 0;
    int64_t selected = 0;
    double score_min = 0.0;
    double score_median = 0.0;
    double score_max = 0.0;
};

struct MergeReport {
    json recipe;
    std::map<std::string, TensorReportEntry> tensors;
    std::map<std::string, GroupReportEntry> groups;
    RescaleStats rescale;
    int64_t parameter_count = 0;
    int64_t tensor_count = 0;
    int64_t copied_count = 0;
    int64_t survivor_count = 0;
    double survivor_fraction = 0.0;
    int64_t selected_neuron_total = 0;
    int64_t neuron_total = 0;
    double l1_delta = 0.0;
    double l1_delta_selected = 0.0;
    uint64_t peak_bytes_estimate = 0;
    int64_t wall_time_ms = 0;

    json to_json() const {
        json jt = json::object();
        for (auto& [name, e] : tensors)
            jt[name] = {{"parameters", e.parameters},
                        {"survivor_count", e.survivor_count},
                        {"survivor_fraction", e.survivor_fraction},
                        {"max_abs_delta", e.max_abs_delta}};
        json jg = json::object();
        for (auto& [gid, e] : groups)
            jg[gid] = {{"neurons", e.neurons},
                       {"selected", e.selected},
                       {"score_min", e.score_min},
                       {"score_median", e.score_median},
                       {"score_max", e.score_max}};
        json jr{{"applied", rescale.applied}, {"fallbacks", rescale.fallbacks}};
        if (rescale.applied) {
            jr["min"] = rescale.min_factor;
            jr["max"] = rescale.max_factor;
            jr["mean"] = rescale.sum_factor / double(rescale.applied);
        }
        return json{{"recipe", recipe},
                    {"tensors", jt},
                    {"groups", jg},
                    {"rescale_factors", jr},
                    {"totals",
                     {{"parameter_count", parameter_count},
                      {"tensor_count", tensor_count},
                      {"copied_tensor_count", copied_count},
                      {"survivor_count", survivor_count},
                      {"survivor_fraction", survivor_fraction},
                      {"selected_neuron_total", selected_neuron_total},
                      {"neuron_total", neuron_total},
                      {"l1_delta_prime", l1_delta},
                      {"l1_delta_prime_selected", l1_delta_selected},
                      {"peak_bytes_estimate", peak_bytes_estimate},
                      {"wall_time_ms", wall_time_ms}}}};
    }
};

struct RunOptions {
    int threads = 1;
    bool write_output = true; // sweeps in stats-only mode skip the writer
    bool quiet = true;
};

namespace detail {

struct TensorWork {
    Tensor merged;
    Tensor delta; // kept only when the recipe persists the delta
    TensorReportEntry entry;
    RescaleStats rescale;
    double l1 = 0.0;
    double l1_selected = 0.0;
};

inline std::vector<double> selected_slice_l1(const Tensor& t, NeuronAxis axis,
                                             std::span<const uint8_t> flags) {
    std::vector<double> sums = slice_abs_sums(t, axis);
    std::vector<double> out(sums.size(), 0.0);
    for (size_t i = 0; i < sums.size(); ++i)
        if (flags[i]) out[i] = sums[i];
    return out;
}

} // namespace nfuse::detail

// Two-pass streaming merge. Pass 1 (neuron_fusion only) reads grouped deltas
// and accumulates change scores; pass 2 re-derives each tensor's delta,
// suppresses, restores, merges, and hands the result to the ordered writer.
// Every per-tensor transform is a pure function of (recipe, tensor bytes),
// so any thread schedule produces identical output bytes.
inline MergeReport run_recipe(const MergeRecipe& recipe, const RunOptions& opts = {}) {
    auto t0 = std::chrono::steady_clock::now();
    recipe.validate();
    if (opts.write_output && recipe.output_path.empty())
        throw ConfigError("recipe needs output_path");

    WeightStore base = open_store(recipe.base_path);
    WeightStore tuned = open_store(recipe.tuned_path);

    CompatReport compat = validate_pair(base, tuned);
    std::vector<std::string> extras; // copied verbatim from one side
    const WeightStore* extra_src = nullptr;
    {
        bool ok = compat.shape_mismatches.empty();
        if (recipe.copy_unmatched_from == CopyUnmatched::Base) {
            extras = compat.missing_in_b; // only in base
            extra_src = &base;
            ok = ok && compat.missing_in_a.empty();
        } else if (recipe.copy_unmatched_from == CopyUnmatched::Tuned) {
            extras = compat.missing_in_a; // only in tuned
            extra_src = &tuned;
            ok = ok && compat.missing_in_b.empty();
        } else {
            ok = ok && compat.compatible();
        }
        if (!ok)
            throw CompatError("base and tuned stores are not compatible", compat.to_json().dump());
    }

    const std::vector<std::string>& names = compat.matched;

    // submanifest of merged tensors, used for mapping and planning
    std::map<std::string, TensorMeta> matched_manifest;
    for (const std::string& name : names) matched_manifest.emplace(name, base.manifest().at(name));

    NeuronMap map;
    bool fusion = recipe.method == MergeMethod::NeuronFusion;
    if (fusion)
        map = build_neuron_map(matched_manifest, resolve_template(recipe.template_ref));

    MergeReport report;
    report.recipe = recipe.resolved_json();
    report.peak_bytes_estimate = plan_memory(matched_manifest);

    // pass 1: change scores over the raw delta, then locate
    ChangeScoreTable table;
    NeuronSelection selection;
    if (fusion) {
        ScoreAccumulator acc(map);
        for (const std::string& name : names) {
            if (!map.grouped(name)) continue;
            Tensor d = compute_delta_tensor(base.read_tensor(name), tuned.read_tensor(name), name);
            acc.add(name, d);
        }
        acc.finish_into(table.group, table.slice);
        selection = select_top_neurons(table, recipe.restore == RestoreKind::None ? 0.0
                                                                                  : recipe.ratio_m,
                                       recipe.scope);
        report.selected_neuron_total = selection.total();
        report.neuron_total = map.total_neurons();
        for (auto& [gid, scores] : table.group) {
            GroupReportEntry g;
            g.neurons = int64_t(scores.size());
            auto sit = selection.selected.find(gid);
            g.selected = sit == selection.selected.end() ? 0 : int64_t(sit->second.size());
            std::vector<double> sorted(scores);
            std::sort(sorted.begin(), sorted.end());
            g.score_min = sorted.front();
            g.score_max = sorted.back();
            size_t n = sorted.size();
            g.score_median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
            report.groups.emplace(gid, g);
        }
    }

    // transform one matched tensor; pure, safe to run on any thread
    auto transform = [&](const std::string& name) {
        detail::TensorWork w;
        Tensor b = base.read_tensor(name);
        Tensor d = compute_delta_tensor(b, tuned.read_tensor(name), name);
        SparseResult sp = sparsify_tensor(d, recipe.sparsify, name);

        w.entry.parameters = d.numel();
        w.entry.survivor_count = sp.survivor_count;
        w.entry.survivor_fraction = double(sp.survivor_count) / double(d.numel());

        bool grouped = fusion && map.grouped(name);
        if (grouped && recipe.restore != RestoreKind::None) {
            const Assignment& a = map.assignments.at(name);
            NeuronAxis axis = role_axis(a.role);
            std::vector<uint8_t> flags = selection.flags(a.group, map.extent.at(a.group));
            if (recipe.restore == RestoreKind::Replace) {
                restore_replace_tensor(sp, d, axis, flags);
            } else {
                restore_rescale_tensor(sp, d, axis, flags, table.slice.at(name), w.rescale);
            }
            for (double v : detail::selected_slice_l1(sp.values, axis, flags))
                w.l1_selected += v;
        }
        for (float v : sp.values.data) {
            double a = std::fabs(double(v));
            w.l1 += a;
            if (a > w.entry.max_abs_delta) w.entry.max_abs_delta = a;
        }
        w.merged = merge_tensor(b, sp.values, recipe.alpha.value, name);
        if (!recipe.persist_delta_path.empty()) w.delta = std::move(d);
        return w;
    };

    // the output is written to a scratch directory and renamed into place
    fs::path out_dir(recipe.output_path);
    fs::path tmp_dir = opts.write_output ? fs::path(recipe.output_path + ".partial") : fs::path();
    std::optional<StoreWriter> writer;
    std::optional<StoreWriter> delta_writer;
    if (opts.write_output) {
        std::error_code ec;
        fs::remove_all(tmp_dir, ec);
        std::vector<PendingTensor> metas;
        for (const std::string& name : names)
            metas.push_back({name, recipe.out_dtype, base.manifest().at(name).shape});
        for (const std::string& name : extras) {
            const TensorMeta& m = extra_src->manifest().at(name);
            metas.push_back({name, m.dtype, m.shape});
        }
        std::sort(metas.begin(), metas.end(),
                  [](const PendingTensor& a, const PendingTensor& b) { return a.name < b.name; });
        writer.emplace(tmp_dir, std::move(metas), recipe.shard_budget);
        if (!recipe.persist_delta_path.empty()) {
            std::vector<PendingTensor> dmetas;
            for (const std::string& name : names)
                dmetas.push_back({name, DType::F32, base.manifest().at(name).shape});
            delta_writer.emplace(recipe.persist_delta_path + ".partial", std::move(dmetas),
                                 recipe.shard_budget, json{{"kind", "delta"}});
        }
    }

    auto consume = [&](const std::string& name, detail::TensorWork& w) {
        report.tensors.emplace(name, w.entry);
        report.rescale.merge(w.rescale);
        report.parameter_count += w.entry.parameters;
        report.survivor_count += w.entry.survivor_count;
        report.l1_delta += w.l1;
        report.l1_delta_selected += w.l1_selected;
        ++report.tensor_count;
        if (writer)
            writer->put(name, std::span<const float>(w.merged.data.data(), w.merged.data.size()));
        if (delta_writer)
            delta_writer->put(name, std::span<const float>(w.delta.data.data(), w.delta.data.size()));
    };

    try {
        // writer consumes in declaration order: matched and extra names merged
        std::vector<std::string> all_names(names);
        all_names.insert(all_names.end(), extras.begin(), extras.end());
        std::sort(all_names.begin(), all_names.end());
        std::set<std::string> extra_set(extras.begin(), extras.end());

        int threads = std::max(1, opts.threads);
        if (threads == 1) {
            for (const std::string& name : all_names) {
                if (extra_set.count(name)) {
                    if (writer) writer->put_raw(name, extra_src->read_raw(name));
                    ++report.copied_count;
                    continue;
                }
                detail::TensorWork w = transform(name);
                consume(name, w);
            }
        } else {
            // bounded window of in-flight transforms, consumed in order
            std::vector<std::pair<size_t, std::future<detail::TensorWork>>> window;
            size_t next = 0, done = 0;
            while (done < all_names.size()) {
                while (next < all_names.size() && window.size() < size_t(threads)) {
                    const std::string& name = all_names[next];
                    if (!extra_set.count(name))
                        window.emplace_back(next, std::async(std::launch::async, transform,
                                                             std::cref(name)));
                    ++next;
                }
                const std::string& name = all_names[done];
                if (extra_set.count(name)) {
                    if (writer) writer->put_raw(name, extra_src->read_raw(name));
                    ++report.copied_count;
                } else {
                    if (window.empty() || window.front().first != done)
                        throw Error("internal: transform window out of order", 1);
                    detail::TensorWork w = window.front().second.get();
                    window.erase(window.begin());
                    consume(name, w);
                }
                ++done;
            }
        }

        if (report.parameter_count)
            report.survivor_fraction = double(report.survivor_count) / double(report.parameter_count);

        if (writer) {
            writer->finish();
            if (delta_writer) delta_writer->finish();
            std::error_code ec;
            fs::remove_all(out_dir, ec);
            fs::rename(tmp_dir, out_dir);
            if (!recipe.persist_delta_path.empty()) {
                fs::remove_all(recipe.persist_delta_path, ec);
                fs::rename(recipe.persist_delta_path + ".partial", recipe.persist_delta_path);
            }
        }
    } catch (...) {
        if (opts.write_output) {
            std::error_code ec;
            fs::remove_all(tmp_dir, ec);
            if (!recipe.persist_delta_path.empty())
                fs::remove_all(recipe.persist_delta_path + ".partial", ec);
        }
        throw;
    }

    auto t1 = std::chrono::steady_clock::now();
    report.wall_time_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();

    if (opts.write_output) {
        fs::path report_path(recipe.output_path + ".report.json");
        std::ofstream out(report_path, std::ios::binary | std::ios::trunc);
        out << report.to_json().dump(2) << "\n";
        out.close();
        if (!out)
            throw IoError("failed writing '" + report_path.string() + "'");
    }
    return report;
}

} // namespace nfuse
