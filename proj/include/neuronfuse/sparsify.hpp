#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string_view>

#include "neuronfuse/errors.hpp"
#include "neuronfuse/rng.hpp"
#include "neuronfuse/tensor.hpp"

namespace nfuse {

// Suppression operators applied per tensor to the delta. Survivors keep (or
// rescale) their values; everything else becomes exactly zero. The mask marks
// survivors, so downstream restoration can tell a dropped zero from a real one.

enum class SparsifyKind { Identity, TiesTrim, Breadcrumbs, Dare, Della };

inline const char* sparsify_kind_name(SparsifyKind k) {
    switch (k) {
        case SparsifyKind::Identity:    return "identity";
        case SparsifyKind::TiesTrim:    return "ties_trim";
        case SparsifyKind::Breadcrumbs: return "breadcrumbs";
        case SparsifyKind::Dare:        return "dare";
        case SparsifyKind::Della:       return "della";
    }
    return "?";
}

inline SparsifyKind parse_sparsify_kind(const std::string& s) {
    if (s == "identity")    return SparsifyKind::Identity;
    if (s == "ties_trim")   return SparsifyKind::TiesTrim;
    if (s == "breadcrumbs") return SparsifyKind::Breadcrumbs;
    if (s == "dare")        return SparsifyKind::Dare;
    if (s == "della")       return SparsifyKind::Della;
    throw ConfigError("unknown sparsify kind '" + s + "'");
}

struct SparsifyConfig {
    SparsifyKind kind = SparsifyKind::Identity;
    double density_k = 1.0; // ties_trim: fraction of entries kept
    double beta = 0.0;      // breadcrumbs: fraction dropped from the small end
    double gamma = 0.0;     // breadcrumbs: fraction dropped from the large end
    double drop_p = 0.0;    // dare: per-element drop probability
    double mean_p = 0.0;    // della: mean drop probability
    double epsilon = 0.0;   // della: half-width of the rank-dependent range
    uint64_t seed = 0;      // dare/della stream seed

    void validate() const {
        switch (kind) {
            case SparsifyKind::Identity:
                break;
            case SparsifyKind::TiesTrim:
                if (!(density_k > 0.0 && density_k <= 1.0))
                    throw ConfigError("ties_trim density_k must be in (0, 1]");
                break;
            case SparsifyKind::Breadcrumbs:
                if (!(beta >= 0.0 && gamma >= 0.0 && beta + gamma < 1.0))
                    throw ConfigError("breadcrumbs needs beta, gamma >= 0 with beta + gamma < 1");
                break;
            case SparsifyKind::Dare:
                if (!(drop_p >= 0.0 && drop_p < 1.0))
                    throw ConfigError("dare drop_p must be in [0, 1)");
                break;
            case SparsifyKind::Della:
                if (!(mean_p - epsilon >= 0.0 && mean_p + epsilon < 1.0))
                    throw ConfigError("della needs 0 <= mean_p - epsilon and mean_p + epsilon < 1");
                if (epsilon < 0.0)
                    throw ConfigError("della epsilon must be >= 0");
                break;
        }
    }
};

struct SparseResult {
    Tensor values;
    ByteBuf mask; // 1 survivor, 0 dropped
    int64_t survivor_count = 0;
};

namespace detail {

inline void require_nonempty(const Tensor& t) {
    if (t.numel() <= 0)
        throw ValidationError("cannot sparsify an empty tensor");
}

inline SparseResult keep_all(const Tensor& t) {
    SparseResult r;
    r.values = t;
    r.mask.assign(size_t(t.numel()), 1);
    r.survivor_count = t.numel();
    return r;
}

} // namespace detail

inline SparseResult sub_identity(const Tensor& t) {
    detail::require_nonempty(t);
    return detail::keep_all(t);
}

// Keep the max(1, floor(k*N)) largest-magnitude entries. Ties at the
// threshold keep the smaller flat index.
inline SparseResult sub_ties_trim(const Tensor& t, double density_k) {
    detail::require_nonempty(t);
    if (!(density_k > 0.0 && density_k <= 1.0))
        throw ConfigError("ties_trim density_k must be in (0, 1]");
    int64_t n = t.numel();
    int64_t keep = std::max<int64_t>(1, int64_t(std::floor(density_k * double(n))));
    if (keep > n) keep = n;

    std::vector<int64_t> idx(size_t(n));
    std::iota(idx.begin(), idx.end(), 0);
    auto better = [&](int64_t a, int64_t b) {
        float ma = std::fabs(t.data[size_t(a)]);
        float mb = std::fabs(t.data[size_t(b)]);
        if (ma != mb) return ma > mb;
        return a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + keep - 1, idx.end(), better);

    SparseResult r;
    r.values = Tensor::zeros(t.shape);
    r.mask.assign(size_t(n), 0);
    for (int64_t i = 0; i < keep; ++i) {
        int64_t j = idx[size_t(i)];
        r.values.data[size_t(j)] = t.data[size_t(j)];
        r.mask[size_t(j)] = 1;
    }
    r.survivor_count = keep;
    return r;
}

// Drop floor(beta*N) smallest- and floor(gamma*N) largest-magnitude entries.
// Each tail independently prefers the lower flat index among magnitude ties;
// the top tail skips entries the bottom tail already took, which can only
// happen when a single tie block spans both cuts.
inline SparseResult sub_breadcrumbs(const Tensor& t, double beta, double gamma) {
    detail::require_nonempty(t);
    if (!(beta >= 0.0 && gamma >= 0.0 && beta + gamma < 1.0))
        throw ConfigError("breadcrumbs needs beta, gamma >= 0 with beta + gamma < 1");
    int64_t n = t.numel();
    int64_t drop_small = int64_t(std::floor(beta * double(n)));
    int64_t drop_large = int64_t(std::floor(gamma * double(n)));

    std::vector<int64_t> asc(size_t(n));
    std::iota(asc.begin(), asc.end(), 0);
    std::sort(asc.begin(), asc.end(), [&](int64_t a, int64_t b) {
        float ma = std::fabs(t.data[size_t(a)]);
        float mb = std::fabs(t.data[size_t(b)]);
        if (ma != mb) return ma < mb;
        return a < b;
    });

    std::vector<uint8_t> dropped(size_t(n), 0);
    for (int64_t i = 0; i < drop_small; ++i) dropped[size_t(asc[size_t(i)])] = 1;

    std::vector<int64_t> desc(size_t(n));
    std::iota(desc.begin(), desc.end(), 0);
    std::sort(desc.begin(), desc.end(), [&](int64_t a, int64_t b) {
        float ma = std::fabs(t.data[size_t(a)]);
        float mb = std::fabs(t.data[size_t(b)]);
        if (ma != mb) return ma > mb;
        return a < b;
    });
    int64_t taken = 0;
    for (size_t i = 0; i < desc.size() && taken < drop_large; ++i) {
        if (dropped[size_t(desc[i])]) continue;
        dropped[size_t(desc[i])] = 1;
        ++taken;
    }

    SparseResult r;
    r.values = Tensor::zeros(t.shape);
    r.mask.assign(size_t(n), 0);
    for (int64_t j = 0; j < n; ++j) {
        if (dropped[size_t(j)]) continue;
        r.values.data[size_t(j)] = t.data[size_t(j)];
        r.mask[size_t(j)] = 1;
        ++r.survivor_count;
    }
    return r;
}

// Element j is dropped when the j-th stream draw falls below drop_p;
// survivors are rescaled by 1/(1 - drop_p) to keep the expectation.
inline SparseResult sub_dare(const Tensor& t, double drop_p, uint64_t seed,
                             std::string_view name) {
    detail::require_nonempty(t);
    if (!(drop_p >= 0.0 && drop_p < 1.0))
        throw ConfigError("dare drop_p must be in [0, 1)");
    TensorRng rng(seed, name);
    double scale = 1.0 / (1.0 - drop_p);

    SparseResult r;
    r.values = Tensor::zeros(t.shape);
    r.mask.assign(size_t(t.numel()), 0);
    for (int64_t j = 0; j < t.numel(); ++j) {
        if (rng.uniform(uint64_t(j)) < drop_p) continue;
        r.values.data[size_t(j)] = float(double(t.data[size_t(j)]) * scale);
        r.mask[size_t(j)] = 1;
        ++r.survivor_count;
    }
    return r;
}

// Magnitude-aware random drop. Within each matrix row (the whole tensor for
// vectors) elements are ranked by ascending magnitude, ties by lower flat
// index; rank r of n gets drop probability
//   p_r = (mean_p + epsilon) - r * (2*epsilon) / (n - 1)
// so small magnitudes are dropped more often. A single-element row gets
// mean_p. Element j still consumes the j-th draw of the tensor stream, and
// each survivor is rescaled by its own 1/(1 - p_j).
inline SparseResult sub_della(const Tensor& t, double mean_p, double epsilon, uint64_t seed,
                              std::string_view name) {
    detail::require_nonempty(t);
    if (!(mean_p - epsilon >= 0.0 && mean_p + epsilon < 1.0) || epsilon < 0.0)
        throw ConfigError("della needs 0 <= mean_p - epsilon and mean_p + epsilon < 1");
    TensorRng rng(seed, name);
    int64_t rows = t.is_matrix() ? t.shape[0] : 1;
    int64_t cols = t.is_matrix() ? t.shape[1] : t.numel();

    SparseResult r;
    r.values = Tensor::zeros(t.shape);
    r.mask.assign(size_t(t.numel()), 0);

    std::vector<int64_t> order(size_t(cols));
    std::vector<double> prob(size_t(cols));
    for (int64_t row = 0; row < rows; ++row) {
        const float* v = t.data.data() + row * cols;
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            float ma = std::fabs(v[a]);
            float mb = std::fabs(v[b]);
            if (ma != mb) return ma < mb;
            return a < b;
        });
        if (cols == 1) {
            prob[0] = mean_p;
        } else {
            double step = 2.0 * epsilon / double(cols - 1);
            for (int64_t rank = 0; rank < cols; ++rank)
                prob[size_t(order[size_t(rank)])] = (mean_p + epsilon) - double(rank) * step;
        }
        for (int64_t c = 0; c < cols; ++c) {
            int64_t j = row * cols + c;
            double p = prob[size_t(c)];
            if (rng.uniform(uint64_t(j)) < p) continue;
            r.values.data[size_t(j)] = float(double(v[c]) * (1.0 / (1.0 - p)));
            r.mask[size_t(j)] = 1;
            ++r.survivor_count;
        }
    }
    return r;
}

inline SparseResult sparsify_tensor(const Tensor& t, const SparsifyConfig& cfg,
                                    std::string_view name) {
    cfg.validate();
    switch (cfg.kind) {
        case SparsifyKind::Identity:    return sub_identity(t);
        case SparsifyKind::TiesTrim:    return sub_ties_trim(t, cfg.density_k);
        case SparsifyKind::Breadcrumbs: return sub_breadcrumbs(t, cfg.beta, cfg.gamma);
        case SparsifyKind::Dare:        return sub_dare(t, cfg.drop_p, cfg.seed, name);
        case SparsifyKind::Della:       return sub_della(t, cfg.mean_p, cfg.epsilon, cfg.seed, name);
    }
    throw ConfigError("unhandled sparsify kind");
}

} // namespace nfuse
