// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hard-mask metrics and their set versions: one (m, k) candidate is chosen for
// the whole set, scored by the mean over the set's images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/rng.hpp"

namespace pancakes {

enum class Metric { dice, iou, surface_distance };

inline const char* metric_name(Metric m) {
    switch (m) {
    case Metric::dice: return "dice";
    case Metric::iou: return "iou";
    case Metric::surface_distance: return "surface_distance";
    }
    return "?";
}

inline Metric parse_metric(const std::string& s) {
    if (s == "dice") return Metric::dice;
    if (s == "iou") return Metric::iou;
    if (s == "surface_distance" || s == "sd" || s == "assd") return Metric::surface_distance;
    throw DomainError("unknown metric '" + s + "'");
}

inline bool lower_is_better(Metric m) { return m == Metric::surface_distance; }

namespace detail {

inline void require_mask(const Grid& g, const char* what) {
    if (g.dtype() != DType::u8) throw DomainError(std::string(what) + ": expected a u8 mask");
}

inline double dice_from_counts(double inter, double a, double b) {
    if (a + b == 0) return 1.0;
    return 2.0 * inter / (a + b);
}

inline double iou_from_counts(double inter, double a, double b) {
    const double uni = a + b - inter;
    if (uni == 0) return 1.0;
    return inter / uni;
}

// 1-D squared distance transform (lower envelope of parabolas).
inline void sq_dt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s;
        while (true) {
            const int p = v[k];
            s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
            if (s > z[k]) break;
            --k;  // z[0] = -inf stops this at k = 0
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    if (k < 0) {
        std::fill(d, d + n, inf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double dq = q - v[j];
        d[q] = dq * dq + f[v[j]];
    }
}

}  // namespace detail

/// Squared Euclidean distance from every pixel to the nearest site (inf without sites).
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, int h, int w) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> g(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
    std::vector<int> v;
    std::vector<double> z, col_in(h), col_out(h), row_out(w);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) col_in[r] = g[static_cast<std::size_t>(r) * w + c];
        detail::sq_dt_1d(col_in.data(), h, col_out.data(), v, z);
        for (int r = 0; r < h; ++r) g[static_cast<std::size_t>(r) * w + c] = col_out[r];
    }
    for (int r = 0; r < h; ++r) {
        double* row = g.data() + static_cast<std::size_t>(r) * w;
        detail::sq_dt_1d(row, w, row_out.data(), v, z);
        std::copy(row_out.begin(), row_out.end(), row);
    }
    return g;
}

/// Foreground pixels with a 4-neighbour in the background or on the image edge.
inline std::vector<std::uint8_t> mask_boundary(std::span<const std::uint8_t> m, int h, int w) {
    std::vector<std::uint8_t> b(m.size(), 0);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            if (!m[i]) continue;
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1 || !m[i - w] || !m[i + w] || !m[i - 1] || !m[i + 1])
                b[i] = 1;
        }
    return b;
}

inline double dice(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "dice");
    detail::require_mask(a, "dice");
    detail::require_mask(b, "dice");
    const auto va = a.values<std::uint8_t>(), vb = b.values<std::uint8_t>();
    double inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        na += va[i] != 0;
        nb += vb[i] != 0;
        inter += va[i] && vb[i];
    }
    return detail::dice_from_counts(inter, na, nb);
}

inline double iou(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "iou");
    detail::require_mask(a, "iou");
    detail::require_mask(b, "iou");
    const auto va = a.values<std::uint8_t>(), vb = b.values<std::uint8_t>();
    double inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        na += va[i] != 0;
        nb += vb[i] != 0;
        inter += va[i] && vb[i];
    }
    return detail::iou_from_counts(inter, na, nb);
}

namespace detail {

// Mean over boundary pixels of `from` of sqrt(dist2_to[i]).
inline double mean_boundary_distance(const std::vector<std::uint8_t>& from, const std::vector<double>& dist2_to) {
    double total = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < from.size(); ++i)
        if (from[i]) {
            total += std::sqrt(dist2_to[i]);
            ++n;
        }
    return n ? total / static_cast<double>(n) : 0.0;
}

inline double assd(const std::vector<std::uint8_t>& ba, const std::vector<std::uint8_t>& bb, bool a_empty,
                   bool b_empty, int h, int w) {
    if (a_empty && b_empty) return 0.0;
    if (a_empty || b_empty) return std::sqrt(double(h) * h + double(w) * w);
    const auto da = squared_distance_transform(ba, h, w), db = squared_distance_transform(bb, h, w);
    return 0.5 * (mean_boundary_distance(ba, db) + mean_boundary_distance(bb, da));
}

}  // namespace detail

/// Average symmetric surface distance in pixels. One empty mask scores the image diagonal.
inline double surface_distance(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "surface_distance");
    detail::require_mask(a, "surface_distance");
    detail::require_mask(b, "surface_distance");
    const int h = a.height(), w = a.width();
    const auto va = a.values<std::uint8_t>(), vb = b.values<std::uint8_t>();
    return detail::assd(mask_boundary(va, h, w), mask_boundary(vb, h, w), count_foreground(a) == 0,
                        count_foreground(b) == 0, h, w);
}

inline double metric_value(Metric m, const Grid& a, const Grid& b) {
    switch (m) {
    case Metric::dice: return dice(a, b);
    case Metric::iou: return iou(a, b);
    case Metric::surface_distance: return surface_distance(a, b);
    }
    return 0.0;
}

struct SetEvalResult {
    double best_value = 0.0;
    int best_protocol = 0;  // 1-based
    int best_label = 0;     // 1-based channel index; label value best_label - 1
    std::vector<double> per_image;
};

/// Per-image candidate scores: scores[s][(m-1)*K + (k-1)].
using CandidateScores = std::vector<std::vector<double>>;

/// Picks the candidate with the best set mean; ties go to the lexicographically first.
inline SetEvalResult select_set_metric(const CandidateScores& scores, int num_protocols, int num_labels,
                                       bool lower_better) {
    if (scores.empty()) throw DomainError("set metric needs at least one image");
    const std::size_t C = static_cast<std::size_t>(num_protocols) * num_labels;
    for (const auto& row : scores)
        if (row.size() != C) throw DomainError("candidate score rows disagree with M*K");
    SetEvalResult r;
    double best = lower_better ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < C; ++c) {
        double total = 0;
        for (const auto& row : scores) total += row[c];
        const double mean = total / static_cast<double>(scores.size());
        if (lower_better ? mean < best : mean > best) {
            best = mean;
            best_c = c;
        }
    }
    r.best_value = best;
    r.best_protocol = static_cast<int>(best_c / num_labels) + 1;
    r.best_label = static_cast<int>(best_c % num_labels) + 1;
    for (const auto& row : scores) r.per_image.push_back(row[best_c]);
    return r;
}

/// Scores of every label channel of every protocol's hard map against one ground truth.
/// `hard[m]` holds label values 0..K-1; channel k is the indicator of label k-1.
inline std::vector<double> candidate_scores(std::span<const Grid> hard, const Grid& gt, int num_labels, Metric metric) {
    detail::require_mask(gt, "set metric");
    const int M = static_cast<int>(hard.size());
    const int K = num_labels;
    const int h = gt.height(), w = gt.width();
    const auto y = gt.values<std::uint8_t>();
    const double ny = static_cast<double>(count_foreground(gt));
    std::vector<double> out(static_cast<std::size_t>(M) * K);

    std::vector<std::uint8_t> gt_boundary;
    std::vector<double> gt_dist2;
    if (metric == Metric::surface_distance && ny > 0) {
        gt_boundary = mask_boundary(y, h, w);
        gt_dist2 = squared_distance_transform(gt_boundary, h, w);
    }
    std::vector<double> inter(K), npred(K);
    std::vector<std::uint8_t> chan(gt.size());
    for (int m = 0; m < M; ++m) {
        require_same_shape(hard[m], gt, "set metric");
        if (hard[m].dtype() != DType::u16) throw DomainError("set metric: hard maps must be u16 label grids");
        const auto lab = hard[m].values<std::uint16_t>();
        std::fill(inter.begin(), inter.end(), 0.0);
        std::fill(npred.begin(), npred.end(), 0.0);
        for (std::size_t i = 0; i < lab.size(); ++i) {
            if (lab[i] >= K) throw DomainError("set metric: label value exceeds K-1");
            npred[lab[i]] += 1;
            if (y[i]) inter[lab[i]] += 1;
        }
        for (int k = 0; k < K; ++k) {
            double v = 0;
            switch (metric) {
            case Metric::dice: v = detail::dice_from_counts(inter[k], npred[k], ny); break;
            case Metric::iou: v = detail::iou_from_counts(inter[k], npred[k], ny); break;
            case Metric::surface_distance: {
                if (npred[k] == 0 || ny == 0) {
                    v = detail::assd({}, {}, npred[k] == 0, ny == 0, h, w);
                    break;
                }
                for (std::size_t i = 0; i < lab.size(); ++i) chan[i] = lab[i] == k;
                const auto pb = mask_boundary(chan, h, w);
                const auto pd = squared_distance_transform(pb, h, w);
                v = 0.5 * (detail::mean_boundary_distance(pb, gt_dist2) +
                           detail::mean_boundary_distance(gt_boundary, pd));
                break;
            }
            }
            out[static_cast<std::size_t>(m) * K + k] = v;
        }
    }
    return out;
}

/// Set Dice / Set IoU / Set Surface Distance. hard[s][m] are label grids with values in [0, K).
inline SetEvalResult set_metric(const std::vector<std::vector<Grid>>& hard, std::span<const Grid> gts, int num_labels,
                                Metric metric) {
    if (hard.empty()) throw DomainError("set metric needs at least one image");
    if (hard.size() != gts.size()) throw DomainError("set metric: predictions and targets differ in count");
    const int M = static_cast<int>(hard.front().size());
    if (M < 1) throw DomainError("set metric needs at least one protocol");
    CandidateScores scores;
    for (std::size_t s = 0; s < hard.size(); ++s) {
        if (static_cast<int>(hard[s].size()) != M) throw DomainError("set elements disagree on M");
        scores.push_back(candidate_scores(hard[s], gts[s], num_labels, metric));
    }
    return select_set_metric(scores, M, num_labels, lower_is_better(metric));
}

/// Linear-interpolated quantile of sorted data (position q * (n - 1)).
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw DomainError("quantile of empty data");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Percentile bootstrap interval of the mean.
inline std::pair<double, double> bootstrap_ci(std::span<const double> values, int n_resamples = 1000,
                                              double level = 0.95, std::uint64_t seed = 0) {
    if (values.empty()) throw DomainError("bootstrap needs at least one value");
    if (n_resamples < 1) throw DomainError("bootstrap needs at least one resample");
    if (!(level > 0 && level < 1)) throw DomainError("bootstrap level must be in (0, 1)");
    Rng rng(seed);
    std::vector<double> means(static_cast<std::size_t>(n_resamples));
    for (auto& m : means) {
        double total = 0;
        for (std::size_t i = 0; i < values.size(); ++i) total += values[rng.index(values.size())];
        m = total / static_cast<double>(values.size());
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    return {sorted_quantile(means, tail), sorted_quantile(means, 1.0 - tail)};
}

}  // namespace pancakes
