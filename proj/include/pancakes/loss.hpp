// SPDX-License-Identifier: Apache-2.0
#pragma once

// Soft Dice loss, set-averaged candidate tables and the min-assignment losses.
// Candidate (m, k) indices in reports are 1-based, matching the embedding.

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/types.hpp"

namespace pancakes {

inline constexpr double kDiceSmoothing = 1e-3;

struct DiceSums {
    double intersection = 0.0;
    double pred_sum = 0.0;
    double target_sum = 0.0;

    double loss() const {
        return 1.0 - (2.0 * intersection + kDiceSmoothing) / (pred_sum + target_sum + kDiceSmoothing);
    }
};

template <class S>
DiceSums dice_sums(std::span<const S> p, std::span<const std::uint8_t> y) {
    if (p.size() != y.size())
        throw DomainError("soft dice: " + std::to_string(p.size()) + " predictions vs " +
                          std::to_string(y.size()) + " targets");
    DiceSums s;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = static_cast<double>(p[i]);
        s.pred_sum += pi;
        if (y[i]) {
            s.intersection += pi;
            s.target_sum += 1.0;
        }
    }
    return s;
}

/// 1 - (2 sum(p y) + eps) / (sum p + sum y + eps), eps = 1e-3.
template <class S>
double soft_dice_loss(std::span<const S> p, std::span<const std::uint8_t> y) {
    return dice_sums(p, y).loss();
}

inline double soft_dice_loss(const Grid& p, const Grid& y) {
    require_same_shape(p, y, "soft dice");
    return soft_dice_loss(p.values<float>(), y.values<std::uint8_t>());
}

/// out[i] += scale * dLoss/dp[i], where `sums` were computed from (p, y).
template <class S>
void soft_dice_grad_accumulate(const DiceSums& sums, std::span<const std::uint8_t> y, double scale,
                               std::span<S> out) {
    const double num = 2.0 * sums.intersection + kDiceSmoothing;
    const double den = sums.pred_sum + sums.target_sum + kDiceSmoothing;
    const double g_neg = scale * num / (den * den);         // y = 0
    const double g_pos = g_neg - scale * 2.0 / den;         // y = 1
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<S>(y[i] ? g_pos : g_neg);
}

/// d_{m,k} table with argmin bookkeeping. Entries are stored protocol-major.
struct LossReport {
    int num_protocols = 0;
    int num_labels = 0;
    std::vector<double> table;
    int best_protocol = 0;  // m*, 1-based
    int best_label = 0;     // k*, 1-based
    int best_label2 = 0;    // second target's label for the multi-target variant, else 0
    double value = std::numeric_limits<double>::quiet_NaN();

    double d(int m, int k) const {
        return table.at(static_cast<std::size_t>(m - 1) * num_labels + (k - 1));
    }
};

/// Lexicographically first minimum of a protocol-major M x K table.
inline void select_min(LossReport& r) {
    r.value = std::numeric_limits<double>::infinity();
    for (int m = 1; m <= r.num_protocols; ++m)
        for (int k = 1; k <= r.num_labels; ++k) {
            const double v = r.d(m, k);
            if (v < r.value) {
                r.value = v;
                r.best_protocol = m;
                r.best_label = k;
            }
        }
}

/// Soft predictions for one image: one map with K channels per protocol.
template <class S>
using ProtocolMaps = std::vector<SoftLabelMap<S>>;

template <class S>
LossReport set_loss_table(std::span<const ProtocolMaps<S>> preds, std::span<const Grid> targets) {
    if (preds.empty()) throw DomainError("loss table needs at least one set element");
    if (preds.size() != targets.size()) throw DomainError("predictions and targets differ in set size");
    LossReport r;
    r.num_protocols = static_cast<int>(preds.front().size());
    if (r.num_protocols < 1) throw DomainError("loss table needs at least one protocol");
    r.num_labels = preds.front().front().num_labels;
    r.table.assign(static_cast<std::size_t>(r.num_protocols) * r.num_labels, 0.0);
    for (std::size_t s = 0; s < preds.size(); ++s) {
        if (static_cast<int>(preds[s].size()) != r.num_protocols)
            throw DomainError("set elements disagree on M");
        const auto y = targets[s].values<std::uint8_t>();
        for (int m = 0; m < r.num_protocols; ++m) {
            const auto& map = preds[s][m];
            if (map.num_labels != r.num_labels) throw DomainError("set elements disagree on K");
            if (map.pixels() != y.size()) throw DomainError("prediction/target shape mismatch");
            for (int k = 0; k < r.num_labels; ++k) {
                const std::span<const S> p(map.channel(k), map.pixels());
                r.table[static_cast<std::size_t>(m) * r.num_labels + k] += soft_dice_loss(p, y);
            }
        }
    }
    for (auto& v : r.table) v /= static_cast<double>(preds.size());
    return r;
}

/// min over (m, k) of the set-averaged Dice loss; one candidate for the whole set.
template <class S>
LossReport min_assignment_loss(std::span<const ProtocolMaps<S>> preds, std::span<const Grid> targets) {
    LossReport r = set_loss_table(preds, targets);
    select_min(r);
    return r;
}

/// Picks min over m and ordered pairs k1 != k2 of (d1_{m,k1} + d2_{m,k2}) / 2,
/// writing the result into `t1` (whose table stays the first target's).
inline void select_multi_target(LossReport& t1, const LossReport& t2) {
    if (t1.num_labels < 2) throw DomainError("multi-target loss needs K >= 2");
    if (t1.num_protocols != t2.num_protocols || t1.num_labels != t2.num_labels)
        throw DomainError("multi-target tables differ in shape");
    t1.value = std::numeric_limits<double>::infinity();
    for (int m = 1; m <= t1.num_protocols; ++m)
        for (int k1 = 1; k1 <= t1.num_labels; ++k1)
            for (int k2 = 1; k2 <= t1.num_labels; ++k2) {
                if (k1 == k2) continue;
                const double v = 0.5 * (t1.d(m, k1) + t2.d(m, k2));
                if (v < t1.value) {
                    t1.value = v;
                    t1.best_protocol = m;
                    t1.best_label = k1;
                    t1.best_label2 = k2;
                }
            }
}

/// Multi-target ("full protocol") variant: two targets must land on distinct
/// labels of the same protocol.
template <class S>
LossReport multi_target_min_loss(std::span<const ProtocolMaps<S>> preds, std::span<const Grid> targets1,
                                 std::span<const Grid> targets2) {
    if (targets1.size() != targets2.size()) throw DomainError("multi-target: target sets differ in size");
    LossReport t1 = set_loss_table(preds, targets1);
    select_multi_target(t1, set_loss_table(preds, targets2));
    return t1;
}

}  // namespace pancakes
