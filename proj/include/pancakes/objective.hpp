// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training objective over a set: forward every image through the model, build
// the d_{m,k} table for all M * K candidates, take the min, and (optionally)
// backpropagate through the selected candidate only.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/loss.hpp"
#include "pancakes/net/model.hpp"

namespace pancakes {

/// Single-target min-assignment loss, or the two-target "full protocol" variant
/// when `targets2` is non-empty.
template <class S>
LossReport evaluate_objective(const Model<S>& model, std::span<const Grid> images, std::span<const Grid> targets,
                              int num_protocols, int num_labels, std::vector<S>* grads,
                              std::span<const Grid> targets2 = {}) {
    using Mat = typename Model<S>::Mat;
    using Planes = typename Model<S>::Planes;
    using Vec = typename Model<S>::Vec;

    if (images.empty()) throw DomainError("objective needs a non-empty set");
    if (images.size() != targets.size()) throw DomainError("images and targets differ in count");
    const bool multi = !targets2.empty();
    if (multi && targets2.size() != images.size()) throw DomainError("second target set differs in count");
    if (num_protocols < 1 || num_labels < 2) throw DomainError("objective needs M >= 1 and K >= 2");
    for (std::size_t s = 0; s < images.size(); ++s) {
        require_same_shape(images[s], targets[s], "objective");
        if (multi) require_same_shape(images[s], targets2[s], "objective");
    }

    const std::size_t set_size = images.size();
    const int M = num_protocols, K = num_labels;
    std::vector<typename Model<S>::EncoderCache> caches(grads ? set_size : 0);
    std::vector<DistParams<S>> phis(set_size);
    std::vector<Mat> projs(set_size);

    LossReport t1, t2;
    for (LossReport* r : {&t1, &t2}) {
        r->num_protocols = M;
        r->num_labels = K;
        r->table.assign(static_cast<std::size_t>(M) * K, 0.0);
    }

    // Embedding projections are shared by all images.
    std::vector<Vec> emb(static_cast<std::size_t>(M) * K), proj_emb(emb.size());
    for (int m = 1; m <= M; ++m)
        for (int k = 1; k <= K; ++k) {
            const std::size_t i = static_cast<std::size_t>(m - 1) * K + (k - 1);
            emb[i] = model.embedding_vector(m, M, k, K);
            proj_emb[i] = model.project_embedding(emb[i]);
        }

    const auto pixels = images.front().size();
    Planes logits(K, static_cast<Eigen::Index>(pixels));
    for (std::size_t s = 0; s < set_size; ++s) {
        phis[s] = model.encode(images[s], grads ? &caches[s] : nullptr);
        projs[s] = model.project_phi(phis[s]);
        const auto y1 = targets[s].values<std::uint8_t>();
        for (int m = 1; m <= M; ++m) {
            for (int k = 1; k <= K; ++k)
                model.head_logits(projs[s], proj_emb[static_cast<std::size_t>(m - 1) * K + (k - 1)],
                                  std::span<S>(logits.row(k - 1).data(), pixels));
            const Planes probs = Model<S>::softmax_columns(logits);
            for (int k = 1; k <= K; ++k) {
                const std::span<const S> p(probs.row(k - 1).data(), pixels);
                const std::size_t i = static_cast<std::size_t>(m - 1) * K + (k - 1);
                t1.table[i] += soft_dice_loss(p, y1);
                if (multi) t2.table[i] += soft_dice_loss(p, targets2[s].values<std::uint8_t>());
            }
        }
    }
    for (auto& v : t1.table) v /= static_cast<double>(set_size);
    for (auto& v : t2.table) v /= static_cast<double>(set_size);
    if (multi) select_multi_target(t1, t2);
    else select_min(t1);

    // A poisoned table has no meaningful argmin; report it and skip backward.
    for (const auto* r : {&t1, &t2})
        for (double v : r->table)
            if (!std::isfinite(v)) t1.value = std::numeric_limits<double>::quiet_NaN();
    if (!grads || std::isnan(t1.value)) return t1;
    if (grads->size() != model.param_count()) grads->assign(model.param_count(), S(0));

    // Backward through protocol m*: the selected label planes receive the Dice
    // gradient, the softmax spreads it over all K planes.
    const int m_star = t1.best_protocol;
    const double scale = (multi ? 0.5 : 1.0) / static_cast<double>(set_size);
    typename Model<S>::HeadCache hc;
    std::vector<S> row(pixels);
    for (std::size_t s = 0; s < set_size; ++s) {
        for (int k = 1; k <= K; ++k)
            model.head_logits(projs[s], proj_emb[static_cast<std::size_t>(m_star - 1) * K + (k - 1)],
                              std::span<S>(logits.row(k - 1).data(), pixels));
        const Planes probs = Model<S>::softmax_columns(logits);

        Planes dprob = Planes::Zero(K, static_cast<Eigen::Index>(pixels));
        auto add_target = [&](int k, const Grid& target) {
            const auto y = target.values<std::uint8_t>();
            const std::span<const S> p(probs.row(k - 1).data(), pixels);
            soft_dice_grad_accumulate(dice_sums(p, y), y, scale, std::span<S>(dprob.row(k - 1).data(), pixels));
        };
        add_target(t1.best_label, targets[s]);
        if (multi) add_target(t1.best_label2, targets2[s]);

        // dlogit_j = p_j * (g_j - sum_k p_k g_k)
        Planes dlogit(K, static_cast<Eigen::Index>(pixels));
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(pixels); ++i) {
            S dot = 0;
            for (int k = 0; k < K; ++k) dot += probs(k, i) * dprob(k, i);
            for (int k = 0; k < K; ++k) dlogit(k, i) = probs(k, i) * (dprob(k, i) - dot);
        }

        Mat dproj = Mat::Zero(projs[s].rows(), projs[s].cols());
        for (int k = 1; k <= K; ++k) {
            const std::size_t i = static_cast<std::size_t>(m_star - 1) * K + (k - 1);
            model.head_logits_cached(projs[s], proj_emb[i], row, hc);
            model.head_backward(hc, std::span<const S>(dlogit.row(k - 1).data(), pixels), emb[i], dproj,
                                grads->data());
        }
        const Mat dphi = model.finish_head_backward(phis[s], dproj, grads->data());
        model.encode_backward(caches[s], dphi, grads->data());
    }
    return t1;
}

}  // namespace pancakes
