// SPDX-License-Identifier: Apache-2.0
#pragma once

// Scoring a model (or stored predictions) on sets of images with a set metric.

#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/core/resample.hpp"
#include "pancakes/data.hpp"
#include "pancakes/metrics.hpp"
#include "pancakes/net/model.hpp"

namespace pancakes {

struct SetScore {
    std::string dataset;
    double value = 0;
    int best_protocol = 0;
    int best_label = 0;  // 1-based channel
};

struct EvalReport {
    Metric metric = Metric::dice;
    int num_protocols = 0, num_labels = 0, set_size = 0;
    double mean = 0, ci_lo = 0, ci_hi = 0;
    int bootstrap = 1000;
    std::uint64_t seed = 0;
    std::vector<SetScore> sets;
};

inline void to_json(nlohmann::json& j, const SetScore& s) {
    j = nlohmann::json{{"dataset", s.dataset}, {"value", s.value}, {"best_protocol", s.best_protocol},
                       {"best_label", s.best_label}};
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"metric", std::string("set_") + (r.metric == Metric::dice  ? "dice"
                                                         : r.metric == Metric::iou ? "iou"
                                                                                   : "sd")},
                       {"M", r.num_protocols}, {"K", r.num_labels}, {"S", r.set_size},
                       {"num_sets", r.sets.size()}, {"mean", r.mean}, {"ci", {r.ci_lo, r.ci_hi}},
                       {"bootstrap", r.bootstrap}, {"seed", r.seed}, {"sets", r.sets}};
}

/// Mean and bootstrap CI of per-set scores.
inline void summarize(EvalReport& r) {
    if (r.sets.empty()) throw DomainError("evaluation has no sets");
    std::vector<double> v;
    for (const auto& s : r.sets) v.push_back(s.value);
    double total = 0;
    for (double x : v) total += x;
    r.mean = total / static_cast<double>(v.size());
    std::tie(r.ci_lo, r.ci_hi) = bootstrap_ci(v, r.bootstrap, 0.95, r.seed);
}

/// Predictions for arbitrary image lists: hard[i][m] for image i, protocol m.
/// Images are brought to the model's working resolution first (0 keeps them as is).
template <class S>
std::vector<std::vector<Grid>> predict_hard(const Model<S>& model, const std::vector<Grid>& images, int M, int K,
                                            int resolution) {
    std::vector<std::vector<Grid>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(model.segment(downsample_to(img, resolution), M, K).hard);
    return out;
}

/// Scores pre-computed predictions. hard[i][m] pairs with sets flattened in order.
inline EvalReport score_sets(const std::vector<EvalSet>& sets, const std::vector<std::vector<std::vector<Grid>>>& hard,
                             int M, int K, Metric metric, int bootstrap = 1000, std::uint64_t seed = 0) {
    if (sets.size() != hard.size()) throw DomainError("predictions and sets differ in count");
    EvalReport r;
    r.metric = metric;
    r.num_protocols = M;
    r.num_labels = K;
    r.set_size = sets.empty() ? 0 : static_cast<int>(sets.front().images.size());
    r.bootstrap = bootstrap;
    r.seed = seed;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        std::vector<Grid> gts;
        const int res = hard[i].empty() || hard[i][0].empty() ? 0 : hard[i][0][0].height();
        for (const auto& m : sets[i].masks) gts.push_back(downsample_to(m, res));
        const auto res_i = set_metric(hard[i], gts, K, metric);
        r.sets.push_back({sets[i].dataset, res_i.best_value, res_i.best_protocol, res_i.best_label});
    }
    summarize(r);
    return r;
}

template <class S>
EvalReport evaluate_model(const Model<S>& model, const std::vector<EvalSet>& sets, int M, int K, Metric metric,
                          int resolution, int bootstrap = 1000, std::uint64_t seed = 0) {
    std::vector<std::vector<std::vector<Grid>>> hard;
    for (const auto& s : sets) hard.push_back(predict_hard(model, s.images, M, K, resolution));
    return score_sets(sets, hard, M, K, metric, bootstrap, seed);
}

}  // namespace pancakes
