// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loop: per step draw (K, M, S), sample a task, augment, take the
// min-assignment loss over every candidate, one clipped AdamW update.
// Every step's randomness comes from derive_seed(seed, {step}), so a resumed
// run replays the uninterrupted one.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/augment.hpp"
#include "pancakes/checkpoint.hpp"
#include "pancakes/core/resample.hpp"
#include "pancakes/data.hpp"
#include "pancakes/eval.hpp"
#include "pancakes/net/model.hpp"
#include "pancakes/objective.hpp"

namespace pancakes {

struct IntRange {
    int lo = 0, hi = 0;
    int draw(Rng& rng) const { return static_cast<int>(rng.uniform_int(lo, hi)); }
    friend bool operator==(const IntRange&, const IntRange&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(IntRange, lo, hi)

struct TrainConfig {
    std::int64_t steps = 10000;
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    double clip_norm = 1.0;  // <= 0 disables
    IntRange K{5, 40}, M{5, 15}, S{2, 5};
    double synth_ratio = 0.0;
    std::uint64_t seed = 0;
    std::int64_t val_every = 1000;   // 0 disables periodic validation
    std::int64_t ckpt_every = 1000;  // 0: only the final checkpoint
    int resolution = 64;             // training grids are downsampled to this (0: as stored)
    int val_M = 8, val_K = 20, val_S = 3;
    int max_redraws = 20;            // task redraws when augmentation empties a mask
    ModelConfig model;
    AugmentationSpec augment;

    void validate() const {
        if (steps < 0) throw DomainError("steps must be >= 0");
        if (!(lr > 0) || !std::isfinite(lr)) throw DomainError("lr must be > 0");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw DomainError("betas must be in [0, 1)");
        if (!(eps > 0) || weight_decay < 0) throw DomainError("eps must be > 0 and weight_decay >= 0");
        for (auto [r, name, min] : {std::tuple{K, "K", 2}, {M, "M", 1}, {S, "S", 1}})
            if (r.lo < min || r.hi < r.lo) throw DomainError(std::string("bad ") + name + " range");
        if (!(synth_ratio >= 0 && synth_ratio <= 1)) throw DomainError("synth_ratio must be in [0, 1]");
        if (val_every < 0 || ckpt_every < 0) throw DomainError("val_every and ckpt_every must be >= 0");
        if (resolution < 0) throw DomainError("resolution must be >= 0");
        if (resolution > 0 && resolution % model.spatial_multiple())
            throw DomainError("resolution must be a multiple of " + std::to_string(model.spatial_multiple()));
        if (val_M < 1 || val_K < 2 || val_S < 1) throw DomainError("bad validation protocol");
        if (max_redraws < 1) throw DomainError("max_redraws must be >= 1");
        model.validate();
        augment.validate();
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, steps, lr, beta1, beta2, eps, weight_decay, clip_norm, K,
                                                M, S, synth_ratio, seed, val_every, ckpt_every, resolution, val_M,
                                                val_K, val_S, max_redraws, model, augment)

/// Decoupled weight decay Adam.
struct AdamW {
    std::vector<float> m, v;
    std::uint64_t t = 0;

    void step(std::span<float> params, std::span<const float> grads, const TrainConfig& c) {
        if (m.size() != params.size()) m.assign(params.size(), 0.0f), v.assign(params.size(), 0.0f);
        ++t;
        const double bc1 = 1 - std::pow(c.beta1, double(t)), bc2 = 1 - std::pow(c.beta2, double(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i];
            m[i] = static_cast<float>(c.beta1 * m[i] + (1 - c.beta1) * g);
            v[i] = static_cast<float>(c.beta2 * v[i] + (1 - c.beta2) * g * g);
            double p = params[i] * (1 - c.lr * c.weight_decay);
            p -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
            params[i] = static_cast<float>(p);
        }
    }
};

struct TrainState {
    Model<float> model;
    AdamW opt;
    std::int64_t step = 0;  // steps completed
};

inline TrainState init_state(const TrainConfig& cfg) { return TrainState{Model<float>(cfg.model), {}, 0}; }

struct StepLog {
    std::int64_t step = 0;
    double loss = 0;
    int m_star = 0, k_star = 0;
    int K = 0, M = 0, S = 0;
    std::string dataset, task;
    bool synthetic = false;
    double grad_norm = 0;
    int redraws = 0;
};

inline void to_json(nlohmann::json& j, const StepLog& s) {
    j = nlohmann::json{{"kind", "step"}, {"step", s.step}, {"loss", s.loss}, {"m_star", s.m_star},
                       {"k_star", s.k_star}, {"K", s.K}, {"M", s.M}, {"S", s.S}, {"dataset", s.dataset},
                       {"task", s.task}, {"synthetic", s.synthetic}, {"grad_norm", s.grad_norm},
                       {"redraws", s.redraws}};
}

/// The step's (augmented, downsampled) inputs.
struct StepBatch {
    std::vector<Grid> images, masks;
};

/// Draws the inputs of step `step`. Fills the sampling fields of `log`.
inline StepBatch draw_step(std::int64_t step, const Registry& reg, const TrainConfig& cfg, const SynthSource* synth,
                           Rng& rng, StepLog& log) {
    log.step = step;
    log.K = cfg.K.draw(rng);
    log.M = cfg.M.draw(rng);
    log.S = cfg.S.draw(rng);
    for (int redraw = 0; redraw < cfg.max_redraws; ++redraw) {
        TaskSample t = sample_task(reg, log.S, rng, cfg.synth_ratio, synth);
        if (cfg.augment.enabled) {
            across_set_augment(t.images, t.masks, cfg.augment.across, rng);
            for (std::size_t s = 0; s < t.images.size(); ++s)
                within_set_augment(t.images[s], t.masks[s], cfg.augment.within, rng);
        }
        StepBatch b;
        bool empty = false;
        for (std::size_t s = 0; s < t.images.size(); ++s) {
            b.images.push_back(downsample_to(t.images[s], cfg.resolution));
            b.masks.push_back(downsample_to(t.masks[s], cfg.resolution));
            empty = empty || count_foreground(b.masks.back()) == 0;
        }
        if (empty) continue;
        log.dataset = t.dataset;
        log.task = t.task;
        log.synthetic = t.synthetic;
        log.redraws = redraw;
        return b;
    }
    throw SamplingError("every draw of step " + std::to_string(step) + " had an empty mask after augmentation");
}

inline double global_norm(std::span<const float> g) {
    double total = 0;
    for (float x : g) total += double(x) * x;
    return std::sqrt(total);
}

/// One optimizer step. `log` stays filled as far as the step got when it throws.
inline void train_step(TrainState& st, const Registry& reg, const TrainConfig& cfg, const SynthSource* synth,
                       StepLog& log) {
    log = StepLog{};
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(st.step)}));
    const StepBatch b = draw_step(st.step, reg, cfg, synth, rng, log);
    std::vector<float> grads(st.model.param_count(), 0.0f);
    const LossReport r = evaluate_objective<float>(st.model, b.images, b.masks, log.M, log.K, &grads);
    log.loss = r.value;
    log.m_star = r.best_protocol;
    log.k_star = r.best_label;
    if (!std::isfinite(r.value)) throw NonFiniteLossError("non-finite loss at step " + std::to_string(st.step));
    log.grad_norm = global_norm(grads);
    if (!std::isfinite(log.grad_norm)) throw NonFiniteLossError("non-finite gradient at step " + std::to_string(st.step));
    if (cfg.clip_norm > 0 && log.grad_norm > cfg.clip_norm) {
        const float scale = static_cast<float>(cfg.clip_norm / log.grad_norm);
        for (auto& g : grads) g *= scale;
    }
    st.opt.step(st.model.params(), grads, cfg);
    for (float p : st.model.params())
        if (!std::isfinite(p)) throw NonFiniteLossError("parameters became non-finite at step " + std::to_string(st.step));
    ++st.step;
}

inline StepLog train_step(TrainState& st, const Registry& reg, const TrainConfig& cfg, const SynthSource* synth = nullptr) {
    StepLog log;
    train_step(st, reg, cfg, synth, log);
    return log;
}

/// Mean Set Dice over validation sets, with a 1000-resample bootstrap CI.
inline EvalReport validate(const Model<float>& model, const std::vector<EvalSet>& sets, const TrainConfig& cfg) {
    if (sets.empty()) throw DomainError("validation corpus has no sets of size " + std::to_string(cfg.val_S));
    return evaluate_model(model, sets, cfg.val_M, cfg.val_K, Metric::dice, cfg.resolution, 1000, cfg.seed);
}

inline Checkpoint make_checkpoint(const TrainState& st, const TrainConfig& cfg) {
    Checkpoint c;
    c.model = st.model.config();
    c.step = st.step;
    c.adam_t = st.opt.t;
    c.meta = {{"train", cfg}, {"resolution", cfg.resolution}};
    c.params.assign(st.model.params().begin(), st.model.params().end());
    c.adam_m = st.opt.m.empty() ? std::vector<float>(c.params.size(), 0.0f) : st.opt.m;
    c.adam_v = st.opt.v.empty() ? std::vector<float>(c.params.size(), 0.0f) : st.opt.v;
    return c;
}

inline TrainState state_from_checkpoint(const Checkpoint& c) {
    TrainState st{model_from_checkpoint(c), {c.adam_m, c.adam_v, c.adam_t}, c.step};
    return st;
}

/// Working resolution recorded in a checkpoint (0 if none).
inline int checkpoint_resolution(const Checkpoint& c) { return c.meta.value("resolution", 0); }

struct FitOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;  // checkpoint to continue from
    const std::vector<EvalSet>* val_sets = nullptr;
    const SynthSource* synth = nullptr;
    std::function<void(const StepLog&)> on_step;  // progress hook
};

struct FitResult {
    TrainState state;
    std::vector<StepLog> steps;        // steps run by this call
    std::vector<EvalReport> validations;
    std::filesystem::path final_checkpoint;
};

inline constexpr const char* kFinalCheckpoint = "final.pckm";
inline constexpr const char* kLatestCheckpoint = "latest.pckm";
inline constexpr const char* kAbortCheckpoint = "abort.pckm";
inline constexpr const char* kDiagnosticFile = "diagnostic.json";
inline constexpr const char* kTrainLog = "train_log.jsonl";

namespace train_detail {

inline double wall_seconds() {
    using namespace std::chrono;
    return duration<double>(system_clock::now().time_since_epoch()).count();
}

inline nlohmann::json param_summary(std::span<const float> p) {
    double lo = INFINITY, hi = -INFINITY, sq = 0;
    std::size_t bad = 0;
    for (float x : p) {
        if (!std::isfinite(x)) {
            ++bad;
            continue;
        }
        lo = std::min(lo, double(x));
        hi = std::max(hi, double(x));
        sq += double(x) * x;
    }
    return {{"count", p.size()}, {"non_finite", bad}, {"min", lo}, {"max", hi}, {"l2", std::sqrt(sq)}};
}

}  // namespace train_detail

/// Runs steps up to cfg.steps with periodic validation and checkpoints.
/// Writes `train_log.jsonl` (one JSON record per line; the "time" field is the
/// only non-deterministic one). On a non-finite loss writes the pre-step state
/// to abort.pckm plus diagnostic.json, then rethrows.
inline FitResult fit(const TrainConfig& cfg, const Registry& reg, const FitOptions& opt) {
    namespace fs = std::filesystem;
    cfg.validate();
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    if (ec || !fs::is_directory(opt.out_dir)) throw IoError("cannot create output directory: " + opt.out_dir.string());

    FitResult res{init_state(cfg), {}, {}, {}};
    if (opt.resume) {
        const Checkpoint c = load_checkpoint(*opt.resume);
        if (!(c.model == cfg.model))
            throw CheckpointError(CheckpointError::Kind::config, "resume checkpoint was trained with a different model config");
        res.state = state_from_checkpoint(c);
    }
    TrainState& st = res.state;
    std::ofstream log(opt.out_dir / kTrainLog, opt.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open " + (opt.out_dir / kTrainLog).string());
    auto record = [&](nlohmann::json j) {
        j["time"] = train_detail::wall_seconds();
        log << j.dump() << '\n';
        log.flush();
    };
    auto run_validation = [&] {
        if (!opt.val_sets || opt.val_sets->empty()) return;
        auto r = validate(st.model, *opt.val_sets, cfg);
        record({{"kind", "val"}, {"step", st.step}, {"set_dice", r.mean}, {"ci", {r.ci_lo, r.ci_hi}},
                {"num_sets", r.sets.size()}});
        res.validations.push_back(std::move(r));
    };
    auto checkpoint = [&](const char* name) { save_checkpoint(make_checkpoint(st, cfg), opt.out_dir / name); };

    if (!opt.resume) {
        record({{"kind", "start"}, {"config", cfg}, {"params", st.model.param_count()}});
        run_validation();
    }
    while (st.step < cfg.steps) {
        const Checkpoint before = make_checkpoint(st, cfg);
        StepLog sl;
        try {
            train_step(st, reg, cfg, opt.synth, sl);
        } catch (const NonFiniteLossError& e) {
            save_checkpoint(before, opt.out_dir / kAbortCheckpoint);
            nlohmann::json diag = {{"error", e.id()}, {"message", e.what()}, {"step_log", sl},
                                   {"params_before", train_detail::param_summary(before.params)},
                                   {"params_after", train_detail::param_summary(st.model.params())},
                                   {"config", cfg}};
            const std::string text = diag.dump(1) + "\n";
            detail::write_file_atomic(opt.out_dir / kDiagnosticFile, text.data(), text.size());
            record({{"kind", "abort"}, {"step", sl.step}, {"error", e.id()}});
            throw;
        }
        record(sl);
        if (opt.on_step) opt.on_step(sl);
        res.steps.push_back(sl);
        if (cfg.val_every > 0 && st.step % cfg.val_every == 0 && st.step < cfg.steps) run_validation();
        if (cfg.ckpt_every > 0 && st.step % cfg.ckpt_every == 0) checkpoint(kLatestCheckpoint);
    }
    if (!res.steps.empty()) run_validation();
    checkpoint(kFinalCheckpoint);
    record({{"kind", "end"}, {"step", st.step}});
    res.final_checkpoint = opt.out_dir / kFinalCheckpoint;
    return res;
}

}  // namespace pancakes
