// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "pancakes/train.hpp"

using namespace pancakes;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("pancakes_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// One dataset whose images are their own masks (as intensities): a random
/// rectangle per subject on an n x n grid.
fs::path trivial_corpus(const std::string& name, int subjects = 6, int n = 32) {
    const auto root = temp_dir(name);
    DatasetManifest d;
    d.name = "trivial";
    d.domain = "test";
    fs::create_directories(root / d.name);
    Rng rng(42);
    for (int s = 0; s < subjects; ++s) {
        Grid m = Grid::mask(n, n);
        const int h = static_cast<int>(rng.uniform_int(n / 4, n / 2)), w = static_cast<int>(rng.uniform_int(n / 4, n / 2));
        const int r0 = static_cast<int>(rng.uniform_int(0, n - h)), c0 = static_cast<int>(rng.uniform_int(0, n - w));
        Grid img = Grid::image(n, n);
        for (int r = r0; r < r0 + h; ++r)
            for (int c = c0; c < c0 + w; ++c) {
                m.at<std::uint8_t>(r, c) = 1;
                img.at<float>(r, c) = 1.0f;
            }
        SubjectEntry e;
        e.id = "s" + std::to_string(s);
        const std::string ip = d.name + "/img" + std::to_string(s) + ".pck", mp = d.name + "/m" + std::to_string(s) + ".pck";
        write_grid(img, root / ip);
        write_grid(m, root / mp);
        e.images = {ip};
        e.tasks["box"] = {MaskRef{mp, -1}};
        d.split[e.id] = "train";
        d.subjects.push_back(e);
    }
    Manifest man;
    man.datasets = {d};
    write_manifest(man, root / kManifestFile);
    return root;
}

TrainConfig small_config(std::uint64_t seed = 1) {
    TrainConfig c;
    c.model.unet_levels = 2;
    c.model.features = 8;
    c.model.phi_channels = 8;
    c.model.head_features = 8;
    c.model.half_width = 4;
    c.model.seed = seed;
    c.K = {2, 4};
    c.M = {2, 3};
    c.S = {2, 3};
    c.seed = seed;
    c.resolution = 0;
    c.val_every = 0;
    c.ckpt_every = 0;
    c.augment.enabled = false;
    return c;
}

std::vector<double> losses(const FitResult& r) {
    std::vector<double> v;
    for (const auto& s : r.steps) v.push_back(s.loss);
    return v;
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndValidation) {
    TrainConfig c = small_config(5);
    c.steps = 77;
    const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
    EXPECT_EQ(nlohmann::json::parse("{}").get<TrainConfig>().K, (IntRange{5, 40}));

    auto bad = [](auto edit) {
        TrainConfig t;
        edit(t);
        EXPECT_THROW(t.validate(), DomainError);
    };
    bad([](TrainConfig& t) { t.lr = 0; });
    bad([](TrainConfig& t) { t.K = {10, 5}; });
    bad([](TrainConfig& t) { t.S = {0, 3}; });
    bad([](TrainConfig& t) { t.resolution = 60; });
    bad([](TrainConfig& t) { t.synth_ratio = 1.5; });
}

TEST(TrainStep, DrawsMatchUniformRanges) {
    const auto reg = load_registry({trivial_corpus("chi2", 6, 16)});
    TrainConfig cfg;
    cfg.S = {2, 5};
    cfg.resolution = 0;
    cfg.augment.enabled = false;
    const int n = 10000;
    std::vector<int> ks(41), ms(16), ss(6);
    for (int step = 0; step < n; ++step) {
        Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(step)}));
        StepLog log;
        draw_step(step, reg, cfg, nullptr, rng, log);
        ++ks.at(log.K);
        ++ms.at(log.M);
        ++ss.at(log.S);
    }
    auto chi2 = [&](const std::vector<int>& counts, int lo, int hi) {
        const double expect = double(n) / (hi - lo + 1);
        double x = 0;
        for (int v = lo; v <= hi; ++v) x += (counts[v] - expect) * (counts[v] - expect) / expect;
        return x;
    };
    // 99th percentiles of chi-square with 35, 10 and 3 degrees of freedom.
    EXPECT_LT(chi2(ks, 5, 40), 57.342);
    EXPECT_LT(chi2(ms, 5, 15), 23.209);
    EXPECT_LT(chi2(ss, 2, 5), 11.345);
}

TEST(TrainStep, LossIsTheTableMinimumAndInUnitRange) {
    const auto reg = load_registry({trivial_corpus("min")});
    const TrainConfig cfg = small_config();
    auto st = init_state(cfg);
    for (int i = 0; i < 5; ++i) {
        Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(st.step)}));
        StepLog probe;
        const auto b = draw_step(st.step, reg, cfg, nullptr, rng, probe);
        const auto table = evaluate_objective<float>(st.model, b.images, b.masks, probe.M, probe.K, nullptr).table;
        const StepLog log = train_step(st, reg, cfg);
        EXPECT_EQ(log.M, probe.M);
        EXPECT_EQ(log.K, probe.K);
        for (double d : table) EXPECT_LE(log.loss, d);
        EXPECT_GE(log.loss, 0.0);
        EXPECT_LE(log.loss, 1.0);
        EXPECT_EQ(st.step, i + 1);
    }
}

TEST(Fit, SameSeedSameTrace) {
    const auto reg = load_registry({trivial_corpus("trace")});
    TrainConfig cfg = small_config(3);
    cfg.steps = 6;
    const auto a = fit(cfg, reg, {temp_dir("trace_a")});
    const auto b = fit(cfg, reg, {temp_dir("trace_b")});
    EXPECT_EQ(losses(a), losses(b));
    EXPECT_TRUE(std::equal(a.state.model.params().begin(), a.state.model.params().end(),
                           b.state.model.params().begin()));
    cfg.seed = 4;
    EXPECT_NE(losses(fit(cfg, reg, {temp_dir("trace_c")})), losses(a));
}

TEST(Fit, ResumeReplaysTheUninterruptedRun) {
    const auto reg = load_registry({trivial_corpus("resume")});
    TrainConfig cfg = small_config(8);
    cfg.steps = 6;
    const auto full = fit(cfg, reg, {temp_dir("resume_full")});

    const auto dir = temp_dir("resume_part");
    TrainConfig first = cfg;
    first.steps = 3;
    fit(first, reg, {dir});
    FitOptions opt{dir};
    opt.resume = dir / kFinalCheckpoint;
    const auto rest = fit(cfg, reg, opt);
    ASSERT_EQ(rest.steps.size(), 3u);
    EXPECT_EQ(rest.steps.front().step, 3);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(rest.steps[i].loss, full.steps[3 + i].loss);
    EXPECT_TRUE(std::equal(full.state.model.params().begin(), full.state.model.params().end(),
                           rest.state.model.params().begin()));
    EXPECT_EQ(full.state.opt.m, rest.state.opt.m);
    EXPECT_EQ(full.state.opt.v, rest.state.opt.v);

    TrainConfig other = cfg;
    other.model.features = 4;
    EXPECT_THROW(fit(other, reg, opt), CheckpointError);
}

TEST(Fit, ZeroStepsWritesOnlyTheInitialCheckpoint) {
    const auto reg = load_registry({trivial_corpus("zero")});
    TrainConfig cfg = small_config();
    cfg.steps = 0;
    cfg.ckpt_every = 1;
    const auto dir = temp_dir("zero_out");
    const auto r = fit(cfg, reg, {dir});
    EXPECT_TRUE(r.steps.empty());
    EXPECT_TRUE(fs::exists(dir / kFinalCheckpoint));
    EXPECT_FALSE(fs::exists(dir / kLatestCheckpoint));
    const auto c = load_checkpoint(dir / kFinalCheckpoint);
    EXPECT_EQ(c.step, 0);
    const Model<float> fresh(cfg.model);
    EXPECT_TRUE(std::equal(c.params.begin(), c.params.end(), fresh.params().begin()));
}

TEST(Fit, LogRecordsAndPeriodicCheckpoints) {
    const auto root = trivial_corpus("log");
    const auto reg = load_registry({root});
    TrainConfig cfg = small_config();
    cfg.steps = 4;
    cfg.val_every = 2;
    cfg.ckpt_every = 2;
    cfg.val_M = 2;
    cfg.val_K = 3;
    cfg.val_S = 2;
    const auto dir = temp_dir("log_out");
    const auto val = eval_sets(reg, Split::train, 2);
    FitOptions opt{dir};
    opt.val_sets = &val;
    const auto r = fit(cfg, reg, opt);
    // Baseline, step 2, final.
    ASSERT_EQ(r.validations.size(), 3u);
    EXPECT_TRUE(fs::exists(dir / kLatestCheckpoint));
    EXPECT_EQ(load_checkpoint(dir / kLatestCheckpoint).step, 4);

    std::ifstream in(dir / kTrainLog);
    std::vector<std::string> kinds;
    for (std::string line; std::getline(in, line);) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("time"));
        kinds.push_back(j.at("kind"));
    }
    EXPECT_EQ(kinds, (std::vector<std::string>{"start", "val", "step", "step", "val", "step", "step", "val", "end"}));
}

TEST(Fit, NonFiniteLossAbortsWithDiagnostics) {
    const auto reg = load_registry({trivial_corpus("nan")});
    TrainConfig cfg = small_config();
    cfg.steps = 50;
    cfg.lr = 1e6;
    cfg.clip_norm = 0;
    const auto dir = temp_dir("nan_out");
    EXPECT_THROW(fit(cfg, reg, {dir}), NonFiniteLossError);
    ASSERT_TRUE(fs::exists(dir / kAbortCheckpoint));
    ASSERT_TRUE(fs::exists(dir / kDiagnosticFile));
    std::ifstream in(dir / kDiagnosticFile);
    const auto diag = nlohmann::json::parse(in);
    EXPECT_EQ(diag.at("error"), "train.non_finite");
    const auto c = load_checkpoint(dir / kAbortCheckpoint);
    for (float p : c.params) ASSERT_TRUE(std::isfinite(p));
}

TEST(Checkpoint, RoundTripAndErrors) {
    TrainConfig cfg = small_config(11);
    auto st = init_state(cfg);
    st.step = 17;
    st.opt.t = 17;
    st.opt.m.assign(st.model.param_count(), 0.5f);
    st.opt.v.assign(st.model.param_count(), 0.25f);
    const auto bytes = encode_checkpoint(make_checkpoint(st, cfg));
    const auto c = decode_checkpoint(bytes, "mem");
    EXPECT_EQ(c.step, 17);
    EXPECT_EQ(c.adam_t, 17u);
    EXPECT_EQ(c.model, cfg.model);
    EXPECT_EQ(checkpoint_resolution(c), cfg.resolution);
    EXPECT_EQ(c.meta.at("train").get<TrainConfig>().seed, 11u);
    const auto back = state_from_checkpoint(c);
    EXPECT_TRUE(std::equal(back.model.params().begin(), back.model.params().end(), st.model.params().begin()));
    EXPECT_EQ(back.opt.m, st.opt.m);
    EXPECT_EQ(encode_checkpoint(c), bytes);

    auto kind = [](const std::vector<std::uint8_t>& b) {
        try {
            decode_checkpoint(b, "mem");
        } catch (const CheckpointError& e) {
            return std::string(e.id());
        }
        return std::string("ok");
    };
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    EXPECT_EQ(kind(flipped), "checkpoint.corrupt");
    auto truncated = bytes;
    truncated.resize(bytes.size() - 100);
    EXPECT_EQ(kind(truncated), "checkpoint.corrupt");
    auto versioned = bytes;
    versioned[4] = 9;
    EXPECT_EQ(kind(versioned), "checkpoint.version");

    Checkpoint wrong = c;
    wrong.model.features = 4;
    EXPECT_THROW(model_from_checkpoint(wrong), CheckpointError);
}

TEST(Validate, OracleInjectionScoresOne) {
    const auto reg = load_registry({trivial_corpus("oracle")});
    const auto sets = eval_sets(reg, Split::train, 3);
    ASSERT_EQ(sets.size(), 2u);
    std::vector<std::vector<std::vector<Grid>>> hard;
    for (const auto& s : sets) {
        std::vector<std::vector<Grid>> per_image;
        for (const auto& m : s.masks) {
            Grid h = Grid::labels(m.height(), m.width());
            // Protocol 1 carries the truth as label 1; protocol 2 is all background.
            for (std::size_t i = 0; i < m.size(); ++i)
                h.values<std::uint16_t>()[i] = m.values<std::uint8_t>()[i] ? 1 : 0;
            per_image.push_back({h, Grid::labels(m.height(), m.width())});
        }
        hard.push_back(per_image);
    }
    const auto r = score_sets(sets, hard, 2, 20, Metric::dice, 1000, 0);
    EXPECT_DOUBLE_EQ(r.mean, 1.0);
    EXPECT_DOUBLE_EQ(r.ci_lo, 1.0);
    EXPECT_DOUBLE_EQ(r.ci_hi, 1.0);
    for (const auto& s : r.sets) {
        EXPECT_EQ(s.best_protocol, 1);
        EXPECT_EQ(s.best_label, 2);  // channel of label value 1
    }
}

TEST(Validate, EmptyCorpusIsAnError) {
    const TrainConfig cfg = small_config();
    EXPECT_THROW(validate(Model<float>(cfg.model), {}, cfg), DomainError);
}

// Loss on a fixed batch of the trivial task, before training and after 500 steps.
TEST(Fit, SmokeTrainingLowersTheLoss) {
    const auto reg = load_registry({trivial_corpus("smoke")});
    std::vector<Grid> images, masks;
    for (std::size_t i = 0; i < 3; ++i) {
        images.push_back(reg.image(reg.datasets[0].subjects[i].images[0]));
        masks.push_back(reg.mask(reg.datasets[0].subjects[i].tasks.at("box")[0]));
    }
    std::vector<double> deltas;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TrainConfig cfg = small_config(seed);
        cfg.steps = 500;
        const Model<float> before(cfg.model);
        const double l0 = evaluate_objective<float>(before, images, masks, 3, 4, nullptr).value;
        const auto r = fit(cfg, reg, {temp_dir("smoke_out")});
        const double l1 = evaluate_objective<float>(r.state.model, images, masks, 3, 4, nullptr).value;
        deltas.push_back(l1 - l0);
    }
    std::nth_element(deltas.begin(), deltas.begin() + 2, deltas.end());
    EXPECT_LT(deltas[2], 0.0);
}
