// SPDX-License-Identifier: Apache-2.0
// Runs the built `pancakes` binary end to end.
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "pancakes/train.hpp"

using namespace pancakes;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "pancakes_cli";

struct Run {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Run cli(const std::string& args) {
    const auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
    const std::string cmd = std::string(PANCAKES_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string p(const fs::path& x) { return x.string(); }

fs::path fresh(const std::string& name) {
    const auto d = kRoot / name;
    fs::remove_all(d);
    fs::create_directories(d.parent_path());
    return d;
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    return files;
}

/// Small corpus shared by the tests: 4 test sets of 3 and 4 train sets of 3.
const fs::path& corpus() {
    static const fs::path dir = [] {
        fs::create_directories(kRoot);
        const auto d = fresh("corpus");
        EXPECT_EQ(cli("synth --out " + p(d / "test") + " --num-sets 4 --set-size 3 --seed 5 --split test "
                      "--prefix test_ --pool-volumes 1").code, 0);
        EXPECT_EQ(cli("synth --out " + p(d / "train") + " --num-sets 4 --set-size 3 --seed 6 --pool-volumes 1").code, 0);
        return d;
    }();
    return dir;
}

fs::path write_config(const std::string& name, const std::string& extra = "") {
    const auto path = kRoot / (name + ".json");
    std::ofstream(path) << R"({"steps": 10, "resolution": 32, "val_every": 0, "ckpt_every": 0,
        "K": {"lo": 3, "hi": 5}, "M": {"lo": 2, "hi": 3}, "S": {"lo": 2, "hi": 3},
        "model": {"unet_levels": 2, "features": 8, "phi_channels": 8, "head_features": 8, "half_width": 4})"
                        << extra << "}";
    return path;
}

/// A 10-step checkpoint trained on the shared corpus.
const fs::path& checkpoint() {
    static const fs::path ckpt = [] {
        const auto out = fresh("ckpt_run");
        EXPECT_EQ(cli("train --quiet --config " + p(write_config("ckpt")) + " --data " + p(corpus() / "train") +
                      " --out " + p(out)).code, 0);
        return out / kFinalCheckpoint;
    }();
    return ckpt;
}

std::vector<std::string> test_images() {
    std::vector<std::string> v;
    for (int s = 0; s < 4; ++s)
        for (int j = 0; j < 3; ++j) v.push_back(p(corpus() / "test" / set_dir_name(s) / ("img_" + std::to_string(j) + ".pck")));
    return v;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += x + " ";
    return s;
}

}  // namespace

TEST(CliSynth, ManifestCountsAndDeterminism) {
    const auto a = fresh("synth_a"), b = fresh("synth_b");
    ASSERT_EQ(cli("synth --out " + p(a) + " --num-sets 10 --set-size 3 --seed 9 --pool-volumes 1").code, 0);
    ASSERT_EQ(cli("synth --out " + p(b) + " --num-sets 10 --set-size 3 --seed 9 --pool-volumes 1").code, 0);
    const Manifest m = read_manifest(a / kManifestFile);
    ASSERT_EQ(m.datasets.size(), 10u);
    for (const auto& d : m.datasets) EXPECT_EQ(d.subjects.size(), 3u);
    EXPECT_EQ(tree(a), tree(b));
    const auto stanza = nlohmann::json::parse(slurp(a / "synth.run.json"));
    EXPECT_EQ(stanza.at("seed"), 9u);
    EXPECT_TRUE(stanza.contains("config_hash"));
    EXPECT_TRUE(stanza.contains("version"));
}

TEST(CliSynth, MalformedPoolIsADataError) {
    const auto pool = fresh("bad_pool");
    fs::create_directories(pool);
    std::ofstream(pool / kPoolListing) << "broken.raw\n";
    std::ofstream(pool / "broken.raw", std::ios::binary) << "not a volume";
    const auto r = cli("synth --out " + p(fresh("bad_pool_out")) + " --num-sets 2 --pool " + p(pool));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error id=synth.bad_pool"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("broken.raw"), std::string::npos) << r.err;
}

TEST(CliSynth, UnwritableOutputIsADataError) {
    const auto file = kRoot / "a_file";
    fs::create_directories(kRoot);
    std::ofstream(file) << "x";
    EXPECT_EQ(cli("synth --out " + p(file / "sub") + " --num-sets 1 --pool-volumes 1").code, 2);
}

TEST(CliTrain, SmokeRunWritesCheckpoint) {
    ASSERT_TRUE(fs::exists(checkpoint()));
    const auto c = load_checkpoint(checkpoint());
    EXPECT_EQ(c.step, 10);
    EXPECT_TRUE(fs::exists(checkpoint().parent_path() / "train.run.json"));
    EXPECT_TRUE(fs::exists(checkpoint().parent_path() / kTrainLog));
}

TEST(CliTrain, MissingManifestIsADataError) {
    const auto r = cli("train --config " + p(write_config("missing")) + " --data " + p(kRoot / "nowhere") + " --out " +
                       p(fresh("missing_out")));
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err.rfind("error id=data.missing_file msg=", 0), 0u) << r.err;
}

TEST(CliTrain, HostileLearningRateIsARuntimeError) {
    const auto out = fresh("nan_out");
    const auto r = cli("train --quiet --config " + p(write_config("nan", R"(, "lr": 1e6, "clip_norm": 0)")) +
                       " --data " + p(corpus() / "train") + " --out " + p(out));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("error id=train.non_finite"), std::string::npos) << r.err;
    EXPECT_TRUE(fs::exists(out / kDiagnosticFile));
    EXPECT_TRUE(fs::exists(out / kAbortCheckpoint));
}

TEST(CliTrain, BadConfigValueIsAUsageError) {
    EXPECT_EQ(cli("train --config " + p(write_config("badlr", R"(, "lr": -1)")) + " --data " + p(corpus() / "train") +
                  " --out " + p(fresh("badlr_out"))).code,
              1);
}

TEST(CliInfer, FileCountLabelRangeAndIndependence) {
    const auto imgs = test_images();
    const auto out = fresh("infer3");
    ASSERT_EQ(cli("infer --ckpt " + p(checkpoint()) + " --images " + imgs[0] + " " + imgs[1] + " " + imgs[2] +
                  " --M 8 --K 20 --out " + p(out) + " --viz").code, 0);
    int maps = 0;
    for (const auto& e : fs::directory_iterator(out))
        if (e.path().extension() == ".pck") {
            ++maps;
            EXPECT_TRUE(is_valid_labels(read_grid(e.path()), 20)) << e.path();
        }
    EXPECT_EQ(maps, 24);
    EXPECT_TRUE(fs::exists(out / "s2_m8.pck"));
    EXPECT_TRUE(fs::exists(out / "infer.run.json"));

    // Image 1 alone must give the same bytes as image 1 among others.
    const auto alone = fresh("infer1");
    ASSERT_EQ(cli("infer --ckpt " + p(checkpoint()) + " --images " + imgs[1] + " --M 8 --K 20 --out " + p(alone)).code, 0);
    for (int m = 1; m <= 8; ++m)
        EXPECT_EQ(slurp(alone / ("s0_m" + std::to_string(m) + ".pck")), slurp(out / ("s1_m" + std::to_string(m) + ".pck")));

    // Montage: 3 rows of 32x32 maps, 8 columns, 2 px gaps.
    const std::string ppm = slurp(out / "montage.ppm");
    EXPECT_EQ(ppm.rfind("P6\n270 100\n255\n", 0), 0u);
}

TEST(CliInfer, CorruptCheckpointIsADataError) {
    const auto bad = kRoot / "bad.pckm";
    auto bytes = slurp(checkpoint());
    bytes[bytes.size() / 2] ^= 1;
    std::ofstream(bad, std::ios::binary) << bytes;
    const auto r = cli("infer --ckpt " + p(bad) + " --images " + test_images()[0] + " --out " + p(fresh("bad_ckpt")));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error id=checkpoint.corrupt"), std::string::npos) << r.err;
}

TEST(CliEval, OracleInjectionScoresOne) {
    // Protocol 1 carries the ground truth as label 1, the other protocol is empty.
    const auto pred = fresh("oracle");
    fs::create_directories(pred);
    const auto reg = load_registry({corpus() / "test"});
    const auto sets = eval_sets(reg, Split::test, 1);
    nlohmann::json index = {{"M", 2}, {"K", 20}, {"resolution", 0}, {"images", nlohmann::json::array()}};
    for (std::size_t i = 0; i < sets.size(); ++i) {
        const Grid& m = sets[i].masks[0];
        Grid h = Grid::labels(m.height(), m.width());
        for (std::size_t j = 0; j < m.size(); ++j) h.values<std::uint16_t>()[j] = m.values<std::uint8_t>()[j];
        write_grid(h, pred / ("s" + std::to_string(i) + "_m1.pck"));
        write_grid(Grid::labels(m.height(), m.width()), pred / ("s" + std::to_string(i) + "_m2.pck"));
        index["images"].push_back(fs::weakly_canonical(sets[i].image_paths[0]).string());
    }
    std::ofstream(pred / "infer.json") << index.dump();
    for (int S : {1, 3}) {
        const auto out = fresh("oracle_eval" + std::to_string(S));
        ASSERT_EQ(cli("eval --pred " + p(pred) + " --gt " + p(corpus() / "test") + " --set-size " + std::to_string(S) +
                      " --out " + p(out)).code, 0);
        const auto r = nlohmann::json::parse(slurp(out / "eval_report.json"));
        EXPECT_DOUBLE_EQ(r.at("mean").get<double>(), 1.0);
        EXPECT_EQ(r.at("sets").size(), S == 1 ? 12u : 4u);
    }
}

TEST(CliEval, SingleImageSetsMatchBestPerImageAndSeedsRepeat) {
    const auto imgs = test_images();
    const auto pred = fresh("eval_pred");
    ASSERT_EQ(cli("infer --ckpt " + p(checkpoint()) + " --images " + join(imgs) + " --M 4 --K 6 --out " + p(pred)).code, 0);
    const auto out1 = fresh("eval_a"), out2 = fresh("eval_b");
    const std::string base = "eval --pred " + p(pred) + " --gt " + p(corpus() / "test") + " --set-size 1 --seed 3 ";
    ASSERT_EQ(cli(base + "--out " + p(out1)).code, 0);
    ASSERT_EQ(cli(base + "--out " + p(out2)).code, 0);
    const auto r1 = nlohmann::json::parse(slurp(out1 / "eval_report.json"));
    EXPECT_EQ(r1.at("ci"), nlohmann::json::parse(slurp(out2 / "eval_report.json")).at("ci"));

    // Best Dice over the 4 x 6 candidates of each image, computed directly.
    const auto reg = load_registry({corpus() / "test"});
    const auto sets = eval_sets(reg, Split::test, 1);
    ASSERT_EQ(r1.at("sets").size(), sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
        const Grid gt = downsample_to(sets[i].masks[0], 32);
        double best = 0;
        for (int m = 1; m <= 4; ++m) {
            const Grid h = read_grid(pred / ("s" + std::to_string(i) + "_m" + std::to_string(m) + ".pck"));
            for (int k = 0; k < 6; ++k) best = std::max(best, dice(label_mask(h, static_cast<std::uint16_t>(k)), gt));
        }
        EXPECT_EQ(r1["sets"][i].at("value").get<double>(), best) << i;
    }
}

TEST(CliEval, MissingPredictionIsADataError) {
    const auto pred = fresh("eval_partial");
    ASSERT_EQ(cli("infer --ckpt " + p(checkpoint()) + " --images " + test_images()[0] + " --M 2 --K 3 --out " + p(pred)).code, 0);
    const auto r = cli("eval --pred " + p(pred) + " --gt " + p(corpus() / "test") + " --set-size 3");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("no prediction for image"), std::string::npos);
}

TEST(CliViz, LabelRowMontage) {
    const auto pred = fresh("viz_src");
    ASSERT_EQ(cli("infer --ckpt " + p(checkpoint()) + " --images " + test_images()[0] + " --M 3 --K 5 --out " + p(pred)).code, 0);
    const auto out = fresh("viz_out") / "m.ppm";
    ASSERT_EQ(cli("viz --pred " + p(pred) + " --out " + p(out)).code, 0);
    EXPECT_EQ(slurp(out).rfind("P6\n100 32\n255\n", 0), 0u);
    const auto row = fresh("viz_row") / "r.ppm";
    ASSERT_EQ(cli("viz --labels " + p(pred / "s0_m1.pck") + " " + p(pred / "s0_m2.pck") + " --out " + p(row)).code, 0);
    EXPECT_EQ(slurp(row).rfind("P6\n66 32\n255\n", 0), 0u);
    EXPECT_TRUE(fs::exists(row.parent_path() / "viz.run.json"));
}

TEST(CliUsage, BadInvocationsExitOne) {
    EXPECT_EQ(cli("").code, 1);
    EXPECT_EQ(cli("bogus").code, 1);
    EXPECT_EQ(cli("synth --num-sets 3").code, 1);
    EXPECT_EQ(cli("eval --pred x --gt y --metric nope").code, 1);
    EXPECT_EQ(cli("infer --ckpt " + p(checkpoint()) + " --images " + test_images()[0] + " --K 1 --out " + p(fresh("k1"))).code, 1);
    EXPECT_EQ(cli("--help").code, 0);
}
