// SPDX-License-Identifier: Apache-2.0
// pancakes: synth | train | infer | eval | viz
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime error.
// Errors go to stderr as one line: `error id=<id> msg=<message>`.
// Every command writes `<command>.run.json` (seed, config hash, version) into
// its output directory.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/train.hpp"
#include "pancakes/version.hpp"
#include "pancakes/viz.hpp"

using namespace pancakes;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

constexpr const char* kInferIndex = "infer.json";

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory: " + dir.string());
}

void write_json(const json& j, const fs::path& path) {
    const std::string text = j.dump(1) + "\n";
    detail::write_file_atomic(path, text.data(), text.size());
}

/// `config` is everything that determines the outputs; its hash goes in the stanza.
void write_stanza(const fs::path& dir, const std::string& command, std::uint64_t seed, const json& config) {
    write_json({{"command", command}, {"version", kVersion}, {"seed", seed},
                {"config_hash", hex64(fnv1a(config.dump()))}, {"config", config}},
               dir / (command + ".run.json"));
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw RegistryError(RegistryError::Kind::schema, path.string() + ": " + e.what());
    }
}

std::string canonical(const std::string& p) {
    std::error_code ec;
    const auto c = fs::weakly_canonical(p, ec);
    return ec ? p : c.string();
}

std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

std::string pred_name(std::size_t image, int protocol) {
    return "s" + std::to_string(image) + "_m" + std::to_string(protocol) + ".pck";
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    std::string out, pool, split = "train", prefix;
    int num_sets = 0, set_size = 3, pool_volumes = 4;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    parse_split(a.split);
    if (a.num_sets < 1 || a.set_size < 1) throw DomainError("--num-sets and --set-size must be >= 1");
    PoolConfig pc;
    pc.volumes = a.pool_volumes;
    LabelPool pool;
    if (!a.pool.empty()) {
        pool = load_pool(a.pool);
    } else {
        Rng rng(derive_seed(a.seed, {0}));
        pool = procedural_pool(rng, pc);
    }
    ensure_dir(a.out);
    std::vector<SynthSet> sets;
    for (int i = 0; i < a.num_sets; ++i) sets.push_back(generate_set(pool, derive_seed(a.seed, {1}), i, a.set_size));
    write_corpus(sets, a.out, a.split, a.prefix);
    json cfg = {{"num_sets", a.num_sets}, {"set_size", a.set_size}, {"split", a.split}, {"prefix", a.prefix},
                {"synth", SynthConfig{}}};
    if (a.pool.empty()) cfg["pool"] = pc;
    else cfg["pool_dir"] = canonical(a.pool);
    write_stanza(a.out, "synth", a.seed, cfg);
    std::printf("wrote %d sets of %d to %s\n", a.num_sets, a.set_size, a.out.c_str());
    return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string config, out, resume, pool;
    std::vector<std::string> data, val;
    std::int64_t steps = -1;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg;
    if (!a.config.empty()) {
        const json j = read_json(a.config);
        try {
            cfg = j.get<TrainConfig>();
        } catch (const json::exception& e) {
            throw RegistryError(RegistryError::Kind::schema, a.config + ": " + e.what());
        }
    }
    if (a.steps >= 0) cfg.steps = a.steps;
    cfg.validate();

    const Registry reg = load_registry(as_paths(a.data));
    std::vector<EvalSet> val;
    if (!a.val.empty()) val = eval_sets(load_registry(as_paths(a.val)), Split::val, cfg.val_S);
    else val = eval_sets(reg, Split::val, cfg.val_S);

    std::optional<SynthSource> synth;
    if (cfg.synth_ratio > 0) {
        synth.emplace();
        if (!a.pool.empty()) {
            synth->pool = load_pool(a.pool);
        } else {
            Rng rng(derive_seed(cfg.seed, {0xB001}));
            synth->pool = procedural_pool(rng);
        }
    }

    ensure_dir(a.out);
    FitOptions opt{a.out};
    if (!a.resume.empty()) opt.resume = a.resume;
    opt.val_sets = val.empty() ? nullptr : &val;
    opt.synth = synth ? &*synth : nullptr;
    if (!a.quiet)
        opt.on_step = [&](const StepLog& s) {
            if ((s.step + 1) % 100 == 0 || s.step + 1 == cfg.steps)
                std::fprintf(stderr, "step %lld/%lld loss %.4f\n", static_cast<long long>(s.step + 1),
                             static_cast<long long>(cfg.steps), s.loss);
        };
    json data_paths = json::array();
    for (const auto& d : a.data) data_paths.push_back(canonical(d));
    write_stanza(a.out, "train", cfg.seed, {{"train", cfg}, {"data", data_paths}, {"val_sets", val.size()}});
    const FitResult r = fit(cfg, reg, opt);
    if (!r.validations.empty())
        std::printf("final validation Set Dice %.4f [%.4f, %.4f] over %zu sets\n", r.validations.back().mean,
                    r.validations.back().ci_lo, r.validations.back().ci_hi, r.validations.back().sets.size());
    std::printf("checkpoint %s (step %lld)\n", r.final_checkpoint.c_str(), static_cast<long long>(r.state.step));
    return kOk;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
    std::string ckpt, out;
    std::vector<std::string> images;
    int M = 8, K = 20;
    bool viz = false;
};

/// Hard maps indexed [image][protocol - 1].
std::vector<std::vector<Grid>> read_predictions(const fs::path& dir, const json& index) {
    std::vector<std::vector<Grid>> out;
    const int M = index.at("M");
    for (std::size_t i = 0; i < index.at("images").size(); ++i) {
        std::vector<Grid> row;
        for (int m = 1; m <= M; ++m) {
            const auto p = dir / pred_name(i, m);
            if (!fs::is_regular_file(p)) throw RegistryError(RegistryError::Kind::missing_file, "missing prediction " + p.string());
            row.push_back(read_grid(p));
        }
        out.push_back(std::move(row));
    }
    return out;
}

int cmd_infer(const InferArgs& a) {
    if (a.M < 1 || a.K < 2) throw DomainError("need --M >= 1 and --K >= 2");
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const Model<float> model = model_from_checkpoint(ckpt);
    const int res = checkpoint_resolution(ckpt);
    std::vector<Grid> images;
    for (const auto& p : a.images) images.push_back(data_detail::as_intensity(read_grid(p), p));
    ensure_dir(a.out);

    json index = {{"M", a.M}, {"K", a.K}, {"resolution", res}, {"checkpoint", canonical(a.ckpt)},
                  {"images", json::array()}};
    std::vector<std::vector<Grid>> hard;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto out = model.segment(downsample_to(images[i], res), a.M, a.K);
        for (int m = 1; m <= a.M; ++m) write_grid(out.hard[m - 1], fs::path(a.out) / pred_name(i, m));
        index["images"].push_back(canonical(a.images[i]));
        if (a.viz) hard.push_back(out.hard);
    }
    write_json(index, fs::path(a.out) / kInferIndex);
    if (a.viz) write_ppm(label_montage(hard), fs::path(a.out) / "montage.ppm");
    write_stanza(a.out, "infer", ckpt.model.seed,
                 {{"M", a.M}, {"K", a.K}, {"checkpoint", canonical(a.ckpt)}, {"images", index["images"]},
                  {"viz", a.viz}});
    std::printf("wrote %zu label maps to %s\n", images.size() * a.M, a.out.c_str());
    return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    std::string pred, out, metric = "set_dice", split = "test";
    std::vector<std::string> gt;
    int set_size = 3, bootstrap = 1000;
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
    Metric metric;
    if (a.metric == "set_dice") metric = Metric::dice;
    else if (a.metric == "set_iou") metric = Metric::iou;
    else if (a.metric == "set_sd") metric = Metric::surface_distance;
    else throw DomainError("--metric must be set_dice, set_iou or set_sd");
    if (a.bootstrap < 1) throw DomainError("--bootstrap must be >= 1");

    const fs::path pred_dir = a.pred;
    const json index = read_json(pred_dir / kInferIndex);
    const auto preds = read_predictions(pred_dir, index);
    std::map<std::string, std::size_t> by_path;
    for (std::size_t i = 0; i < index.at("images").size(); ++i) by_path[index["images"][i].get<std::string>()] = i;

    const Registry reg = load_registry(as_paths(a.gt));
    const auto sets = eval_sets(reg, parse_split(a.split), a.set_size);
    if (sets.empty()) throw RegistryError(RegistryError::Kind::empty, "no " + a.split + " sets of size " + std::to_string(a.set_size));
    std::vector<std::vector<std::vector<Grid>>> hard;
    for (const auto& s : sets) {
        std::vector<std::vector<Grid>> per_image;
        for (const auto& p : s.image_paths) {
            const auto it = by_path.find(canonical(p));
            if (it == by_path.end())
                throw RegistryError(RegistryError::Kind::missing_file, "no prediction for image " + p + " in " + a.pred);
            per_image.push_back(preds[it->second]);
        }
        hard.push_back(std::move(per_image));
    }
    const int M = index.at("M"), K = index.at("K");
    const EvalReport r = score_sets(sets, hard, M, K, metric, a.bootstrap, a.seed);
    const fs::path out = a.out.empty() ? pred_dir : fs::path(a.out);
    ensure_dir(out);
    write_json(r, out / "eval_report.json");
    write_stanza(out, "eval", a.seed,
                 {{"metric", a.metric}, {"set_size", a.set_size}, {"bootstrap", a.bootstrap}, {"split", a.split},
                  {"predictions", canonical(a.pred)}});
    std::printf("%s mean %.4f CI [%.4f, %.4f] over %zu sets\n", a.metric.c_str(), r.mean, r.ci_lo, r.ci_hi,
                r.sets.size());
    return kOk;
}

// ---------------------------------------------------------------- viz

struct VizArgs {
    std::string pred, out;
    std::vector<std::string> labels;
};

int cmd_viz(const VizArgs& a) {
    std::vector<std::vector<Grid>> rows;
    if (!a.pred.empty()) {
        rows = read_predictions(a.pred, read_json(fs::path(a.pred) / kInferIndex));
    } else {
        if (a.labels.empty()) throw DomainError("viz needs --pred DIR or --labels FILES");
        rows.emplace_back();
        for (const auto& p : a.labels) rows.back().push_back(read_grid(p));
    }
    const fs::path out = a.out;
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    write_ppm(label_montage(rows), out);
    json inputs = a.pred.empty() ? json(a.labels) : json(canonical(a.pred));
    write_stanza(out.has_parent_path() ? out.parent_path() : fs::path("."), "viz", 0,
                 {{"inputs", inputs}, {"out", out.filename().string()}});
    std::printf("wrote %s\n", out.c_str());
    return kOk;
}

int report(const std::string& id, const std::string& msg, int code) {
    std::string flat = msg;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    std::fprintf(stderr, "error id=%s msg=%s\n", id.c_str(), flat.c_str());
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-protocol segmentation of image sets"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus of consistent sets");
    synth->add_option("--out", sa.out, "Output corpus directory")->required();
    synth->add_option("--num-sets", sa.num_sets, "Number of sets")->required();
    synth->add_option("--set-size", sa.set_size, "Images per set");
    synth->add_option("--seed", sa.seed, "Seed");
    synth->add_option("--pool", sa.pool, "Directory of raw u16 label volumes with a volumes.txt listing");
    synth->add_option("--pool-volumes", sa.pool_volumes, "Procedural volumes when no --pool is given");
    synth->add_option("--split", sa.split, "Split recorded for every set (train, val, test)");
    synth->add_option("--prefix", sa.prefix, "Dataset name prefix");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", ta.config, "Training config (JSON)");
    train->add_option("--data", ta.data, "Corpus directories")->required()->delimiter(',');
    train->add_option("--val", ta.val, "Validation corpus directories (default: val split of --data)")->delimiter(',');
    train->add_option("--out", ta.out, "Output directory")->required();
    train->add_option("--resume", ta.resume, "Checkpoint to continue from");
    train->add_option("--steps", ta.steps, "Override the config's step count");
    train->add_option("--pool", ta.pool, "Label volumes for synthetic draws (synth_ratio > 0)");
    train->add_flag("--quiet", ta.quiet, "No progress lines");

    InferArgs ia;
    auto* infer = app.add_subcommand("infer", "Predict M label maps per image");
    infer->add_option("--ckpt", ia.ckpt, "Checkpoint")->required();
    infer->add_option("--images", ia.images, "Image grids")->required();
    infer->add_option("--M", ia.M, "Protocols");
    infer->add_option("--K", ia.K, "Labels per protocol");
    infer->add_option("--out", ia.out, "Output directory")->required();
    infer->add_flag("--viz", ia.viz, "Also write montage.ppm (rows: images, columns: protocols)");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Score predictions against a corpus with a set metric");
    eval->add_option("--pred", ea.pred, "Directory written by infer")->required();
    eval->add_option("--gt", ea.gt, "Ground-truth corpus directories")->required()->delimiter(',');
    eval->add_option("--set-size", ea.set_size, "Images per set");
    eval->add_option("--metric", ea.metric, "set_dice, set_iou or set_sd");
    eval->add_option("--bootstrap", ea.bootstrap, "Bootstrap resamples");
    eval->add_option("--seed", ea.seed, "Bootstrap seed");
    eval->add_option("--split", ea.split, "Split to evaluate");
    eval->add_option("--out", ea.out, "Report directory (default: --pred)");

    VizArgs va;
    auto* viz = app.add_subcommand("viz", "Colour label maps into a PPM montage");
    viz->add_option("--pred", va.pred, "Directory written by infer");
    viz->add_option("--labels", va.labels, "Label-map grids, drawn as one row");
    viz->add_option("--out", va.out, "Output .ppm")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*synth) return cmd_synth(sa);
        if (*train) return cmd_train(ta);
        if (*infer) return cmd_infer(ia);
        if (*eval) return cmd_eval(ea);
        if (*viz) return cmd_viz(va);
    } catch (const RegistryError& e) {
        return report(e.id(), e.what(), kData);
    } catch (const GridFormatError& e) {
        return report(e.id(), e.what(), kData);
    } catch (const IoError& e) {
        return report(e.id(), e.what(), kData);
    } catch (const PoolError& e) {
        return report(e.id(), e.what(), kData);
    } catch (const CheckpointError& e) {
        return report(e.id(), e.what(), kData);
    } catch (const DomainError& e) {
        return report(e.id(), e.what(), kUsage);
    } catch (const Error& e) {
        return report(e.id(), e.what(), kRuntime);
    } catch (const std::exception& e) {
        return report("internal", e.what(), kRuntime);
    }
    return kUsage;
}
