// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dataset registry and the hierarchical training-task sampler.

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/grid_io.hpp"
#include "pancakes/core/rng.hpp"
#include "pancakes/manifest.hpp"
#include "pancakes/synth.hpp"

namespace pancakes {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw DomainError("unknown split: " + s);
}

/// Mask of one image for one task: a stored binary mask or one value of a stored label map.
struct MaskSource {
    std::size_t grid = 0;  // index into Registry::grids
    int value = -1;
};

struct RegSubject {
    std::string id;
    Split split = Split::train;
    std::vector<std::size_t> images;                       // indices into Registry::grids
    std::map<std::string, std::vector<MaskSource>> tasks;  // one source per image
};

struct RegDataset {
    std::string name;
    std::string domain;
    std::string eval_task;
    std::vector<std::string> tasks;  // sorted union over subjects
    std::vector<RegSubject> subjects;
};

/// Immutable after load: every referenced grid is read once, validated and kept.
struct Registry {
    std::vector<RegDataset> datasets;
    std::vector<Grid> grids;
    std::vector<std::string> grid_paths;

    const Grid& image(std::size_t i) const { return grids[i]; }
    Grid mask(const MaskSource& m) const {
        const Grid& g = grids[m.grid];
        if (m.value < 0) return g;
        return label_mask(g, static_cast<std::uint16_t>(m.value));
    }
    std::size_t task_count() const {
        std::size_t n = 0;
        for (const auto& d : datasets) n += d.tasks.size();
        return n;
    }
};

namespace data_detail {

/// Images may be stored as f32 in [0, 1] or as 8/16-bit integers (rescaled to [0, 1]).
inline Grid as_intensity(Grid g, const std::string& path) {
    if (g.dtype() == DType::f32) {
        if (!is_valid_intensity(g)) throw RegistryError(RegistryError::Kind::schema, path + ": intensities outside [0, 1]");
        return g;
    }
    Grid out = Grid::image(g.height(), g.width());
    const double scale = g.dtype() == DType::u8 ? 255.0 : 65535.0;
    auto dst = out.values<float>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(g.value(i) / scale);
    return out;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& p) {
    return std::filesystem::is_directory(p) ? p / kManifestFile : p;
}

}  // namespace data_detail

/// Loads and validates manifests (files or corpus directories). Datasets with the
/// same name across manifests merge; a subject listed under two splits, or an
/// image file shared by subjects of different splits, is contamination.
inline Registry load_registry(const std::vector<std::filesystem::path>& paths) {
    namespace fs = std::filesystem;
    using K = RegistryError::Kind;
    Registry reg;
    std::map<std::string, std::size_t> grid_index;
    std::map<std::string, std::size_t> dataset_index;
    std::map<std::string, std::pair<Split, std::string>> image_owner;  // file -> (split, dataset/subject)

    auto load_grid = [&](const fs::path& file, bool image) -> std::size_t {
        std::error_code ec;
        const auto canon = fs::weakly_canonical(file, ec).string();
        const std::string key = (ec ? file.string() : canon) + (image ? "#i" : "#m");
        if (auto it = grid_index.find(key); it != grid_index.end()) return it->second;
        if (!fs::is_regular_file(file)) throw RegistryError(K::missing_file, "missing file: " + file.string());
        Grid g = read_grid(file);
        if (image) g = data_detail::as_intensity(std::move(g), file.string());
        reg.grids.push_back(std::move(g));
        reg.grid_paths.push_back(file.string());
        grid_index.emplace(key, reg.grids.size() - 1);
        return reg.grids.size() - 1;
    };

    for (const auto& p : paths) {
        const auto mpath = data_detail::manifest_path(p);
        if (!fs::is_regular_file(mpath)) throw RegistryError(K::missing_file, "missing manifest: " + mpath.string());
        const Manifest m = read_manifest(mpath);
        const fs::path root = mpath.parent_path();
        for (const auto& dm : m.datasets) {
            auto [it, fresh] = dataset_index.emplace(dm.name, reg.datasets.size());
            if (fresh) reg.datasets.push_back(RegDataset{dm.name, dm.domain, dm.eval_task, {}, {}});
            RegDataset& d = reg.datasets[it->second];
            if (d.eval_task.empty()) d.eval_task = dm.eval_task;
            for (const auto& [sid, _] : dm.split) {
                if (std::none_of(dm.subjects.begin(), dm.subjects.end(), [&](const auto& s) { return s.id == sid; }))
                    throw RegistryError(K::schema, mpath.string() + ": split names unknown subject '" + sid + "' in '" + dm.name + "'");
            }
            for (const auto& se : dm.subjects) {
                const std::string who = dm.name + "/" + se.id;
                auto sp = dm.split.find(se.id);
                if (sp == dm.split.end())
                    throw RegistryError(K::schema, mpath.string() + ": subject '" + who + "' has no split");
                const Split split = parse_split(sp->second);
                for (const auto& prev : d.subjects) {
                    if (prev.id != se.id) continue;
                    if (prev.split != split)
                        throw RegistryError(K::contamination, "subject '" + who + "' appears in both " +
                                                                  split_name(prev.split) + " and " + split_name(split));
                    throw RegistryError(K::schema, "subject '" + who + "' listed twice");
                }
                RegSubject s{se.id, split, {}, {}};
                for (const auto& img : se.images) {
                    const auto file = root / img;
                    s.images.push_back(load_grid(file, true));
                    std::error_code ec;
                    const auto key = fs::weakly_canonical(file, ec).string();
                    auto [ow, first] = image_owner.emplace(key, std::make_pair(split, who));
                    if (!first && ow->second.first != split)
                        throw RegistryError(K::contamination, "image " + file.string() + " is used by " + ow->second.second +
                                                                  " (" + split_name(ow->second.first) + ") and " + who +
                                                                  " (" + split_name(split) + ")");
                }
                for (const auto& [task, refs] : se.tasks) {
                    std::vector<MaskSource> srcs;
                    for (std::size_t i = 0; i < refs.size(); ++i) {
                        const auto file = root / refs[i].path;
                        const std::size_t g = load_grid(file, false);
                        const Grid& mg = reg.grids[g];
                        if (refs[i].value < 0 && !is_valid_mask(mg))
                            throw RegistryError(K::schema, file.string() + ": not a binary u8 mask");
                        if (refs[i].value >= 0 && mg.dtype() != DType::u16)
                            throw RegistryError(K::schema, file.string() + ": label reference needs a u16 label map");
                        if (!mg.same_shape(reg.grids[s.images[i]]))
                            throw RegistryError(K::shape_mismatch, file.string() + ": mask shape differs from its image");
                        srcs.push_back({g, refs[i].value});
                    }
                    s.tasks.emplace(task, std::move(srcs));
                }
                d.subjects.push_back(std::move(s));
            }
        }
    }
    if (reg.datasets.empty()) throw RegistryError(K::empty, "registry has no datasets");
    for (auto& d : reg.datasets) {
        std::set<std::string> names;
        for (const auto& s : d.subjects)
            for (const auto& [t, _] : s.tasks) names.insert(t);
        d.tasks.assign(names.begin(), names.end());
    }
    return reg;
}

/// One training task: S (image, mask) pairs from distinct subjects of one dataset, one task.
struct TaskSample {
    std::string dataset;
    std::string task;
    bool synthetic = false;
    std::vector<std::string> subjects;
    std::vector<Grid> images;
    std::vector<Grid> masks;
};

/// Fresh synthetic sets on demand.
struct SynthSource {
    LabelPool pool;
    SynthConfig config;
};

inline TaskSample synthetic_task(const SynthSource& src, int S, Rng& rng) {
    const auto tmpl = make_template(src.pool, rng);
    auto set = synthesize_set(tmpl, S, rng, src.config);
    TaskSample t;
    t.dataset = "synthetic";
    t.task = label_task_name(set.gt_label);
    t.synthetic = true;
    for (int s = 0; s < S; ++s) {
        t.subjects.push_back("e" + std::to_string(s));
        t.masks.push_back(label_mask(set.labels[s], set.gt_label));
    }
    t.images = std::move(set.images);
    return t;
}

/// Uniform over datasets, then over the dataset's tasks, then S distinct
/// train-split subjects. Tasks with fewer than S subjects, or draws with an
/// empty mask, are redrawn up to `max_retries` times. With probability
/// `synth_ratio` the sample is a fresh synthetic set instead.
inline TaskSample sample_task(const Registry& reg, int S, Rng& rng, double synth_ratio = 0.0,
                              const SynthSource* synth = nullptr, int max_retries = 100) {
    if (S < 1) throw DomainError("set size must be >= 1");
    if (synth_ratio > 0 && rng.uniform() < synth_ratio) {
        if (!synth) throw DomainError("synth_ratio > 0 needs a synthetic source");
        return synthetic_task(*synth, S, rng);
    }
    if (reg.datasets.empty()) throw DomainError("registry is empty");
    for (int attempt = 0; attempt < max_retries; ++attempt) {
        const auto& d = reg.datasets[rng.index(reg.datasets.size())];
        if (d.tasks.empty()) continue;
        const auto& task = d.tasks[rng.index(d.tasks.size())];
        std::vector<const RegSubject*> pool;
        for (const auto& s : d.subjects)
            if (s.split == Split::train && s.tasks.count(task)) pool.push_back(&s);
        if (static_cast<int>(pool.size()) < S) continue;
        for (int i = 0; i < S; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
        TaskSample t;
        t.dataset = d.name;
        t.task = task;
        bool empty = false;
        for (int i = 0; i < S && !empty; ++i) {
            const RegSubject& s = *pool[i];
            const std::size_t k = rng.index(s.images.size());
            Grid m = reg.mask(s.tasks.at(task)[k]);
            empty = count_foreground(m) == 0;
            t.subjects.push_back(s.id);
            t.images.push_back(reg.image(s.images[k]));
            t.masks.push_back(std::move(m));
        }
        if (!empty) return t;
    }
    throw SamplingError("no task supports " + std::to_string(S) + " train subjects with non-empty masks after " +
                        std::to_string(max_retries) + " draws");
}

/// A set of images scored together: consecutive subjects of one split, first image each.
struct EvalSet {
    std::string dataset;
    std::string task;
    std::vector<std::string> subjects;
    std::vector<Grid> images;
    std::vector<Grid> masks;
    std::vector<std::string> image_paths;
};

/// Chunks each dataset's `split` subjects (manifest order) into sets of S on the
/// dataset's eval task; a trailing partial chunk is dropped.
inline std::vector<EvalSet> eval_sets(const Registry& reg, Split split, int S) {
    if (S < 1) throw DomainError("set size must be >= 1");
    std::vector<EvalSet> out;
    for (const auto& d : reg.datasets) {
        const std::string task = d.eval_task.empty() && !d.tasks.empty() ? d.tasks.front() : d.eval_task;
        std::vector<const RegSubject*> subs;
        for (const auto& s : d.subjects)
            if (s.split == split && s.tasks.count(task)) subs.push_back(&s);
        for (std::size_t start = 0; start + S <= subs.size(); start += S) {
            EvalSet e{d.name, task, {}, {}, {}, {}};
            for (int i = 0; i < S; ++i) {
                const auto& s = *subs[start + i];
                e.subjects.push_back(s.id);
                e.images.push_back(reg.image(s.images[0]));
                e.masks.push_back(reg.mask(s.tasks.at(task)[0]));
                e.image_paths.push_back(reg.grid_paths[s.images[0]]);
            }
            out.push_back(std::move(e));
        }
    }
    return out;
}

}  // namespace pancakes
