// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic (image, label-map) sets. A set shares one 2D label-map template
// cut from a 3D label volume; each element warps the template independently
// and renders its own per-label intensities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/augment.hpp"
#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/grid_io.hpp"
#include "pancakes/core/rng.hpp"
#include "pancakes/manifest.hpp"

namespace pancakes {

inline constexpr int kVolumeSize = 128;

/// Cubic integer label volume, index (z * n + y) * n + x. Label 0 is background.
struct LabelVolume {
    int size = 0;
    std::vector<std::uint16_t> voxels;

    std::uint16_t at(int z, int y, int x) const { return voxels[(std::size_t(z) * size + y) * size + x]; }
    /// Distinct nonzero ids, ascending.
    std::vector<std::uint16_t> ids() const {
        std::vector<bool> seen(65536, false);
        for (auto v : voxels) seen[v] = true;
        std::vector<std::uint16_t> out;
        for (int v = 1; v < 65536; ++v)
            if (seen[v]) out.push_back(static_cast<std::uint16_t>(v));
        return out;
    }
};

struct LabelPool {
    std::string source;  // "procedural" or the external directory
    std::vector<LabelVolume> volumes;
};

struct PoolConfig {
    int volumes = 4;
    int size = kVolumeSize;
    int min_labels = 40;
    int min_blob = 2000;       // voxels, 6-connected, before overlap
    int min_survivor = 500;    // voxels a label keeps after later blobs overwrite it
    int lattice_lo = 4, lattice_hi = 9;  // coarse noise lattice points per axis
    Range fill{0.08, 0.25};    // fraction of voxels above each field's threshold
    int max_fields = 64;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PoolConfig, volumes, size, min_labels, min_blob, min_survivor,
                                                lattice_lo, lattice_hi, fill, max_fields)

namespace synth_detail {

inline double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

/// Coarse Gaussian lattice, smoothly interpolated to n^3.
inline std::vector<float> smooth_field(int n, int lattice, Rng& rng) {
    const int L = lattice + 1;
    std::vector<double> g(std::size_t(L) * L * L);
    for (auto& v : g) v = rng.normal(0.0, 1.0);
    std::vector<int> i0(n);
    std::vector<double> f(n);
    for (int i = 0; i < n; ++i) {
        const double p = (i + 0.5) * lattice / n;
        i0[i] = std::min(static_cast<int>(p), lattice - 1);
        f[i] = fade(p - i0[i]);
    }
    auto G = [&](int z, int y, int x) { return g[(std::size_t(z) * L + y) * L + x]; };
    std::vector<float> out(std::size_t(n) * n * n);
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const int a = i0[z], b = i0[y], c = i0[x];
                const double fz = f[z], fy = f[y], fx = f[x];
                auto lerp = [](double u, double v, double t) { return u + (v - u) * t; };
                const double v00 = lerp(G(a, b, c), G(a, b, c + 1), fx);
                const double v01 = lerp(G(a, b + 1, c), G(a, b + 1, c + 1), fx);
                const double v10 = lerp(G(a + 1, b, c), G(a + 1, b, c + 1), fx);
                const double v11 = lerp(G(a + 1, b + 1, c), G(a + 1, b + 1, c + 1), fx);
                out[(std::size_t(z) * n + y) * n + x] = static_cast<float>(lerp(lerp(v00, v01, fy), lerp(v10, v11, fy), fz));
            }
    return out;
}

/// 6-connected components of `on` voxels. Returns a component index per voxel (-1 off) and sizes.
inline std::vector<int> components3(const std::vector<std::uint8_t>& on, int n, std::vector<int>& sizes) {
    std::vector<int> comp(on.size(), -1);
    std::vector<std::size_t> stack;
    sizes.clear();
    const std::size_t nn = std::size_t(n) * n;
    for (std::size_t s = 0; s < on.size(); ++s) {
        if (!on[s] || comp[s] >= 0) continue;
        const int id = static_cast<int>(sizes.size());
        int count = 0;
        comp[s] = id;
        stack.push_back(s);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++count;
            const int x = static_cast<int>(i % n), y = static_cast<int>((i / n) % n), z = static_cast<int>(i / nn);
            auto visit = [&](std::size_t j) {
                if (on[j] && comp[j] < 0) comp[j] = id, stack.push_back(j);
            };
            if (x > 0) visit(i - 1);
            if (x + 1 < n) visit(i + 1);
            if (y > 0) visit(i - n);
            if (y + 1 < n) visit(i + n);
            if (z > 0) visit(i - nn);
            if (z + 1 < n) visit(i + nn);
        }
        sizes.push_back(count);
    }
    return comp;
}

/// Renumbers nonzero labels to 1..n in raster order of first appearance.
inline void compact_labels(std::vector<std::uint16_t>& v) {
    std::vector<std::uint16_t> remap(65536, 0);
    std::uint16_t next = 0;
    for (auto& x : v) {
        if (!x) continue;
        if (!remap[x]) remap[x] = ++next;
        x = remap[x];
    }
}

}  // namespace synth_detail

/// Blob volume: thresholded smooth random fields, each 6-connected blob a new
/// label, later fields overwriting earlier ones, until enough labels survive.
inline LabelVolume procedural_volume(const PoolConfig& cfg, Rng& rng) {
    using namespace synth_detail;
    const int n = cfg.size;
    LabelVolume vol{n, std::vector<std::uint16_t>(std::size_t(n) * n * n, 0)};
    std::uint32_t next_id = 1;
    for (int field = 0; field < cfg.max_fields; ++field) {
        const int lattice = static_cast<int>(rng.uniform_int(cfg.lattice_lo, cfg.lattice_hi));
        auto values = smooth_field(n, lattice, rng);
        const double fill = cfg.fill.draw(rng);
        auto sorted = values;
        const auto k = static_cast<std::size_t>((1.0 - fill) * (sorted.size() - 1));
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
        const float level = sorted[k];
        std::vector<std::uint8_t> on(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) on[i] = values[i] > level;
        std::vector<int> sizes;
        const auto comp = components3(on, n, sizes);
        std::vector<std::uint16_t> id_of(sizes.size(), 0);
        for (std::size_t c = 0; c < sizes.size(); ++c)
            if (sizes[c] >= cfg.min_blob && next_id < 65535) id_of[c] = static_cast<std::uint16_t>(next_id++);
        for (std::size_t i = 0; i < comp.size(); ++i)
            if (comp[i] >= 0 && id_of[comp[i]]) vol.voxels[i] = id_of[comp[i]];

        // Drop labels that later blobs have nearly erased, then count.
        std::vector<int> count(65536, 0);
        for (auto v : vol.voxels) ++count[v];
        int survivors = 0;
        for (auto& v : vol.voxels)
            if (v && count[v] < cfg.min_survivor) v = 0;
        for (int v = 1; v < 65536; ++v) survivors += count[v] >= cfg.min_survivor;
        compact_labels(vol.voxels);
        next_id = static_cast<std::uint32_t>(survivors) + 1;
        if (survivors >= cfg.min_labels && field >= 3) return vol;
    }
    throw SamplingError("procedural volume did not reach " + std::to_string(cfg.min_labels) + " labels");
}

inline LabelPool procedural_pool(Rng& rng, const PoolConfig& cfg = {}) {
    LabelPool pool{"procedural", {}};
    for (int i = 0; i < cfg.volumes; ++i) {
        Rng vr(derive_seed(rng.next_u64(), {std::uint64_t(i)}));
        pool.volumes.push_back(procedural_volume(cfg, vr));
    }
    return pool;
}

inline constexpr const char* kPoolListing = "volumes.txt";

/// External pool: `dir/volumes.txt` lists raw 128^3 little-endian u16 files, one per line.
inline LabelPool load_pool(const std::filesystem::path& dir) {
    const auto listing = dir / kPoolListing;
    std::ifstream f(listing);
    if (!f) throw PoolError("missing pool listing: " + listing.string());
    LabelPool pool{dir.string(), {}};
    const std::size_t n = kVolumeSize, expect = n * n * n * 2;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto path = dir / line;
        std::vector<std::uint8_t> bytes;
        try {
            bytes = detail::read_file(path);
        } catch (const IoError&) {
            throw PoolError("cannot read pool volume: " + path.string());
        }
        if (bytes.size() != expect)
            throw PoolError("malformed pool volume " + path.string() + ": " + std::to_string(bytes.size()) +
                            " bytes, expected " + std::to_string(expect));
        LabelVolume v{kVolumeSize, std::vector<std::uint16_t>(n * n * n)};
        for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = detail::get_u16(&bytes[2 * i]);
        if (v.ids().empty()) throw PoolError("pool volume has no labels: " + path.string());
        pool.volumes.push_back(std::move(v));
    }
    if (pool.volumes.empty()) throw PoolError("pool listing names no volumes: " + listing.string());
    return pool;
}

inline void save_volume_raw(const LabelVolume& v, const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(v.voxels.size() * 2);
    for (auto x : v.voxels) detail::put_u16(bytes, x);
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

struct TemplateProvenance {
    int volume = 0;
    int axis = 0;
    int slice = 0;
    bool split = false;
    std::vector<std::uint16_t> selected;  // volume ids kept
    int culled = 0;                       // labels dropped for being under the pixel floor
    int attempts = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TemplateProvenance, volume, axis, slice, split, selected, culled,
                                                attempts)

struct SetTemplate {
    Grid labels;  // u16, 128x128, labels 1..n
    TemplateProvenance provenance;
};

inline constexpr int kMinLabelPixels = 20;

/// Splits every label into its 4-connected components, each with a fresh id.
inline void split_components(std::vector<std::uint16_t>& v, int h, int w) {
    std::vector<std::uint16_t> out(v.size(), 0);
    std::vector<std::size_t> stack;
    std::uint32_t next = 0;
    for (std::size_t s = 0; s < v.size(); ++s) {
        if (!v[s] || out[s]) continue;
        const auto id = static_cast<std::uint16_t>(std::min<std::uint32_t>(++next, 65535));
        const auto lab = v[s];
        out[s] = id;
        stack.push_back(s);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const int r = static_cast<int>(i / w), c = static_cast<int>(i % w);
            auto visit = [&](std::size_t j) {
                if (v[j] == lab && !out[j]) out[j] = id, stack.push_back(j);
            };
            if (c > 0) visit(i - 1);
            if (c + 1 < w) visit(i + 1);
            if (r > 0) visit(i - w);
            if (r + 1 < h) visit(i + w);
        }
    }
    v = std::move(out);
}

inline SetTemplate make_template(const LabelPool& pool, Rng& rng, int max_attempts = 100) {
    if (pool.volumes.empty()) throw DomainError("label pool is empty");
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        TemplateProvenance prov;
        prov.attempts = attempt;
        prov.volume = static_cast<int>(rng.index(pool.volumes.size()));
        const auto& vol = pool.volumes[prov.volume];
        auto ids = vol.ids();
        const int want = static_cast<int>(rng.uniform_int(20, 40));
        std::shuffle(ids.begin(), ids.end(), rng.engine());
        ids.resize(std::min<std::size_t>(ids.size(), want));
        std::sort(ids.begin(), ids.end());
        prov.selected = ids;
        std::vector<bool> keep(65536, false);
        for (auto id : ids) keep[id] = true;

        prov.axis = static_cast<int>(rng.uniform_int(0, 2));
        prov.slice = static_cast<int>(rng.uniform_int(25, 100));
        const int n = vol.size, s = std::min(prov.slice, vol.size - 1);
        std::vector<std::uint16_t> px(std::size_t(n) * n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) {
                const std::uint16_t v = prov.axis == 0 ? vol.at(s, a, b) : prov.axis == 1 ? vol.at(a, s, b) : vol.at(a, b, s);
                px[std::size_t(a) * n + b] = keep[v] ? v : 0;
            }
        prov.split = rng.bernoulli(0.5);
        if (prov.split) split_components(px, n, n);

        std::vector<int> count(65536, 0);
        for (auto v : px) ++count[v];
        for (int v = 1; v < 65536; ++v) prov.culled += count[v] > 0 && count[v] < kMinLabelPixels;
        for (auto& v : px)
            if (v && count[v] < kMinLabelPixels) v = 0;
        if (std::all_of(px.begin(), px.end(), [](auto v) { return v == 0; })) continue;
        synth_detail::compact_labels(px);
        return {Grid::from(n, n, std::move(px)), std::move(prov)};
    }
    throw SamplingError("no non-degenerate template slice after " + std::to_string(max_attempts) + " attempts");
}

struct SynthConfig {
    // Geometry, drawn independently per element.
    Range degrees{-10, 10};
    double translate = 0.04;   // max fraction of each axis
    Range scale{0.92, 1.08};
    Range elastic_alpha{0.5, 1.5};
    Range elastic_sigma{7, 9};
    // Appearance.
    Range blur_sigma{0, 1};
    Range noise_std{0, 0.05};
    std::vector<int> perlin_cells{8, 16, 32};
    Range perlin_amplitude{0, 0.2};
    Range gamma{0.7, 1.4};
    int max_attempts = 20;

    /// Every magnitude zero: elements are the template rendered with fresh label intensities.
    static SynthConfig identity() {
        SynthConfig c;
        c.degrees = {0, 0};
        c.translate = 0;
        c.scale = {1, 1};
        c.elastic_alpha = {0, 0};
        c.blur_sigma = {0, 0};
        c.noise_std = {0, 0};
        c.perlin_amplitude = {0, 0};
        c.gamma = {1, 1};
        return c;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, degrees, translate, scale, elastic_alpha, elastic_sigma,
                                                blur_sigma, noise_std, perlin_cells, perlin_amplitude, gamma,
                                                max_attempts)

struct SynthSet {
    std::vector<Grid> images;  // f32 in [0, 1]
    std::vector<Grid> labels;  // u16
    int template_id = 0;
    std::uint16_t gt_label = 0;
    TemplateProvenance provenance;
};

namespace synth_detail {

/// Single-octave gradient noise on a lattice of `cell` pixels, roughly in [-1, 1].
inline std::vector<double> gradient_noise(int h, int w, int cell, Rng& rng) {
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<std::array<double, 2>> grad(std::size_t(gh) * gw);
    for (auto& g : grad) {
        const double a = rng.uniform(0, 2 * std::numbers::pi);
        g = {std::cos(a), std::sin(a)};
    }
    std::vector<double> out(std::size_t(h) * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double y = (r + 0.5) / cell, x = (c + 0.5) / cell;
            const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
            const double fy = y - y0, fx = x - x0;
            auto dot = [&](int gy, int gx, double dy, double dx) {
                const auto& g = grad[std::size_t(gy) * gw + gx];
                return g[0] * dy + g[1] * dx;
            };
            const double n00 = dot(y0, x0, fy, fx), n01 = dot(y0, x0 + 1, fy, fx - 1);
            const double n10 = dot(y0 + 1, x0, fy - 1, fx), n11 = dot(y0 + 1, x0 + 1, fy - 1, fx - 1);
            const double u = fade(fx), v = fade(fy);
            const double top = n00 + u * (n01 - n00), bottom = n10 + u * (n11 - n10);
            out[std::size_t(r) * w + c] = std::sqrt(2.0) * (top + v * (bottom - top));
        }
    return out;
}

/// Nearest-neighbour warp of a label map: elastic displacement, then the inverse affine.
inline Grid warp_template(const Grid& tmpl, const SynthConfig& cfg, Rng& rng) {
    const int h = tmpl.height(), w = tmpl.width();
    AffineAug a{1.0, cfg.degrees, {0, cfg.translate}, cfg.scale};
    const auto p = aug::draw_affine(a, h, w, rng);
    const double alpha = cfg.elastic_alpha.draw(rng), sigma = cfg.elastic_sigma.draw(rng);
    aug::DisplacementField field{h, w, std::vector<double>(std::size_t(h) * w), std::vector<double>(std::size_t(h) * w)};
    if (alpha > 0) field = aug::elastic_field(alpha, sigma, h, w, rng);
    // Same inverse map as aug::affine_map, evaluated at the displaced point.
    aug::SampleMap m{h, w, std::vector<double>(std::size_t(h) * w), std::vector<double>(std::size_t(h) * w)};
    const double th = p.degrees * std::numbers::pi / 180.0, c = std::cos(th), s = std::sin(th);
    const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0;
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col) {
            const std::size_t i = std::size_t(r) * w + col;
            const double y = r + field.d_row[i] - cr - p.t_row, x = col + field.d_col[i] - cc - p.t_col;
            m.rows[i] = cr + (c * y + s * x) / p.scale;
            m.cols[i] = cc + (-s * y + c * x) / p.scale;
        }
    return aug::warp_labels(tmpl, m, aug::Border::zero);
}

inline Grid render(const Grid& labels, const SynthConfig& cfg, Rng& rng) {
    const int h = labels.height(), w = labels.width();
    const auto lab = labels.values<std::uint16_t>();
    const int n = *std::max_element(lab.begin(), lab.end()) + 1;
    std::vector<double> intensity(n);
    for (auto& v : intensity) v = rng.uniform();
    Grid img = Grid::image(h, w);
    auto px = img.values<float>();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(intensity[lab[i]]);

    const double blur = cfg.blur_sigma.draw(rng);
    if (blur > 0) {
        const int radius = std::max(1, static_cast<int>(std::ceil(3 * blur)));
        aug::gaussian_blur(img, blur, 2 * radius + 1);
    }
    const double sd = cfg.noise_std.draw(rng);
    if (sd > 0) aug::gaussian_noise(img, 0.0, sd, rng);
    const double amp = cfg.perlin_amplitude.draw(rng);
    if (amp > 0 && !cfg.perlin_cells.empty()) {
        const int cell = cfg.perlin_cells[rng.index(cfg.perlin_cells.size())];
        const auto noise = gradient_noise(h, w, cell, rng);
        for (std::size_t i = 0; i < px.size(); ++i)
            px[i] = static_cast<float>(std::clamp(px[i] + amp * noise[i], 0.0, 1.0));
    }
    const double gamma = cfg.gamma.draw(rng);
    if (gamma != 1.0) aug::map_pixels(img, [&](float x) { return std::pow(static_cast<double>(x), gamma); });
    return img;
}

inline std::vector<std::uint16_t> present_labels(const Grid& g) {
    std::vector<bool> seen(65536, false);
    for (auto v : g.values<std::uint16_t>()) seen[v] = true;
    std::vector<std::uint16_t> out;
    for (int v = 1; v < 65536; ++v)
        if (seen[v]) out.push_back(static_cast<std::uint16_t>(v));
    return out;
}

}  // namespace synth_detail

/// Labels (nonzero) present in every map, ascending.
inline std::vector<std::uint16_t> common_labels(const std::vector<Grid>& maps) {
    if (maps.empty()) return {};
    auto common = synth_detail::present_labels(maps[0]);
    for (std::size_t s = 1; s < maps.size(); ++s) {
        const auto here = synth_detail::present_labels(maps[s]);
        std::vector<std::uint16_t> both;
        std::set_intersection(common.begin(), common.end(), here.begin(), here.end(), std::back_inserter(both));
        common = std::move(both);
    }
    return common;
}

inline SynthSet synthesize_set(const SetTemplate& tmpl, int S, Rng& rng, const SynthConfig& cfg = {}) {
    if (S < 1) throw DomainError("set size must be >= 1");
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        SynthSet out;
        out.provenance = tmpl.provenance;
        for (int s = 0; s < S; ++s) out.labels.push_back(synth_detail::warp_template(tmpl.labels, cfg, rng));
        const auto common = common_labels(out.labels);
        if (common.empty()) continue;
        for (int s = 0; s < S; ++s) out.images.push_back(synth_detail::render(out.labels[s], cfg, rng));
        out.gt_label = common[rng.index(common.size())];
        return out;
    }
    throw SamplingError("no label common to all " + std::to_string(S) + " warped elements after " +
                        std::to_string(cfg.max_attempts) + " attempts");
}

/// Set `index` of a corpus: its template and elements come from a stream derived from (seed, index).
inline SynthSet generate_set(const LabelPool& pool, std::uint64_t seed, std::uint64_t index, int S,
                             const SynthConfig& cfg = {}) {
    Rng rng(derive_seed(seed, {index}));
    const auto tmpl = make_template(pool, rng);
    auto set = synthesize_set(tmpl, S, rng, cfg);
    set.template_id = static_cast<int>(index);
    return set;
}

inline std::string set_dir_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "set_%05zu", i);
    return buf;
}

inline std::string label_task_name(std::uint16_t v) { return "label_" + std::to_string(v); }

/// Writes each set as one dataset (subjects = elements) and returns the manifest,
/// which is also written to `out_dir/manifest.json`. Dataset names are
/// `prefix + set_NNNNN`, so corpora meant to share a registry need distinct prefixes.
inline Manifest write_corpus(const std::vector<SynthSet>& sets, const std::filesystem::path& out_dir,
                             const std::string& split = "train", const std::string& prefix = "") {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create corpus directory: " + out_dir.string());
    Manifest m;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        const auto& set = sets[i];
        const std::string dir = set_dir_name(i);
        fs::create_directories(out_dir / dir, ec);
        if (ec) throw IoError("cannot create " + (out_dir / dir).string());
        DatasetManifest d;
        d.name = prefix + dir;
        d.domain = "synthetic";
        d.eval_task = label_task_name(set.gt_label);
        const auto common = common_labels(set.labels);
        for (std::size_t s = 0; s < set.images.size(); ++s) {
            SubjectEntry e;
            e.id = "s" + std::to_string(s);
            const std::string img = dir + "/img_" + std::to_string(s) + ".pck";
            const std::string lab = dir + "/lab_" + std::to_string(s) + ".pck";
            write_grid(set.images[s], out_dir / img);
            write_grid(set.labels[s], out_dir / lab);
            e.images = {img};
            for (auto v : common) e.tasks[label_task_name(v)] = {MaskRef{lab, v}};
            d.split[e.id] = split;
            d.subjects.push_back(std::move(e));
        }
        m.datasets.push_back(std::move(d));
    }
    write_manifest(m, out_dir / kManifestFile);
    return m;
}

}  // namespace pancakes
