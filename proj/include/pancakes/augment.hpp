// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-tier augmentation. Within-set transforms draw fresh parameters for every
// element; across-set transforms draw once per set and apply the same warp or
// intensity change to every element (noise shares only mean/std).
//
// Geometric transforms move the image (bilinear) and the mask (nearest) together;
// intensity transforms touch the image only and clip to [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/rng.hpp"

namespace pancakes {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    double draw(Rng& rng) const { return rng.uniform(lo, hi); }
    friend bool operator==(const Range&, const Range&) = default;
};

struct AffineAug {
    double p = 0;
    Range degrees, translate, scale;
};
struct BrightnessContrastAug {
    double p = 0;
    Range brightness, contrast;
};
struct ElasticAug {
    double p = 0;
    Range alpha, sigma;
};
struct SharpnessAug {
    double p = 0;
    double factor = 1;
};
struct ToggleAug {
    double p = 0;
};
struct BlurAug {
    double p = 0;
    Range sigma;
    int kernel = 5;
};
struct NoiseAug {
    double p = 0;
    Range mean, std;
};

struct WithinSetSpec {
    AffineAug affine{0.25, {-25, 25}, {0, 0.1}, {0.9, 1.1}};
    BrightnessContrastAug brightness_contrast{0.5, {-0.1, 0.1}, {0.5, 1.5}};
    ElasticAug elastic{0.8, {1, 2.5}, {7, 9}};
    SharpnessAug sharpness{0.25, 3};
    ToggleAug flip_intensities{0.5};
    BlurAug blur{0.25, {0.1, 1}, 5};
    NoiseAug noise{0.25, {0, 0.05}, {0, 0.05}};
};

struct AcrossSetSpec {
    AffineAug affine{0.5, {0, 360}, {0, 0.2}, {0.8, 1.1}};
    BrightnessContrastAug brightness_contrast{0.5, {-0.1, 0.1}, {0.8, 1.2}};
    BlurAug blur{0.5, {0.1, 1.1}, 5};
    NoiseAug noise{0.5, {0, 0.05}, {0, 0.05}};
    ElasticAug elastic{0.5, {1, 2}, {6, 8}};
    SharpnessAug sharpness{0.5, 5};
    ToggleAug hflip{0.5};
    ToggleAug vflip{0.5};
};

struct AugmentationSpec {
    bool enabled = true;
    WithinSetSpec within;
    AcrossSetSpec across;

    /// Every probability in [0, 1]; blur kernels odd and positive.
    void validate() const {
        auto prob = [](double p, const char* name) {
            if (!(p >= 0.0 && p <= 1.0)) throw DomainError(std::string("augmentation probability out of range: ") + name);
        };
        prob(within.affine.p, "within.affine");
        prob(within.brightness_contrast.p, "within.brightness_contrast");
        prob(within.elastic.p, "within.elastic");
        prob(within.sharpness.p, "within.sharpness");
        prob(within.flip_intensities.p, "within.flip_intensities");
        prob(within.blur.p, "within.blur");
        prob(within.noise.p, "within.noise");
        prob(across.affine.p, "across.affine");
        prob(across.brightness_contrast.p, "across.brightness_contrast");
        prob(across.blur.p, "across.blur");
        prob(across.noise.p, "across.noise");
        prob(across.elastic.p, "across.elastic");
        prob(across.sharpness.p, "across.sharpness");
        prob(across.hflip.p, "across.hflip");
        prob(across.vflip.p, "across.vflip");
        for (int k : {within.blur.kernel, across.blur.kernel})
            if (k < 1 || k % 2 == 0) throw DomainError("blur kernel must be odd and positive");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Range, lo, hi)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AffineAug, p, degrees, translate, scale)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BrightnessContrastAug, p, brightness, contrast)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ElasticAug, p, alpha, sigma)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SharpnessAug, p, factor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToggleAug, p)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BlurAug, p, sigma, kernel)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseAug, p, mean, std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WithinSetSpec, affine, brightness_contrast, elastic, sharpness,
                                                flip_intensities, blur, noise)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AcrossSetSpec, affine, brightness_contrast, blur, noise, elastic,
                                                sharpness, hflip, vflip)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentationSpec, enabled, within, across)

/// One fired transform and its drawn parameters, for logging and comparison.
struct AppliedTransform {
    std::string name;
    std::vector<double> params;
    friend bool operator==(const AppliedTransform&, const AppliedTransform&) = default;
};
using AugmentLog = std::vector<AppliedTransform>;

namespace aug {

/// Source coordinates (row, col) for every output pixel.
struct SampleMap {
    int height = 0, width = 0;
    std::vector<double> rows, cols;
};

enum class Border { zero, clamp };

/// Inverse map of a rotation about the centre, then scale, then translation (pixels).
inline SampleMap affine_map(int h, int w, double degrees, double t_row, double t_col, double scale) {
    SampleMap m{h, w, std::vector<double>(std::size_t(h) * w), std::vector<double>(std::size_t(h) * w)};
    const double th = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0;
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col) {
            const double y = r - cr - t_row, x = col - cc - t_col;
            const std::size_t i = std::size_t(r) * w + col;
            m.rows[i] = cr + (c * y + s * x) / scale;
            m.cols[i] = cc + (-s * y + c * x) / scale;
        }
    return m;
}

/// Per-pixel displacement field in pixels (row and column components).
struct DisplacementField {
    int height = 0, width = 0;
    std::vector<double> d_row, d_col;

    double mean_magnitude() const {
        double total = 0;
        for (std::size_t i = 0; i < d_row.size(); ++i) total += std::hypot(d_row[i], d_col[i]);
        return d_row.empty() ? 0.0 : total / static_cast<double>(d_row.size());
    }
};

inline std::vector<double> gaussian_kernel(double sigma, int radius) {
    std::vector<double> k(2 * radius + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i) total += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
    for (auto& v : k) v /= total;
    return k;
}

/// Separable convolution with edge clamping.
inline void convolve_separable(std::vector<double>& data, int h, int w, const std::vector<double>& k) {
    const int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(data.size());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0;
            for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * data[std::size_t(r) * w + std::clamp(c + t, 0, w - 1)];
            tmp[std::size_t(r) * w + c] = acc;
        }
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double acc = 0;
            for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * tmp[std::size_t(std::clamp(r + t, 0, h - 1)) * w + c];
            data[std::size_t(r) * w + c] = acc;
        }
}

/// U(-1, 1) noise per pixel and axis, Gaussian-smoothed (truncated at 4 sigma), times alpha.
/// Displacements are in normalized coordinates, so one unit spans half the image.
inline DisplacementField elastic_field(double alpha, double sigma, int h, int w, Rng& rng) {
    if (!(sigma > 0)) throw DomainError("elastic sigma must be > 0");
    DisplacementField f{h, w, std::vector<double>(std::size_t(h) * w), std::vector<double>(std::size_t(h) * w)};
    for (auto& v : f.d_row) v = rng.uniform(-1.0, 1.0);
    for (auto& v : f.d_col) v = rng.uniform(-1.0, 1.0);
    const auto k = gaussian_kernel(sigma, static_cast<int>(std::ceil(4 * sigma)));
    convolve_separable(f.d_row, h, w, k);
    convolve_separable(f.d_col, h, w, k);
    for (auto& v : f.d_row) v *= alpha * h / 2.0;
    for (auto& v : f.d_col) v *= alpha * w / 2.0;
    return f;
}

inline SampleMap displacement_map(const DisplacementField& f) {
    SampleMap m{f.height, f.width, std::vector<double>(f.d_row.size()), std::vector<double>(f.d_col.size())};
    for (int r = 0; r < f.height; ++r)
        for (int c = 0; c < f.width; ++c) {
            const std::size_t i = std::size_t(r) * f.width + c;
            m.rows[i] = r + f.d_row[i];
            m.cols[i] = c + f.d_col[i];
        }
    return m;
}

inline Grid warp_image(const Grid& img, const SampleMap& m, Border border) {
    require_same_shape(img, Grid::image(m.height, m.width), "warp");
    const int h = img.height(), w = img.width();
    const auto src = img.values<float>();
    auto at = [&](int r, int c) -> double {
        if (border == Border::clamp) return src[std::size_t(std::clamp(r, 0, h - 1)) * w + std::clamp(c, 0, w - 1)];
        if (r < 0 || c < 0 || r >= h || c >= w) return 0.0;
        return src[std::size_t(r) * w + c];
    };
    Grid out = Grid::image(h, w);
    auto dst = out.values<float>();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        const double y = m.rows[i], x = m.cols[i];
        const double fy = std::floor(y), fx = std::floor(x);
        const int r0 = static_cast<int>(fy), c0 = static_cast<int>(fx);
        const double ay = y - fy, ax = x - fx;
        const double v = (1 - ay) * ((1 - ax) * at(r0, c0) + ax * at(r0, c0 + 1)) +
                         ay * ((1 - ax) * at(r0 + 1, c0) + ax * at(r0 + 1, c0 + 1));
        dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

/// Nearest-neighbour warp for u8 masks and u16 label maps.
inline Grid warp_labels(const Grid& g, const SampleMap& m, Border border) {
    if (g.dtype() == DType::f32) throw DomainError("warp_labels expects an integer grid");
    const int h = g.height(), w = g.width();
    if (h != m.height || w != m.width) throw DomainError("warp: shape mismatch");
    Grid out(h, w, g.dtype());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const std::size_t i = std::size_t(r) * w + c;
            int sr = static_cast<int>(std::floor(m.rows[i] + 0.5)), sc = static_cast<int>(std::floor(m.cols[i] + 0.5));
            if (border == Border::clamp) {
                sr = std::clamp(sr, 0, h - 1);
                sc = std::clamp(sc, 0, w - 1);
            } else if (sr < 0 || sc < 0 || sr >= h || sc >= w) {
                continue;  // zero fill
            }
            const std::size_t j = std::size_t(sr) * w + sc;
            if (g.dtype() == DType::u8) out.values<std::uint8_t>()[i] = g.values<std::uint8_t>()[j];
            else out.values<std::uint16_t>()[i] = g.values<std::uint16_t>()[j];
        }
    return out;
}

inline void map_pixels(Grid& img, auto&& f) {
    for (auto& v : img.values<float>()) v = static_cast<float>(std::clamp(static_cast<double>(f(v)), 0.0, 1.0));
}

inline void brightness_contrast(Grid& img, double b, double c) {
    map_pixels(img, [&](float x) { return c * x + b; });
}

inline void flip_intensities(Grid& img) {
    map_pixels(img, [](float x) { return 1.0 - x; });
}

inline std::vector<double> to_double(const Grid& img) {
    const auto v = img.values<float>();
    return {v.begin(), v.end()};
}

inline void gaussian_blur(Grid& img, double sigma, int kernel) {
    auto d = to_double(img);
    convolve_separable(d, img.height(), img.width(), gaussian_kernel(sigma, kernel / 2));
    auto v = img.values<float>();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(std::clamp(d[i], 0.0, 1.0));
}

/// Unsharp masking against a 3x3 box blur.
inline void sharpen(Grid& img, double factor) {
    auto blurred = to_double(img);
    convolve_separable(blurred, img.height(), img.width(), {1.0 / 3, 1.0 / 3, 1.0 / 3});
    auto v = img.values<float>();
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<float>(std::clamp(v[i] + (factor - 1) * (v[i] - blurred[i]), 0.0, 1.0));
}

inline void gaussian_noise(Grid& img, double mean, double sd, Rng& rng) {
    for (auto& v : img.values<float>()) {
        const double n = sd > 0 ? rng.normal(mean, sd) : mean;
        v = static_cast<float>(std::clamp(v + n, 0.0, 1.0));
    }
}

inline Grid flip(const Grid& g, bool horizontal) {
    Grid out(g.height(), g.width(), g.dtype());
    const int h = g.height(), w = g.width();
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const int sr = horizontal ? r : h - 1 - r, sc = horizontal ? w - 1 - c : c;
            const std::size_t i = std::size_t(r) * w + c, j = std::size_t(sr) * w + sc;
            switch (g.dtype()) {
            case DType::u8: out.values<std::uint8_t>()[i] = g.values<std::uint8_t>()[j]; break;
            case DType::u16: out.values<std::uint16_t>()[i] = g.values<std::uint16_t>()[j]; break;
            case DType::f32: out.values<float>()[i] = g.values<float>()[j]; break;
            }
        }
    return out;
}

struct AffineParams {
    double degrees, t_row, t_col, scale;
};

/// Translation is a fraction U(0, t) of each axis with a random sign.
inline AffineParams draw_affine(const AffineAug& a, int h, int w, Rng& rng) {
    AffineParams p{};
    p.degrees = a.degrees.draw(rng);
    p.t_row = a.translate.draw(rng) * h * (rng.bernoulli(0.5) ? 1 : -1);
    p.t_col = a.translate.draw(rng) * w * (rng.bernoulli(0.5) ? 1 : -1);
    p.scale = a.scale.draw(rng);
    return p;
}

inline void log_push(AugmentLog* log, std::string name, std::vector<double> params) {
    if (log) log->push_back({std::move(name), std::move(params)});
}

}  // namespace aug

/// Applies every within-set transform independently, in table order.
inline void within_set_augment(Grid& img, Grid& mask, const WithinSetSpec& spec, Rng& rng,
                               AugmentLog* log = nullptr) {
    require_same_shape(img, mask, "within_set_augment");
    const int h = img.height(), w = img.width();
    if (rng.bernoulli(spec.affine.p)) {
        const auto a = aug::draw_affine(spec.affine, h, w, rng);
        const auto map = aug::affine_map(h, w, a.degrees, a.t_row, a.t_col, a.scale);
        img = aug::warp_image(img, map, aug::Border::zero);
        mask = aug::warp_labels(mask, map, aug::Border::zero);
        aug::log_push(log, "affine", {a.degrees, a.t_row, a.t_col, a.scale});
    }
    if (rng.bernoulli(spec.brightness_contrast.p)) {
        const double b = spec.brightness_contrast.brightness.draw(rng), c = spec.brightness_contrast.contrast.draw(rng);
        aug::brightness_contrast(img, b, c);
        aug::log_push(log, "brightness_contrast", {b, c});
    }
    if (rng.bernoulli(spec.elastic.p)) {
        const double alpha = spec.elastic.alpha.draw(rng), sigma = spec.elastic.sigma.draw(rng);
        const auto map = aug::displacement_map(aug::elastic_field(alpha, sigma, h, w, rng));
        img = aug::warp_image(img, map, aug::Border::clamp);
        mask = aug::warp_labels(mask, map, aug::Border::clamp);
        aug::log_push(log, "elastic", {alpha, sigma});
    }
    if (rng.bernoulli(spec.sharpness.p)) {
        aug::sharpen(img, spec.sharpness.factor);
        aug::log_push(log, "sharpness", {spec.sharpness.factor});
    }
    if (rng.bernoulli(spec.flip_intensities.p)) {
        aug::flip_intensities(img);
        aug::log_push(log, "flip_intensities", {});
    }
    if (rng.bernoulli(spec.blur.p)) {
        const double sigma = spec.blur.sigma.draw(rng);
        aug::gaussian_blur(img, sigma, spec.blur.kernel);
        aug::log_push(log, "blur", {sigma});
    }
    if (rng.bernoulli(spec.noise.p)) {
        const double mu = spec.noise.mean.draw(rng), sd = spec.noise.std.draw(rng);
        aug::gaussian_noise(img, mu, sd, rng);
        aug::log_push(log, "noise", {mu, sd});
    }
}

/// One parameter draw per transform for the whole set. `logs`, when given, gets one entry per element.
inline void across_set_augment(std::vector<Grid>& imgs, std::vector<Grid>& masks, const AcrossSetSpec& spec, Rng& rng,
                               std::vector<AugmentLog>* logs = nullptr) {
    if (imgs.size() != masks.size()) throw DomainError("across_set_augment: images and masks differ in count");
    if (imgs.empty()) return;
    for (std::size_t s = 0; s < imgs.size(); ++s) {
        require_same_shape(imgs[s], masks[s], "across_set_augment");
        require_same_shape(imgs[s], imgs[0], "across_set_augment");
    }
    if (logs) logs->assign(imgs.size(), {});
    auto log = [&](std::size_t s) { return logs ? &(*logs)[s] : nullptr; };
    const int h = imgs[0].height(), w = imgs[0].width();
    const std::size_t S = imgs.size();

    if (rng.bernoulli(spec.affine.p)) {
        const auto a = aug::draw_affine(spec.affine, h, w, rng);
        const auto map = aug::affine_map(h, w, a.degrees, a.t_row, a.t_col, a.scale);
        for (std::size_t s = 0; s < S; ++s) {
            imgs[s] = aug::warp_image(imgs[s], map, aug::Border::zero);
            masks[s] = aug::warp_labels(masks[s], map, aug::Border::zero);
            aug::log_push(log(s), "affine", {a.degrees, a.t_row, a.t_col, a.scale});
        }
    }
    if (rng.bernoulli(spec.brightness_contrast.p)) {
        const double b = spec.brightness_contrast.brightness.draw(rng), c = spec.brightness_contrast.contrast.draw(rng);
        for (std::size_t s = 0; s < S; ++s) {
            aug::brightness_contrast(imgs[s], b, c);
            aug::log_push(log(s), "brightness_contrast", {b, c});
        }
    }
    if (rng.bernoulli(spec.blur.p)) {
        const double sigma = spec.blur.sigma.draw(rng);
        for (std::size_t s = 0; s < S; ++s) {
            aug::gaussian_blur(imgs[s], sigma, spec.blur.kernel);
            aug::log_push(log(s), "blur", {sigma});
        }
    }
    if (rng.bernoulli(spec.noise.p)) {
        const double mu = spec.noise.mean.draw(rng), sd = spec.noise.std.draw(rng);
        for (std::size_t s = 0; s < S; ++s) {
            aug::gaussian_noise(imgs[s], mu, sd, rng);
            aug::log_push(log(s), "noise", {mu, sd});
        }
    }
    if (rng.bernoulli(spec.elastic.p)) {
        const double alpha = spec.elastic.alpha.draw(rng), sigma = spec.elastic.sigma.draw(rng);
        const auto map = aug::displacement_map(aug::elastic_field(alpha, sigma, h, w, rng));
        for (std::size_t s = 0; s < S; ++s) {
            imgs[s] = aug::warp_image(imgs[s], map, aug::Border::clamp);
            masks[s] = aug::warp_labels(masks[s], map, aug::Border::clamp);
            aug::log_push(log(s), "elastic", {alpha, sigma});
        }
    }
    if (rng.bernoulli(spec.sharpness.p)) {
        for (std::size_t s = 0; s < S; ++s) {
            aug::sharpen(imgs[s], spec.sharpness.factor);
            aug::log_push(log(s), "sharpness", {spec.sharpness.factor});
        }
    }
    for (auto [toggle, horizontal] : {std::pair{&spec.hflip, true}, std::pair{&spec.vflip, false}}) {
        if (!rng.bernoulli(toggle->p)) continue;
        for (std::size_t s = 0; s < S; ++s) {
            imgs[s] = aug::flip(imgs[s], horizontal);
            masks[s] = aug::flip(masks[s], horizontal);
            aug::log_push(log(s), horizontal ? "hflip" : "vflip", {});
        }
    }
}

}  // namespace pancakes
