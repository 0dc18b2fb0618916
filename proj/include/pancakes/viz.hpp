// SPDX-License-Identifier: Apache-2.0
#pragma once

// Label maps to colour images. Colours depend only on the label index, so the
// same (protocol, label) pair looks the same in every image of a set.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/grid_io.hpp"

namespace pancakes {

using Rgb = std::array<std::uint8_t, 3>;

/// Golden-angle hues with three alternating value levels.
inline Rgb label_color(int label) {
    const double h = std::fmod(label * 137.50776405003785, 360.0) / 60.0;
    const double v = 1.0 - 0.22 * (label % 3), s = 0.75;
    const double c = v * s, x = c * (1 - std::abs(std::fmod(h, 2.0) - 1)), m = v - c;
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
    }
    auto q = [&](double u) { return static_cast<std::uint8_t>(std::lround(255 * (u + m))); };
    return {q(r), q(g), q(b)};
}

struct RgbImage {
    int height = 0, width = 0;
    std::vector<std::uint8_t> data;  // row-major RGB

    RgbImage(int h, int w, Rgb fill) : height(h), width(w), data(3 * std::size_t(h) * w) {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = fill[i % 3];
    }
    void set(int r, int c, Rgb v) {
        const std::size_t i = 3 * (std::size_t(r) * width + c);
        data[i] = v[0], data[i + 1] = v[1], data[i + 2] = v[2];
    }
};

/// Grid of label maps: rows[i][j] is drawn at row i, column j, separated by `gap` white pixels.
inline RgbImage label_montage(const std::vector<std::vector<Grid>>& rows, int gap = 2) {
    if (rows.empty() || rows.front().empty()) throw DomainError("montage needs at least one label map");
    const int h = rows.front().front().height(), w = rows.front().front().width();
    std::size_t cols = 0;
    for (const auto& row : rows) cols = std::max(cols, row.size());
    RgbImage img(static_cast<int>(rows.size()) * (h + gap) - gap, static_cast<int>(cols) * (w + gap) - gap,
                 {255, 255, 255});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            const Grid& g = rows[i][j];
            if (g.dtype() != DType::u16) throw DomainError("montage expects u16 label maps");
            if (g.height() != h || g.width() != w) throw DomainError("montage label maps differ in shape");
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c)
                    img.set(static_cast<int>(i) * (h + gap) + r, static_cast<int>(j) * (w + gap) + c,
                            label_color(g.at<std::uint16_t>(r, c)));
        }
    return img;
}

/// Binary PPM (P6).
inline void write_ppm(const RgbImage& img, const std::filesystem::path& path) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), img.data.begin(), img.data.end());
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

}  // namespace pancakes
