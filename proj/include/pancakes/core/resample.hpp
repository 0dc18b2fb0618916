// SPDX-License-Identifier: Apache-2.0
#pragma once

// Integer-factor downsampling. Images are box-averaged; binary masks keep a
// pixel when at least half of its block is foreground; label maps take the
// block's most frequent label (lowest id on ties).

#include <cstdint>
#include <map>
#include <string>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"

namespace pancakes {

inline void require_factor(const Grid& g, int factor) {
    if (factor < 1) throw DomainError("downsample factor must be >= 1");
    if (g.height() % factor || g.width() % factor)
        throw DomainError("grid " + std::to_string(g.height()) + "x" + std::to_string(g.width()) +
                          " is not divisible by " + std::to_string(factor));
}

inline Grid downsample(const Grid& g, int factor) {
    require_factor(g, factor);
    if (factor == 1) return g;
    const int h = g.height() / factor, w = g.width() / factor;
    const double area = double(factor) * factor;
    Grid out(h, w, g.dtype());
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            switch (g.dtype()) {
            case DType::f32: {
                double total = 0;
                for (int i = 0; i < factor; ++i)
                    for (int j = 0; j < factor; ++j) total += g.at<float>(r * factor + i, c * factor + j);
                out.at<float>(r, c) = static_cast<float>(total / area);
                break;
            }
            case DType::u8: {
                int on = 0;
                for (int i = 0; i < factor; ++i)
                    for (int j = 0; j < factor; ++j) on += g.at<std::uint8_t>(r * factor + i, c * factor + j) != 0;
                out.at<std::uint8_t>(r, c) = 2 * on >= factor * factor;
                break;
            }
            case DType::u16: {
                std::map<std::uint16_t, int> counts;
                for (int i = 0; i < factor; ++i)
                    for (int j = 0; j < factor; ++j) ++counts[g.at<std::uint16_t>(r * factor + i, c * factor + j)];
                std::uint16_t best = 0;
                int best_n = -1;
                for (auto [v, n] : counts)
                    if (n > best_n) best = v, best_n = n;
                out.at<std::uint16_t>(r, c) = best;
                break;
            }
            }
        }
    return out;
}

/// Downsamples to `size` x `size` when the grid is a multiple of it.
inline Grid downsample_to(const Grid& g, int size) {
    if (size <= 0 || g.height() == size) return g;
    if (g.height() != g.width()) throw DomainError("downsample_to expects square grids");
    if (g.height() % size) throw DomainError("grid size is not a multiple of the target resolution");
    return downsample(g, g.height() / size);
}

}  // namespace pancakes
