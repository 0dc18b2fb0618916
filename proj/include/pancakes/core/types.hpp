// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"

namespace pancakes {

/// S images of one domain. Images are processed independently and scored jointly.
class ImageSet {
public:
    ImageSet() = default;
    explicit ImageSet(std::vector<Grid> images, std::string domain_id = {})
        : images_(std::move(images)), domain_id_(std::move(domain_id)) {
        if (images_.empty()) throw DomainError("image set must hold at least one image");
        for (const auto& g : images_) {
            if (g.dtype() != DType::f32) throw DomainError("image set elements must be f32 intensities");
            require_same_shape(images_.front(), g, "image set");
        }
    }

    std::size_t size() const noexcept { return images_.size(); }
    const Grid& operator[](std::size_t i) const { return images_.at(i); }
    const std::vector<Grid>& images() const noexcept { return images_; }
    const std::string& domain_id() const noexcept { return domain_id_; }
    int height() const { return images_.front().height(); }
    int width() const { return images_.front().width(); }

private:
    std::vector<Grid> images_;
    std::string domain_id_;
};

struct ProtocolRequest {
    int num_protocols = 8;  // M
    int num_labels = 20;    // K
    int half_width = 8;     // J

    void validate() const {
        if (num_protocols < 1) throw DomainError("M must be >= 1");
        if (num_labels < 2) throw DomainError("K must be >= 2");
        if (half_width < 1) throw DomainError("J must be >= 1");
    }
};

/// K softmax-normalized channels over an H x W grid, channel-major.
template <class Scalar = float>
struct SoftLabelMap {
    int num_labels = 0;
    int height = 0;
    int width = 0;
    std::vector<Scalar> data;

    std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
    const Scalar* channel(int k) const { return data.data() + static_cast<std::size_t>(k) * pixels(); }
    Scalar* channel(int k) { return data.data() + static_cast<std::size_t>(k) * pixels(); }

    /// Largest deviation of a per-pixel channel sum from one.
    double max_normalization_error() const {
        double worst = 0.0;
        for (std::size_t p = 0; p < pixels(); ++p) {
            double s = 0.0;
            for (int k = 0; k < num_labels; ++k) s += channel(k)[p];
            worst = std::max(worst, std::abs(s - 1.0));
        }
        return worst;
    }

    /// Argmax over channels; ties resolve to the lowest channel index.
    Grid hard_map() const {
        Grid g = Grid::labels(height, width);
        auto out = g.values<std::uint16_t>();
        for (std::size_t p = 0; p < pixels(); ++p) {
            int best = 0;
            Scalar best_v = channel(0)[p];
            for (int k = 1; k < num_labels; ++k) {
                if (channel(k)[p] > best_v) {
                    best_v = channel(k)[p];
                    best = k;
                }
            }
            out[p] = static_cast<std::uint16_t>(best);
        }
        return g;
    }

    /// Soft channel k as an f32 grid.
    Grid channel_grid(int k) const {
        Grid g = Grid::image(height, width);
        auto out = g.values<float>();
        for (std::size_t p = 0; p < pixels(); ++p) out[p] = static_cast<float>(channel(k)[p]);
        return g;
    }
};

/// Per-image result of segmenting with M protocols.
template <class Scalar = float>
struct MultiProtocolOutput {
    std::vector<SoftLabelMap<Scalar>> soft;  // one per protocol
    std::vector<Grid> hard;                  // u16 argmax maps, one per protocol
};

}  // namespace pancakes
