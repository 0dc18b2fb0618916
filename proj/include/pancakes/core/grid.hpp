// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "pancakes/core/errors.hpp"

namespace pancakes {

/// On-disk dtype codes are part of the PCK1 format; do not renumber.
enum class DType : std::uint8_t { u8 = 0, u16 = 1, f32 = 2 };

inline const char* dtype_name(DType t) {
    switch (t) {
    case DType::u8: return "u8";
    case DType::u16: return "u16";
    case DType::f32: return "f32";
    }
    return "?";
}

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
    else if constexpr (std::is_same_v<T, std::uint16_t>) return DType::u16;
    else {
        static_assert(std::is_same_v<T, float>, "Grid holds u8, u16 or f32");
        return DType::f32;
    }
}

/// A 2D row-major scalar field. f32 grids carry intensities, u16 grids carry
/// label maps, u8 grids carry binary masks.
class Grid {
public:
    using Storage =
        std::variant<std::vector<std::uint8_t>, std::vector<std::uint16_t>, std::vector<float>>;

    Grid() = default;

    Grid(int height, int width, DType dtype) : height_(height), width_(width) {
        if (height <= 0 || width <= 0 || height > 65535 || width > 65535)
            throw DomainError("grid shape must be within 1..65535, got " + std::to_string(height) +
                              "x" + std::to_string(width));
        const auto n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
        switch (dtype) {
        case DType::u8: data_ = std::vector<std::uint8_t>(n, 0); break;
        case DType::u16: data_ = std::vector<std::uint16_t>(n, 0); break;
        case DType::f32: data_ = std::vector<float>(n, 0.0f); break;
        }
    }

    template <class T>
    static Grid from(int height, int width, std::vector<T> values) {
        Grid g(height, width, dtype_of<T>());
        if (values.size() != g.size())
            throw DomainError("grid payload has " + std::to_string(values.size()) +
                              " values, shape needs " + std::to_string(g.size()));
        g.data_ = std::move(values);
        return g;
    }

    static Grid image(int h, int w) { return Grid(h, w, DType::f32); }
    static Grid labels(int h, int w) { return Grid(h, w, DType::u16); }
    static Grid mask(int h, int w) { return Grid(h, w, DType::u8); }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept {
        return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
    }
    bool empty() const noexcept { return size() == 0; }
    DType dtype() const noexcept { return static_cast<DType>(data_.index()); }
    bool same_shape(const Grid& o) const noexcept {
        return height_ == o.height_ && width_ == o.width_;
    }

    template <class T>
    std::span<T> values() {
        auto* v = std::get_if<std::vector<T>>(&data_);
        if (!v) throw DomainError(std::string("grid dtype is ") + dtype_name(dtype()));
        return {v->data(), v->size()};
    }
    template <class T>
    std::span<const T> values() const {
        const auto* v = std::get_if<std::vector<T>>(&data_);
        if (!v) throw DomainError(std::string("grid dtype is ") + dtype_name(dtype()));
        return {v->data(), v->size()};
    }

    template <class T>
    T& at(int r, int c) {
        return values<T>()[static_cast<std::size_t>(r) * width_ + c];
    }
    template <class T>
    T at(int r, int c) const {
        return values<T>()[static_cast<std::size_t>(r) * width_ + c];
    }

    /// Value at flat index promoted to double, whatever the dtype.
    double value(std::size_t i) const {
        return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
    }

    friend bool operator==(const Grid& a, const Grid& b) {
        return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
    }

private:
    int height_ = 0;
    int width_ = 0;
    Storage data_;
};

inline void require_same_shape(const Grid& a, const Grid& b, const char* what) {
    if (!a.same_shape(b))
        throw DomainError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) +
                          "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) +
                          "x" + std::to_string(b.width()));
}

inline bool is_valid_intensity(const Grid& g) {
    if (g.dtype() != DType::f32) return false;
    const auto v = g.values<float>();
    return std::all_of(v.begin(), v.end(), [](float x) { return x >= 0.0f && x <= 1.0f; });
}

inline bool is_valid_mask(const Grid& g) {
    if (g.dtype() != DType::u8) return false;
    const auto v = g.values<std::uint8_t>();
    return std::all_of(v.begin(), v.end(), [](std::uint8_t x) { return x <= 1; });
}

inline bool is_valid_labels(const Grid& g, int num_labels) {
    if (g.dtype() != DType::u16) return false;
    const auto v = g.values<std::uint16_t>();
    return std::all_of(v.begin(), v.end(), [&](std::uint16_t x) { return x < num_labels; });
}

inline std::size_t count_foreground(const Grid& mask) {
    const auto v = mask.values<std::uint8_t>();
    return static_cast<std::size_t>(std::count(v.begin(), v.end(), std::uint8_t{1}));
}

/// Binary mask of the pixels of `labels` equal to `value`.
inline Grid label_mask(const Grid& labels, std::uint16_t value) {
    Grid m = Grid::mask(labels.height(), labels.width());
    const auto src = labels.values<std::uint16_t>();
    auto dst = m.values<std::uint8_t>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == value ? 1 : 0;
    return m;
}

}  // namespace pancakes
