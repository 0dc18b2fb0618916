// SPDX-License-Identifier: Apache-2.0
#pragma once

// PCK1 grid container:
//   "PCK1" | dtype u8 (0=u8, 1=u16, 2=f32) | H u16 LE | W u16 LE | row-major payload LE

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"

namespace pancakes {

inline constexpr char kGridMagic[4] = {'P', 'C', 'K', '1'};
inline constexpr std::size_t kGridHeaderSize = 9;

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::size_t dtype_bytes(DType t) {
    switch (t) {
    case DType::u8: return 1;
    case DType::u16: return 2;
    case DType::f32: return 4;
    }
    return 0;
}

/// Writes `bytes` to `path` through a sibling temp file so a failed write
/// never leaves a partial file at `path`.
inline void write_file_atomic(const std::filesystem::path& path, const void* bytes, std::size_t n) {
    namespace fs = std::filesystem;
    fs::path tmp = path;
    tmp += ".partial";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + path.string());
        f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
        f.flush();
        if (!f) {
            f.close();
            std::error_code ec;
            fs::remove(tmp, ec);
            throw IoError("write failed: " + path.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move temp file into place: " + path.string());
    }
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_grid(const Grid& g) {
    static_assert(std::endian::native == std::endian::little,
                  "PCK1 payload encoding assumes a little-endian host");
    if (g.empty()) throw DomainError("cannot encode an empty grid");
    std::vector<std::uint8_t> out;
    out.reserve(kGridHeaderSize + g.size() * detail::dtype_bytes(g.dtype()));
    out.insert(out.end(), std::begin(kGridMagic), std::end(kGridMagic));
    out.push_back(static_cast<std::uint8_t>(g.dtype()));
    detail::put_u16(out, static_cast<std::uint16_t>(g.height()));
    detail::put_u16(out, static_cast<std::uint16_t>(g.width()));
    auto append = [&](auto span) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(span.data());
        out.insert(out.end(), p, p + span.size_bytes());
    };
    switch (g.dtype()) {
    case DType::u8: append(g.values<std::uint8_t>()); break;
    case DType::u16: append(g.values<std::uint16_t>()); break;
    case DType::f32: append(g.values<float>()); break;
    }
    return out;
}

inline Grid decode_grid(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
    using K = GridFormatError::Kind;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kGridMagic, 4) != 0)
        throw GridFormatError(K::bad_magic, "not a PCK1 grid: " + origin);
    if (bytes.size() < kGridHeaderSize)
        throw GridFormatError(K::truncated, "truncated PCK1 header: " + origin);
    const std::uint8_t code = bytes[4];
    if (code > 2)
        throw GridFormatError(K::unknown_dtype,
                              "unknown dtype code " + std::to_string(code) + ": " + origin);
    const auto dtype = static_cast<DType>(code);
    const int h = detail::get_u16(bytes.data() + 5);
    const int w = detail::get_u16(bytes.data() + 7);
    if (h == 0 || w == 0) throw GridFormatError(K::bad_shape, "zero-sized grid: " + origin);
    const std::size_t n = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    const std::size_t need = kGridHeaderSize + n * detail::dtype_bytes(dtype);
    if (bytes.size() < need)
        throw GridFormatError(K::truncated, "payload holds " +
                                                std::to_string(bytes.size() - kGridHeaderSize) +
                                                " bytes, header needs " +
                                                std::to_string(need - kGridHeaderSize) + ": " + origin);
    if (bytes.size() > need)
        throw GridFormatError(K::truncated, "trailing bytes after payload: " + origin);

    Grid g(h, w, dtype);
    auto fill = [&](auto span) {
        std::memcpy(span.data(), bytes.data() + kGridHeaderSize, span.size_bytes());
    };
    switch (dtype) {
    case DType::u8: fill(g.values<std::uint8_t>()); break;
    case DType::u16: fill(g.values<std::uint16_t>()); break;
    case DType::f32: fill(g.values<float>()); break;
    }
    return g;
}

inline void write_grid(const Grid& g, const std::filesystem::path& path) {
    const auto bytes = encode_grid(g);
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

inline Grid read_grid(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return decode_grid(bytes, path.string());
}

}  // namespace pancakes
