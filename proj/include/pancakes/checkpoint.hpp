// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file:
//   "PCKM" | u32 version | u32 meta length | meta JSON (model config, step, ...)
//   | u64 n | n f32 params | n f32 adam m | n f32 adam v | u64 FNV-1a of all preceding bytes
// Integers little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid_io.hpp"
#include "pancakes/net/model.hpp"

namespace pancakes {

inline constexpr char kCheckpointMagic[4] = {'P', 'C', 'K', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig model;
    std::int64_t step = 0;          // optimizer steps taken
    std::uint64_t adam_t = 0;
    nlohmann::json meta = nlohmann::json::object();  // training config and anything else
    std::vector<float> params, adam_m, adam_v;
};

namespace ckpt_detail {

inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001b3ull;
    return h;
}

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(const std::uint8_t* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
}

inline void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
    for (float f : v) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_le(out, u, 4);
    }
}

}  // namespace ckpt_detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    using namespace ckpt_detail;
    const std::size_t n = c.params.size();
    if (c.adam_m.size() != n || c.adam_v.size() != n) throw DomainError("checkpoint: optimizer state size differs from params");
    nlohmann::json meta = c.meta;
    meta["model"] = c.model;
    meta["step"] = c.step;
    meta["adam_t"] = c.adam_t;
    const std::string text = meta.dump();
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
    put_le(out, kCheckpointVersion, 4);
    put_le(out, text.size(), 4);
    out.insert(out.end(), text.begin(), text.end());
    put_le(out, n, 8);
    put_floats(out, c.params);
    put_floats(out, c.adam_m);
    put_floats(out, c.adam_v);
    put_le(out, fnv1a(out.data(), out.size()), 8);
    return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& b, const std::string& origin) {
    using namespace ckpt_detail;
    using K = CheckpointError::Kind;
    auto corrupt = [&](const std::string& why) { return CheckpointError(K::corrupt_payload, origin + ": " + why); };
    if (b.size() < 12 || std::memcmp(b.data(), kCheckpointMagic, 4) != 0) throw corrupt("not a checkpoint");
    const auto version = get_le(b.data() + 4, 4);
    if (version != kCheckpointVersion)
        throw CheckpointError(K::version_mismatch, origin + ": checkpoint version " + std::to_string(version) +
                                                       ", expected " + std::to_string(kCheckpointVersion));
    if (b.size() < 8 || get_le(b.data() + b.size() - 8, 8) != fnv1a(b.data(), b.size() - 8))
        throw corrupt("checksum mismatch");
    const std::size_t meta_len = get_le(b.data() + 8, 4);
    std::size_t pos = 12;
    if (pos + meta_len + 8 > b.size()) throw corrupt("truncated");
    Checkpoint c;
    try {
        c.meta = nlohmann::json::parse(b.begin() + pos, b.begin() + pos + meta_len);
        c.model = c.meta.at("model").get<ModelConfig>();
        c.step = c.meta.at("step").get<std::int64_t>();
        c.adam_t = c.meta.at("adam_t").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(std::string("bad metadata: ") + e.what());
    }
    c.meta.erase("model");
    c.meta.erase("step");
    c.meta.erase("adam_t");
    pos += meta_len;
    const std::size_t n = get_le(b.data() + pos, 8);
    pos += 8;
    if (pos + 12 * n + 8 != b.size()) throw corrupt("payload size disagrees with parameter count");
    for (auto* v : {&c.params, &c.adam_m, &c.adam_v}) {
        v->resize(n);
        for (std::size_t i = 0; i < n; ++i, pos += 4) {
            const auto u = static_cast<std::uint32_t>(get_le(b.data() + pos, 4));
            std::memcpy(&(*v)[i], &u, 4);
        }
    }
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(c);
    detail::write_file_atomic(path, bytes.data(), bytes.size());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path), path.string());
}

/// Rebuilds the model a checkpoint describes; its parameter count must match.
inline Model<float> model_from_checkpoint(const Checkpoint& c) {
    Model<float> m(c.model);
    if (m.param_count() != c.params.size())
        throw CheckpointError(CheckpointError::Kind::config, "checkpoint holds " + std::to_string(c.params.size()) +
                                                                 " parameters, its config builds " +
                                                                 std::to_string(m.param_count()));
    std::copy(c.params.begin(), c.params.end(), m.params().begin());
    return m;
}

}  // namespace pancakes
