// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace pancakes {

/// Base class for every error raised by the library. `id()` is a stable,
/// machine-parsable identifier ("grid.bad_magic", "data.contamination", ...).
class Error : public std::runtime_error {
public:
    Error(std::string id, const std::string& what)
        : std::runtime_error(what), id_(std::move(id)) {}
    const std::string& id() const noexcept { return id_; }

private:
    std::string id_;
};

/// Precondition violated by a caller (bad shape, index out of range, ...).
class DomainError : public Error {
public:
    explicit DomainError(const std::string& what) : Error("domain", what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io", what) {}
};

class GridFormatError : public Error {
public:
    enum class Kind { bad_magic, unknown_dtype, truncated, bad_shape };

    GridFormatError(Kind kind, const std::string& what)
        : Error(id_for(kind), what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    static std::string id_for(Kind k) {
        switch (k) {
        case Kind::bad_magic: return "grid.bad_magic";
        case Kind::unknown_dtype: return "grid.unknown_dtype";
        case Kind::truncated: return "grid.truncated";
        case Kind::bad_shape: return "grid.bad_shape";
        }
        return "grid";
    }
    Kind kind_;
};

class CheckpointError : public Error {
public:
    enum class Kind { version_mismatch, corrupt_payload, config };

    CheckpointError(Kind kind, const std::string& what)
        : Error(kind == Kind::version_mismatch  ? "checkpoint.version"
                : kind == Kind::corrupt_payload ? "checkpoint.corrupt"
                                                : "checkpoint.config",
                what),
          kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class RegistryError : public Error {
public:
    enum class Kind { schema, contamination, missing_file, shape_mismatch, empty };

    RegistryError(Kind kind, const std::string& what) : Error(id_for(kind), what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    static std::string id_for(Kind k) {
        switch (k) {
        case Kind::schema: return "data.schema";
        case Kind::contamination: return "data.contamination";
        case Kind::missing_file: return "data.missing_file";
        case Kind::shape_mismatch: return "data.shape_mismatch";
        case Kind::empty: return "data.empty";
        }
        return "data";
    }
    Kind kind_;
};

/// A bounded resampling loop ran out of attempts.
class SamplingError : public Error {
public:
    explicit SamplingError(const std::string& what) : Error("sampling", what) {}
};

/// Unusable label pool (bad listing, malformed volume file).
class PoolError : public Error {
public:
    explicit PoolError(const std::string& what) : Error("synth.bad_pool", what) {}
};

class NonFiniteLossError : public Error {
public:
    explicit NonFiniteLossError(const std::string& what) : Error("train.non_finite", what) {}
};

}  // namespace pancakes
