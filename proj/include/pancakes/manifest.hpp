// SPDX-License-Identifier: Apache-2.0
#pragma once

// Corpus manifest (JSON, versioned). Paths are relative to the manifest's directory.
//
//   {"format": "pancakes-manifest", "version": 1,
//    "datasets": [{"name": "...", "domain": "...", "eval_task": "...",
//                  "subjects": [{"id": "s0", "images": ["a.pck"],
//                                "tasks": {"t": ["m.pck"] | [{"labels": "l.pck", "value": 3}]}}],
//                  "split": {"s0": "train"}}]}
//
// A task entry per image is either a u8 mask file or a label-map file plus the
// label value that forms the mask.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid_io.hpp"

namespace pancakes {

inline constexpr int kManifestVersion = 1;
inline const char* const kManifestFile = "manifest.json";

struct MaskRef {
    std::string path;
    int value = -1;  // < 0: path is a binary mask; else labels(path) == value
    friend bool operator==(const MaskRef&, const MaskRef&) = default;
};

struct SubjectEntry {
    std::string id;
    std::vector<std::string> images;
    std::map<std::string, std::vector<MaskRef>> tasks;  // one ref per image
};

struct DatasetManifest {
    std::string name;
    std::string domain;
    std::string eval_task;  // optional: the task scored by the eval harness
    std::vector<SubjectEntry> subjects;
    std::map<std::string, std::string> split;  // subject id -> train | val | test
};

struct Manifest {
    int version = kManifestVersion;
    std::vector<DatasetManifest> datasets;
};

inline void to_json(nlohmann::json& j, const MaskRef& m) {
    if (m.value < 0) j = m.path;
    else j = nlohmann::json{{"labels", m.path}, {"value", m.value}};
}

inline void to_json(nlohmann::json& j, const SubjectEntry& s) {
    j = nlohmann::json{{"id", s.id}, {"images", s.images}, {"tasks", s.tasks}};
}

inline void to_json(nlohmann::json& j, const DatasetManifest& d) {
    j = nlohmann::json{{"name", d.name}, {"domain", d.domain}, {"subjects", d.subjects}, {"split", d.split}};
    if (!d.eval_task.empty()) j["eval_task"] = d.eval_task;
}

inline void to_json(nlohmann::json& j, const Manifest& m) {
    j = nlohmann::json{{"format", "pancakes-manifest"}, {"version", m.version}, {"datasets", m.datasets}};
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw RegistryError(RegistryError::Kind::schema, where + ": missing '" + key + "'");
    return j.at(key);
}

inline std::string string_field(const nlohmann::json& j, const char* key, const std::string& where) {
    const auto& v = field(j, key, where);
    if (!v.is_string()) throw RegistryError(RegistryError::Kind::schema, where + ": '" + key + "' must be a string");
    return v.get<std::string>();
}

}  // namespace detail

/// Parses and schema-checks a manifest document. `where` prefixes error messages.
inline Manifest parse_manifest(const nlohmann::json& j, const std::string& where) {
    using detail::field;
    using detail::string_field;
    using K = RegistryError::Kind;
    if (!j.is_object()) throw RegistryError(K::schema, where + ": manifest must be an object");
    if (j.value("format", std::string()) != "pancakes-manifest")
        throw RegistryError(K::schema, where + ": not a pancakes manifest");
    Manifest m;
    const auto& ver = field(j, "version", where);
    if (!ver.is_number_integer() || ver.get<int>() != kManifestVersion)
        throw RegistryError(K::schema, where + ": unsupported manifest version");
    const auto& ds = field(j, "datasets", where);
    if (!ds.is_array()) throw RegistryError(K::schema, where + ": 'datasets' must be an array");
    for (const auto& dj : ds) {
        DatasetManifest d;
        d.name = string_field(dj, "name", where);
        const std::string dw = where + ": dataset '" + d.name + "'";
        d.domain = dj.value("domain", std::string());
        d.eval_task = dj.value("eval_task", std::string());
        const auto& subs = field(dj, "subjects", dw);
        if (!subs.is_array()) throw RegistryError(K::schema, dw + ": 'subjects' must be an array");
        for (const auto& sj : subs) {
            SubjectEntry s;
            s.id = string_field(sj, "id", dw);
            const std::string sw = dw + " subject '" + s.id + "'";
            const auto& imgs = field(sj, "images", sw);
            if (!imgs.is_array() || imgs.empty()) throw RegistryError(K::schema, sw + ": 'images' must be a non-empty array");
            for (const auto& p : imgs) {
                if (!p.is_string()) throw RegistryError(K::schema, sw + ": image paths must be strings");
                s.images.push_back(p.get<std::string>());
            }
            const auto& tasks = field(sj, "tasks", sw);
            if (!tasks.is_object()) throw RegistryError(K::schema, sw + ": 'tasks' must be an object");
            for (const auto& [name, refs] : tasks.items()) {
                if (!refs.is_array() || refs.size() != s.images.size())
                    throw RegistryError(K::schema, sw + ": task '" + name + "' needs one mask per image");
                std::vector<MaskRef> out;
                for (const auto& r : refs) {
                    if (r.is_string()) {
                        out.push_back({r.get<std::string>(), -1});
                    } else if (r.is_object() && r.contains("labels") && r.contains("value") &&
                               r["labels"].is_string() && r["value"].is_number_integer() && r["value"].get<int>() >= 0) {
                        out.push_back({r["labels"].get<std::string>(), r["value"].get<int>()});
                    } else {
                        throw RegistryError(K::schema, sw + ": malformed mask reference in task '" + name + "'");
                    }
                }
                s.tasks.emplace(name, std::move(out));
            }
            d.subjects.push_back(std::move(s));
        }
        const auto& split = field(dj, "split", dw);
        if (!split.is_object()) throw RegistryError(K::schema, dw + ": 'split' must be an object");
        for (const auto& [sid, v] : split.items()) {
            if (!v.is_string()) throw RegistryError(K::schema, dw + ": split values must be strings");
            const auto tag = v.get<std::string>();
            if (tag != "train" && tag != "val" && tag != "test")
                throw RegistryError(K::schema, dw + ": unknown split '" + tag + "'");
            d.split.emplace(sid, tag);
        }
        m.datasets.push_back(std::move(d));
    }
    return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw RegistryError(RegistryError::Kind::schema, path.string() + ": " + e.what());
    }
    return parse_manifest(j, path.string());
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    const std::string text = nlohmann::json(m).dump(1) + "\n";
    detail::write_file_atomic(path, text.data(), text.size());
}

}  // namespace pancakes
