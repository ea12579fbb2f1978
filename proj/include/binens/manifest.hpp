#pragma once

// Run manifests: every command emits one JSON document recording the
// resolved configuration, seeds, produced files, per-stage wall clock, and
// the artifact version. Manifests are written atomically (tmp + rename) so
// an interrupted run never leaves a partial one.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "binens/errors.hpp"

#ifndef BINENS_VERSION
#define BINENS_VERSION "0.1.0-unversioned"
#endif

namespace binens {

inline const char* artifact_version() { return BINENS_VERSION; }

// FNV-1a over a file's bytes; used for determinism checks and manifests.
inline std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("file_hash: cannot open " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!in) break;
    }
    return h;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("write_text_atomic: cannot open " + tmp);
        out << text;
        if (!out) throw DataError("write_text_atomic: write failed for " + tmp);
    }
    fs::rename(tmp, target);
}

class RunManifest {
public:
    RunManifest(std::string command, nlohmann::json resolved_config)
        : start_(std::chrono::steady_clock::now()) {
        doc_["command"] = std::move(command);
        doc_["config"] = std::move(resolved_config);
        doc_["artifact_version"] = artifact_version();
        doc_["outputs"] = nlohmann::json::array();
        doc_["stages"] = nlohmann::json::array();
    }

    void set(const std::string& key, const nlohmann::json& value) { doc_[key] = value; }

    void add_output(const std::string& path, bool with_hash = true) {
        nlohmann::json entry{{"path", path}};
        if (with_hash) entry["fnv1a64"] = file_hash(path);
        doc_["outputs"].push_back(std::move(entry));
    }

    void add_stage(const std::string& name, double wall_seconds, const nlohmann::json& extra = {}) {
        nlohmann::json entry{{"name", name}, {"wall_seconds", wall_seconds}};
        if (!extra.is_null()) entry["details"] = extra;
        doc_["stages"].push_back(std::move(entry));
    }

    const nlohmann::json& doc() const { return doc_; }

    // Finalizes and writes the manifest atomically.
    void write(const std::string& path) {
        doc_["total_wall_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_text_atomic(path, doc_.dump(2) + "\n");
    }

private:
    nlohmann::json doc_;
    std::chrono::steady_clock::time_point start_;
};

// A scoped stage timer that reports into a manifest on destruction.
class StageTimer {
public:
    StageTimer(RunManifest& manifest, std::string name)
        : manifest_(manifest), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        if (!done_) finish();
    }
    void finish(const nlohmann::json& extra = {}) {
        manifest_.add_stage(name_, std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(),
                            extra);
        done_ = true;
    }

private:
    RunManifest& manifest_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
    bool done_ = false;
};

}  // namespace binens
