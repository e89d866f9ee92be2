#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/errors.hpp"
#include "sonoseg/image.hpp"
#include "sonoseg/labels.hpp"

namespace sonoseg {

enum class Diagnosis { Normal = 0, Pneumonia = 1, Covid19 = 2 };

inline const char* diagnosis_name(Diagnosis d) {
    switch (d) {
        case Diagnosis::Normal: return "Normal";
        case Diagnosis::Pneumonia: return "Pneumonia";
        case Diagnosis::Covid19: return "COVID-19";
    }
    throw ValidationError("invalid diagnosis value");
}

inline Diagnosis diagnosis_from_name(const std::string& s) {
    if (s == "Normal") return Diagnosis::Normal;
    if (s == "Pneumonia") return Diagnosis::Pneumonia;
    if (s == "COVID-19") return Diagnosis::Covid19;
    throw ValidationError("unknown diagnosis '" + s + "'");
}

constexpr int kNumDiagnoses = 3;

/// One dataset record: grey image, pixel labels, diagnosis, and the
/// patient/video grouping key that keeps correlated frames in one fold.
struct Sample {
    std::string id;
    GreyImage grey;
    LabelMap labels;
    Diagnosis diagnosis = Diagnosis::Normal;
    std::string group_id;
    int frame_index = 0;
    std::uint64_t seed = 0;
    std::string augment; // provenance tag, empty for source samples

    void validate() const {
        if (group_id.empty()) throw ValidationError("Sample " + id + ": empty group_id");
        if (grey.height != labels.height || grey.width != labels.width)
            throw ValidationError("Sample " + id + ": grey and labels dims differ");
    }
};

struct ManifestEntry {
    std::string id;
    std::string grey_path;  // relative to the manifest's directory
    std::string label_path; // relative to the manifest's directory
    std::string schema;     // "dense" or "sparse"
    std::string diagnosis;
    std::string group_id;
    int frame_index = 0;
    std::uint64_t seed = 0;
    std::string augment;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
    nlohmann::json j{{"id", e.id},
                     {"grey_path", e.grey_path},
                     {"label_path", e.label_path},
                     {"schema", e.schema},
                     {"diagnosis", e.diagnosis},
                     {"group_id", e.group_id},
                     {"frame_index", e.frame_index},
                     {"seed", e.seed}};
    if (!e.augment.empty()) j["augment"] = e.augment;
    return j;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.grey_path = j.at("grey_path").get<std::string>();
    e.label_path = j.at("label_path").get<std::string>();
    e.schema = j.value("schema", "dense");
    e.diagnosis = j.at("diagnosis").get<std::string>();
    e.group_id = j.at("group_id").get<std::string>();
    e.frame_index = j.at("frame_index").get<int>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.augment = j.value("augment", "");
    return e;
}

/// JSON-lines manifest: one record per sample.
inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    for (const auto& e : entries) f << to_json(e).dump() << "\n";
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            entries.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& ex) {
            throw IoError(path + ":" + std::to_string(lineno) + ": bad manifest record: " + ex.what());
        }
    }
    return entries;
}

/// Writes samples as paired PGM files plus the manifest, under
/// out_dir/images, out_dir/labels, out_dir/manifest.jsonl.
inline std::string write_dataset(const std::vector<Sample>& samples, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "labels");
    std::vector<ManifestEntry> entries;
    entries.reserve(samples.size());
    for (const auto& s : samples) {
        s.validate();
        ManifestEntry e;
        e.id = s.id;
        e.grey_path = "images/" + s.id + ".pgm";
        e.label_path = "labels/" + s.id + ".pgm";
        e.schema = schema_of(s.labels.schema).name;
        e.diagnosis = diagnosis_name(s.diagnosis);
        e.group_id = s.group_id;
        e.frame_index = s.frame_index;
        e.seed = s.seed;
        e.augment = s.augment;
        write_pgm(s.grey, (fs::path(out_dir) / e.grey_path).string());
        write_labels_pgm(s.labels, (fs::path(out_dir) / e.label_path).string());
        entries.push_back(std::move(e));
    }
    const std::string manifest = (fs::path(out_dir) / "manifest.jsonl").string();
    write_manifest(entries, manifest);
    return manifest;
}

inline std::vector<Sample> load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<Sample> samples;
    for (const auto& e : read_manifest(manifest_path)) {
        Sample s;
        s.id = e.id;
        s.grey = read_pgm((base / e.grey_path).string());
        const SchemaKind kind = e.schema == "sparse" ? SchemaKind::sparse : SchemaKind::dense;
        s.labels = read_labels_pgm((base / e.label_path).string(), kind);
        s.diagnosis = diagnosis_from_name(e.diagnosis);
        s.group_id = e.group_id;
        s.frame_index = e.frame_index;
        s.seed = e.seed;
        s.augment = e.augment;
        s.validate();
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace sonoseg
