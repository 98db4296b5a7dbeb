#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxrel/volume.hpp"

#include <json.hpp>

namespace voxrel {

// ---- generic file helpers ----

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64_file(const std::string& path);

// Writes via a temp file in the same directory, then renames into place.
void atomic_write_file(const std::string& path, const void* data, size_t n);
void atomic_write_text(const std::string& path, const std::string& text);

std::vector<char> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);
std::string join_path(const std::string& a, const std::string& b);
std::string parent_dir(const std::string& path);

nlohmann::json parse_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

// ---- volume files ----
// A volume is stored as a pair <base>.json (header) + <base>.bin (raw
// little-endian elements, row-major). kind "atlas" stores u16 labels, all
// other kinds store f32.

struct VolumeHeader {
    Shape3 shape;
    std::string dtype;  // "f32" | "u16"
    std::string kind;   // "image" | "heatmap" | "atlas" | "mask"
    nlohmann::json meta;
};

// Strips a trailing .json or .bin so either file of the pair addresses it.
std::string volume_base(const std::string& path);

VolumeHeader read_volume_header(const std::string& base);
void write_volume(const Volume& v, const std::string& base, const std::string& kind,
                  const nlohmann::json& meta = nlohmann::json::object());
Volume read_volume(const std::string& base);
void write_atlas(const LabelAtlas& atlas, const std::string& base);
LabelAtlas read_atlas(const std::string& base);

// ---- dataset manifest ----

struct SampleInfo {
    std::string id;
    std::string subject;
    int label = 0;                 // 0 = NC, 1 = AD
    std::string volume_path;       // base path relative to the manifest
    std::string lesion_mask_path;  // empty if the sample has no mask
};

struct DatasetManifest {
    int format_version = 1;
    std::vector<SampleInfo> samples;
    std::string atlas_path;
    std::string brain_mask_path;
    nlohmann::json generator_config;
    std::string base_dir;  // directory of the manifest file; set on read

    std::string resolve(const std::string& rel) const;
    const SampleInfo& find_sample(const std::string& id) const;
};

void write_manifest(const DatasetManifest& m, const std::string& path);
// Validates id uniqueness, one class per subject, and that every referenced
// file pair exists.
DatasetManifest read_manifest(const std::string& path);

// ---- slice export ----

// 8-bit binary PGM (P5).
void write_pgm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& pixels);

}  // namespace voxrel
