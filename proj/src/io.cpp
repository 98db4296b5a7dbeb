#include "voxrel/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace fs = std::filesystem;

namespace voxrel {

uint64_t fnv1a64(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return fnv1a64(bytes.data(), bytes.size());
}

void atomic_write_file(const std::string& path, const void* data, size_t n) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp);
        if (n > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        out.flush();
        if (!out) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("rename failed for " + path + ": " + ec.message());
    }
}

void atomic_write_text(const std::string& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open file: " + path);
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<char> bytes(static_cast<size_t>(size));
    if (size > 0) in.read(bytes.data(), size);
    if (!in) throw IoError("read failed: " + path);
    return bytes;
}

std::string read_file_text(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

bool file_exists(const std::string& path) { return fs::exists(path); }

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

std::string join_path(const std::string& a, const std::string& b) {
    if (a.empty()) return b;
    return (fs::path(a) / b).string();
}

std::string parent_dir(const std::string& path) { return fs::path(path).parent_path().string(); }

nlohmann::json parse_json_file(const std::string& path) {
    const std::string text = read_file_text(path);
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError("invalid JSON in " + path);
    return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    atomic_write_text(path, j.dump(2) + "\n");
}

// ---- volume files ----

std::string volume_base(const std::string& path) {
    if (path.size() > 5 && path.substr(path.size() - 5) == ".json") return path.substr(0, path.size() - 5);
    if (path.size() > 4 && path.substr(path.size() - 4) == ".bin") return path.substr(0, path.size() - 4);
    return path;
}

namespace {

nlohmann::json require_field(const nlohmann::json& j, const char* field, const std::string& path) {
    if (!j.contains(field))
        throw FormatError("missing field \"" + std::string(field) + "\" in " + path);
    return j.at(field);
}

size_t dtype_size(const std::string& dtype, const std::string& path) {
    if (dtype == "f32") return 4;
    if (dtype == "u16") return 2;
    throw FormatError("unknown dtype \"" + dtype + "\" in " + path);
}

void check_kind_dtype(const std::string& kind, const std::string& dtype, const std::string& path) {
    const std::string expected = kind == "atlas" ? "u16" : "f32";
    if (dtype != expected)
        throw FormatError("field \"dtype\": kind \"" + kind + "\" requires " + expected + ", got \"" +
                          dtype + "\" in " + path);
}

std::vector<char> read_payload(const std::string& base, const VolumeHeader& hdr) {
    const std::string data_path = base + ".bin";
    const auto bytes = read_file_bytes(data_path);
    const size_t expected =
        static_cast<size_t>(hdr.shape.numel()) * dtype_size(hdr.dtype, data_path);
    if (bytes.size() != expected)
        throw IoError("length mismatch in " + data_path + ": expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(bytes.size()));
    return bytes;
}

}  // namespace

VolumeHeader read_volume_header(const std::string& base_in) {
    const std::string base = volume_base(base_in);
    const std::string hpath = base + ".json";
    const nlohmann::json j = parse_json_file(hpath);
    VolumeHeader hdr;
    const auto shape = require_field(j, "shape", hpath);
    if (!shape.is_array() || shape.size() != 3)
        throw FormatError("field \"shape\" must be [D,H,W] in " + hpath);
    hdr.shape = {shape[0].get<int64_t>(), shape[1].get<int64_t>(), shape[2].get<int64_t>()};
    if (hdr.shape.d <= 0 || hdr.shape.h <= 0 || hdr.shape.w <= 0)
        throw FormatError("field \"shape\" has non-positive extent in " + hpath);
    hdr.dtype = require_field(j, "dtype", hpath).get<std::string>();
    dtype_size(hdr.dtype, hpath);
    hdr.kind = require_field(j, "kind", hpath).get<std::string>();
    check_kind_dtype(hdr.kind, hdr.dtype, hpath);
    if (require_field(j, "order", hpath).get<std::string>() != "C")
        throw FormatError("field \"order\" must be \"C\" in " + hpath);
    if (require_field(j, "endianness", hpath).get<std::string>() != "little")
        throw FormatError("field \"endianness\" must be \"little\" in " + hpath);
    hdr.meta = j.contains("meta") ? j.at("meta") : nlohmann::json::object();
    return hdr;
}

void write_volume(const Volume& v, const std::string& base_in, const std::string& kind,
                  const nlohmann::json& meta) {
    const std::string base = volume_base(base_in);
    if (kind == "atlas") throw ValueError("write_volume: use write_atlas for label fields");
    if (static_cast<int64_t>(v.data.size()) != v.shape.numel())
        throw ShapeError("write_volume: data size does not match shape " + v.shape.str());
    nlohmann::json m = meta.is_null() ? nlohmann::json::object() : meta;
    for (auto it = v.meta.begin(); it != v.meta.end(); ++it)
        if (!m.contains(it.key())) m[it.key()] = it.value();
    const nlohmann::json hdr = {
        {"shape", {v.shape.d, v.shape.h, v.shape.w}}, {"dtype", "f32"},   {"order", "C"},
        {"endianness", "little"},                     {"kind", kind},     {"meta", m}};
    atomic_write_file(base + ".bin", v.data.data(), v.data.size() * sizeof(float));
    atomic_write_text(base + ".json", hdr.dump(2) + "\n");
}

Volume read_volume(const std::string& base_in) {
    const std::string base = volume_base(base_in);
    const VolumeHeader hdr = read_volume_header(base);
    if (hdr.dtype != "f32")
        throw FormatError("read_volume: " + base + ".bin holds " + hdr.dtype +
                          ", expected f32 (use read_atlas for label fields)");
    const auto bytes = read_payload(base, hdr);
    Volume v(hdr.shape);
    v.meta = hdr.meta;
    std::memcpy(v.data.data(), bytes.data(), bytes.size());
    return v;
}

void write_atlas(const LabelAtlas& atlas, const std::string& base_in) {
    const std::string base = volume_base(base_in);
    atlas.validate();
    nlohmann::json names = nlohmann::json::object();
    for (const auto& [label, name] : atlas.names) names[std::to_string(label)] = name;
    const nlohmann::json hdr = {{"shape", {atlas.shape.d, atlas.shape.h, atlas.shape.w}},
                                {"dtype", "u16"},
                                {"order", "C"},
                                {"endianness", "little"},
                                {"kind", "atlas"},
                                {"meta", {{"region_names", names}}}};
    atomic_write_file(base + ".bin", atlas.labels.data(), atlas.labels.size() * sizeof(uint16_t));
    atomic_write_text(base + ".json", hdr.dump(2) + "\n");
}

LabelAtlas read_atlas(const std::string& base_in) {
    const std::string base = volume_base(base_in);
    const VolumeHeader hdr = read_volume_header(base);
    if (hdr.kind != "atlas")
        throw FormatError("read_atlas: " + base + ".json has kind \"" + hdr.kind + "\"");
    const auto bytes = read_payload(base, hdr);
    LabelAtlas atlas(hdr.shape);
    std::memcpy(atlas.labels.data(), bytes.data(), bytes.size());
    if (!hdr.meta.contains("region_names"))
        throw FormatError("missing field \"meta.region_names\" in " + base + ".json");
    for (auto it = hdr.meta.at("region_names").begin(); it != hdr.meta.at("region_names").end(); ++it)
        atlas.names[static_cast<uint16_t>(std::stoul(it.key()))] = it.value().get<std::string>();
    atlas.validate();
    return atlas;
}

// ---- dataset manifest ----

std::string DatasetManifest::resolve(const std::string& rel) const {
    if (rel.empty()) return rel;
    if (fs::path(rel).is_absolute() || base_dir.empty()) return rel;
    return join_path(base_dir, rel);
}

const SampleInfo& DatasetManifest::find_sample(const std::string& id) const {
    for (const auto& s : samples)
        if (s.id == id) return s;
    throw ValueError("sample id not in manifest: " + id);
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : m.samples) {
        nlohmann::json js = {{"id", s.id},
                             {"subject", s.subject},
                             {"label", s.label},
                             {"volume", s.volume_path}};
        js["lesion_mask"] = s.lesion_mask_path.empty() ? nlohmann::json() : nlohmann::json(s.lesion_mask_path);
        samples.push_back(std::move(js));
    }
    const nlohmann::json j = {{"format_version", m.format_version},
                              {"kind", "dataset_manifest"},
                              {"atlas", m.atlas_path},
                              {"brain_mask", m.brain_mask_path},
                              {"generator_config", m.generator_config},
                              {"samples", samples}};
    write_json_file(path, j);
}

DatasetManifest read_manifest(const std::string& path) {
    const nlohmann::json j = parse_json_file(path);
    DatasetManifest m;
    m.base_dir = parent_dir(path);
    const auto version = require_field(j, "format_version", path);
    if (!version.is_number_integer() || version.get<int>() != 1)
        throw FormatError("unsupported manifest format_version in " + path);
    m.format_version = version.get<int>();
    m.atlas_path = require_field(j, "atlas", path).get<std::string>();
    m.brain_mask_path = require_field(j, "brain_mask", path).get<std::string>();
    m.generator_config = j.contains("generator_config") ? j.at("generator_config")
                                                        : nlohmann::json::object();
    std::set<std::string> ids;
    std::map<std::string, int> subject_class;
    for (const auto& js : require_field(j, "samples", path)) {
        SampleInfo s;
        s.id = require_field(js, "id", path).get<std::string>();
        s.subject = require_field(js, "subject", path).get<std::string>();
        s.label = require_field(js, "label", path).get<int>();
        s.volume_path = require_field(js, "volume", path).get<std::string>();
        if (js.contains("lesion_mask") && !js.at("lesion_mask").is_null())
            s.lesion_mask_path = js.at("lesion_mask").get<std::string>();
        if (s.label != 0 && s.label != 1)
            throw FormatError("sample " + s.id + " has label outside {0,1} in " + path);
        if (!ids.insert(s.id).second)
            throw FormatError("duplicate sample id \"" + s.id + "\" in " + path);
        auto [it, fresh] = subject_class.emplace(s.subject, s.label);
        if (!fresh && it->second != s.label)
            throw FormatError("subject \"" + s.subject + "\" appears with two classes in " + path);
        m.samples.push_back(std::move(s));
    }
    auto check_pair = [&](const std::string& rel, const std::string& what) {
        const std::string base = volume_base(m.resolve(rel));
        if (!file_exists(base + ".json") || !file_exists(base + ".bin"))
            throw IoError("manifest " + path + ": missing " + what + " files at " + base + ".{json,bin}");
    };
    check_pair(m.atlas_path, "atlas");
    check_pair(m.brain_mask_path, "brain mask");
    for (const auto& s : m.samples) {
        check_pair(s.volume_path, "volume for sample " + s.id);
        if (!s.lesion_mask_path.empty()) check_pair(s.lesion_mask_path, "lesion mask for sample " + s.id);
    }
    return m;
}

void write_pgm(const std::string& path, int64_t width, int64_t height,
               const std::vector<uint8_t>& pixels) {
    if (static_cast<int64_t>(pixels.size()) != width * height)
        throw ShapeError("write_pgm: pixel count does not match dimensions");
    std::string head = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<char> bytes(head.begin(), head.end());
    bytes.insert(bytes.end(), pixels.begin(), pixels.end());
    atomic_write_file(path, bytes.data(), bytes.size());
}

}  // namespace voxrel
