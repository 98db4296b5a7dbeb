#include "voxrel/phantom.hpp"

#include <algorithm>
#include <array>
#include <climits>
#include <cstdio>
#include <limits>
#include <set>

namespace voxrel {

void PhantomConfig::validate() const {
    if (shape.d < 4 || shape.h < 4 || shape.w < 4)
        throw ValueError("phantom config: shape extents must be >= 4");
    if (n_subjects_per_class < 1)
        throw ValueError("phantom config: n_subjects_per_class must be >= 1");
    if (min_scans < 1 || max_scans < min_scans)
        throw ValueError("phantom config: need 1 <= min_scans <= max_scans");
    if (n_regions < 1 || n_regions > 65535)
        throw ValueError("phantom config: n_regions must be in [1, 65535]");
    for (int r : lesion_regions)
        if (r < 1 || r > n_regions)
            throw ValueError("phantom config: lesion region " + std::to_string(r) +
                             " outside [1, " + std::to_string(n_regions) + "]");
    if (effect_size < 0.0) throw ValueError("phantom config: effect_size must be >= 0");
    if (noise_sigma <= 0.0) throw ValueError("phantom config: noise_sigma must be > 0");
    if (subject_variability_sigma < 0.0)
        throw ValueError("phantom config: subject_variability_sigma must be >= 0");
    if (blur_passes < 0) throw ValueError("phantom config: blur_passes must be >= 0");
}

nlohmann::json PhantomConfig::to_json() const {
    return {{"shape", {shape.d, shape.h, shape.w}},
            {"n_subjects_per_class", n_subjects_per_class},
            {"min_scans", min_scans},
            {"max_scans", max_scans},
            {"n_regions", n_regions},
            {"lesion_regions", lesion_regions},
            {"effect_size", effect_size},
            {"noise_sigma", noise_sigma},
            {"subject_variability_sigma", subject_variability_sigma},
            {"blur_passes", blur_passes},
            {"seed", seed}};
}

PhantomConfig PhantomConfig::from_json(const nlohmann::json& j) {
    PhantomConfig c;
    if (j.contains("shape")) {
        const auto& s = j.at("shape");
        if (!s.is_array() || s.size() != 3)
            throw FormatError("phantom config: shape must be [D,H,W]");
        c.shape = {s[0].get<int64_t>(), s[1].get<int64_t>(), s[2].get<int64_t>()};
    }
    if (j.contains("n_subjects_per_class"))
        c.n_subjects_per_class = j.at("n_subjects_per_class").get<int64_t>();
    if (j.contains("min_scans")) c.min_scans = j.at("min_scans").get<int64_t>();
    if (j.contains("max_scans")) c.max_scans = j.at("max_scans").get<int64_t>();
    if (j.contains("n_regions")) c.n_regions = j.at("n_regions").get<int64_t>();
    if (j.contains("lesion_regions"))
        c.lesion_regions = j.at("lesion_regions").get<std::vector<int>>();
    if (j.contains("effect_size")) c.effect_size = j.at("effect_size").get<double>();
    if (j.contains("noise_sigma")) c.noise_sigma = j.at("noise_sigma").get<double>();
    if (j.contains("subject_variability_sigma"))
        c.subject_variability_sigma = j.at("subject_variability_sigma").get<double>();
    if (j.contains("blur_passes")) c.blur_passes = j.at("blur_passes").get<int64_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
}

namespace {

struct Ellipsoid {
    double cz, cy, cx, az, ay, ax;
};

Ellipsoid brain_ellipsoid(const Shape3& s) {
    return {(static_cast<double>(s.d) - 1.0) / 2.0,
            (static_cast<double>(s.h) - 1.0) / 2.0,
            (static_cast<double>(s.w) - 1.0) / 2.0,
            0.47 * static_cast<double>(s.d),
            0.47 * static_cast<double>(s.h),
            0.47 * static_cast<double>(s.w)};
}

// Squared normalized radius; <= 1 is inside the ellipsoid.
double radius2(const Ellipsoid& e, int64_t z, int64_t y, int64_t x) {
    const double dz = (static_cast<double>(z) - e.cz) / e.az;
    const double dy = (static_cast<double>(y) - e.cy) / e.ay;
    const double dx = (static_cast<double>(x) - e.cx) / e.ax;
    return dz * dz + dy * dy + dx * dx;
}

std::string region_name(int64_t label, int64_t n_regions) {
    int width = 2;
    for (int64_t v = 100; v <= n_regions; v *= 10) ++width;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "Region%0*d", width, static_cast<int>(label));
    return buf;
}

// Zero-padded separable 3-tap blur [0.25, 0.5, 0.25] along each axis.
void blur_once(std::vector<double>& field, const Shape3& s) {
    std::vector<double> tmp(field.size());
    auto pass = [&](int64_t stride, int64_t extent, int64_t outer_a, int64_t stride_a,
                    int64_t outer_b, int64_t stride_b) {
        for (int64_t a = 0; a < outer_a; ++a)
            for (int64_t b = 0; b < outer_b; ++b) {
                const int64_t base = a * stride_a + b * stride_b;
                for (int64_t i = 0; i < extent; ++i) {
                    const double prev = i > 0 ? field[base + (i - 1) * stride] : 0.0;
                    const double next = i + 1 < extent ? field[base + (i + 1) * stride] : 0.0;
                    tmp[base + i * stride] = 0.25 * prev + 0.5 * field[base + i * stride] +
                                             0.25 * next;
                }
            }
        field.swap(tmp);
    };
    pass(s.h * s.w, s.d, s.h, s.w, s.w, 1);  // along z
    pass(s.w, s.h, s.d, s.h * s.w, s.w, 1);  // along y
    pass(1, s.w, s.d, s.h * s.w, s.h, s.w);  // along x
}

// Trilinear upsampling of a g^3 node grid to the full volume.
double sample_coarse(const std::vector<double>& grid, int64_t g, const Shape3& s, int64_t z,
                     int64_t y, int64_t x) {
    auto axis = [&](int64_t v, int64_t extent, int64_t& i0, double& f) {
        const double u = extent > 1 ? static_cast<double>(v) * static_cast<double>(g - 1) /
                                          static_cast<double>(extent - 1)
                                    : 0.0;
        i0 = std::min<int64_t>(g - 2, static_cast<int64_t>(u));
        f = u - static_cast<double>(i0);
    };
    int64_t iz, iy, ix;
    double fz, fy, fx;
    axis(z, s.d, iz, fz);
    axis(y, s.h, iy, fy);
    axis(x, s.w, ix, fx);
    auto at = [&](int64_t a, int64_t b, int64_t c) { return grid[(a * g + b) * g + c]; };
    double v = 0.0;
    for (int64_t dz = 0; dz < 2; ++dz)
        for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx = 0; dx < 2; ++dx) {
                const double wz = dz ? fz : 1.0 - fz;
                const double wy = dy ? fy : 1.0 - fy;
                const double wx = dx ? fx : 1.0 - fx;
                v += wz * wy * wx * at(iz + dz, iy + dy, ix + dx);
            }
    return v;
}

constexpr int64_t kCoarseGrid = 5;

}  // namespace

Volume generate_brain_mask(const PhantomConfig& cfg) {
    cfg.validate();
    const Ellipsoid e = brain_ellipsoid(cfg.shape);
    Volume mask(cfg.shape);
    for (int64_t z = 0; z < cfg.shape.d; ++z)
        for (int64_t y = 0; y < cfg.shape.h; ++y)
            for (int64_t x = 0; x < cfg.shape.w; ++x)
                mask.at(z, y, x) = radius2(e, z, y, x) <= 1.0 ? 1.0f : 0.0f;
    return mask;
}

LabelAtlas generate_atlas(const PhantomConfig& cfg) {
    cfg.validate();
    const Ellipsoid e = brain_ellipsoid(cfg.shape);
    const Shape3 s = cfg.shape;

    int64_t foreground = 0;
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x)
                if (radius2(e, z, y, x) <= 1.0) ++foreground;
    if (cfg.n_regions > foreground)
        throw ValueError("generate_atlas: " + std::to_string(cfg.n_regions) +
                         " regions exceed the " + std::to_string(foreground) +
                         " foreground voxels");

    // The atlas is a template shared by every subject, the way a standard
    // parcellation is, so its sites derive from the geometry alone and two
    // datasets with the same shape and region count get the same atlas.
    Rng rng(mix_seed(0x9e3779b97f4a7c15ULL ^ static_cast<uint64_t>(cfg.n_regions),
                     static_cast<uint64_t>(s.d * 1000003 + s.h * 1009 + s.w)));
    std::vector<std::array<double, 3>> sites;
    std::set<std::array<int64_t, 3>> seen;
    while (static_cast<int64_t>(sites.size()) < cfg.n_regions) {
        const std::array<int64_t, 3> p = {static_cast<int64_t>(rng.uniform_int(s.d)),
                                          static_cast<int64_t>(rng.uniform_int(s.h)),
                                          static_cast<int64_t>(rng.uniform_int(s.w))};
        if (radius2(e, p[0], p[1], p[2]) > 1.0) continue;
        if (!seen.insert(p).second) continue;
        sites.push_back({static_cast<double>(p[0]), static_cast<double>(p[1]),
                         static_cast<double>(p[2])});
    }

    auto nearest = [&](int64_t z, int64_t y, int64_t x) {
        size_t best = 0;
        double best_d = std::numeric_limits<double>::max();
        for (size_t i = 0; i < sites.size(); ++i) {
            const double dz = static_cast<double>(z) - sites[i][0];
            const double dy = static_cast<double>(y) - sites[i][1];
            const double dx = static_cast<double>(x) - sites[i][2];
            const double d = dz * dz + dy * dy + dx * dx;
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    };

    // A few centroidal relaxation passes even out the cell volumes, keeping
    // region sizes comparable the way anatomical parcellations are.
    for (int pass = 0; pass < 4; ++pass) {
        std::vector<std::array<double, 3>> sum(sites.size(), {0.0, 0.0, 0.0});
        std::vector<int64_t> count(sites.size(), 0);
        for (int64_t z = 0; z < s.d; ++z)
            for (int64_t y = 0; y < s.h; ++y)
                for (int64_t x = 0; x < s.w; ++x) {
                    if (radius2(e, z, y, x) > 1.0) continue;
                    const size_t i = nearest(z, y, x);
                    sum[i][0] += static_cast<double>(z);
                    sum[i][1] += static_cast<double>(y);
                    sum[i][2] += static_cast<double>(x);
                    ++count[i];
                }
        for (size_t i = 0; i < sites.size(); ++i)
            if (count[i] > 0)
                sites[i] = {sum[i][0] / static_cast<double>(count[i]),
                            sum[i][1] / static_cast<double>(count[i]),
                            sum[i][2] / static_cast<double>(count[i])};
    }

    LabelAtlas atlas(s);
    for (int64_t r = 1; r <= cfg.n_regions; ++r)
        atlas.names[static_cast<uint16_t>(r)] = region_name(r, cfg.n_regions);
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) {
                if (radius2(e, z, y, x) > 1.0) continue;
                atlas.labels[static_cast<size_t>(s.index(z, y, x))] =
                    static_cast<uint16_t>(nearest(z, y, x) + 1);
            }
    atlas.validate();
    return atlas;
}

DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    ensure_dir(out_dir);
    const Shape3 s = cfg.shape;
    const Ellipsoid e = brain_ellipsoid(s);
    const size_t n = static_cast<size_t>(s.numel());

    const LabelAtlas atlas = generate_atlas(cfg);
    const Volume brain_mask = generate_brain_mask(cfg);
    Volume lesion_mask(s);
    std::set<int> lesions(cfg.lesion_regions.begin(), cfg.lesion_regions.end());
    for (size_t i = 0; i < n; ++i)
        if (atlas.labels[i] != 0 && lesions.count(atlas.labels[i]))
            lesion_mask.data[i] = 1.0f;

    write_atlas(atlas, join_path(out_dir, "atlas"));
    write_volume(brain_mask, join_path(out_dir, "brain_mask"), "mask");
    write_volume(lesion_mask, join_path(out_dir, "lesion_mask"), "mask");

    // 1 at the center tapering to 0.6 at the ellipsoid surface.
    std::vector<double> profile(n, 0.0);
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) {
                const double r2 = radius2(e, z, y, x);
                if (r2 <= 1.0)
                    profile[static_cast<size_t>(s.index(z, y, x))] = 1.0 - 0.4 * r2;
            }

    DatasetManifest manifest;
    manifest.atlas_path = "atlas";
    manifest.brain_mask_path = "brain_mask";
    manifest.generator_config = cfg.to_json();

    const int64_t g = kCoarseGrid;
    for (int cls = 0; cls < 2; ++cls) {
        for (int64_t si = 0; si < cfg.n_subjects_per_class; ++si) {
            const int64_t subject_index = cls * cfg.n_subjects_per_class + si;
            char subj[32];
            std::snprintf(subj, sizeof(subj), "%s%02d", cls ? "AD" : "NC",
                          static_cast<int>(si + 1));
            const uint64_t subject_seed = mix_seed(cfg.seed, 1000 + subject_index);
            Rng subject_rng(subject_seed);

            const int64_t n_scans =
                cfg.min_scans +
                static_cast<int64_t>(subject_rng.uniform_int(cfg.max_scans - cfg.min_scans + 1));
            std::vector<double> coarse(static_cast<size_t>(g * g * g));
            for (auto& v : coarse) v = subject_rng.normal(0.0, cfg.subject_variability_sigma);

            std::vector<double> base(n, 0.0);
            for (int64_t z = 0; z < s.d; ++z)
                for (int64_t y = 0; y < s.h; ++y)
                    for (int64_t x = 0; x < s.w; ++x) {
                        const size_t i = static_cast<size_t>(s.index(z, y, x));
                        base[i] = profile[i] + sample_coarse(coarse, g, s, z, y, x);
                    }

            for (int64_t scan = 0; scan < n_scans; ++scan) {
                Rng scan_rng(mix_seed(subject_seed, 7 + scan));
                // Raw voxel noise, then the blur passes that give scans their
                // smoothness.  The blur runs before the lesion is stamped so
                // the class signal keeps its sharp boundary and stays exactly
                // co-located with the lesion mask.
                std::vector<double> field(n);
                for (size_t i = 0; i < n; ++i)
                    field[i] = base[i] + scan_rng.normal(0.0, cfg.noise_sigma);
                for (int64_t p = 0; p < cfg.blur_passes; ++p) blur_once(field, s);

                Volume vol(s);
                // Volumes are masked to the brain the way skull-stripped
                // scans are: outside the ellipsoid every voxel is exactly 0.
                for (size_t i = 0; i < n; ++i) {
                    if (brain_mask.data[i] != 1.0f) continue;
                    double v = field[i];
                    if (cls == 1 && lesion_mask.data[i] == 1.0f) v -= cfg.effect_size;
                    vol.data[i] = static_cast<float>(v);
                }
                const std::string id = std::string(subj) + "_s" + std::to_string(scan + 1);
                vol.meta = {{"subject", subj}, {"label", cls}, {"scan", scan + 1}};
                write_volume(vol, join_path(out_dir, id), "image");

                SampleInfo info;
                info.id = id;
                info.subject = subj;
                info.label = cls;
                info.volume_path = id;
                if (cls == 1) info.lesion_mask_path = "lesion_mask";
                manifest.samples.push_back(std::move(info));
            }
        }
    }

    write_manifest(manifest, join_path(out_dir, "manifest.json"));
    return read_manifest(join_path(out_dir, "manifest.json"));
}

double chance_level(const Volume& lesion_mask, const Volume& brain_mask) {
    require_same_shape(lesion_mask.shape, brain_mask.shape, "chance_level");
    int64_t lesion = 0, brain = 0;
    for (size_t i = 0; i < lesion_mask.data.size(); ++i) {
        if (lesion_mask.data[i] == 1.0f) ++lesion;
        if (brain_mask.data[i] == 1.0f) ++brain;
    }
    if (brain == 0) throw ValueError("chance_level: empty brain mask");
    return static_cast<double>(lesion) / static_cast<double>(brain);
}

}  // namespace voxrel
