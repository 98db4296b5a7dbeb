#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "voxrel/io.hpp"
#include "voxrel/rng.hpp"
#include "voxrel/volume.hpp"

namespace voxrel {

// Synthetic dataset: an ellipsoidal "brain" with a Voronoi region atlas,
// per-subject low-frequency intensity variation, per-scan noise, and a
// class-1 intensity reduction inside the configured lesion regions.
struct PhantomConfig {
    Shape3 shape{32, 32, 32};
    int64_t n_subjects_per_class = 20;
    int64_t min_scans = 1;
    int64_t max_scans = 3;
    int64_t n_regions = 16;
    std::vector<int> lesion_regions{3};
    double effect_size = 1.0;
    double noise_sigma = 0.2;
    double subject_variability_sigma = 0.1;
    int64_t blur_passes = 0;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static PhantomConfig from_json(const nlohmann::json& j);
};

// 1 inside the brain ellipsoid, 0 outside.
Volume generate_brain_mask(const PhantomConfig& cfg);

// Deterministic Voronoi partition of the ellipsoid from seeded sites;
// nearest site wins, distance ties go to the earliest-drawn site.
LabelAtlas generate_atlas(const PhantomConfig& cfg);

// Writes volumes, the shared class-1 lesion mask, atlas, brain mask, and
// the manifest (last) into out_dir. Fully determined by cfg.seed.
DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::string& out_dir);

struct LocalizationScore {
    double score = 0.0;      // fraction of total |relevance| inside the mask
    bool degenerate = false; // all-zero heatmap
};

template <typename T>
LocalizationScore localization_score(const VolumeT<T>& heatmap, const Volume& lesion_mask) {
    require_same_shape(heatmap.shape, lesion_mask.shape, "localization_score");
    double total = 0.0, inside = 0.0;
    int64_t mask_voxels = 0;
    for (size_t i = 0; i < heatmap.data.size(); ++i) {
        const float m = lesion_mask.data[i];
        if (m != 0.0f && m != 1.0f)
            throw ValueError("localization_score: lesion mask must be binary");
        const double a = std::abs(static_cast<double>(heatmap.data[i]));
        total += a;
        if (m == 1.0f) {
            inside += a;
            ++mask_voxels;
        }
    }
    if (mask_voxels == 0) throw ValueError("localization_score: empty lesion mask");
    if (total == 0.0) return {0.0, true};
    return {inside / total, false};
}

// Relative lesion volume: the expected localization score of a uniform
// heatmap over the brain.
double chance_level(const Volume& lesion_mask, const Volume& brain_mask);

}  // namespace voxrel
