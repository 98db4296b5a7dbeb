#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "voxrel/saliency.hpp"
#include "voxrel/volume.hpp"

namespace voxrel {

struct RegionRow {
    uint16_t label = 0;
    std::string name;
    double summed = 0.0;
    double fraction = 0.0;
};

// Per-region |relevance| sums as fractions of the whole-field sum, sorted
// descending (ties by ascending label). Background (label 0) is reported
// separately so the fractions plus background always account for the total.
struct RegionReport {
    std::vector<RegionRow> rows;
    double background_sum = 0.0;
    double background_fraction = 0.0;
    double total = 0.0;
    bool degenerate = false;  // all-zero heatmap; fractions forced to 0

    nlohmann::json to_json() const {
        nlohmann::json regions = nlohmann::json::array();
        for (const auto& r : rows)
            regions.push_back({{"label", r.label},
                               {"name", r.name},
                               {"summed_relevance", r.summed},
                               {"fraction", r.fraction}});
        return {{"regions", regions},
                {"background_sum", background_sum},
                {"background_fraction", background_fraction},
                {"total_relevance", total},
                {"degenerate", degenerate}};
    }

    // Aligned rows like "Region03    29.7 %".
    std::string to_text(size_t k) const {
        std::string out;
        size_t width = 10;
        for (const auto& r : rows) width = std::max(width, r.name.size());
        char line[256];
        const size_t n = std::min(k, rows.size());
        for (size_t i = 0; i < n; ++i) {
            std::snprintf(line, sizeof(line), "%-*s %6.1f %%\n", static_cast<int>(width),
                          rows[i].name.c_str(), rows[i].fraction * 100.0);
            out += line;
        }
        if (degenerate) out += "(all-zero heatmap; fractions degenerate)\n";
        return out;
    }
};

template <typename T>
RegionReport region_fractions(const VolumeT<T>& heatmap, const LabelAtlas& atlas) {
    require_same_shape(heatmap.shape, atlas.shape, "region_fractions");
    atlas.validate();
    std::map<uint16_t, double> sums;
    for (const auto& [label, name] : atlas.names) {
        (void)name;
        sums[label] = 0.0;
    }
    double background = 0.0, total = 0.0;
    for (size_t i = 0; i < heatmap.data.size(); ++i) {
        const double a = std::abs(static_cast<double>(heatmap.data[i]));
        total += a;
        const uint16_t l = atlas.labels[i];
        if (l == 0)
            background += a;
        else
            sums[l] += a;
    }

    RegionReport report;
    report.total = total;
    report.background_sum = background;
    report.degenerate = total == 0.0;
    report.background_fraction = report.degenerate ? 0.0 : background / total;
    for (const auto& [label, s] : sums) {
        RegionRow row;
        row.label = label;
        row.name = atlas.names.at(label);
        row.summed = s;
        row.fraction = report.degenerate ? 0.0 : s / total;
        report.rows.push_back(std::move(row));
    }
    std::sort(report.rows.begin(), report.rows.end(), [](const RegionRow& a, const RegionRow& b) {
        if (a.fraction != b.fraction) return a.fraction > b.fraction;
        return a.label < b.label;
    });
    return report;
}

inline std::vector<RegionRow> top_k_regions(const RegionReport& report, size_t k) {
    if (k < 1) throw ValueError("top_k_regions: k must be >= 1");
    const size_t n = std::min(k, report.rows.size());
    return {report.rows.begin(), report.rows.begin() + static_cast<int64_t>(n)};
}

// Euclidean distance over all voxels; both heatmaps must carry the same
// normalization mode for the number to be comparable.
template <typename T>
double heatmap_distance(const HeatmapT<T>& a, const HeatmapT<T>& b) {
    require_same_shape(a.values.shape, b.values.shape, "heatmap_distance");
    if (a.normalization != b.normalization)
        throw ValueError("heatmap_distance: normalization modes differ (" +
                         to_string(a.normalization) + " vs " + to_string(b.normalization) + ")");
    double acc = 0.0;
    for (size_t i = 0; i < a.values.data.size(); ++i) {
        const double d =
            static_cast<double>(a.values.data[i]) - static_cast<double>(b.values.data[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <typename T>
std::vector<std::vector<double>> distance_matrix(const std::vector<HeatmapT<T>>& maps) {
    const size_t n = maps.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double d = heatmap_distance(maps[i], maps[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    return m;
}

template <typename T>
VolumeT<T> apply_brain_mask(const VolumeT<T>& volume, const Volume& mask) {
    require_same_shape(volume.shape, mask.shape, "apply_brain_mask");
    VolumeT<T> out = volume;
    for (size_t i = 0; i < out.data.size(); ++i) {
        const float m = mask.data[i];
        if (m != 0.0f && m != 1.0f)
            throw ValueError("apply_brain_mask: mask must be binary (found " + std::to_string(m) +
                             ")");
        out.data[i] = static_cast<T>(static_cast<double>(out.data[i]) * m);
    }
    return out;
}

}  // namespace voxrel
