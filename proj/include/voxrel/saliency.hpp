#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "voxrel/model.hpp"

namespace voxrel {

enum class SaliencyMethod { Sensitivity, GuidedBackprop, Occlusion, AreaOcclusion };

inline std::string to_string(SaliencyMethod m) {
    switch (m) {
        case SaliencyMethod::Sensitivity: return "sensitivity";
        case SaliencyMethod::GuidedBackprop: return "guided_backprop";
        case SaliencyMethod::Occlusion: return "occlusion";
        case SaliencyMethod::AreaOcclusion: return "area_occlusion";
    }
    throw ValueError("unknown saliency method");
}

inline SaliencyMethod saliency_method_from_string(const std::string& s) {
    if (s == "sensitivity") return SaliencyMethod::Sensitivity;
    if (s == "guided_backprop") return SaliencyMethod::GuidedBackprop;
    if (s == "occlusion") return SaliencyMethod::Occlusion;
    if (s == "area_occlusion") return SaliencyMethod::AreaOcclusion;
    throw ValueError("unknown saliency method \"" + s +
                     "\" (expected sensitivity, guided_backprop, occlusion, or area_occlusion)");
}

enum class HeatmapNorm { Raw, UnitL1 };

inline std::string to_string(HeatmapNorm n) {
    return n == HeatmapNorm::Raw ? "raw" : "unit_l1";
}

inline HeatmapNorm heatmap_norm_from_string(const std::string& s) {
    if (s == "raw") return HeatmapNorm::Raw;
    if (s == "unit_l1") return HeatmapNorm::UnitL1;
    throw ValueError("unknown heatmap normalization \"" + s + "\" (expected raw or unit_l1)");
}

// Voxelwise relevance for one (model, input, target class) decision.
// Gradient methods produce nonnegative values; occlusion methods are signed.
template <typename T>
struct HeatmapT {
    VolumeT<T> values;
    SaliencyMethod method = SaliencyMethod::Sensitivity;
    int target_class = 0;
    HeatmapNorm normalization = HeatmapNorm::Raw;
};

using Heatmap = HeatmapT<float>;

namespace detail {

template <typename T>
Tensor<T> volume_to_input(const VolumeT<T>& v) {
    Tensor<T> t = Tensor<T>::zeros({1, 1, v.shape.d, v.shape.h, v.shape.w});
    std::copy(v.data.begin(), v.data.end(), t.data());
    return t;
}

template <typename T>
void check_target(const Model<T>& model, int target_class) {
    if (target_class < 0 || target_class >= model.config.n_classes)
        throw ValueError("target class " + std::to_string(target_class) + " out of range [0," +
                         std::to_string(model.config.n_classes) + ")");
}

// Eval-mode probability (or logit) of the target class for one volume.
template <typename T>
double forward_score(Model<T>& model, const VolumeT<T>& v, int target_class, bool on_logit) {
    Tensor<T> batch = volume_to_input(v);
    auto fwd = model.forward(batch, Mode::Eval);
    return static_cast<double>(on_logit ? fwd.logits[target_class] : fwd.probs[target_class]);
}

template <typename T>
HeatmapT<T> gradient_heatmap(Model<T>& model, const VolumeT<T>& volume, int target_class,
                             bool guided, bool on_logit) {
    check_target(model, target_class);
    require_same_shape(volume.shape, model.config.input_shape, "gradient heatmap");
    Tensor<T> input = volume_to_input(volume);
    input.enable_grad();
    ForwardOptions opts;
    opts.record = true;
    auto fwd = model.forward(input, Mode::Eval, opts);
    fwd.tape->relu_mode = guided ? Tape<T>::ReluMode::Guided : Tape<T>::ReluMode::Standard;
    Tensor<T> target = on_logit ? fwd.logits : fwd.probs;
    fwd.tape->backward_component(target, target_class);

    HeatmapT<T> h;
    h.values = VolumeT<T>(volume.shape);
    h.method = guided ? SaliencyMethod::GuidedBackprop : SaliencyMethod::Sensitivity;
    h.target_class = target_class;
    const T* g = input.grad();
    for (size_t i = 0; i < h.values.data.size(); ++i)
        h.values.data[i] = g[i] < T(0) ? -g[i] : g[i];
    return h;
}

}  // namespace detail

// |d p(target) / d input| with the standard backward pass.
template <typename T>
HeatmapT<T> sensitivity(Model<T>& model, const VolumeT<T>& volume, int target_class,
                        bool on_logit = false) {
    return detail::gradient_heatmap(model, volume, target_class, false, on_logit);
}

// Same gradient, but negative upstream gradients are zeroed at every ReLU.
template <typename T>
HeatmapT<T> guided_backprop(Model<T>& model, const VolumeT<T>& volume, int target_class,
                            bool on_logit = false) {
    return detail::gradient_heatmap(model, volume, target_class, true, on_logit);
}

struct OcclusionParams {
    int64_t patch_d = 40, patch_h = 40, patch_w = 40;
    // 0 selects the default of half the patch extent (at least 1).
    int64_t stride_d = 0, stride_h = 0, stride_w = 0;
    double fill = 0.0;
};

namespace detail {

// Stride-grid start positions covering [0, dim); the last position is
// clamped flush to the far edge so every voxel is covered.
inline std::vector<int64_t> occlusion_positions(int64_t dim, int64_t patch, int64_t stride) {
    std::vector<int64_t> pos;
    for (int64_t p = 0; p + patch <= dim; p += stride) pos.push_back(p);
    if (pos.empty() || pos.back() + patch < dim) pos.push_back(dim - patch);
    return pos;
}

}  // namespace detail

// Slides a fill-valued patch over the volume; each voxel receives the mean
// of (p0 - p_occluded) over every patch position covering it. `prep`, when
// given, is applied to the unoccluded volume and to every occluded variant
// before the forward pass (occlusion in pre-normalization space).
template <typename T>
HeatmapT<T> occlusion(Model<T>& model, const VolumeT<T>& volume, int target_class,
                      const OcclusionParams& params = {},
                      const std::function<VolumeT<T>(const VolumeT<T>&)>* prep = nullptr) {
    detail::check_target(model, target_class);
    require_same_shape(volume.shape, model.config.input_shape, "occlusion");
    const Shape3 s = volume.shape;
    const int64_t pd = params.patch_d, ph = params.patch_h, pw = params.patch_w;
    if (pd < 1 || ph < 1 || pw < 1) throw ValueError("occlusion: patch extents must be >= 1");
    if (pd > s.d || ph > s.h || pw > s.w)
        throw ValueError("occlusion: patch " + std::to_string(pd) + "x" + std::to_string(ph) + "x" +
                         std::to_string(pw) + " larger than volume " + s.str());
    const int64_t sd = params.stride_d > 0 ? params.stride_d : std::max<int64_t>(1, pd / 2);
    const int64_t sh = params.stride_h > 0 ? params.stride_h : std::max<int64_t>(1, ph / 2);
    const int64_t sw = params.stride_w > 0 ? params.stride_w : std::max<int64_t>(1, pw / 2);

    auto run = [&](const VolumeT<T>& v) {
        return prep ? detail::forward_score(model, (*prep)(v), target_class, false)
                    : detail::forward_score(model, v, target_class, false);
    };
    const double p0 = run(volume);

    const auto zs = detail::occlusion_positions(s.d, pd, sd);
    const auto ys = detail::occlusion_positions(s.h, ph, sh);
    const auto xs = detail::occlusion_positions(s.w, pw, sw);
    const int64_t n_pos = static_cast<int64_t>(zs.size() * ys.size() * xs.size());

    std::vector<double> scores(static_cast<size_t>(n_pos));
    parallel_for(n_pos, [&](int64_t pi) {
        const int64_t xi = pi % static_cast<int64_t>(xs.size());
        const int64_t yi = (pi / static_cast<int64_t>(xs.size())) % static_cast<int64_t>(ys.size());
        const int64_t zi = pi / static_cast<int64_t>(xs.size() * ys.size());
        VolumeT<T> occluded = volume;
        for (int64_t z = zs[zi]; z < zs[zi] + pd; ++z)
            for (int64_t y = ys[yi]; y < ys[yi] + ph; ++y) {
                T* row = occluded.data.data() + s.index(z, y, xs[xi]);
                for (int64_t x = 0; x < pw; ++x) row[x] = static_cast<T>(params.fill);
            }
        scores[static_cast<size_t>(pi)] = p0 - run(occluded);
    });

    // Coverage-mean accumulation, in a fixed position order.
    std::vector<double> acc(static_cast<size_t>(s.numel()), 0.0);
    std::vector<int32_t> cnt(static_cast<size_t>(s.numel()), 0);
    int64_t pi = 0;
    for (int64_t z0 : zs)
        for (int64_t y0 : ys)
            for (int64_t x0 : xs) {
                const double sc = scores[static_cast<size_t>(pi++)];
                for (int64_t z = z0; z < z0 + pd; ++z)
                    for (int64_t y = y0; y < y0 + ph; ++y) {
                        const int64_t base = s.index(z, y, x0);
                        for (int64_t x = 0; x < pw; ++x) {
                            acc[static_cast<size_t>(base + x)] += sc;
                            cnt[static_cast<size_t>(base + x)] += 1;
                        }
                    }
            }

    HeatmapT<T> h;
    h.values = VolumeT<T>(s);
    h.method = SaliencyMethod::Occlusion;
    h.target_class = target_class;
    for (size_t i = 0; i < h.values.data.size(); ++i)
        h.values.data[i] = static_cast<T>(acc[i] / static_cast<double>(cnt[i]));
    return h;
}

template <typename T>
struct AreaOcclusionResult {
    std::map<uint16_t, double> per_region;
    HeatmapT<T> heatmap;
    int64_t n_forwards = 0;
    std::vector<std::string> warnings;
};

// Occludes one whole atlas region at a time (region count + 1 forward
// passes); the heatmap paints each region's score uniformly over it.
template <typename T>
AreaOcclusionResult<T> area_occlusion(Model<T>& model, const VolumeT<T>& volume,
                                      const LabelAtlas& atlas, int target_class,
                                      double fill = 0.0,
                                      const std::function<VolumeT<T>(const VolumeT<T>&)>* prep =
                                          nullptr) {
    detail::check_target(model, target_class);
    require_same_shape(volume.shape, atlas.shape, "area_occlusion");
    require_same_shape(volume.shape, model.config.input_shape, "area_occlusion");
    atlas.validate();

    auto run = [&](const VolumeT<T>& v) {
        return prep ? detail::forward_score(model, (*prep)(v), target_class, false)
                    : detail::forward_score(model, v, target_class, false);
    };

    AreaOcclusionResult<T> res;
    const double p0 = run(volume);
    res.n_forwards = 1;
    for (const auto& [label, name] : atlas.names) {
        VolumeT<T> occluded = volume;
        int64_t n_voxels = 0;
        for (size_t i = 0; i < atlas.labels.size(); ++i)
            if (atlas.labels[i] == label) {
                occluded.data[i] = static_cast<T>(fill);
                ++n_voxels;
            }
        const double score = p0 - run(occluded);
        res.n_forwards += 1;
        res.per_region[label] = score;
        if (n_voxels == 0)
            res.warnings.push_back("region \"" + name + "\" (label " + std::to_string(label) +
                                   ") covers no voxels");
    }

    res.heatmap.values = VolumeT<T>(volume.shape);
    res.heatmap.method = SaliencyMethod::AreaOcclusion;
    res.heatmap.target_class = target_class;
    for (size_t i = 0; i < atlas.labels.size(); ++i)
        if (atlas.labels[i] != 0)
            res.heatmap.values.data[i] = static_cast<T>(res.per_region.at(atlas.labels[i]));
    return res;
}

// Rescales to unit L1 mass. An all-zero map is left untouched (and keeps
// its normalization tag); returns whether rescaling happened.
template <typename T>
bool normalize_unit_l1(HeatmapT<T>& h) {
    double sum = 0.0;
    for (const T v : h.values.data) sum += std::abs(static_cast<double>(v));
    if (sum == 0.0) return false;
    for (T& v : h.values.data) v = static_cast<T>(static_cast<double>(v) / sum);
    h.normalization = HeatmapNorm::UnitL1;
    return true;
}

// Voxelwise arithmetic mean; with normalize, each input is first rescaled
// to unit L1 (zero maps contribute zeros).
template <typename T>
HeatmapT<T> average_heatmaps(const std::vector<HeatmapT<T>>& maps, bool normalize) {
    if (maps.empty()) throw ValueError("average_heatmaps: empty list");
    const Shape3 shape = maps[0].values.shape;
    const SaliencyMethod method = maps[0].method;
    std::vector<double> acc(static_cast<size_t>(shape.numel()), 0.0);
    for (const auto& m : maps) {
        if (m.method != method)
            throw ValueError("average_heatmaps: mixed methods (" + to_string(method) + " vs " +
                             to_string(m.method) + ")");
        if (!normalize && m.normalization != maps[0].normalization)
            throw ValueError("average_heatmaps: mixed normalization modes (" +
                             to_string(maps[0].normalization) + " vs " +
                             to_string(m.normalization) + ")");
        require_same_shape(shape, m.values.shape, "average_heatmaps");
        double scale = 1.0;
        if (normalize) {
            double sum = 0.0;
            for (const T v : m.values.data) sum += std::abs(static_cast<double>(v));
            scale = sum > 0.0 ? 1.0 / sum : 0.0;
        }
        for (size_t i = 0; i < acc.size(); ++i)
            acc[i] += scale * static_cast<double>(m.values.data[i]);
    }
    HeatmapT<T> out;
    out.values = VolumeT<T>(shape);
    out.method = method;
    out.target_class = maps[0].target_class;
    out.normalization = normalize ? HeatmapNorm::UnitL1 : maps[0].normalization;
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (size_t i = 0; i < acc.size(); ++i)
        out.values.data[i] = static_cast<T>(acc[i] * inv);
    return out;
}

// ---- heatmap files ----
// Stored in the volume pair format with kind "heatmap"; the sidecar meta
// carries the method, target class, parameters, normalization mode, and a
// hash of the weights file that produced it.

inline void write_heatmap(const Heatmap& h, const std::string& base,
                          const nlohmann::json& params, uint64_t model_hash) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(model_hash));
    const nlohmann::json meta = {{"method", to_string(h.method)},
                                 {"target_class", h.target_class},
                                 {"params", params},
                                 {"normalization", to_string(h.normalization)},
                                 {"model_hash", std::string(hex)}};
    write_volume(h.values, base, "heatmap", meta);
}

inline Heatmap read_heatmap(const std::string& base) {
    const VolumeHeader hdr = read_volume_header(base);
    if (hdr.kind != "heatmap")
        throw FormatError("read_heatmap: " + volume_base(base) + ".json has kind \"" + hdr.kind +
                          "\", expected heatmap");
    Heatmap h;
    h.values = read_volume(base);
    h.method = saliency_method_from_string(h.values.meta.at("method").get<std::string>());
    h.target_class = h.values.meta.at("target_class").get<int>();
    h.normalization =
        heatmap_norm_from_string(h.values.meta.at("normalization").get<std::string>());
    return h;
}

}  // namespace voxrel
