#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxrel/error.hpp"

#include <json.hpp>

namespace voxrel {

struct Shape3 {
    int64_t d = 0, h = 0, w = 0;

    int64_t numel() const { return d * h * w; }
    bool operator==(const Shape3&) const = default;

    int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * h + y) * w + x; }

    std::string str() const {
        return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }
};

// Dense 3D scalar field, row-major (w fastest). `meta` carries free-form
// provenance that file IO round-trips untouched.
template <typename T>
struct VolumeT {
    Shape3 shape;
    std::vector<T> data;
    nlohmann::json meta = nlohmann::json::object();

    VolumeT() = default;
    VolumeT(Shape3 s, T fill = T(0)) : shape(s), data(static_cast<size_t>(s.numel()), fill) {}

    T& at(int64_t z, int64_t y, int64_t x) { return data[static_cast<size_t>(shape.index(z, y, x))]; }
    T at(int64_t z, int64_t y, int64_t x) const {
        return data[static_cast<size_t>(shape.index(z, y, x))];
    }

    template <typename U>
    VolumeT<U> cast() const {
        VolumeT<U> out;
        out.shape = shape;
        out.meta = meta;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using Volume = VolumeT<float>;

// Integer region labels over a volume grid; 0 is background. Every nonzero
// label present in the field must be named.
struct LabelAtlas {
    Shape3 shape;
    std::vector<uint16_t> labels;
    std::map<uint16_t, std::string> names;

    LabelAtlas() = default;
    explicit LabelAtlas(Shape3 s) : shape(s), labels(static_cast<size_t>(s.numel()), 0) {}

    uint16_t at(int64_t z, int64_t y, int64_t x) const {
        return labels[static_cast<size_t>(shape.index(z, y, x))];
    }

    void validate() const {
        if (static_cast<int64_t>(labels.size()) != shape.numel())
            throw ShapeError("atlas label field size does not match shape " + shape.str());
        for (uint16_t v : labels) {
            if (v != 0 && names.find(v) == names.end())
                throw ValueError("atlas label " + std::to_string(v) + " has no region name");
        }
    }
};

inline void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
    if (!(a == b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace voxrel
