#include <doctest.h>

#include <cmath>
#include <vector>

#include "voxrel/aggregation.hpp"
#include "voxrel/rng.hpp"

using namespace voxrel;

namespace {

LabelAtlas strip_atlas() {
    // 1x2x8: label pattern 0,1,1,2,2,2,3,3 repeated on both rows.
    LabelAtlas atlas(Shape3{1, 2, 8});
    const std::vector<uint16_t> row = {0, 1, 1, 2, 2, 2, 3, 3};
    for (int r = 0; r < 2; ++r)
        for (int i = 0; i < 8; ++i) atlas.labels[static_cast<size_t>(r * 8 + i)] = row[static_cast<size_t>(i)];
    atlas.names = {{1, "Region01"}, {2, "Region02"}, {3, "Region03"}};
    return atlas;
}

Heatmap random_heatmap(Shape3 s, uint64_t seed, HeatmapNorm norm = HeatmapNorm::Raw) {
    Heatmap h;
    h.values = Volume(s);
    Rng rng(seed);
    for (auto& v : h.values.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    h.method = SaliencyMethod::Sensitivity;
    h.normalization = norm;
    return h;
}

}  // namespace

TEST_CASE("region fractions") {
    const LabelAtlas atlas = strip_atlas();
    VolumeT<float> h(atlas.shape);
    // Row 0: background 5; region1 {1,-2}; region2 {3,0,1}; region3 {2,2}.
    const std::vector<float> row0 = {5, 1, -2, 3, 0, 1, 2, 2};
    for (int i = 0; i < 8; ++i) h.data[static_cast<size_t>(i)] = row0[static_cast<size_t>(i)];
    // Row 1 stays zero.

    const RegionReport rep = region_fractions(h, atlas);
    CHECK(rep.total == 16.0);
    CHECK(rep.background_sum == 5.0);
    CHECK_FALSE(rep.degenerate);
    REQUIRE(rep.rows.size() == 3);

    // Sorted descending by fraction: region2 (4), region3 (4) tie broken by
    // label, then region1 (3).
    CHECK(rep.rows[0].label == 2);
    CHECK(rep.rows[1].label == 3);
    CHECK(rep.rows[2].label == 1);
    CHECK(rep.rows[0].summed == 4.0);
    CHECK(rep.rows[2].summed == 3.0);

    double covered = rep.background_fraction;
    for (const auto& r : rep.rows) covered += r.fraction;
    CHECK(std::abs(covered - 1.0) < 1e-6);

    SUBCASE("scaling the heatmap leaves fractions unchanged") {
        VolumeT<float> scaled = h;
        for (auto& v : scaled.data) v *= 3.5f;
        const RegionReport rep2 = region_fractions(scaled, atlas);
        for (size_t i = 0; i < rep.rows.size(); ++i) {
            CHECK(rep2.rows[i].label == rep.rows[i].label);
            CHECK(rep2.rows[i].fraction == doctest::Approx(rep.rows[i].fraction).epsilon(1e-9));
        }
        CHECK(rep2.background_fraction ==
              doctest::Approx(rep.background_fraction).epsilon(1e-9));
    }
    SUBCASE("all-zero heatmap is degenerate") {
        VolumeT<float> zero(atlas.shape);
        const RegionReport rep2 = region_fractions(zero, atlas);
        CHECK(rep2.degenerate);
        CHECK(rep2.total == 0.0);
        for (const auto& r : rep2.rows) CHECK(r.fraction == 0.0);
        CHECK(rep2.background_fraction == 0.0);
        CHECK(rep2.rows.size() == 3);  // named regions still listed
    }
    SUBCASE("json carries every region") {
        const nlohmann::json j = rep.to_json();
        CHECK(j.at("regions").size() == 3);
        CHECK(j.at("total_relevance") == 16.0);
        CHECK(j.at("degenerate") == false);
    }
    SUBCASE("text report lists the top k") {
        const std::string text = rep.to_text(2);
        CHECK(text.find("Region02") != std::string::npos);
        CHECK(text.find("Region03") != std::string::npos);
        CHECK(text.find("Region01") == std::string::npos);
        CHECK(text.find("%") != std::string::npos);
    }
    SUBCASE("shape mismatch") {
        VolumeT<float> wrong(Shape3{2, 2, 2});
        CHECK_THROWS_AS(region_fractions(wrong, atlas), ShapeError);
    }
}

TEST_CASE("top k regions") {
    const LabelAtlas atlas = strip_atlas();
    VolumeT<float> h(atlas.shape);
    for (size_t i = 0; i < h.data.size(); ++i) h.data[i] = 1.0f;
    const RegionReport rep = region_fractions(h, atlas);

    CHECK_THROWS_AS(top_k_regions(rep, 0), ValueError);
    CHECK(top_k_regions(rep, 2).size() == 2);
    CHECK(top_k_regions(rep, 99).size() == 3);
    // Uniform heatmap: big regions first, equal sizes by ascending label.
    const auto top = top_k_regions(rep, 3);
    CHECK(top[0].label == 2);  // 6 voxels
    CHECK(top[1].label == 1);  // 4 voxels, ties with region3
    CHECK(top[2].label == 3);
}

TEST_CASE("heatmap distance") {
    Heatmap a = random_heatmap({2, 3, 4}, 1);
    Heatmap b = random_heatmap({2, 3, 4}, 2);

    SUBCASE("hand value") {
        Heatmap x = a, y = a;
        x.values.data.assign(x.values.data.size(), 0.0f);
        y.values.data.assign(y.values.data.size(), 0.0f);
        x.values.data[0] = 3.0f;
        y.values.data[0] = 0.0f;
        y.values.data[1] = 4.0f;
        CHECK(heatmap_distance(x, y) == doctest::Approx(5.0).epsilon(1e-12));
    }
    SUBCASE("metric axioms on random triples") {
        for (int rep = 0; rep < 100; ++rep) {
            const Heatmap x = random_heatmap({2, 3, 4}, 100 + static_cast<uint64_t>(rep));
            const Heatmap y = random_heatmap({2, 3, 4}, 200 + static_cast<uint64_t>(rep));
            const Heatmap z = random_heatmap({2, 3, 4}, 300 + static_cast<uint64_t>(rep));
            const double dxy = heatmap_distance(x, y);
            const double dyx = heatmap_distance(y, x);
            const double dxz = heatmap_distance(x, z);
            const double dyz = heatmap_distance(y, z);
            CHECK(heatmap_distance(x, x) == 0.0);
            CHECK(dxy == dyx);
            CHECK(dxy >= 0.0);
            CHECK(dxz <= dxy + dyz + 1e-9);
        }
    }
    SUBCASE("normalization modes must match") {
        Heatmap c = random_heatmap({2, 3, 4}, 3, HeatmapNorm::UnitL1);
        CHECK_THROWS_AS(heatmap_distance(a, c), ValueError);
    }
    SUBCASE("shapes must match") {
        Heatmap c = random_heatmap({2, 2, 2}, 4);
        CHECK_THROWS_AS(heatmap_distance(a, c), ShapeError);
    }
    SUBCASE("distance matrix is symmetric with a zero diagonal") {
        const Heatmap c = random_heatmap({2, 3, 4}, 5);
        const auto m = distance_matrix<float>({a, b, c});
        REQUIRE(m.size() == 3);
        for (size_t i = 0; i < 3; ++i) {
            CHECK(m[i][i] == 0.0);
            for (size_t j = 0; j < 3; ++j) CHECK(m[i][j] == m[j][i]);
        }
        CHECK(m[0][1] == heatmap_distance(a, b));
    }
}

TEST_CASE("brain mask application") {
    VolumeT<float> v(Shape3{1, 2, 2});
    v.data = {1.0f, 2.0f, 3.0f, 4.0f};
    Volume mask(Shape3{1, 2, 2});
    mask.data = {1.0f, 0.0f, 1.0f, 0.0f};
    const VolumeT<float> out = apply_brain_mask(v, mask);
    CHECK(out.data == std::vector<float>{1.0f, 0.0f, 3.0f, 0.0f});

    mask.data[1] = 0.5f;
    CHECK_THROWS_AS(apply_brain_mask(v, mask), ValueError);
}
