#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "support/temp_dir.hpp"
#include "voxrel/cli.hpp"
#include "voxrel/io.hpp"
#include "voxrel/saliency.hpp"

using namespace voxrel;
namespace fs = std::filesystem;

namespace {

int cli(const std::vector<std::string>& args) { return cli_run(args); }

}  // namespace

TEST_CASE("cli pipeline runs end to end") {
    TempDir td("cli_pipeline");
    const std::string data = td / "data";
    const std::string model = td / "model";
    const std::string heat = td / "heat";

    // generate a small dataset
    REQUIRE(cli({"generate", "--out", data, "--seed", "100", "--set", "shape=[16,16,16]",
                 "--set", "n_subjects_per_class=4", "--set", "n_regions=4", "--set",
                 "lesion_regions=[2]", "--set", "max_scans=2"}) == 0);
    const std::string manifest = join_path(data, "manifest.json");
    REQUIRE(file_exists(manifest));
    REQUIRE(file_exists(join_path(data, "resolved_config.json")));

    // train a tiny model for two epochs
    REQUIRE(cli({"train", "--data", manifest, "--out", model, "--seed", "101", "--set",
                 "model.conv_channels=[2,2]", "--set", "model.fc_sizes=[4]", "--set",
                 "train.epochs=2", "--set", "train.batch_size=4", "--set", "split.k=2",
                 "--set", "split.n_test_subjects_per_class=1"}) == 0);
    REQUIRE(file_exists(join_path(model, "weights.vsw")));
    REQUIRE(file_exists(join_path(model, "norm_mean.json")));
    REQUIRE(file_exists(join_path(model, "norm_std.bin")));
    REQUIRE(file_exists(join_path(model, "split.json")));

    // history: one valid json line per epoch
    std::ifstream hist(join_path(model, "history.jsonl"));
    std::string line;
    int lines = 0;
    while (std::getline(hist, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.at("epoch") == lines + 1);
        CHECK(j.contains("mean_loss"));
        CHECK(j.contains("train_acc"));
        ++lines;
    }
    CHECK(lines == 2);

    // evaluate on the held-out subjects
    const std::string eval_dir = td / "eval";
    REQUIRE(cli({"evaluate", "--data", manifest, "--model-dir", model, "--split", "test",
                 "--out", eval_dir}) == 0);
    const nlohmann::json metrics = parse_json_file(join_path(eval_dir, "metrics.json"));
    CHECK(metrics.contains("accuracy"));
    CHECK(metrics.contains("roc_auc"));
    CHECK(metrics.at("n_samples").get<int>() > 0);
    CHECK(metrics.at("per_sample").size() == metrics.at("n_samples").get<size_t>());
    for (const auto& p : metrics.at("per_sample")) {
        CHECK(p.contains("id"));
        CHECK(p.contains("prob_ad"));
        CHECK(p.contains("label"));
    }

    // explain with each method on the test samples
    REQUIRE(cli({"explain", "--data", manifest, "--model-dir", model, "--method",
                 "sensitivity", "--select", "test", "--out", heat}) == 0);
    REQUIRE(cli({"explain", "--data", manifest, "--model-dir", model, "--method", "guided",
                 "--select", "test", "--out", heat}) == 0);
    REQUIRE(cli({"explain", "--data", manifest, "--model-dir", model, "--method",
                 "area-occlusion", "--select", "test", "--out", heat}) == 0);
    const std::string test_id = metrics.at("per_sample")[0].at("id").get<std::string>();
    REQUIRE(cli({"explain", "--data", manifest, "--model-dir", model, "--method", "occlusion",
                 "--sample", test_id, "--patch", "8", "--stride", "8", "--out", heat}) == 0);

    const std::string sens_base = join_path(heat, test_id + "_sensitivity");
    REQUIRE(file_exists(sens_base + ".json"));
    const Heatmap h = read_heatmap(sens_base);
    CHECK(h.method == SaliencyMethod::Sensitivity);
    CHECK(h.values.shape == Shape3{16, 16, 16});
    // The heatmap records the hash of the weights that produced it.
    char expect_hash[17];
    std::snprintf(expect_hash, sizeof(expect_hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(join_path(model, "weights.vsw"))));
    CHECK(h.values.meta.at("model_hash") == std::string(expect_hash));
    REQUIRE(file_exists(join_path(heat, test_id + "_occlusion.json")));
    REQUIRE(file_exists(join_path(heat, test_id + "_area_occlusion.json")));

    // aggregate everything in the heatmap directory
    const std::string agg = td / "agg";
    REQUIRE(cli({"aggregate", "--dir", heat, "--data", manifest, "--out", agg}) == 0);
    REQUIRE(file_exists(join_path(agg, "region_report.json")));
    REQUIRE(file_exists(join_path(agg, "region_report.txt")));
    REQUIRE(file_exists(join_path(agg, "avg_sensitivity.json")));
    REQUIRE(file_exists(join_path(agg, "avg_area_occlusion.json")));
    const nlohmann::json report = parse_json_file(join_path(agg, "region_report.json"));
    CHECK(report.at("reports").contains("sensitivity"));
    CHECK(report.at("reports").at("sensitivity").at("regions").size() == 4);

    // compare the method averages
    const std::string cmp = td / "cmp";
    REQUIRE(cli({"compare", "--heatmap", join_path(agg, "avg_sensitivity"), "--heatmap",
                 join_path(agg, "avg_guided_backprop"), "--heatmap",
                 join_path(agg, "avg_area_occlusion"), "--out", cmp}) == 0);
    const nlohmann::json dm = parse_json_file(join_path(cmp, "distance_matrix.json"));
    REQUIRE(dm.at("matrix").size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(dm.at("matrix")[i][i] == 0.0);
        for (size_t j = 0; j < 3; ++j) CHECK(dm.at("matrix")[i][j] == dm.at("matrix")[j][i]);
    }
    CHECK(dm.at("labels").size() == 3);

    // export slice images
    const std::string slices = td / "slices";
    REQUIRE(cli({"export-slices", "--heatmap", sens_base, "--underlay",
                 join_path(data, test_id), "--axis", "z", "--index", "8", "--out",
                 slices}) == 0);
    REQUIRE(file_exists(join_path(slices, "heatmap_z8.pgm")));
    REQUIRE(file_exists(join_path(slices, "underlay_z8.pgm")));
    REQUIRE(file_exists(join_path(slices, "scale.json")));
    const std::vector<char> pgm = read_file_bytes(join_path(slices, "heatmap_z8.pgm"));
    CHECK(std::string(pgm.begin(), pgm.begin() + 3) == "P5\n");
}

TEST_CASE("cli rerun with the same seed reproduces weights byte for byte") {
    TempDir td("cli_rerun");
    auto run = [&](const std::string& tag) {
        const std::string data = td / (tag + "_data");
        const std::string model = td / (tag + "_model");
        REQUIRE(cli({"generate", "--out", data, "--seed", "200", "--set", "shape=[16,16,16]",
                     "--set", "n_subjects_per_class=3", "--set", "n_regions=3", "--set",
                     "lesion_regions=[1]"}) == 0);
        REQUIRE(cli({"train", "--data", join_path(data, "manifest.json"), "--out", model,
                     "--seed", "201", "--set", "model.conv_channels=[2]", "--set",
                     "model.fc_sizes=[4]", "--set", "train.epochs=1", "--set", "split.k=2"}) == 0);
        return read_file_bytes(join_path(model, "weights.vsw"));
    };
    CHECK(run("a") == run("b"));
}

TEST_CASE("cli reports usage errors with exit code 1") {
    TempDir td("cli_usage");
    CHECK(cli({}) == 1);                       // no subcommand
    CHECK(cli({"frobnicate"}) == 1);           // unknown subcommand
    CHECK(cli({"train", "--out", td.str()}) == 1);  // missing --data
    CHECK(cli({"explain", "--data", "x", "--model-dir", "y", "--method", "gradcam", "--out",
               td.str()}) == 1);  // checked before any file access
    CHECK(cli({"--help"}) == 0);
}

TEST_CASE("cli reports data errors with exit code 2") {
    TempDir td("cli_data_err");
    CHECK(cli({"evaluate", "--data", td / "absent.json", "--model-dir", td / "nope", "--out",
               td / "out"}) == 2);
    // Config that fails validation.
    CHECK(cli({"generate", "--out", td / "gen", "--set", "min_scans=5", "--set",
               "max_scans=1"}) == 2);
}
