#include "voxrel/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "voxrel/aggregation.hpp"
#include "voxrel/model.hpp"
#include "voxrel/phantom.hpp"
#include "voxrel/saliency.hpp"
#include "voxrel/threading.hpp"
#include "voxrel/training.hpp"

namespace fs = std::filesystem;

namespace voxrel {
namespace {

struct CliUsageError : std::runtime_error {
    explicit CliUsageError(const std::string& m) : std::runtime_error(m) {}
};

struct Common {
    std::string out;
    std::string config_path;
    std::vector<std::string> overrides;
    uint64_t seed = 0;
    bool seed_given = false;
    int threads = 1;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--out", c.out, "Output directory")->envname("VOXREL_OUT")->required();
    sub->add_option("--config", c.config_path, "JSON config file");
    sub->add_option("--set", c.overrides, "Config override key=value (dot-separated keys)");
    sub->add_option("--seed", c.seed, "Seed override")
        ->each([&c](const std::string&) { c.seed_given = true; });
    sub->add_option("--threads", c.threads, "Worker thread count")->check(CLI::PositiveNumber);
}

// Sets a possibly nested config entry; the value is parsed as JSON when it
// is valid JSON, otherwise taken as a plain string.
void apply_override(nlohmann::json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw CliUsageError("--set expects key=value, got \"" + kv + "\"");
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    if (key.empty()) throw CliUsageError("--set has an empty key in \"" + kv + "\"");
    nlohmann::json parsed = nlohmann::json::parse(val, nullptr, false);
    if (parsed.is_discarded()) parsed = val;
    nlohmann::json* cur = &j;
    size_t pos = 0;
    for (;;) {
        const auto dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (part.empty()) throw CliUsageError("--set has an empty key segment in \"" + kv + "\"");
        if (dot == std::string::npos) {
            (*cur)[part] = std::move(parsed);
            return;
        }
        cur = &((*cur)[part]);
        pos = dot + 1;
    }
}

nlohmann::json load_config(const Common& c) {
    nlohmann::json j =
        c.config_path.empty() ? nlohmann::json::object() : parse_json_file(c.config_path);
    if (!j.is_object()) throw FormatError("config root must be a JSON object: " + c.config_path);
    for (const auto& kv : c.overrides) apply_override(j, kv);
    return j;
}

void write_resolved(const Common& c, const std::string& command, nlohmann::json config) {
    nlohmann::json echo = {{"command", command},
                           {"threads", c.threads},
                           {"config", std::move(config)}};
    if (c.seed_given) echo["seed"] = c.seed;
    write_json_file(join_path(c.out, "resolved_config.json"), echo);
}

SaliencyMethod cli_method(const std::string& name) {
    if (name == "sensitivity") return SaliencyMethod::Sensitivity;
    if (name == "guided" || name == "guided_backprop") return SaliencyMethod::GuidedBackprop;
    if (name == "occlusion") return SaliencyMethod::Occlusion;
    if (name == "area-occlusion" || name == "area_occlusion")
        return SaliencyMethod::AreaOcclusion;
    throw CliUsageError("unknown method \"" + name +
                        "\" (valid: sensitivity, guided, occlusion, area-occlusion)");
}

struct ModelDir {
    Model<float> model;
    NormStats stats;
    FoldSplit split;
    int val_fold = 0;
    std::string weights_path;
};

ModelDir load_model_dir(const std::string& dir) {
    const std::string wpath = join_path(dir, "weights.vsw");
    ModelDir md{load_weights<float>(wpath),
                NormStats{read_volume(join_path(dir, "norm_mean")),
                          read_volume(join_path(dir, "norm_std"))},
                FoldSplit{}, 0, wpath};
    const nlohmann::json sj = parse_json_file(join_path(dir, "split.json"));
    md.split = FoldSplit::from_json(sj);
    if (sj.contains("val_fold")) md.val_fold = sj.at("val_fold").get<int>();
    return md;
}

std::vector<SampleInfo> select_samples(const DatasetManifest& m, const FoldSplit& split,
                                       int val_fold, const std::string& sel) {
    if (sel == "all") return m.samples;
    if (sel == "train") return select_train(m, split, val_fold);
    if (sel == "val") return select_val(m, split, val_fold);
    if (sel == "test") return select_test(m, split);
    if (sel == "test-ad" || sel == "test-nc") {
        const int want = sel == "test-ad" ? 1 : 0;
        std::vector<SampleInfo> out;
        for (const auto& s : select_test(m, split))
            if (s.label == want) out.push_back(s);
        return out;
    }
    throw CliUsageError("unknown selection \"" + sel +
                        "\" (valid: all, train, val, test, test-ad, test-nc)");
}

Volume masked_volume(const DatasetManifest& manifest, const SampleInfo& info,
                     const Volume& brain_mask) {
    Volume v = read_volume(manifest.resolve(info.volume_path));
    return apply_brain_mask(v, brain_mask);
}

// ---- generate ----

void run_generate(Common& c) {
    set_thread_count(c.threads);
    PhantomConfig cfg = PhantomConfig::from_json(load_config(c));
    if (c.seed_given) cfg.seed = c.seed;
    ensure_dir(c.out);
    generate_dataset(cfg, c.out);
    write_resolved(c, "generate", cfg.to_json());
}

// ---- train ----

struct TrainArgs {
    Common c;
    std::string data;
};

void run_train(TrainArgs& a) {
    set_thread_count(a.c.threads);
    const nlohmann::json j = load_config(a.c);
    const DatasetManifest manifest = read_manifest(a.data);
    if (manifest.samples.empty()) throw ValueError("train: manifest has no samples");
    const VolumeHeader vh =
        read_volume_header(manifest.resolve(manifest.samples[0].volume_path));

    nlohmann::json mj = j.value("model", nlohmann::json::object());
    const bool explicit_shape = mj.contains("input_shape");
    if (!explicit_shape) mj["input_shape"] = {vh.shape.d, vh.shape.h, vh.shape.w};
    ModelConfig mc = ModelConfig::from_json(mj);
    if (explicit_shape && !(mc.input_shape == vh.shape))
        throw ValueError("train: configured input_shape " + mc.input_shape.str() +
                         " does not match data shape " + vh.shape.str());

    TrainConfig tc = TrainConfig::from_json(j.value("train", nlohmann::json::object()));
    const nlohmann::json sj = j.value("split", nlohmann::json::object());
    const int k = sj.value("k", 5);
    const int val_fold = sj.value("val_fold", 0);
    const int n_test = sj.value("n_test_subjects_per_class", 0);
    uint64_t split_seed = sj.value("seed", static_cast<uint64_t>(0));
    if (a.c.seed_given) {
        mc.seed = mix_seed(a.c.seed, 20);
        tc.seed = mix_seed(a.c.seed, 21);
        split_seed = mix_seed(a.c.seed, 22);
    }
    if (val_fold < 0 || val_fold >= k)
        throw ValueError("train: val_fold " + std::to_string(val_fold) + " outside [0," +
                         std::to_string(k) + ")");

    ensure_dir(a.c.out);
    const Volume brain_mask = read_volume(manifest.resolve(manifest.brain_mask_path));
    const FoldSplit split = split_subjects(manifest, k, split_seed, n_test);
    const auto train_infos = select_train(manifest, split, val_fold);
    if (train_infos.empty()) throw ValueError("train: training selection is empty");
    const auto train_set = load_samples(manifest, train_infos, &brain_mask);
    std::vector<const Volume*> vols;
    for (const auto& s : train_set) vols.push_back(&s.volume);
    const NormStats stats = compute_norm_stats(vols);

    Model<float> model(mc);
    const auto history = train(model, train_set, stats, tc);

    save_weights(model, join_path(a.c.out, "weights.vsw"));
    write_volume(stats.mean, join_path(a.c.out, "norm_mean"), "image",
                 {{"role", "norm_mean"}});
    write_volume(stats.std, join_path(a.c.out, "norm_std"), "image", {{"role", "norm_std"}});
    nlohmann::json split_json = split.to_json();
    split_json["val_fold"] = val_fold;
    write_json_file(join_path(a.c.out, "split.json"), split_json);
    std::string hist;
    for (const auto& h : history)
        hist += nlohmann::json{{"epoch", h.epoch},
                               {"mean_loss", h.mean_loss},
                               {"train_acc", h.train_acc}}
                    .dump() +
                "\n";
    atomic_write_text(join_path(a.c.out, "history.jsonl"), hist);
    write_resolved(a.c, "train",
                   {{"data", a.data},
                    {"model", mc.to_json()},
                    {"train", tc.to_json()},
                    {"split",
                     {{"k", k},
                      {"val_fold", val_fold},
                      {"n_test_subjects_per_class", n_test},
                      {"seed", split_seed}}}});
}

// ---- evaluate ----

struct EvaluateArgs {
    Common c;
    std::string data;
    std::string model_dir;
    std::string split = "test";
};

void run_evaluate(EvaluateArgs& a) {
    set_thread_count(a.c.threads);
    ModelDir md = load_model_dir(a.model_dir);
    const DatasetManifest manifest = read_manifest(a.data);
    md.split.validate(manifest);
    const auto infos = select_samples(manifest, md.split, md.val_fold, a.split);
    if (infos.empty())
        throw ValueError("evaluate: selection \"" + a.split + "\" matches no samples");
    const Volume brain_mask = read_volume(manifest.resolve(manifest.brain_mask_path));
    const auto samples = load_samples(manifest, infos, &brain_mask);
    const EvalResult res = evaluate(md.model, samples, md.stats);
    ensure_dir(a.c.out);
    nlohmann::json mj = res.to_json();
    mj["split"] = a.split;
    write_json_file(join_path(a.c.out, "metrics.json"), mj);
    write_resolved(a.c, "evaluate",
                   {{"data", a.data}, {"model_dir", a.model_dir}, {"split", a.split}});
}

// ---- explain ----

struct ExplainArgs {
    Common c;
    std::string data;
    std::string model_dir;
    std::string method;
    std::string target = "auto";
    std::vector<std::string> sample_ids;
    std::string select;
    std::string normalize = "raw";
    int64_t patch = 40;
    int64_t stride = 0;
    double fill = 0.0;
    bool on_logit = false;
    bool occlude_raw = false;
};

void run_explain(ExplainArgs& a) {
    set_thread_count(a.c.threads);
    const SaliencyMethod method = cli_method(a.method);
    const HeatmapNorm norm = heatmap_norm_from_string(a.normalize);
    int fixed_target = -1;
    if (a.target != "auto") {
        try {
            fixed_target = std::stoi(a.target);
        } catch (const std::exception&) {
            throw CliUsageError("--target-class must be \"auto\" or a class index, got \"" +
                                a.target + "\"");
        }
    }

    ModelDir md = load_model_dir(a.model_dir);
    const DatasetManifest manifest = read_manifest(a.data);
    std::vector<SampleInfo> infos;
    if (!a.select.empty()) {
        md.split.validate(manifest);
        infos = select_samples(manifest, md.split, md.val_fold, a.select);
    }
    for (const auto& id : a.sample_ids) infos.push_back(manifest.find_sample(id));
    if (infos.empty())
        throw CliUsageError("explain: no samples selected (use --sample or --select)");

    const Volume brain_mask = read_volume(manifest.resolve(manifest.brain_mask_path));
    LabelAtlas atlas;
    if (method == SaliencyMethod::AreaOcclusion)
        atlas = read_atlas(manifest.resolve(manifest.atlas_path));
    const uint64_t whash = fnv1a64_file(md.weights_path);
    ensure_dir(a.c.out);

    const std::function<Volume(const Volume&)> prep = [&](const Volume& v) {
        return normalize(v, md.stats);
    };
    for (const auto& info : infos) {
        const Volume masked = masked_volume(manifest, info, brain_mask);
        const int target = fixed_target < 0 ? info.label : fixed_target;
        Heatmap h;
        nlohmann::json params;
        switch (method) {
            case SaliencyMethod::Sensitivity:
                h = sensitivity(md.model, normalize(masked, md.stats), target, a.on_logit);
                params = {{"on_logit", a.on_logit}};
                break;
            case SaliencyMethod::GuidedBackprop:
                h = guided_backprop(md.model, normalize(masked, md.stats), target, a.on_logit);
                params = {{"on_logit", a.on_logit}};
                break;
            case SaliencyMethod::Occlusion: {
                OcclusionParams op;
                op.patch_d = op.patch_h = op.patch_w = a.patch;
                op.stride_d = op.stride_h = op.stride_w = a.stride;
                op.fill = a.fill;
                h = a.occlude_raw
                        ? occlusion(md.model, masked, target, op, &prep)
                        : occlusion(md.model, normalize(masked, md.stats), target, op);
                params = {{"patch", a.patch},
                          {"stride", a.stride},
                          {"fill", a.fill},
                          {"occlude_raw", a.occlude_raw}};
                break;
            }
            case SaliencyMethod::AreaOcclusion: {
                auto res = a.occlude_raw
                               ? area_occlusion(md.model, masked, atlas, target, a.fill, &prep)
                               : area_occlusion(md.model, normalize(masked, md.stats), atlas,
                                                target, a.fill);
                for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
                h = std::move(res.heatmap);
                params = {{"fill", a.fill}, {"occlude_raw", a.occlude_raw}};
                break;
            }
        }
        if (norm == HeatmapNorm::UnitL1 && !normalize_unit_l1(h))
            std::cerr << "warning: heatmap for sample " << info.id
                      << " is all-zero; stored unnormalized\n";
        write_heatmap(h, join_path(a.c.out, info.id + "_" + to_string(method)), params, whash);
    }
    write_resolved(a.c, "explain",
                   {{"data", a.data},
                    {"model_dir", a.model_dir},
                    {"method", to_string(method)},
                    {"target_class", a.target},
                    {"normalize", a.normalize},
                    {"patch", a.patch},
                    {"stride", a.stride},
                    {"fill", a.fill},
                    {"on_logit", a.on_logit},
                    {"occlude_raw", a.occlude_raw},
                    {"n_samples", infos.size()}});
}

// ---- aggregate ----

struct AggregateArgs {
    Common c;
    std::vector<std::string> heatmaps;
    std::string dir;
    std::string atlas_path;
    std::string data;
    std::string normalize = "unit_l1";
    int64_t top_k = 4;
};

std::vector<std::string> heatmap_files_in(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
        paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    std::vector<std::string> out;
    for (const auto& p : paths) {
        try {
            if (read_volume_header(p).kind == "heatmap") out.push_back(volume_base(p));
        } catch (const Error&) {
            continue;  // sidecar of some other artifact
        }
    }
    return out;
}

void run_aggregate(AggregateArgs& a) {
    set_thread_count(a.c.threads);
    if (a.top_k < 1) throw CliUsageError("aggregate: --top-k must be >= 1");
    std::vector<std::string> files = a.heatmaps;
    if (!a.dir.empty())
        for (const auto& f : heatmap_files_in(a.dir)) files.push_back(f);
    if (files.empty())
        throw CliUsageError("aggregate: no heatmaps given (use --heatmap or --dir)");

    LabelAtlas atlas;
    if (!a.atlas_path.empty()) {
        atlas = read_atlas(a.atlas_path);
    } else if (!a.data.empty()) {
        const DatasetManifest manifest = read_manifest(a.data);
        atlas = read_atlas(manifest.resolve(manifest.atlas_path));
    } else {
        throw CliUsageError("aggregate: need --atlas or --data for region labels");
    }

    const bool norm_flag = heatmap_norm_from_string(a.normalize) == HeatmapNorm::UnitL1;
    std::map<SaliencyMethod, std::vector<Heatmap>> by_method;
    for (const auto& f : files) {
        Heatmap h = read_heatmap(f);
        by_method[h.method].push_back(std::move(h));
    }

    ensure_dir(a.c.out);
    nlohmann::json reports = nlohmann::json::object();
    std::string text;
    for (auto& [method, maps] : by_method) {
        const std::string name = to_string(method);
        const Heatmap avg = average_heatmaps(maps, norm_flag);
        const nlohmann::json meta = {
            {"method", name},
            {"target_class", avg.target_class},
            {"params", {{"n_inputs", maps.size()}, {"normalize", a.normalize}}},
            {"normalization", to_string(avg.normalization)},
            {"model_hash", maps[0].values.meta.value("model_hash", "")}};
        write_volume(avg.values, join_path(a.c.out, "avg_" + name), "heatmap", meta);
        const RegionReport report = region_fractions(avg.values, atlas);
        reports[name] = report.to_json();
        text += "== " + name + " (n=" + std::to_string(maps.size()) + ") ==\n" +
                report.to_text(static_cast<size_t>(a.top_k)) + "\n";
    }
    write_json_file(join_path(a.c.out, "region_report.json"),
                    {{"normalization", a.normalize}, {"top_k", a.top_k}, {"reports", reports}});
    atomic_write_text(join_path(a.c.out, "region_report.txt"), text);
    write_resolved(a.c, "aggregate",
                   {{"n_heatmaps", files.size()},
                    {"normalize", a.normalize},
                    {"top_k", a.top_k}});
}

// ---- compare ----

struct CompareArgs {
    Common c;
    std::vector<std::string> heatmaps;
};

void run_compare(CompareArgs& a) {
    set_thread_count(a.c.threads);
    if (a.heatmaps.size() < 2)
        throw CliUsageError("compare: need at least two --heatmap files");
    std::vector<Heatmap> maps;
    std::vector<std::string> labels;
    std::map<std::string, int> seen;
    for (const auto& f : a.heatmaps) {
        maps.push_back(read_heatmap(f));
        std::string label = to_string(maps.back().method);
        const int n = seen[label]++;
        if (n > 0) label += "#" + std::to_string(n + 1);
        labels.push_back(label);
    }
    const auto matrix = distance_matrix(maps);

    ensure_dir(a.c.out);
    write_json_file(join_path(a.c.out, "distance_matrix.json"),
                    {{"labels", labels},
                     {"normalization", to_string(maps[0].normalization)},
                     {"matrix", matrix}});
    size_t width = 12;
    for (const auto& l : labels) width = std::max(width, l.size() + 2);
    std::string text(width, ' ');
    char cell[64];
    for (const auto& l : labels) {
        std::snprintf(cell, sizeof(cell), "%*s", static_cast<int>(width), l.c_str());
        text += cell;
    }
    text += "\n";
    for (size_t i = 0; i < labels.size(); ++i) {
        std::snprintf(cell, sizeof(cell), "%-*s", static_cast<int>(width), labels[i].c_str());
        text += cell;
        for (size_t j = 0; j < labels.size(); ++j) {
            std::snprintf(cell, sizeof(cell), "%*.*g", static_cast<int>(width), 5, matrix[i][j]);
            text += cell;
        }
        text += "\n";
    }
    atomic_write_text(join_path(a.c.out, "distance_matrix.txt"), text);
    write_resolved(a.c, "compare", {{"n_heatmaps", a.heatmaps.size()}, {"labels", labels}});
}

// ---- export-slices ----

struct ExportArgs {
    Common c;
    std::string heatmap;
    std::string underlay;
    std::string axis = "z";
    std::vector<int64_t> indices;
};

void run_export(ExportArgs& a) {
    set_thread_count(a.c.threads);
    if (a.axis != "z" && a.axis != "y" && a.axis != "x")
        throw CliUsageError("export-slices: --axis must be z, y, or x");
    if (a.indices.empty()) throw CliUsageError("export-slices: need at least one --index");
    const Heatmap h = read_heatmap(a.heatmap);
    const Shape3 s = h.values.shape;
    Volume underlay;
    const bool have_underlay = !a.underlay.empty();
    if (have_underlay) {
        underlay = read_volume(a.underlay);
        require_same_shape(s, underlay.shape, "export-slices");
    }
    const int64_t extent = a.axis == "z" ? s.d : a.axis == "y" ? s.h : s.w;
    for (int64_t idx : a.indices)
        if (idx < 0 || idx >= extent)
            throw CliUsageError("export-slices: index " + std::to_string(idx) +
                                " out of range [0," + std::to_string(extent) + ") on axis " +
                                a.axis);

    double max_abs = 0.0;
    for (const float v : h.values.data) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
    double umin = 0.0, umax = 0.0;
    if (have_underlay) {
        umin = umax = static_cast<double>(underlay.data[0]);
        for (const float v : underlay.data) {
            umin = std::min(umin, static_cast<double>(v));
            umax = std::max(umax, static_cast<double>(v));
        }
    }

    auto slice_dims = [&](int64_t& width, int64_t& height) {
        if (a.axis == "z") {
            width = s.w;
            height = s.h;
        } else if (a.axis == "y") {
            width = s.w;
            height = s.d;
        } else {
            width = s.h;
            height = s.d;
        }
    };
    auto sample = [&](const Volume& v, int64_t idx, int64_t row, int64_t col) {
        if (a.axis == "z") return v.at(idx, row, col);
        if (a.axis == "y") return v.at(row, idx, col);
        return v.at(row, col, idx);
    };

    ensure_dir(a.c.out);
    int64_t width = 0, height = 0;
    slice_dims(width, height);
    for (int64_t idx : a.indices) {
        const std::string tag = a.axis + std::to_string(idx);
        std::vector<uint8_t> px(static_cast<size_t>(width * height));
        for (int64_t r = 0; r < height; ++r)
            for (int64_t col = 0; col < width; ++col) {
                const double v = std::abs(static_cast<double>(sample(h.values, idx, r, col)));
                const double t = max_abs > 0.0 ? v / max_abs : 0.0;
                px[static_cast<size_t>(r * width + col)] =
                    static_cast<uint8_t>(std::lround(255.0 * std::min(1.0, t)));
            }
        write_pgm(join_path(a.c.out, "heatmap_" + tag + ".pgm"), width, height, px);
        if (have_underlay) {
            for (int64_t r = 0; r < height; ++r)
                for (int64_t col = 0; col < width; ++col) {
                    const double v = static_cast<double>(sample(underlay, idx, r, col));
                    const double t = umax > umin ? (v - umin) / (umax - umin) : 0.0;
                    px[static_cast<size_t>(r * width + col)] =
                        static_cast<uint8_t>(std::lround(255.0 * std::min(1.0, std::max(0.0, t))));
                }
            write_pgm(join_path(a.c.out, "underlay_" + tag + ".pgm"), width, height, px);
        }
    }
    nlohmann::json scale = {{"heatmap_max_abs", max_abs}, {"axis", a.axis}, {"indices", a.indices}};
    if (have_underlay) {
        scale["underlay_min"] = umin;
        scale["underlay_max"] = umax;
    }
    write_json_file(join_path(a.c.out, "scale.json"), scale);
    write_resolved(a.c, "export-slices",
                   {{"heatmap", a.heatmap},
                    {"underlay", a.underlay},
                    {"axis", a.axis},
                    {"indices", a.indices}});
}

}  // namespace

int cli_run(const std::vector<std::string>& args) {
    CLI::App app{"Volumetric classifier training and relevance heatmaps"};
    app.name("voxrel");
    app.require_subcommand(1);

    Common c_generate;
    auto* generate = app.add_subcommand("generate", "Generate a synthetic phantom dataset");
    add_common(generate, c_generate);
    generate->callback([&] { run_generate(c_generate); });

    TrainArgs t;
    auto* train_cmd = app.add_subcommand("train", "Train a classifier on a dataset manifest");
    add_common(train_cmd, t.c);
    train_cmd->add_option("--data", t.data, "Dataset manifest path")->required();
    train_cmd->callback([&] { run_train(t); });

    EvaluateArgs e;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate a trained model");
    add_common(evaluate_cmd, e.c);
    evaluate_cmd->add_option("--data", e.data, "Dataset manifest path")->required();
    evaluate_cmd->add_option("--model-dir", e.model_dir, "Directory written by train")->required();
    evaluate_cmd->add_option("--split", e.split, "Sample selection: all|train|val|test|test-ad|test-nc");
    evaluate_cmd->callback([&] { run_evaluate(e); });

    ExplainArgs x;
    auto* explain_cmd = app.add_subcommand("explain", "Compute relevance heatmaps for samples");
    add_common(explain_cmd, x.c);
    explain_cmd->add_option("--data", x.data, "Dataset manifest path")->required();
    explain_cmd->add_option("--model-dir", x.model_dir, "Directory written by train")->required();
    explain_cmd->add_option("--method", x.method,
                            "sensitivity|guided|occlusion|area-occlusion")->required();
    explain_cmd->add_option("--target-class", x.target, "Class index or \"auto\" (true label)");
    explain_cmd->add_option("--sample", x.sample_ids, "Sample id (repeatable)");
    explain_cmd->add_option("--select", x.select, "Sample selection: all|train|val|test|test-ad|test-nc");
    explain_cmd->add_option("--normalize", x.normalize, "Stored heatmap scaling: raw|unit_l1");
    explain_cmd->add_option("--patch", x.patch, "Occlusion patch edge length");
    explain_cmd->add_option("--stride", x.stride, "Occlusion stride (0 = half the patch)");
    explain_cmd->add_option("--fill", x.fill, "Occlusion fill value");
    explain_cmd->add_flag("--on-logit", x.on_logit, "Differentiate the logit instead of the probability");
    explain_cmd->add_flag("--occlude-raw", x.occlude_raw,
                          "Occlude before normalization instead of after");
    explain_cmd->callback([&] { run_explain(x); });

    AggregateArgs g;
    auto* aggregate_cmd =
        app.add_subcommand("aggregate", "Average heatmaps and report per-region relevance");
    add_common(aggregate_cmd, g.c);
    aggregate_cmd->add_option("--heatmap", g.heatmaps, "Heatmap file (repeatable)");
    aggregate_cmd->add_option("--dir", g.dir, "Directory to scan for heatmap files");
    aggregate_cmd->add_option("--atlas", g.atlas_path, "Atlas volume path");
    aggregate_cmd->add_option("--data", g.data, "Dataset manifest (for the atlas path)");
    aggregate_cmd->add_option("--normalize", g.normalize,
                              "Per-heatmap scaling before averaging: raw|unit_l1");
    aggregate_cmd->add_option("--top-k", g.top_k, "Regions listed in the text report");
    aggregate_cmd->callback([&] { run_aggregate(g); });

    CompareArgs p;
    auto* compare_cmd =
        app.add_subcommand("compare", "Pairwise Euclidean distances between heatmaps");
    add_common(compare_cmd, p.c);
    compare_cmd->add_option("--heatmap", p.heatmaps, "Heatmap file (repeatable)");
    compare_cmd->callback([&] { run_compare(p); });

    ExportArgs s;
    auto* export_cmd = app.add_subcommand("export-slices", "Export PGM slice images");
    add_common(export_cmd, s.c);
    export_cmd->add_option("--heatmap", s.heatmap, "Heatmap file")->required();
    export_cmd->add_option("--underlay", s.underlay, "Volume rendered alongside the heatmap");
    export_cmd->add_option("--axis", s.axis, "Slice axis: z|y|x");
    export_cmd->add_option("--index", s.indices, "Slice index (repeatable)");
    export_cmd->callback([&] { run_export(s); });

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("voxrel");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    } catch (const CliUsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace voxrel
