#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxrel/model.hpp"

namespace voxrel {

// ---- subject-level splitting ----

struct FoldSplit {
    int k = 5;
    // Subject id -> fold index. Subjects held out for the fixed test set do
    // not appear here.
    std::map<std::string, int> assignments;
    // Sample ids of the held-out test set.
    std::vector<std::string> fixed_test;

    nlohmann::json to_json() const {
        nlohmann::json a = nlohmann::json::object();
        for (const auto& [subject, fold] : assignments) a[subject] = fold;
        return {{"k", k}, {"assignments", a}, {"fixed_test", fixed_test}};
    }

    static FoldSplit from_json(const nlohmann::json& j) {
        FoldSplit s;
        s.k = j.at("k").get<int>();
        for (auto it = j.at("assignments").begin(); it != j.at("assignments").end(); ++it)
            s.assignments[it.key()] = it.value().get<int>();
        s.fixed_test = j.at("fixed_test").get<std::vector<std::string>>();
        return s;
    }

    // Checks that every sample's subject is either fold-assigned or entirely
    // in the fixed test set, never both, and that fold indices are in range.
    void validate(const DatasetManifest& manifest) const {
        for (const auto& [subject, fold] : assignments)
            if (fold < 0 || fold >= k)
                throw ValueError("split: subject \"" + subject + "\" assigned to fold " +
                                 std::to_string(fold) + " outside [0," + std::to_string(k) + ")");
        std::vector<std::string> test_sorted = fixed_test;
        std::sort(test_sorted.begin(), test_sorted.end());
        for (const auto& s : manifest.samples) {
            const bool in_folds = assignments.count(s.subject) > 0;
            const bool in_test =
                std::binary_search(test_sorted.begin(), test_sorted.end(), s.id);
            if (in_folds && in_test)
                throw ValueError("split: sample \"" + s.id + "\" of fold-assigned subject \"" +
                                 s.subject + "\" also appears in the fixed test set");
            if (!in_folds && !in_test)
                throw ValueError("split: sample \"" + s.id + "\" is in neither a fold nor the test set");
        }
    }
};

// Shuffles subjects per class (seeded), holds out the first
// n_test_subjects_per_class of each class as the fixed test set, and deals
// the rest round-robin into k folds. All scans of a subject stay together.
inline FoldSplit split_subjects(const DatasetManifest& manifest, int k, uint64_t seed,
                                int n_test_subjects_per_class = 0) {
    if (k < 1) throw ValueError("split_subjects: k must be >= 1");
    if (n_test_subjects_per_class < 0)
        throw ValueError("split_subjects: n_test_subjects_per_class must be >= 0");
    std::vector<std::string> by_class[2];
    std::map<std::string, int> seen;
    for (const auto& s : manifest.samples)
        if (seen.emplace(s.subject, s.label).second) by_class[s.label].push_back(s.subject);

    FoldSplit split;
    split.k = k;
    Rng rng(mix_seed(seed, 2));
    std::vector<std::string> test_subjects;
    for (int cls = 0; cls < 2; ++cls) {
        auto& subjects = by_class[cls];
        if (static_cast<int>(subjects.size()) < n_test_subjects_per_class + k)
            throw ValueError("split_subjects: class " + std::to_string(cls) + " has " +
                             std::to_string(subjects.size()) + " subjects, needs at least " +
                             std::to_string(n_test_subjects_per_class + k) +
                             " for the test set plus " + std::to_string(k) + " folds");
        rng.shuffle(subjects);
        for (int i = 0; i < n_test_subjects_per_class; ++i) test_subjects.push_back(subjects[i]);
        for (size_t i = n_test_subjects_per_class; i < subjects.size(); ++i)
            split.assignments[subjects[i]] =
                static_cast<int>((i - n_test_subjects_per_class) % static_cast<size_t>(k));
    }
    std::sort(test_subjects.begin(), test_subjects.end());
    for (const auto& s : manifest.samples)
        if (std::binary_search(test_subjects.begin(), test_subjects.end(), s.subject))
            split.fixed_test.push_back(s.id);
    split.validate(manifest);
    return split;
}

inline std::vector<SampleInfo> select_train(const DatasetManifest& manifest, const FoldSplit& split,
                                            int val_fold) {
    std::vector<SampleInfo> out;
    for (const auto& s : manifest.samples) {
        auto it = split.assignments.find(s.subject);
        if (it != split.assignments.end() && it->second != val_fold) out.push_back(s);
    }
    return out;
}

inline std::vector<SampleInfo> select_val(const DatasetManifest& manifest, const FoldSplit& split,
                                          int val_fold) {
    std::vector<SampleInfo> out;
    for (const auto& s : manifest.samples) {
        auto it = split.assignments.find(s.subject);
        if (it != split.assignments.end() && it->second == val_fold) out.push_back(s);
    }
    return out;
}

inline std::vector<SampleInfo> select_test(const DatasetManifest& manifest,
                                           const FoldSplit& split) {
    std::vector<std::string> test_sorted = split.fixed_test;
    std::sort(test_sorted.begin(), test_sorted.end());
    std::vector<SampleInfo> out;
    for (const auto& s : manifest.samples)
        if (std::binary_search(test_sorted.begin(), test_sorted.end(), s.id)) out.push_back(s);
    return out;
}

// ---- per-voxel normalization ----

struct NormStats {
    Volume mean;
    Volume std;
};

constexpr double kStdFloor = 1e-6;

// Per-voxel mean and population standard deviation across the training set
// (Welford accumulation in 64-bit), standard deviation floored at kStdFloor.
inline NormStats compute_norm_stats(const std::vector<const Volume*>& volumes) {
    if (volumes.size() < 2)
        throw ValueError("compute_norm_stats: need at least 2 volumes, got " +
                         std::to_string(volumes.size()));
    const Shape3 shape = volumes[0]->shape;
    const size_t n = static_cast<size_t>(shape.numel());
    std::vector<double> mean(n, 0.0), m2(n, 0.0);
    for (size_t v = 0; v < volumes.size(); ++v) {
        require_same_shape(shape, volumes[v]->shape, "compute_norm_stats");
        const float* p = volumes[v]->data.data();
        const double count = static_cast<double>(v + 1);
        for (size_t i = 0; i < n; ++i) {
            const double x = static_cast<double>(p[i]);
            const double delta = x - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (x - mean[i]);
        }
    }
    NormStats stats{Volume(shape), Volume(shape)};
    const double nn = static_cast<double>(volumes.size());
    for (size_t i = 0; i < n; ++i) {
        stats.mean.data[i] = static_cast<float>(mean[i]);
        stats.std.data[i] = static_cast<float>(std::max(std::sqrt(m2[i] / nn), kStdFloor));
    }
    return stats;
}

inline Volume normalize(const Volume& v, const NormStats& stats) {
    require_same_shape(v.shape, stats.mean.shape, "normalize");
    Volume out(v.shape);
    out.meta = v.meta;
    for (size_t i = 0; i < v.data.size(); ++i)
        out.data[i] = (v.data[i] - stats.mean.data[i]) / stats.std.data[i];
    return out;
}

inline Volume denormalize(const Volume& v, const NormStats& stats) {
    require_same_shape(v.shape, stats.mean.shape, "denormalize");
    Volume out(v.shape);
    out.meta = v.meta;
    for (size_t i = 0; i < v.data.size(); ++i)
        out.data[i] = v.data[i] * stats.std.data[i] + stats.mean.data[i];
    return out;
}

// ---- training ----

struct TrainConfig {
    double lr = 1e-4;
    int64_t batch_size = 5;
    int64_t epochs = 20;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;

    void validate() const {
        if (lr <= 0.0) throw ValueError("train config: lr must be > 0");
        if (batch_size < 1) throw ValueError("train config: batch_size must be >= 1");
        if (epochs < 1) throw ValueError("train config: epochs must be >= 1");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ValueError("train config: betas must be in [0, 1)");
        if (adam_eps <= 0.0) throw ValueError("train config: adam_eps must be > 0");
    }

    nlohmann::json to_json() const {
        return {{"lr", lr},           {"batch_size", batch_size}, {"epochs", epochs},
                {"beta1", beta1},     {"beta2", beta2},           {"adam_eps", adam_eps},
                {"seed", seed}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("lr")) c.lr = j.at("lr").get<double>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int64_t>();
        if (j.contains("epochs")) c.epochs = j.at("epochs").get<int64_t>();
        if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
        if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
        if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<double>();
        if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
        c.validate();
        return c;
    }
};

// First and second moments in 64-bit regardless of parameter precision.
struct AdamState {
    int64_t t = 0;
    std::vector<std::vector<double>> m, v;
};

template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>*>>& params, AdamState& state,
               const TrainConfig& cfg) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(params[i].second->numel()), 0.0);
            state.v[i].assign(static_cast<size_t>(params[i].second->numel()), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw ShapeError("adam_step: state does not match parameter list");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = *params[pi].second;
        if (!p.tracks_grad()) throw Error("adam_step: parameter has no gradient buffer");
        T* w = p.data();
        const T* g = p.grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const int64_t n = p.numel();
        for (int64_t i = 0; i < n; ++i) {
            const double gi = static_cast<double>(g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] = static_cast<T>(static_cast<double>(w[i]) -
                                  cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

// ---- data loading ----

struct LoadedSample {
    SampleInfo info;
    Volume volume;
};

// Reads sample volumes; if brain_mask is given, multiplies it in.
inline std::vector<LoadedSample> load_samples(const DatasetManifest& manifest,
                                              const std::vector<SampleInfo>& samples,
                                              const Volume* brain_mask = nullptr) {
    std::vector<LoadedSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        Volume v = read_volume(manifest.resolve(s.volume_path));
        if (brain_mask) {
            require_same_shape(v.shape, brain_mask->shape, "load_samples");
            for (size_t i = 0; i < v.data.size(); ++i) v.data[i] *= brain_mask->data[i];
        }
        out.push_back({s, std::move(v)});
    }
    return out;
}

template <typename T>
Tensor<T> to_batch(const std::vector<const Volume*>& vols) {
    if (vols.empty()) throw ValueError("to_batch: empty volume list");
    const Shape3 s = vols[0]->shape;
    Tensor<T> t = Tensor<T>::zeros(
        {static_cast<int64_t>(vols.size()), 1, s.d, s.h, s.w});
    for (size_t i = 0; i < vols.size(); ++i) {
        require_same_shape(s, vols[i]->shape, "to_batch");
        T* dst = t.data() + static_cast<int64_t>(i) * s.numel();
        const float* src = vols[i]->data.data();
        for (int64_t e = 0; e < s.numel(); ++e) dst[e] = static_cast<T>(src[e]);
    }
    return t;
}

// ---- train loop ----

struct EpochStats {
    int64_t epoch = 0;  // 1-based
    double mean_loss = 0.0;
    double train_acc = 0.0;
};

template <typename T>
std::vector<EpochStats> train(Model<T>& model, const std::vector<LoadedSample>& train_set,
                              const NormStats& stats, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw ValueError("train: empty training set");
    std::vector<Volume> normalized;
    normalized.reserve(train_set.size());
    std::vector<int> labels;
    for (const auto& s : train_set) {
        normalized.push_back(normalize(s.volume, stats));
        labels.push_back(s.info.label);
    }

    Rng rng(mix_seed(cfg.seed, 3));
    AdamState adam;
    auto params = model.parameters();
    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<EpochStats> history;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t correct = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<const Volume*> vols;
            std::vector<int> batch_labels;
            for (size_t i = start; i < stop; ++i) {
                vols.push_back(&normalized[order[i]]);
                batch_labels.push_back(labels[order[i]]);
            }
            Tensor<T> batch = to_batch<T>(vols);
            ForwardOptions opts;
            opts.record = true;
            opts.param_grads = true;
            auto fwd = model.forward(batch, Mode::Train, opts, &rng);
            Tensor<T> loss = cross_entropy(*fwd.tape, fwd.probs, batch_labels);
            if (!std::isfinite(static_cast<double>(loss.item())))
                throw Error("train: loss diverged (epoch " + std::to_string(epoch) + ")");
            model.zero_grad();
            fwd.tape->backward(loss);
            adam_step(params, adam, cfg);

            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(stop - start);
            const int64_t K = model.config.n_classes;
            for (size_t i = 0; i < stop - start; ++i) {
                int64_t best = 0;
                for (int64_t k = 1; k < K; ++k)
                    if (fwd.probs[static_cast<int64_t>(i) * K + k] >
                        fwd.probs[static_cast<int64_t>(i) * K + best])
                        best = k;
                if (best == batch_labels[i]) ++correct;
            }
        }
        history.push_back({epoch, loss_sum / static_cast<double>(order.size()),
                           static_cast<double>(correct) / static_cast<double>(order.size())});
    }
    return history;
}

// ---- evaluation ----

// Rank-statistic ROC AUC with half-credit for score ties; empty when only
// one class is present.
inline std::optional<double> roc_auc(const std::vector<double>& scores,
                                     const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("roc_auc: need one label per score");
    const size_t n = scores.size();
    int64_t n_pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValueError("roc_auc: labels must be 0 or 1");
        n_pos += l;
    }
    const int64_t n_neg = static_cast<int64_t>(n) - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        // 1-based average rank over the tie group [i, j).
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t e = i; e < j; ++e)
            if (labels[idx[e]] == 1) pos_rank_sum += avg_rank;
        i = j;
    }
    const double auc = (pos_rank_sum - static_cast<double>(n_pos) *
                                           (static_cast<double>(n_pos) + 1.0) / 2.0) /
                       (static_cast<double>(n_pos) * static_cast<double>(n_neg));
    return auc;
}

struct EvalResult {
    double accuracy = 0.0;
    std::optional<double> roc_auc;
    struct PerSample {
        std::string id;
        double prob_ad = 0.0;
        int label = 0;
    };
    std::vector<PerSample> per_sample;

    nlohmann::json to_json() const {
        nlohmann::json per = nlohmann::json::array();
        for (const auto& p : per_sample)
            per.push_back({{"id", p.id}, {"prob_ad", p.prob_ad}, {"label", p.label}});
        return {{"accuracy", accuracy},
                {"roc_auc", roc_auc ? nlohmann::json(*roc_auc) : nlohmann::json()},
                {"n_samples", per_sample.size()},
                {"per_sample", per}};
    }
};

template <typename T>
EvalResult evaluate(Model<T>& model, const std::vector<LoadedSample>& samples,
                    const NormStats& stats) {
    if (samples.empty()) throw ValueError("evaluate: empty sample set");
    EvalResult res;
    std::vector<double> scores;
    std::vector<int> labels;
    int64_t correct = 0;
    const int64_t K = model.config.n_classes;
    for (const auto& s : samples) {
        const Volume v = normalize(s.volume, stats);
        Tensor<T> batch = to_batch<T>({&v});
        auto fwd = model.forward(batch, Mode::Eval);
        int64_t best = 0;
        for (int64_t k = 1; k < K; ++k)
            if (fwd.probs[k] > fwd.probs[best]) best = k;
        if (best == s.info.label) ++correct;
        const double prob_ad = static_cast<double>(fwd.probs[1]);
        scores.push_back(prob_ad);
        labels.push_back(s.info.label);
        res.per_sample.push_back({s.info.id, prob_ad, s.info.label});
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    res.roc_auc = roc_auc(scores, labels);
    return res;
}

}  // namespace voxrel
