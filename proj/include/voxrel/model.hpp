#pragma once

#include <cstring>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "voxrel/io.hpp"
#include "voxrel/ops.hpp"
#include "voxrel/rng.hpp"
#include "voxrel/volume.hpp"

namespace voxrel {

// Per-block layer order. ConvBnPool drops every ReLU in the network
// (including the fully-connected ones), giving a rectifier-free ablation.
enum class BlockOrder { ConvBnReluPool, ConvReluBnPool, ConvBnPool };

inline std::string to_string(BlockOrder o) {
    switch (o) {
        case BlockOrder::ConvBnReluPool: return "conv_bn_relu_pool";
        case BlockOrder::ConvReluBnPool: return "conv_relu_bn_pool";
        case BlockOrder::ConvBnPool: return "conv_bn_pool";
    }
    throw ValueError("unknown block order");
}

inline BlockOrder block_order_from_string(const std::string& s) {
    if (s == "conv_bn_relu_pool") return BlockOrder::ConvBnReluPool;
    if (s == "conv_relu_bn_pool") return BlockOrder::ConvReluBnPool;
    if (s == "conv_bn_pool") return BlockOrder::ConvBnPool;
    throw ValueError("unknown block order \"" + s +
                     "\" (expected conv_bn_relu_pool, conv_relu_bn_pool, or conv_bn_pool)");
}

struct ModelConfig {
    Shape3 input_shape{32, 32, 32};
    int64_t in_channels = 1;
    std::vector<int64_t> conv_channels{8, 16, 32, 64};
    int64_t kernel = 3;
    int64_t padding = 1;
    std::vector<int64_t> fc_sizes{128, 64};
    int64_t n_classes = 2;
    double dropout_p = 0.8;
    BlockOrder block_order = BlockOrder::ConvBnReluPool;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Spatial dims after each conv+pool block, plus the flattened width feeding
// the fully-connected stack.
struct ShapeFlow {
    std::vector<Shape3> after_block;
    int64_t flatten_size = 0;
};

inline ShapeFlow shape_flow(const ModelConfig& cfg) {
    ShapeFlow flow;
    Shape3 s = cfg.input_shape;
    for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        auto conv_out = [&](int64_t d) { return d + 2 * cfg.padding - cfg.kernel + 1; };
        s = {conv_out(s.d), conv_out(s.h), conv_out(s.w)};
        if (s.d <= 0 || s.h <= 0 || s.w <= 0)
            throw ShapeError("model: convolution " + std::to_string(i) +
                             " produces an empty output");
        if (s.d < 2 || s.h < 2 || s.w < 2)
            throw ShapeError("model: spatial dims exhausted by pooling at block " +
                             std::to_string(i) + " (input to pool is " + s.str() + ")");
        s = {s.d / 2, s.h / 2, s.w / 2};
        flow.after_block.push_back(s);
    }
    flow.flatten_size = cfg.conv_channels.back() * s.numel();
    return flow;
}

inline void ModelConfig::validate() const {
    if (input_shape.d < 1 || input_shape.h < 1 || input_shape.w < 1)
        throw ValueError("model config: input_shape must be positive");
    if (in_channels < 1) throw ValueError("model config: in_channels must be >= 1");
    if (conv_channels.empty()) throw ValueError("model config: conv_channels must be nonempty");
    for (int64_t c : conv_channels)
        if (c < 1) throw ValueError("model config: conv channel counts must be >= 1");
    for (int64_t f : fc_sizes)
        if (f < 1) throw ValueError("model config: fc sizes must be >= 1");
    if (kernel < 1) throw ValueError("model config: kernel must be >= 1");
    if (padding < 0) throw ValueError("model config: padding must be >= 0");
    if (n_classes < 2) throw ValueError("model config: n_classes must be >= 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw ValueError("model config: dropout_p must be in [0, 1)");
    if (bn_momentum <= 0.0 || bn_momentum > 1.0)
        throw ValueError("model config: bn_momentum must be in (0, 1]");
    if (bn_eps <= 0.0) throw ValueError("model config: bn_eps must be > 0");
    shape_flow(*this);
}

inline nlohmann::json ModelConfig::to_json() const {
    return {{"input_shape", {input_shape.d, input_shape.h, input_shape.w}},
            {"in_channels", in_channels},
            {"conv_channels", conv_channels},
            {"kernel", kernel},
            {"padding", padding},
            {"fc_sizes", fc_sizes},
            {"n_classes", n_classes},
            {"dropout_p", dropout_p},
            {"block_order", to_string(block_order)},
            {"bn_momentum", bn_momentum},
            {"bn_eps", bn_eps},
            {"seed", seed}};
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    if (j.contains("input_shape")) {
        const auto& s = j.at("input_shape");
        if (!s.is_array() || s.size() != 3)
            throw FormatError("model config: input_shape must be [D,H,W]");
        cfg.input_shape = {s[0].get<int64_t>(), s[1].get<int64_t>(), s[2].get<int64_t>()};
    }
    if (j.contains("in_channels")) cfg.in_channels = j.at("in_channels").get<int64_t>();
    if (j.contains("conv_channels"))
        cfg.conv_channels = j.at("conv_channels").get<std::vector<int64_t>>();
    if (j.contains("kernel")) cfg.kernel = j.at("kernel").get<int64_t>();
    if (j.contains("padding")) cfg.padding = j.at("padding").get<int64_t>();
    if (j.contains("fc_sizes")) cfg.fc_sizes = j.at("fc_sizes").get<std::vector<int64_t>>();
    if (j.contains("n_classes")) cfg.n_classes = j.at("n_classes").get<int64_t>();
    if (j.contains("dropout_p")) cfg.dropout_p = j.at("dropout_p").get<double>();
    if (j.contains("block_order"))
        cfg.block_order = block_order_from_string(j.at("block_order").get<std::string>());
    if (j.contains("bn_momentum")) cfg.bn_momentum = j.at("bn_momentum").get<double>();
    if (j.contains("bn_eps")) cfg.bn_eps = j.at("bn_eps").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    cfg.validate();
    return cfg;
}

template <typename T>
struct ConvBlock {
    Tensor<T> weight, bias, gamma, beta;
    BatchNormState<T> bn;
};

template <typename T>
struct LinearLayer {
    Tensor<T> weight, bias;
};

struct ForwardOptions {
    // Keep a tape so backward() can run afterwards.
    bool record = false;
    // Include parameter gradients in the tape; off for input-only saliency.
    bool param_grads = false;
};

template <typename T>
struct ForwardResult {
    Tensor<T> input;
    Tensor<T> logits;
    Tensor<T> probs;
    std::shared_ptr<Tape<T>> tape;
};

template <typename T>
class Model {
  public:
    ModelConfig config;
    std::vector<ConvBlock<T>> blocks;
    std::vector<LinearLayer<T>> fc;

    explicit Model(ModelConfig cfg, bool init_params = true) : config(std::move(cfg)) {
        config.validate();
        const ShapeFlow flow = shape_flow(config);
        Rng rng(mix_seed(config.seed, 1));
        const int64_t k = config.kernel;
        int64_t c_in = config.in_channels;
        for (int64_t c_out : config.conv_channels) {
            ConvBlock<T> b;
            b.weight = Tensor<T>::zeros({c_out, c_in, k, k, k});
            if (init_params) fill_uniform(b.weight, c_in * k * k * k, rng);
            b.bias = Tensor<T>::zeros({c_out});
            b.gamma = Tensor<T>::full({c_out}, T(1));
            b.beta = Tensor<T>::zeros({c_out});
            b.bn = BatchNormState<T>(c_out);
            blocks.push_back(std::move(b));
            c_in = c_out;
        }
        int64_t width = flow.flatten_size;
        std::vector<int64_t> outs = config.fc_sizes;
        outs.push_back(config.n_classes);
        for (int64_t o : outs) {
            LinearLayer<T> l;
            l.weight = Tensor<T>::zeros({o, width});
            if (init_params) fill_uniform(l.weight, width, rng);
            l.bias = Tensor<T>::zeros({o});
            fc.push_back(std::move(l));
            width = o;
        }
        for (auto& [name, t] : parameters()) {
            (void)name;
            t->enable_grad();
        }
    }

    std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            out.emplace_back(p + ".conv.weight", &blocks[i].weight);
            out.emplace_back(p + ".conv.bias", &blocks[i].bias);
            out.emplace_back(p + ".bn.gamma", &blocks[i].gamma);
            out.emplace_back(p + ".bn.beta", &blocks[i].beta);
        }
        for (size_t i = 0; i < fc.size(); ++i) {
            const std::string p = "fc" + std::to_string(i);
            out.emplace_back(p + ".weight", &fc[i].weight);
            out.emplace_back(p + ".bias", &fc[i].bias);
        }
        return out;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& [name, t] : parameters()) {
            (void)name;
            n += t->numel();
        }
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : parameters()) {
            (void)name;
            t->zero_grad();
        }
    }

    ForwardResult<T> forward(const Tensor<T>& batch, Mode mode, const ForwardOptions& opts = {},
                             Rng* rng = nullptr) {
        if (batch.ndim() != 5 || batch.dim(1) != config.in_channels ||
            batch.dim(2) != config.input_shape.d || batch.dim(3) != config.input_shape.h ||
            batch.dim(4) != config.input_shape.w)
            throw ShapeError("forward: batch " + batch.shape_str() + " does not match configured input [N," +
                             std::to_string(config.in_channels) + "," + config.input_shape.str() + "]");
        if (mode == Mode::Train && config.dropout_p > 0.0 && rng == nullptr)
            throw ValueError("forward: train mode needs an rng for dropout");

        auto tape = std::make_shared<Tape<T>>();
        tape->recording = opts.record;
        auto param = [&](Tensor<T>& t) {
            Tensor<T> c = t;
            if (!opts.param_grads) c.grad_ = nullptr;
            return c;
        };

        const int64_t N = batch.dim(0);
        Tensor<T> x = batch;
        for (auto& b : blocks) {
            x = conv3d(*tape, x, param(b.weight), param(b.bias), 1, config.padding);
            const T mom = static_cast<T>(config.bn_momentum);
            const T eps = static_cast<T>(config.bn_eps);
            switch (config.block_order) {
                case BlockOrder::ConvBnReluPool:
                    x = batchnorm3d(*tape, x, param(b.gamma), param(b.beta), b.bn, mode, mom, eps);
                    x = relu(*tape, x);
                    break;
                case BlockOrder::ConvReluBnPool:
                    x = relu(*tape, x);
                    x = batchnorm3d(*tape, x, param(b.gamma), param(b.beta), b.bn, mode, mom, eps);
                    break;
                case BlockOrder::ConvBnPool:
                    x = batchnorm3d(*tape, x, param(b.gamma), param(b.beta), b.bn, mode, mom, eps);
                    break;
            }
            x = maxpool3d(*tape, x, 2, 2);
        }
        x = reshape(x, {N, x.numel() / N});
        if (config.dropout_p > 0.0 && mode == Mode::Train)
            x = dropout(*tape, x, config.dropout_p, mode, *rng);
        for (size_t i = 0; i < fc.size(); ++i) {
            x = linear(*tape, x, param(fc[i].weight), param(fc[i].bias));
            const bool last = i + 1 == fc.size();
            if (!last && config.block_order != BlockOrder::ConvBnPool) x = relu(*tape, x);
        }
        Tensor<T> probs = softmax(*tape, x);
        return {batch, x, probs, tape};
    }

  private:
    static void fill_uniform(Tensor<T>& t, int64_t fan_in, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        T* p = t.data();
        const int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
};

// ---- weight files ----
// Layout: magic "VSW1", u32 little-endian header length, JSON header
// (config echo, tensor table with byte offsets, batchnorm init flags),
// then raw little-endian f32 blobs in table order.

namespace detail {

template <typename T>
std::vector<std::tuple<std::string, std::vector<int64_t>, std::vector<T>*>> weight_entries(
    Model<T>& model) {
    std::vector<std::tuple<std::string, std::vector<int64_t>, std::vector<T>*>> out;
    for (size_t i = 0; i < model.blocks.size(); ++i) {
        auto& b = model.blocks[i];
        const std::string p = "block" + std::to_string(i);
        const int64_t c = b.bias.numel();
        out.emplace_back(p + ".conv.weight", b.weight.shape, b.weight.data_.get());
        out.emplace_back(p + ".conv.bias", b.bias.shape, b.bias.data_.get());
        out.emplace_back(p + ".bn.gamma", b.gamma.shape, b.gamma.data_.get());
        out.emplace_back(p + ".bn.beta", b.beta.shape, b.beta.data_.get());
        out.emplace_back(p + ".bn.running_mean", std::vector<int64_t>{c}, &b.bn.running_mean);
        out.emplace_back(p + ".bn.running_var", std::vector<int64_t>{c}, &b.bn.running_var);
    }
    for (size_t i = 0; i < model.fc.size(); ++i) {
        auto& l = model.fc[i];
        const std::string p = "fc" + std::to_string(i);
        out.emplace_back(p + ".weight", l.weight.shape, l.weight.data_.get());
        out.emplace_back(p + ".bias", l.bias.shape, l.bias.data_.get());
    }
    return out;
}

}  // namespace detail

template <typename T>
void save_weights(Model<T>& model, const std::string& path) {
    auto entries = detail::weight_entries(model);
    nlohmann::json table = nlohmann::json::array();
    std::vector<char> blob;
    for (auto& [name, shape, vec] : entries) {
        const size_t offset = blob.size();
        const size_t nbytes = vec->size() * sizeof(float);
        table.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"nbytes", nbytes}});
        const size_t pos = blob.size();
        blob.resize(pos + nbytes);
        if constexpr (std::is_same_v<T, float>) {
            std::memcpy(blob.data() + pos, vec->data(), nbytes);
        } else {
            std::vector<float> tmp(vec->begin(), vec->end());
            std::memcpy(blob.data() + pos, tmp.data(), nbytes);
        }
    }
    nlohmann::json bn_init = nlohmann::json::array();
    for (auto& b : model.blocks) bn_init.push_back(b.bn.initialized);
    const nlohmann::json header = {{"format_version", 1},
                                   {"dtype", "f32"},
                                   {"endianness", "little"},
                                   {"config", model.config.to_json()},
                                   {"bn_initialized", bn_init},
                                   {"tensors", table}};
    const std::string htext = header.dump();
    std::vector<char> bytes;
    bytes.reserve(8 + htext.size() + blob.size());
    const char magic[4] = {'V', 'S', 'W', '1'};
    bytes.insert(bytes.end(), magic, magic + 4);
    const uint32_t hlen = static_cast<uint32_t>(htext.size());
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
    bytes.insert(bytes.end(), htext.begin(), htext.end());
    bytes.insert(bytes.end(), blob.begin(), blob.end());
    atomic_write_file(path, bytes.data(), bytes.size());
}

// Rebuilds the model from the stored config echo and fills its parameters.
// When `expect` is given, its architecture must match the stored one.
template <typename T = float>
Model<T> load_weights(const std::string& path, const ModelConfig* expect = nullptr) {
    const std::vector<char> bytes = read_file_bytes(path);
    if (bytes.size() < 8) throw IoError("weights file truncated: " + path);
    if (std::memcmp(bytes.data(), "VSW1", 4) != 0)
        throw FormatError("not a weights file (bad magic): " + path);
    uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i)
        hlen |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
    if (bytes.size() < 8 + static_cast<size_t>(hlen))
        throw IoError("weights file truncated in header: " + path);
    nlohmann::json header =
        nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen, nullptr, false);
    if (header.is_discarded()) throw FormatError("invalid JSON header in " + path);
    if (!header.contains("format_version") || header.at("format_version").get<int>() != 1)
        throw FormatError("unsupported weights format_version in " + path);
    if (header.at("dtype").get<std::string>() != "f32")
        throw FormatError("unsupported weights dtype in " + path);

    const ModelConfig cfg = ModelConfig::from_json(header.at("config"));
    if (expect) {
        auto arch = [](const ModelConfig& c) {
            nlohmann::json j = c.to_json();
            j.erase("seed");
            j.erase("dropout_p");
            return j;
        };
        if (arch(cfg) != arch(*expect))
            throw ShapeError("weights in " + path + " were built for a different architecture");
    }
    Model<T> model(cfg, false);
    auto entries = detail::weight_entries(model);

    const size_t blob_start = 8 + static_cast<size_t>(hlen);
    size_t next = 0;
    const auto& table = header.at("tensors");
    if (table.size() != entries.size())
        throw FormatError("weights tensor table in " + path + " has " +
                          std::to_string(table.size()) + " entries, expected " +
                          std::to_string(entries.size()));
    for (const auto& row : table) {
        const std::string name = row.at("name").get<std::string>();
        auto& [ename, eshape, evec] = entries[next++];
        if (name != ename)
            throw FormatError("weights tensor \"" + name + "\" out of order in " + path +
                              " (expected \"" + ename + "\")");
        if (row.at("shape").get<std::vector<int64_t>>() != eshape)
            throw ShapeError("weights tensor \"" + name + "\" has mismatched shape in " + path);
        const size_t offset = row.at("offset").get<size_t>();
        const size_t nbytes = row.at("nbytes").get<size_t>();
        if (nbytes != evec->size() * sizeof(float))
            throw ShapeError("weights tensor \"" + name + "\" has mismatched size in " + path);
        if (blob_start + offset + nbytes > bytes.size())
            throw IoError("weights file truncated: " + path + " (tensor \"" + name +
                          "\" needs bytes up to " + std::to_string(blob_start + offset + nbytes) +
                          ", file has " + std::to_string(bytes.size()) + ")");
        if constexpr (std::is_same_v<T, float>) {
            std::memcpy(evec->data(), bytes.data() + blob_start + offset, nbytes);
        } else {
            std::vector<float> tmp(evec->size());
            std::memcpy(tmp.data(), bytes.data() + blob_start + offset, nbytes);
            for (size_t i = 0; i < tmp.size(); ++i) (*evec)[i] = static_cast<T>(tmp[i]);
        }
    }
    const auto& bn_init = header.at("bn_initialized");
    if (bn_init.size() != model.blocks.size())
        throw FormatError("weights bn_initialized length mismatch in " + path);
    for (size_t i = 0; i < model.blocks.size(); ++i)
        model.blocks[i].bn.initialized = bn_init[i].get<bool>();
    return model;
}

}  // namespace voxrel
