#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sonoseg/autodiff.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

/// Classic U-Net: per level two 3x3 pad-1 convs + relu, maxpool down,
/// transposed-conv up, skip concatenation, final 1x1 conv to class logits.
/// Channel width doubles per level.
struct UNetConfig {
    int in_channels = 1;
    int depth = 3;        // encoder/decoder levels, >= 2
    int base_channels = 8;
    int n_seg_classes = 7;

    void validate() const {
        if (in_channels < 1) throw ValidationError("UNetConfig: in_channels must be >= 1");
        if (depth < 2) throw ValidationError("UNetConfig: depth must be >= 2");
        if (base_channels < 1) throw ValidationError("UNetConfig: base_channels must be >= 1");
        if (n_seg_classes < 2) throw ValidationError("UNetConfig: n_seg_classes must be >= 2");
    }

    int level_channels(int level) const { return base_channels << level; }
    int bottleneck_channels() const { return base_channels << depth; }
    int spatial_divisor() const { return 1 << depth; }

    bool operator==(const UNetConfig&) const = default;
};

struct ClassifierConfig {
    int n_seg_classes = 7;
    int n_diag_classes = 3;

    bool operator==(const ClassifierConfig&) const = default;
};

struct ParamSpec {
    std::string name;
    Shape shape;
    int fan_in; // contributors per output element; init bound is 1/sqrt(fan_in)
};

inline std::vector<ParamSpec> unet_param_specs(const UNetConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    auto conv = [&](const std::string& name, int cin, int cout, int k) {
        specs.push_back({name + ".weight", {cout, cin, k, k}, cin * k * k});
        specs.push_back({name + ".bias", {cout}, cin * k * k});
    };
    for (int i = 0; i < cfg.depth; ++i) {
        const int cin = i == 0 ? cfg.in_channels : cfg.level_channels(i - 1);
        const int ch = cfg.level_channels(i);
        conv("enc" + std::to_string(i) + ".conv1", cin, ch, 3);
        conv("enc" + std::to_string(i) + ".conv2", ch, ch, 3);
    }
    conv("bottleneck.conv1", cfg.level_channels(cfg.depth - 1), cfg.bottleneck_channels(), 3);
    conv("bottleneck.conv2", cfg.bottleneck_channels(), cfg.bottleneck_channels(), 3);
    for (int i = cfg.depth - 1; i >= 0; --i) {
        const int above = i == cfg.depth - 1 ? cfg.bottleneck_channels() : cfg.level_channels(i + 1);
        const int ch = cfg.level_channels(i);
        // Transposed 2x2 stride-2 kernel, Cin x Cout x 2 x 2, no bias; each
        // output pixel receives one tap per input channel.
        specs.push_back({"dec" + std::to_string(i) + ".up.weight", {above, ch, 2, 2}, above});
        conv("dec" + std::to_string(i) + ".conv1", 2 * ch, ch, 3);
        conv("dec" + std::to_string(i) + ".conv2", ch, ch, 3);
    }
    conv("final", cfg.level_channels(0), cfg.n_seg_classes, 1);
    return specs;
}

inline std::vector<ParamSpec> head_param_specs(const ClassifierConfig& cc) {
    return {{"head.weight", {cc.n_diag_classes, cc.n_seg_classes}, cc.n_seg_classes},
            {"head.bias", {cc.n_diag_classes}, cc.n_seg_classes}};
}

/// Named parameter collection plus the architecture that interprets it.
struct ModelWeights {
    UNetConfig unet;
    std::optional<ClassifierConfig> classifier;
    std::vector<std::pair<std::string, Tensor>> params; // fixed architecture order

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw ValidationError("ModelWeights: no parameter named '" + name + "'");
    }

    Tensor& get_mut(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw ValidationError("ModelWeights: no parameter named '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return true;
        return false;
    }

    std::int64_t total_params() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params) n += t.numel();
        return n;
    }
};

namespace detail {

// Fan-in-scaled uniform bound sqrt(6/fan_in): variance 2/fan_in, which keeps
// activation magnitudes stable through the relu conv stack.
inline double init_bound(int fan_in) { return std::sqrt(6.0 / std::max(1, fan_in)); }

} // namespace detail

/// Fan-in-scaled uniform init, all parameters drawn in architecture order
/// from one SplitMix64 stream: value in [-b, b) with b = sqrt(6/fan_in).
inline ModelWeights build_unet(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelWeights w;
    w.unet = cfg;
    SplitMix64 rng(seed);
    for (const auto& spec : unet_param_specs(cfg))
        w.params.emplace_back(spec.name, Tensor::uniform(spec.shape, rng, detail::init_bound(spec.fan_in)));
    return w;
}

/// Adds the diagnosis head (FC n_diag x n_seg + bias) without touching any
/// segmentation parameter. The classification path becomes
/// softmax -> global average pool -> fully connected -> softmax.
inline ModelWeights attach_cls_head(const ModelWeights& w, const ClassifierConfig& cc, std::uint64_t seed) {
    if (w.classifier) throw UsageError("attach_cls_head: model already has a classification head");
    if (cc.n_seg_classes != w.unet.n_seg_classes)
        throw ValidationError("attach_cls_head: head expects " + std::to_string(cc.n_seg_classes) +
                              " segmentation classes, model has " + std::to_string(w.unet.n_seg_classes));
    if (cc.n_diag_classes < 2) throw ValidationError("attach_cls_head: n_diag_classes must be >= 2");
    ModelWeights out = w;
    out.classifier = cc;
    SplitMix64 rng(seed);
    for (const auto& spec : head_param_specs(cc))
        out.params.emplace_back(spec.name, Tensor::uniform(spec.shape, rng, detail::init_bound(spec.fan_in)));
    return out;
}

// ---- forward graphs ---------------------------------------------------------

template <typename T>
struct GraphParams {
    std::vector<std::pair<std::string, NodeId>> items;

    NodeId at(const std::string& name) const {
        for (const auto& [n, id] : items)
            if (n == name) return id;
        throw ValidationError("GraphParams: no parameter named '" + name + "'");
    }
};

template <typename T>
GraphParams<T> add_weights(Graph<T>& g, const ModelWeights& w) {
    GraphParams<T> p;
    p.items.reserve(w.params.size());
    for (const auto& [name, t] : w.params) {
        if constexpr (std::is_same_v<T, float>)
            p.items.emplace_back(name, g.param(name, t));
        else
            p.items.emplace_back(name, g.param(name, t.template cast<T>()));
    }
    return p;
}

template <typename T>
NodeId seg_forward_graph(Graph<T>& g, const GraphParams<T>& p, const UNetConfig& cfg, NodeId input) {
    const auto& in = g.value(input);
    require_ndim(in, 4, "seg_forward input");
    if (in.dim(1) != cfg.in_channels)
        throw ShapeError("seg_forward: input has " + std::to_string(in.dim(1)) + " channels, expected " +
                         std::to_string(cfg.in_channels));
    const int div = cfg.spatial_divisor();
    if (in.dim(2) % div != 0 || in.dim(3) % div != 0)
        throw ShapeError("seg_forward: spatial dims " + std::to_string(in.dim(2)) + "x" +
                         std::to_string(in.dim(3)) + " must be divisible by " + std::to_string(div) +
                         " (depth " + std::to_string(cfg.depth) + ")");

    auto conv_block = [&](NodeId x, const std::string& name) {
        return g.relu(g.conv2d(x, p.at(name + ".weight"), p.at(name + ".bias"), 1));
    };

    NodeId x = input;
    std::vector<NodeId> skips;
    for (int i = 0; i < cfg.depth; ++i) {
        x = conv_block(x, "enc" + std::to_string(i) + ".conv1");
        x = conv_block(x, "enc" + std::to_string(i) + ".conv2");
        skips.push_back(x);
        x = g.maxpool2d(x);
    }
    x = conv_block(x, "bottleneck.conv1");
    x = conv_block(x, "bottleneck.conv2");
    for (int i = cfg.depth - 1; i >= 0; --i) {
        x = g.transposed_conv2d(x, p.at("dec" + std::to_string(i) + ".up.weight"));
        x = g.concat_channels(skips[static_cast<std::size_t>(i)], x);
        x = conv_block(x, "dec" + std::to_string(i) + ".conv1");
        x = conv_block(x, "dec" + std::to_string(i) + ".conv2");
    }
    return g.conv2d(x, p.at("final.weight"), p.at("final.bias"), 0);
}

template <typename T>
NodeId cls_forward_graph(Graph<T>& g, const GraphParams<T>& p, const UNetConfig& cfg,
                         const ClassifierConfig& cc, NodeId input) {
    const NodeId logits = seg_forward_graph(g, p, cfg, input);
    const NodeId seg_probs = g.softmax_channels(logits);
    const NodeId pooled = g.global_avg_pool_channels(seg_probs);
    const NodeId scores = g.fully_connected(pooled, p.at("head.weight"), p.at("head.bias"));
    // Row softmax via the channel op on an N x C x 1 x 1 view.
    const auto& sv = g.value(scores);
    (void)cc;
    const NodeId as4d = g.reshape_view(scores, {sv.dim(0), sv.dim(1), 1, 1});
    const NodeId probs4d = g.softmax_channels(as4d);
    return g.reshape_view(probs4d, {sv.dim(0), sv.dim(1)});
}

// ---- inference conveniences -------------------------------------------------

/// Per-pixel logits for a batch; argmax over channels is the prediction.
inline Tensor seg_forward(const ModelWeights& w, const Tensor& batch) {
    Graph<float> g;
    auto p = add_weights(g, w);
    return g.value(seg_forward_graph(g, p, w.unet, g.constant(batch)));
}

/// Diagnosis probabilities, one row per batch element summing to 1.
inline Tensor cls_forward(const ModelWeights& w, const Tensor& batch) {
    if (!w.classifier) throw UsageError("cls_forward: model has no classification head");
    Graph<float> g;
    auto p = add_weights(g, w);
    return g.value(cls_forward_graph(g, p, w.unet, *w.classifier, g.constant(batch)));
}

// ---- checkpoint format --------------------------------------------------

/// Checkpoint layout (little-endian):
///   bytes 0..7   magic "SSEGCKPT"
///   u32          format version (1)
///   u32          JSON header length
///   header       {"format_version", "unet", "classifier"?, "params": [{name, shape}...]}
///   payload      raw f32 data per parameter, in header order
constexpr char kCheckpointMagic[8] = {'S', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline nlohmann::json unet_to_json(const UNetConfig& c) {
    return {{"in_channels", c.in_channels},
            {"depth", c.depth},
            {"base_channels", c.base_channels},
            {"n_seg_classes", c.n_seg_classes}};
}

inline UNetConfig unet_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.depth = j.at("depth").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.n_seg_classes = j.at("n_seg_classes").get<int>();
    return c;
}

} // namespace detail

inline void save_weights(const ModelWeights& w, const std::string& path) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["unet"] = detail::unet_to_json(w.unet);
    if (w.classifier)
        header["classifier"] = {{"n_seg_classes", w.classifier->n_seg_classes},
                                {"n_diag_classes", w.classifier->n_diag_classes}};
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& [name, t] : w.params) plist.push_back({{"name", name}, {"shape", t.shape()}});
    header["params"] = plist;
    const std::string hs = header.dump();

    std::string buf;
    buf.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(hs.size()));
    buf += hs;
    for (const auto& [name, t] : w.params) {
        static_assert(sizeof(float) == 4);
        const std::size_t off = buf.size();
        buf.resize(off + static_cast<std::size_t>(t.numel()) * 4);
        std::memcpy(buf.data() + off, t.data(), static_cast<std::size_t>(t.numel()) * 4);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline ModelWeights load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (buf.size() < 16) throw IoError(path + ": unexpected EOF in checkpoint header");
    if (std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw IoError(path + ": bad magic, not a checkpoint file");
    const std::uint32_t version = detail::get_u32(p + 8);
    if (version != kCheckpointVersion)
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t hlen = detail::get_u32(p + 12);
    if (buf.size() < 16 + static_cast<std::size_t>(hlen))
        throw IoError(path + ": unexpected EOF in checkpoint header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(16, hlen));
    } catch (const nlohmann::json::exception& ex) {
        throw IoError(path + ": bad checkpoint header: " + ex.what());
    }

    ModelWeights w;
    try {
        w.unet = detail::unet_from_json(header.at("unet"));
        if (header.contains("classifier")) {
            ClassifierConfig cc;
            cc.n_seg_classes = header["classifier"].at("n_seg_classes").get<int>();
            cc.n_diag_classes = header["classifier"].at("n_diag_classes").get<int>();
            w.classifier = cc;
        }
    } catch (const nlohmann::json::exception& ex) {
        throw IoError(path + ": bad checkpoint header: " + ex.what());
    }

    // Header must agree with the architecture it declares.
    auto expected = unet_param_specs(w.unet);
    if (w.classifier)
        for (auto& s : head_param_specs(*w.classifier)) expected.push_back(std::move(s));
    const auto& plist = header.at("params");
    if (plist.size() != expected.size())
        throw IoError(path + ": header lists " + std::to_string(plist.size()) + " parameters, architecture has " +
                      std::to_string(expected.size()));

    std::size_t off = 16 + hlen;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const std::string name = plist[i].at("name").get<std::string>();
        const Shape shape = plist[i].at("shape").get<Shape>();
        if (name != expected[i].name)
            throw IoError(path + ": parameter " + std::to_string(i) + " is '" + name + "', architecture requires '" +
                          expected[i].name + "'");
        if (shape != expected[i].shape)
            throw IoError(path + ": shape mismatch for parameter '" + name + "': header says " + shape_str(shape) +
                          ", architecture requires " + shape_str(expected[i].shape));
        const std::int64_t n = shape_numel(shape);
        if (off + static_cast<std::size_t>(n) * 4 > buf.size())
            throw IoError(path + ": unexpected EOF in data for parameter '" + name + "'");
        Tensor t(shape);
        std::memcpy(t.data(), buf.data() + off, static_cast<std::size_t>(n) * 4);
        off += static_cast<std::size_t>(n) * 4;
        w.params.emplace_back(name, std::move(t));
    }
    if (off != buf.size()) throw IoError(path + ": trailing bytes after parameter data");
    return w;
}

} // namespace sonoseg
