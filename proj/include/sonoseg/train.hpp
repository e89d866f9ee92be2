#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/autodiff.hpp"
#include "sonoseg/dataset.hpp"
#include "sonoseg/metrics.hpp"
#include "sonoseg/optim.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/unet.hpp"

namespace sonoseg {

enum class EvalSplit { test, validation };

constexpr int kDefaultSegEpochs = 50;
constexpr int kDefaultClsEpochs = 12;

struct TrainConfig {
    double lr = 0.001;
    int batch_size = 4;
    int epochs = kDefaultSegEpochs;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    double plateau_min_delta = 1e-4;
    EvalSplit eval_split = EvalSplit::test; // mirrors the original protocol
    std::uint64_t shuffle_seed = 0;
    bool freeze_seg = false;

    void validate() const {
        if (!(lr > 0.0)) throw ValidationError("TrainConfig: lr must be > 0");
        if (batch_size < 1) throw ValidationError("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw ValidationError("TrainConfig: epochs must be >= 1");
        if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
            throw ValidationError("TrainConfig: plateau_factor must be in (0,1)");
        if (plateau_patience < 1) throw ValidationError("TrainConfig: plateau_patience must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;       // 1-based
    double train_loss = 0.0;
    double eval_metric = 0.0;
    double lr = 0.0;     // rate used during this epoch
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_metric = 0.0;
};

inline void write_history_jsonl(const TrainHistory& h, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    for (const auto& e : h.epochs) {
        nlohmann::json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"eval_metric", e.eval_metric}, {"lr", e.lr}};
        f << j.dump() << "\n";
    }
}

struct TrainResult {
    ModelWeights weights; // best-metric checkpoint
    TrainHistory history;
};

// ---- batching helpers --------------------------------------------------

namespace detail {

inline void check_homogeneous(const std::vector<Sample>& samples, const char* what) {
    if (samples.empty()) throw ValidationError(std::string(what) + ": empty sample set");
    const int h = samples[0].grey.height, w = samples[0].grey.width;
    for (const auto& s : samples)
        if (s.grey.height != h || s.grey.width != w)
            throw ValidationError(std::string(what) + ": sample " + s.id + " has mismatched dims");
}

inline Tensor image_batch(const std::vector<Sample>& samples, const std::vector<int>& idx, int lo, int hi) {
    const int H = samples[0].grey.height, W = samples[0].grey.width;
    Tensor t({hi - lo, 1, H, W});
    for (int b = lo; b < hi; ++b) {
        const auto& px = samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])].grey.px;
        std::copy(px.begin(), px.end(), t.data() + static_cast<std::int64_t>(b - lo) * H * W);
    }
    return t;
}

inline std::vector<std::int32_t> pixel_targets(const std::vector<Sample>& samples, const std::vector<int>& idx,
                                               int lo, int hi) {
    const int H = samples[0].labels.height, W = samples[0].labels.width;
    std::vector<std::int32_t> t;
    t.reserve(static_cast<std::size_t>(hi - lo) * H * W);
    for (int b = lo; b < hi; ++b)
        for (std::uint8_t v : samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])].labels.px)
            t.push_back(static_cast<std::int32_t>(v) - 1); // 1-based labels to 0-based channels
    return t;
}

inline std::vector<std::int32_t> diag_targets(const std::vector<Sample>& samples, const std::vector<int>& idx,
                                              int lo, int hi) {
    std::vector<std::int32_t> t;
    t.reserve(static_cast<std::size_t>(hi - lo));
    for (int b = lo; b < hi; ++b)
        t.push_back(static_cast<std::int32_t>(samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])].diagnosis));
    return t;
}

template <typename LossFn>
double run_epoch(ModelWeights& weights, AdamState& adam, const std::vector<Sample>& train,
                 const TrainConfig& cfg, int epoch, double lr, LossFn&& batch_loss) {
    std::vector<int> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    SplitMix64 rng(derive_seed(cfg.shuffle_seed, "epoch/" + std::to_string(epoch)));
    shuffle(idx, rng);

    double loss_sum = 0.0;
    int batches = 0;
    for (int lo = 0; lo < static_cast<int>(train.size()); lo += cfg.batch_size) {
        const int hi = std::min<int>(lo + cfg.batch_size, static_cast<int>(train.size()));
        Graph<float> g;
        auto params = add_weights(g, weights);
        const NodeId loss = batch_loss(g, params, idx, lo, hi);
        g.backward(loss);
        loss_sum += g.value(loss)[0];
        ++batches;

        std::vector<std::pair<std::string, Tensor>> grads;
        grads.reserve(params.items.size());
        for (const auto& [name, id] : params.items) {
            if (cfg.freeze_seg && name.rfind("head.", 0) != 0) continue;
            grads.emplace_back(name, g.grad(id));
        }
        adam.step(weights, grads, lr);
    }
    return loss_sum / batches;
}

} // namespace detail

// ---- evaluation --------------------------------------------------------

inline LabelMap logits_to_labels(const Tensor& logits, int batch_index, SchemaKind kind) {
    const int C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    LabelMap out(kind, H, W, 1);
    const float* base = logits.data() + static_cast<std::int64_t>(batch_index) * C * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
        int best = 0;
        float bv = base[p];
        for (int c = 1; c < C; ++c) {
            const float v = base[c * plane + p];
            if (v > bv) { // ties keep the lowest class index
                bv = v;
                best = c;
            }
        }
        out.px[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best + 1);
    }
    return out;
}

struct SegEval {
    SegConfusion confusion;
    SegScores scores;
};

inline SegEval evaluate_segmentation(const ModelWeights& w, const std::vector<Sample>& samples,
                                     int batch_size = 4) {
    detail::check_homogeneous(samples, "evaluate_segmentation");
    const SchemaKind kind = samples[0].labels.schema;
    if (schema_of(kind).num_classes() != w.unet.n_seg_classes)
        throw SchemaError("evaluate_segmentation: model has " + std::to_string(w.unet.n_seg_classes) +
                          " classes, labels are " + schema_of(kind).name);
    std::vector<int> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    SegConfusion conf(kind);
    for (int lo = 0; lo < static_cast<int>(samples.size()); lo += batch_size) {
        const int hi = std::min<int>(lo + batch_size, static_cast<int>(samples.size()));
        const Tensor logits = seg_forward(w, detail::image_batch(samples, idx, lo, hi));
        for (int b = lo; b < hi; ++b)
            conf.add(logits_to_labels(logits, b - lo, kind), samples[static_cast<std::size_t>(b)].labels);
    }
    return {conf, iou_scores(conf)};
}

inline std::vector<Diagnosis> predict_diagnoses(const ModelWeights& w, const std::vector<Sample>& samples,
                                                int batch_size = 4) {
    detail::check_homogeneous(samples, "predict_diagnoses");
    std::vector<int> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<Diagnosis> preds;
    preds.reserve(samples.size());
    for (int lo = 0; lo < static_cast<int>(samples.size()); lo += batch_size) {
        const int hi = std::min<int>(lo + batch_size, static_cast<int>(samples.size()));
        const Tensor probs = cls_forward(w, detail::image_batch(samples, idx, lo, hi));
        for (int b = lo; b < hi; ++b) {
            const float* row = probs.data() + static_cast<std::int64_t>(b - lo) * probs.dim(1);
            int best = 0;
            for (int c = 1; c < probs.dim(1); ++c)
                if (row[c] > row[best]) best = c;
            preds.push_back(static_cast<Diagnosis>(best));
        }
    }
    return preds;
}

inline ClsReport evaluate_classification(const ModelWeights& w, const std::vector<Sample>& samples) {
    std::vector<Diagnosis> gts;
    gts.reserve(samples.size());
    for (const auto& s : samples) gts.push_back(s.diagnosis);
    return cls_report(predict_diagnoses(w, samples), gts);
}

// ---- training loops ------------------------------------------------------

/// Minimizes pixelwise cross-entropy over shuffled mini-batches, evaluating
/// mean IoU on `eval` after every epoch. Returns the best-metric checkpoint
/// (highest eval mean IoU, earliest epoch on ties) plus the full history.
inline TrainResult train_segmentation(const std::vector<Sample>& train, const std::vector<Sample>& eval,
                                      const UNetConfig& arch, const TrainConfig& cfg, std::uint64_t init_seed) {
    cfg.validate();
    detail::check_homogeneous(train, "train_segmentation(train)");
    detail::check_homogeneous(eval, "train_segmentation(eval)");
    const SchemaKind kind = train[0].labels.schema;
    for (const auto& s : train)
        if (s.labels.schema != kind) throw SchemaError("train_segmentation: mixed label schemas in train set");
    UNetConfig mcfg = arch;
    mcfg.n_seg_classes = schema_of(kind).num_classes();

    ModelWeights weights = build_unet(mcfg, init_seed);
    AdamState adam(weights);
    PlateauScheduler sched(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);
    double lr = cfg.lr;

    TrainResult result;
    result.weights = weights;
    result.history.best_metric = -1.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double mean_loss;
        try {
            mean_loss = detail::run_epoch(weights, adam, train, cfg, epoch, lr,
                                          [&](Graph<float>& g, const GraphParams<float>& p,
                                              const std::vector<int>& idx, int lo, int hi) {
                                              const NodeId in = g.constant(detail::image_batch(train, idx, lo, hi));
                                              const NodeId logits = seg_forward_graph(g, p, mcfg, in);
                                              const NodeId probs = g.softmax_channels(logits);
                                              return g.cross_entropy_pixelwise(
                                                  probs, detail::pixel_targets(train, idx, lo, hi));
                                          });
        } catch (const NumericError& e) {
            throw NumericError("train_segmentation: non-finite loss at epoch " + std::to_string(epoch) +
                               ": " + e.what());
        }
        const double metric = evaluate_segmentation(weights, eval, cfg.batch_size).scores.mean_iou;
        result.history.epochs.push_back({epoch, mean_loss, metric, lr});
        if (metric > result.history.best_metric) {
            result.history.best_metric = metric;
            result.history.best_epoch = epoch;
            result.weights = weights;
        }
        lr = sched.update(metric, lr);
    }
    return result;
}

/// Classification training, optionally from pretrained segmentation weights
/// (the reverse-transfer path). Attaches the head if absent, then trains
/// end-to-end on image-level cross-entropy; with freeze_seg only the head
/// parameters update. Best checkpoint by eval accuracy.
inline TrainResult train_classification(const std::vector<Sample>& train, const std::vector<Sample>& eval,
                                        const UNetConfig& arch, const TrainConfig& cfg,
                                        const std::optional<ModelWeights>& pretrained,
                                        std::uint64_t init_seed) {
    cfg.validate();
    detail::check_homogeneous(train, "train_classification(train)");
    detail::check_homogeneous(eval, "train_classification(eval)");

    ModelWeights weights;
    if (pretrained) {
        UNetConfig expect = arch;
        expect.n_seg_classes = pretrained->unet.n_seg_classes;
        if (!(pretrained->unet == expect))
            throw ValidationError(
                "train_classification: pretrained weights architecture (depth " +
                std::to_string(pretrained->unet.depth) + ", base " + std::to_string(pretrained->unet.base_channels) +
                ") does not match the configured architecture (depth " + std::to_string(arch.depth) + ", base " +
                std::to_string(arch.base_channels) + ")");
        weights = *pretrained;
    } else {
        weights = build_unet(arch, init_seed);
    }
    if (!weights.classifier)
        weights = attach_cls_head(weights, ClassifierConfig{weights.unet.n_seg_classes, kNumDiagnoses},
                                  derive_seed(init_seed, "cls-head"));
    const UNetConfig mcfg = weights.unet;
    const ClassifierConfig cc = *weights.classifier;

    AdamState adam(weights);
    PlateauScheduler sched(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);
    double lr = cfg.lr;

    TrainResult result;
    result.weights = weights;
    result.history.best_metric = -1.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double mean_loss;
        try {
            mean_loss = detail::run_epoch(weights, adam, train, cfg, epoch, lr,
                                          [&](Graph<float>& g, const GraphParams<float>& p,
                                              const std::vector<int>& idx, int lo, int hi) {
                                              const NodeId in = g.constant(detail::image_batch(train, idx, lo, hi));
                                              const NodeId probs = cls_forward_graph(g, p, mcfg, cc, in);
                                              return g.cross_entropy_rows(probs,
                                                                          detail::diag_targets(train, idx, lo, hi));
                                          });
        } catch (const NumericError& e) {
            throw NumericError("train_classification: non-finite loss at epoch " + std::to_string(epoch) +
                               ": " + e.what());
        }
        const double metric = evaluate_classification(weights, eval).accuracy;
        result.history.epochs.push_back({epoch, mean_loss, metric, lr});
        if (metric > result.history.best_metric) {
            result.history.best_metric = metric;
            result.history.best_epoch = epoch;
            result.weights = weights;
        }
        lr = sched.update(metric, lr);
    }
    return result;
}

} // namespace sonoseg
