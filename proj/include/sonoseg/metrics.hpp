#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sonoseg/dataset.hpp"
#include "sonoseg/labels.hpp"

namespace sonoseg {

/// C x C pixel-count matrix, rows = ground truth, cols = prediction,
/// accumulated over a sample set. Classes are 1-based outside, 0-based in
/// the matrix.
struct SegConfusion {
    SchemaKind schema = SchemaKind::dense;
    int num_classes = 0;
    std::vector<std::uint64_t> counts; // row-major C x C

    SegConfusion() = default;
    explicit SegConfusion(SchemaKind kind)
        : schema(kind), num_classes(schema_of(kind).num_classes()),
          counts(static_cast<std::size_t>(num_classes) * num_classes, 0) {}

    std::uint64_t& at(int gt1, int pred1) {
        return counts[static_cast<std::size_t>(gt1 - 1) * num_classes + (pred1 - 1)];
    }
    std::uint64_t at(int gt1, int pred1) const {
        return counts[static_cast<std::size_t>(gt1 - 1) * num_classes + (pred1 - 1)];
    }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    void add(const LabelMap& pred, const LabelMap& gt) {
        if (pred.schema != gt.schema)
            throw SchemaError("seg_confusion: prediction schema " + schema_of(pred.schema).name +
                              " vs ground truth " + schema_of(gt.schema).name);
        if (pred.schema != schema)
            throw SchemaError("seg_confusion: maps are " + schema_of(pred.schema).name +
                              ", confusion is " + schema_of(schema).name);
        if (pred.height != gt.height || pred.width != gt.width)
            throw ValidationError("seg_confusion: dims differ (" + std::to_string(pred.height) + "x" +
                                  std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                                  std::to_string(gt.width) + ")");
        for (std::size_t i = 0; i < pred.px.size(); ++i) at(gt.px[i], pred.px[i]) += 1;
    }

    SegConfusion& operator+=(const SegConfusion& o) {
        if (o.schema != schema) throw SchemaError("SegConfusion: schema mismatch in accumulation");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }

    bool operator==(const SegConfusion& o) const {
        return schema == o.schema && counts == o.counts;
    }
};

inline SegConfusion seg_confusion(const LabelMap& pred, const LabelMap& gt) {
    SegConfusion c(pred.schema);
    c.add(pred, gt);
    return c;
}

/// Per-class IoU, their mean, and pixel accuracy. Classes whose union is
/// zero (absent from both truth and prediction) are excluded from the mean.
struct SegScores {
    std::vector<double> iou;     // index i -> class i+1; meaningful iff present[i]
    std::vector<bool> present;
    double mean_iou = 0.0;
    double pixel_accuracy = 0.0;
};

inline SegScores iou_scores(const SegConfusion& c) {
    if (c.total() == 0) throw ValidationError("iou_scores: empty confusion matrix");
    SegScores s;
    s.iou.resize(static_cast<std::size_t>(c.num_classes), 0.0);
    s.present.resize(static_cast<std::size_t>(c.num_classes), false);
    double sum = 0.0;
    int n_present = 0;
    std::uint64_t diag_total = 0;
    for (int k = 1; k <= c.num_classes; ++k) {
        std::uint64_t row = 0, col = 0;
        for (int j = 1; j <= c.num_classes; ++j) {
            row += c.at(k, j);
            col += c.at(j, k);
        }
        const std::uint64_t diag = c.at(k, k);
        diag_total += diag;
        const std::uint64_t uni = row + col - diag;
        if (uni == 0) continue;
        const double iou = static_cast<double>(diag) / static_cast<double>(uni);
        s.iou[static_cast<std::size_t>(k - 1)] = iou;
        s.present[static_cast<std::size_t>(k - 1)] = true;
        sum += iou;
        ++n_present;
    }
    s.mean_iou = n_present > 0 ? sum / n_present : 0.0;
    s.pixel_accuracy = static_cast<double>(diag_total) / static_cast<double>(c.total());
    return s;
}

/// The scoring-time merge applied to dense *predictions* so they can be
/// compared on the sparse classes; same per-pixel table as
/// remap_dense_to_sparse.
inline LabelMap merge_dense_prediction_for_sparse_scoring(const LabelMap& pred) {
    if (pred.schema != SchemaKind::dense)
        throw SchemaError("merge_dense_prediction_for_sparse_scoring: input must be dense");
    return remap_dense_to_sparse(pred);
}

/// One-vs-rest precision/recall/F1 per diagnosis plus overall accuracy.
/// Any 0/0 ratio is defined as 0.
struct ClsReport {
    std::array<double, kNumDiagnoses> precision{};
    std::array<double, kNumDiagnoses> recall{};
    std::array<double, kNumDiagnoses> f1{};
    double accuracy = 0.0;
};

inline ClsReport cls_report(const std::vector<Diagnosis>& preds, const std::vector<Diagnosis>& gts) {
    if (preds.size() != gts.size())
        throw ValidationError("cls_report: " + std::to_string(preds.size()) + " predictions vs " +
                              std::to_string(gts.size()) + " ground truths");
    if (preds.empty()) throw ValidationError("cls_report: empty inputs");
    std::array<std::array<std::uint64_t, kNumDiagnoses>, kNumDiagnoses> m{}; // [gt][pred]
    std::uint64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        m[static_cast<std::size_t>(gts[i])][static_cast<std::size_t>(preds[i])] += 1;
        if (preds[i] == gts[i]) ++correct;
    }
    ClsReport r;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
    for (int k = 0; k < kNumDiagnoses; ++k) {
        std::uint64_t tp = m[k][k], fp = 0, fn = 0;
        for (int j = 0; j < kNumDiagnoses; ++j) {
            if (j == k) continue;
            fp += m[j][k];
            fn += m[k][j];
        }
        const double p = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double rec = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        r.precision[static_cast<std::size_t>(k)] = p;
        r.recall[static_cast<std::size_t>(k)] = rec;
        r.f1[static_cast<std::size_t>(k)] = (p + rec) == 0.0 ? 0.0 : 2.0 * p * rec / (p + rec);
    }
    return r;
}

// ---- fold aggregation --------------------------------------------------

/// Arithmetic mean and population standard deviation per metric across
/// folds. All folds must report the same metric names.
struct FoldAggregate {
    int k = 0;
    std::map<std::string, double> mean;
    std::map<std::string, double> stddev;
};

inline FoldAggregate fold_aggregate(const std::vector<std::map<std::string, double>>& folds) {
    if (folds.size() < 2)
        throw ValidationError("fold_aggregate: need k >= 2 folds, got " + std::to_string(folds.size()));
    for (const auto& f : folds)
        for (const auto& [name, v] : folds[0])
            if (!f.count(name)) throw ValidationError("fold_aggregate: metric '" + name + "' missing in a fold");
    FoldAggregate agg;
    agg.k = static_cast<int>(folds.size());
    for (const auto& [name, v0] : folds[0]) {
        // Accumulate in sorted order so the result is independent of fold
        // ordering despite float rounding.
        std::vector<double> vals;
        vals.reserve(folds.size());
        for (const auto& f : folds) vals.push_back(f.at(name));
        std::sort(vals.begin(), vals.end());
        double sum = 0.0;
        for (double v : vals) sum += v;
        const double mean = sum / agg.k;
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        agg.mean[name] = mean;
        agg.stddev[name] = std::sqrt(var / agg.k);
    }
    return agg;
}

// ---- metric maps and text reports ----------------------------------------

inline std::map<std::string, double> seg_metric_map(const SegScores& s, const LabelSchema& schema) {
    std::map<std::string, double> m;
    m["pixel_accuracy"] = s.pixel_accuracy;
    m["mean_iou"] = s.mean_iou;
    for (int k = 1; k <= schema.num_classes(); ++k)
        if (s.present[static_cast<std::size_t>(k - 1)])
            m["iou/" + schema.class_name(k)] = s.iou[static_cast<std::size_t>(k - 1)];
    return m;
}

inline std::map<std::string, double> cls_metric_map(const ClsReport& r) {
    std::map<std::string, double> m;
    m["accuracy"] = r.accuracy;
    for (int k = 0; k < kNumDiagnoses; ++k) {
        const std::string name = diagnosis_name(static_cast<Diagnosis>(k));
        m["precision/" + name] = r.precision[static_cast<std::size_t>(k)];
        m["recall/" + name] = r.recall[static_cast<std::size_t>(k)];
        m["f1/" + name] = r.f1[static_cast<std::size_t>(k)];
    }
    return m;
}

namespace detail {

inline std::string fmt3(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

inline std::string mean_std_cell(const FoldAggregate& agg, const std::string& key) {
    if (!agg.mean.count(key)) return "-";
    return fmt3(agg.mean.at(key)) + " +/- " + fmt3(agg.stddev.at(key));
}

inline void render_row(std::ostringstream& os, const std::vector<std::string>& cells,
                       const std::vector<int>& widths) {
    for (std::size_t i = 0; i < cells.size(); ++i)
        os << std::left << std::setw(widths[i]) << cells[i] << (i + 1 < cells.size() ? "  " : "");
    os << "\n";
}

} // namespace detail

/// Segmentation table: class columns with mean+/-std cells, one row per
/// model label. For dense runs pass both the merged (sparse-class) aggregate
/// and the dense-class aggregate; the dense block is printed below.
struct SegTableRow {
    std::string label; // e.g. "U-Net dense"
    FoldAggregate merged; // sparse-class scores (dense predictions merged)
    const FoldAggregate* dense = nullptr; // optional dense-class block
};

inline std::string render_seg_table(const std::vector<SegTableRow>& rows) {
    std::ostringstream os;
    const auto& sp = sparse_schema();
    std::vector<std::string> head{"CNN / Labels", "Pixel Acc", "mean IoU"};
    for (int k = 1; k <= sp.num_classes(); ++k) head.push_back(sp.class_name(k));
    std::vector<int> w(head.size());
    for (std::size_t i = 0; i < head.size(); ++i) w[i] = std::max<int>(16, static_cast<int>(head[i].size()));
    os << "Segmentation scores (mean +/- std over folds; sparse-class scoring)\n";
    detail::render_row(os, head, w);
    for (const auto& r : rows) {
        std::vector<std::string> cells{r.label, detail::mean_std_cell(r.merged, "pixel_accuracy"),
                                       detail::mean_std_cell(r.merged, "mean_iou")};
        for (int k = 1; k <= sp.num_classes(); ++k)
            cells.push_back(detail::mean_std_cell(r.merged, "iou/" + sp.class_name(k)));
        detail::render_row(os, cells, w);
    }
    bool any_dense = false;
    for (const auto& r : rows) any_dense |= r.dense != nullptr;
    if (any_dense) {
        const auto& de = dense_schema();
        os << "\nDense-class scores\n";
        std::vector<std::string> dhead{"CNN / Labels", "Pixel Acc", "mean IoU"};
        for (int k = 1; k <= de.num_classes(); ++k) dhead.push_back(de.class_name(k));
        std::vector<int> dw(dhead.size());
        for (std::size_t i = 0; i < dhead.size(); ++i)
            dw[i] = std::max<int>(16, static_cast<int>(dhead[i].size()) + 2);
        detail::render_row(os, dhead, dw);
        for (const auto& r : rows) {
            if (!r.dense) continue;
            std::vector<std::string> cells{r.label, detail::mean_std_cell(*r.dense, "pixel_accuracy"),
                                           detail::mean_std_cell(*r.dense, "mean_iou")};
            for (int k = 1; k <= de.num_classes(); ++k)
                cells.push_back(detail::mean_std_cell(*r.dense, "iou/" + de.class_name(k)));
            detail::render_row(os, cells, dw);
        }
    }
    return os.str();
}

/// Classification table: accuracy plus per-diagnosis precision/recall/F1
/// columns, one row per pretrain type.
struct ClsTableRow {
    std::string label; // e.g. "U-Net dense-pretrained"
    FoldAggregate agg;
};

inline std::string render_cls_table(const std::vector<ClsTableRow>& rows) {
    std::ostringstream os;
    std::vector<std::string> head{"CNN / Pretrain", "accuracy"};
    for (int k = 0; k < kNumDiagnoses; ++k) {
        const std::string name = diagnosis_name(static_cast<Diagnosis>(k));
        head.push_back(name + " P");
        head.push_back(name + " R");
        head.push_back(name + " F1");
    }
    std::vector<int> w(head.size());
    for (std::size_t i = 0; i < head.size(); ++i) w[i] = std::max<int>(16, static_cast<int>(head[i].size()));
    w[0] = 26;
    os << "Diagnostic classification scores (mean +/- std over folds)\n";
    detail::render_row(os, head, w);
    for (const auto& r : rows) {
        std::vector<std::string> cells{r.label, detail::mean_std_cell(r.agg, "accuracy")};
        for (int k = 0; k < kNumDiagnoses; ++k) {
            const std::string name = diagnosis_name(static_cast<Diagnosis>(k));
            cells.push_back(detail::mean_std_cell(r.agg, "precision/" + name));
            cells.push_back(detail::mean_std_cell(r.agg, "recall/" + name));
            cells.push_back(detail::mean_std_cell(r.agg, "f1/" + name));
        }
        detail::render_row(os, cells, w);
    }
    return os.str();
}

} // namespace sonoseg
