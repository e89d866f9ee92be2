#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/augment.hpp"
#include "sonoseg/dataset.hpp"
#include "sonoseg/metrics.hpp"
#include "sonoseg/train.hpp"
#include "sonoseg/unet.hpp"

namespace sonoseg {

enum class Grouping { by_group_id, by_augmented_image };

enum class Task { seg_dense, seg_sparse, cls_dense_pretrain, cls_sparse_pretrain, cls_scratch };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::seg_dense: return "seg_dense";
        case Task::seg_sparse: return "seg_sparse";
        case Task::cls_dense_pretrain: return "cls_dense_pretrain";
        case Task::cls_sparse_pretrain: return "cls_sparse_pretrain";
        case Task::cls_scratch: return "cls_scratch";
    }
    throw ValidationError("invalid task value");
}

inline Task task_from_name(const std::string& s) {
    for (Task t : {Task::seg_dense, Task::seg_sparse, Task::cls_dense_pretrain, Task::cls_sparse_pretrain,
                   Task::cls_scratch})
        if (s == task_name(t)) return t;
    throw ValidationError("unknown task '" + s + "'");
}

inline bool is_cls_task(Task t) {
    return t == Task::cls_dense_pretrain || t == Task::cls_sparse_pretrain || t == Task::cls_scratch;
}

inline const char* grouping_name(Grouping g) {
    return g == Grouping::by_group_id ? "by_group_id" : "by_augmented_image";
}

inline Grouping grouping_from_name(const std::string& s) {
    if (s == "by_group_id") return Grouping::by_group_id;
    if (s == "by_augmented_image") return Grouping::by_augmented_image;
    throw ValidationError("unknown grouping '" + s + "'");
}

/// Fold assignment for every sample id. In by_group_id mode no group ever
/// spans two folds; by_augmented_image shuffles augmented samples uniformly
/// (the original image-level protocol, which can leak augmented copies of
/// one source image across folds).
struct FoldSpec {
    int k = 3;
    Grouping grouping = Grouping::by_group_id;
    std::uint64_t seed = 0;
    std::map<std::string, int> assignment;
};

inline FoldSpec kfold_split(const std::vector<Sample>& samples, int k, Grouping grouping,
                            std::uint64_t seed) {
    if (k < 2) throw ValidationError("kfold_split: k must be >= 2");
    FoldSpec spec;
    spec.k = k;
    spec.grouping = grouping;
    spec.seed = seed;
    {
        std::set<std::string> ids;
        for (const auto& s : samples)
            if (!ids.insert(s.id).second) throw ValidationError("kfold_split: duplicate sample id " + s.id);
    }
    if (grouping == Grouping::by_augmented_image) {
        if (k > static_cast<int>(samples.size()))
            throw ValidationError("kfold_split: k=" + std::to_string(k) + " exceeds " +
                                  std::to_string(samples.size()) + " samples");
        std::vector<int> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        SplitMix64 rng(derive_seed(seed, "kfold/image"));
        shuffle(order, rng);
        for (std::size_t pos = 0; pos < order.size(); ++pos)
            spec.assignment[samples[static_cast<std::size_t>(order[pos])].id] = static_cast<int>(pos % k);
    } else {
        std::vector<std::string> groups; // first-appearance order
        std::set<std::string> seen;
        for (const auto& s : samples)
            if (seen.insert(s.group_id).second) groups.push_back(s.group_id);
        if (k > static_cast<int>(groups.size()))
            throw ValidationError("kfold_split: k=" + std::to_string(k) + " exceeds " +
                                  std::to_string(groups.size()) + " groups");
        SplitMix64 rng(derive_seed(seed, "kfold/group"));
        shuffle(groups, rng);
        std::map<std::string, int> group_fold;
        for (std::size_t pos = 0; pos < groups.size(); ++pos)
            group_fold[groups[pos]] = static_cast<int>(pos % k);
        for (const auto& s : samples) spec.assignment[s.id] = group_fold.at(s.group_id);
    }
    return spec;
}

struct ExperimentConfig {
    std::string manifest_path;
    Task task = Task::seg_dense;
    std::string out_dir = "runs/out";
    std::uint64_t seed = 0;
    int k = 3;
    Grouping grouping = Grouping::by_group_id;
    UNetConfig arch;             // n_seg_classes is set per task
    TrainConfig train;
    std::string pretrain;        // "", "auto", or a checkpoint path
    int pretrain_epochs = kDefaultSegEpochs; // for auto mode
};

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
    return {{"manifest", c.manifest_path},
            {"task", task_name(c.task)},
            {"out_dir", c.out_dir},
            {"seed", c.seed},
            {"folds", {{"k", c.k}, {"grouping", grouping_name(c.grouping)}}},
            {"model", {{"depth", c.arch.depth}, {"base_channels", c.arch.base_channels}}},
            {"train",
             {{"lr", c.train.lr},
              {"batch_size", c.train.batch_size},
              {"epochs", c.train.epochs},
              {"plateau_factor", c.train.plateau_factor},
              {"plateau_patience", c.train.plateau_patience},
              {"eval_split", c.train.eval_split == EvalSplit::test ? "test" : "validation"},
              {"freeze_seg", c.train.freeze_seg}}},
            {"pretrain", c.pretrain},
            {"pretrain_epochs", c.pretrain_epochs}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.manifest_path = j.value("manifest", "");
    if (j.contains("task")) c.task = task_from_name(j.at("task").get<std::string>());
    c.out_dir = j.value("out_dir", c.out_dir);
    c.seed = j.value("seed", c.seed);
    if (j.contains("folds")) {
        c.k = j["folds"].value("k", c.k);
        if (j["folds"].contains("grouping"))
            c.grouping = grouping_from_name(j["folds"]["grouping"].get<std::string>());
    }
    if (j.contains("model")) {
        c.arch.depth = j["model"].value("depth", c.arch.depth);
        c.arch.base_channels = j["model"].value("base_channels", c.arch.base_channels);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.train.lr = t.value("lr", c.train.lr);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.plateau_factor = t.value("plateau_factor", c.train.plateau_factor);
        c.train.plateau_patience = t.value("plateau_patience", c.train.plateau_patience);
        if (t.contains("eval_split")) {
            const std::string es = t["eval_split"].get<std::string>();
            if (es != "test" && es != "validation")
                throw ValidationError("eval_split must be 'test' or 'validation', got '" + es + "'");
            c.train.eval_split = es == "test" ? EvalSplit::test : EvalSplit::validation;
        }
        c.train.freeze_seg = t.value("freeze_seg", c.train.freeze_seg);
    }
    c.pretrain = j.value("pretrain", c.pretrain);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    return c;
}

struct FoldOutcome {
    int fold = 0;
    std::map<std::string, double> metrics;
    std::map<std::string, double> merged; // dense runs scored on sparse classes
    std::string checkpoint_path;
};

struct CrossvalResult {
    Task task = Task::seg_dense;
    FoldSpec folds;
    std::vector<FoldOutcome> fold_outcomes;
    FoldAggregate aggregate;
    std::optional<FoldAggregate> merged_aggregate;
    std::string report_text;
};

namespace detail {

inline std::vector<Sample> remap_all(const std::vector<Sample>& in) {
    std::vector<Sample> out = in;
    for (auto& s : out) s.labels = remap_dense_to_sparse(s.labels);
    return out;
}

// Carve a leakage-free validation subset out of the training samples
// (whole groups, about a fifth, at least one group) for
// EvalSplit::validation runs.
inline void carve_validation(std::vector<Sample>& train, std::vector<Sample>& val, std::uint64_t seed) {
    std::vector<std::string> groups;
    std::set<std::string> seen;
    for (const auto& s : train)
        if (seen.insert(s.group_id).second) groups.push_back(s.group_id);
    if (groups.size() < 2)
        throw ValidationError("eval_split=validation needs at least 2 groups in the training folds");
    SplitMix64 rng(derive_seed(seed, "valcarve"));
    shuffle(groups, rng);
    const std::size_t n_val = std::max<std::size_t>(1, groups.size() / 5);
    std::set<std::string> val_groups(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<Sample> remaining;
    for (auto& s : train)
        (val_groups.count(s.group_id) ? val : remaining).push_back(std::move(s));
    train = std::move(remaining);
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << j.dump(2) << "\n";
}

inline nlohmann::json metrics_json(const std::map<std::string, double>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : m) j[k] = v;
    return j;
}

inline nlohmann::json aggregate_json(const FoldAggregate& agg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : agg.mean) j[k] = {{"mean", v}, {"std", agg.stddev.at(k)}};
    return j;
}

} // namespace detail

/// Full k-fold protocol: for every fold, train on the other k-1 folds,
/// evaluate on the held-out fold, persist checkpoint + history + metrics,
/// then aggregate. Reverse-transfer tasks first locate or produce the
/// segmentation checkpoint for each fold.
inline CrossvalResult run_crossval(const ExperimentConfig& cfg, const std::vector<Sample>& samples) {
    namespace fs = std::filesystem;
    if (samples.empty()) throw ValidationError("run_crossval: empty dataset");
    cfg.train.validate();

    if (cfg.task == Task::cls_scratch && !cfg.pretrain.empty())
        throw ValidationError("cls_scratch does not take a pretrain checkpoint");
    if ((cfg.task == Task::cls_dense_pretrain || cfg.task == Task::cls_sparse_pretrain) && cfg.pretrain.empty())
        throw ValidationError(std::string("task ") + task_name(cfg.task) +
                              " needs a segmentation checkpoint: pass --pretrain <checkpoint.ckpt> or "
                              "--pretrain auto to train one per fold");

    // Dense source labels are required wherever dense training or remapping
    // happens; an already-sparse dataset only supports seg_sparse directly.
    const bool needs_dense = cfg.task == Task::seg_dense || cfg.task == Task::cls_dense_pretrain;
    for (const auto& s : samples) {
        if (needs_dense && s.labels.schema != SchemaKind::dense)
            throw SchemaError(std::string("task ") + task_name(cfg.task) + " requires dense labels, sample " +
                              s.id + " is sparse");
    }

    CrossvalResult result;
    result.task = cfg.task;
    result.folds = kfold_split(samples, cfg.k, cfg.grouping, cfg.seed);
    fs::create_directories(cfg.out_dir);

    std::optional<ModelWeights> fixed_pretrain;
    if (is_cls_task(cfg.task) && !cfg.pretrain.empty() && cfg.pretrain != "auto") {
        if (!fs::exists(cfg.pretrain))
            throw ValidationError("pretrain checkpoint not found: " + cfg.pretrain);
        fixed_pretrain = load_weights(cfg.pretrain);
    }

    std::vector<std::map<std::string, double>> fold_metrics;
    std::vector<std::map<std::string, double>> fold_merged;

    for (int fold = 0; fold < cfg.k; ++fold) {
        const fs::path fold_dir = fs::path(cfg.out_dir) / ("fold" + std::to_string(fold));
        fs::create_directories(fold_dir);

        std::vector<Sample> train, test;
        for (const auto& s : samples)
            (result.folds.assignment.at(s.id) == fold ? test : train).push_back(s);
        if (train.empty() || test.empty())
            throw ValidationError("fold " + std::to_string(fold) + " leaves an empty train or test set");

        const std::string fold_tag = "fold" + std::to_string(fold);
        TrainConfig tc = cfg.train;
        tc.shuffle_seed = derive_seed(cfg.seed, "shuffle/" + fold_tag);
        const std::uint64_t init_seed = derive_seed(cfg.seed, "init/" + fold_tag);

        std::vector<Sample> eval_set;
        if (tc.eval_split == EvalSplit::validation)
            detail::carve_validation(train, eval_set, derive_seed(cfg.seed, "val/" + fold_tag));

        FoldOutcome outcome;
        outcome.fold = fold;
        nlohmann::json meta{{"task", task_name(cfg.task)},
                            {"fold", fold},
                            {"seed", cfg.seed},
                            {"init_seed", init_seed},
                            {"train_samples", train.size()},
                            {"test_samples", test.size()},
                            {"grouping", grouping_name(cfg.grouping)}};

        TrainResult tr;
        if (cfg.task == Task::seg_dense || cfg.task == Task::seg_sparse) {
            const bool to_sparse = cfg.task == Task::seg_sparse && train[0].labels.schema == SchemaKind::dense;
            const std::vector<Sample> tr_set = to_sparse ? detail::remap_all(train) : train;
            const std::vector<Sample> te_set = to_sparse ? detail::remap_all(test) : test;
            if (tc.eval_split == EvalSplit::validation && to_sparse) eval_set = detail::remap_all(eval_set);
            const std::vector<Sample>& ev = tc.eval_split == EvalSplit::test ? te_set : eval_set;
            tr = train_segmentation(tr_set, ev, cfg.arch, tc, init_seed);

            const SegEval se = evaluate_segmentation(tr.weights, te_set, tc.batch_size);
            outcome.metrics = seg_metric_map(se.scores, schema_of(te_set[0].labels.schema));
            if (cfg.task == Task::seg_dense) {
                // Score the dense predictions on the sparse classes as well:
                // merge prediction and truth with the same class table.
                SegConfusion merged(SchemaKind::sparse);
                std::vector<int> idx(te_set.size());
                std::iota(idx.begin(), idx.end(), 0);
                for (int lo = 0; lo < static_cast<int>(te_set.size()); lo += tc.batch_size) {
                    const int hi = std::min<int>(lo + tc.batch_size, static_cast<int>(te_set.size()));
                    const Tensor logits = seg_forward(tr.weights, detail::image_batch(te_set, idx, lo, hi));
                    for (int b = lo; b < hi; ++b) {
                        const LabelMap pred = logits_to_labels(logits, b - lo, SchemaKind::dense);
                        merged.add(merge_dense_prediction_for_sparse_scoring(pred),
                                   remap_dense_to_sparse(te_set[static_cast<std::size_t>(b)].labels));
                    }
                }
                outcome.merged = seg_metric_map(iou_scores(merged), sparse_schema());
            }
        } else {
            std::optional<ModelWeights> pre;
            if (cfg.task == Task::cls_dense_pretrain || cfg.task == Task::cls_sparse_pretrain) {
                const bool sparse_pre = cfg.task == Task::cls_sparse_pretrain;
                if (fixed_pretrain) {
                    pre = fixed_pretrain;
                    meta["pretrain"] = cfg.pretrain;
                } else { // auto: train the segmentation stage on this fold's training split
                    TrainConfig ptc = tc;
                    ptc.epochs = cfg.pretrain_epochs;
                    ptc.shuffle_seed = derive_seed(cfg.seed, "pretrain-shuffle/" + fold_tag);
                    const std::vector<Sample> seg_train = sparse_pre ? detail::remap_all(train) : train;
                    const std::vector<Sample> seg_eval =
                        tc.eval_split == EvalSplit::test ? (sparse_pre ? detail::remap_all(test) : test)
                                                         : (sparse_pre ? detail::remap_all(eval_set) : eval_set);
                    TrainResult seg = train_segmentation(seg_train, seg_eval, cfg.arch, ptc,
                                                         derive_seed(cfg.seed, "pretrain-init/" + fold_tag));
                    const std::string pre_path = (fold_dir / "pretrain_seg.ckpt").string();
                    save_weights(seg.weights, pre_path);
                    write_history_jsonl(seg.history, (fold_dir / "pretrain_history.jsonl").string());
                    pre = std::move(seg.weights);
                    meta["pretrain"] = "auto:" + pre_path;
                }
                const int want = sparse_pre ? sparse_schema().num_classes() : dense_schema().num_classes();
                if (pre->unet.n_seg_classes != want)
                    throw ValidationError(std::string("pretrain checkpoint has ") +
                                          std::to_string(pre->unet.n_seg_classes) + " segmentation classes, task " +
                                          task_name(cfg.task) + " needs " + std::to_string(want));
            } else {
                meta["pretrain"] = "none";
            }
            // The scratch variant keeps the dense-width segmentation trunk so
            // the three pretrain types differ only in initialization provenance.
            UNetConfig cls_arch = cfg.arch;
            cls_arch.n_seg_classes = pre ? pre->unet.n_seg_classes : dense_schema().num_classes();
            const std::vector<Sample>& cev = tc.eval_split == EvalSplit::test ? test : eval_set;
            tr = train_classification(train, cev, cls_arch, tc, pre, init_seed);
            outcome.metrics = cls_metric_map(evaluate_classification(tr.weights, test));
        }

        outcome.checkpoint_path = (fold_dir / "checkpoint.ckpt").string();
        save_weights(tr.weights, outcome.checkpoint_path);
        write_history_jsonl(tr.history, (fold_dir / "history.jsonl").string());
        detail::write_json(detail::metrics_json(outcome.metrics), (fold_dir / "metrics.json").string());
        if (!outcome.merged.empty())
            detail::write_json(detail::metrics_json(outcome.merged), (fold_dir / "metrics_merged.json").string());
        detail::write_json(meta, (fold_dir / "meta.json").string());

        fold_metrics.push_back(outcome.metrics);
        if (!outcome.merged.empty()) fold_merged.push_back(outcome.merged);
        result.fold_outcomes.push_back(std::move(outcome));
    }

    result.aggregate = fold_aggregate(fold_metrics);
    if (!fold_merged.empty()) result.merged_aggregate = fold_aggregate(fold_merged);

    if (is_cls_task(cfg.task)) {
        result.report_text = render_cls_table({{std::string("U-Net ") + task_name(cfg.task), result.aggregate}});
    } else if (cfg.task == Task::seg_dense) {
        result.report_text =
            render_seg_table({{"U-Net dense", *result.merged_aggregate, &result.aggregate}});
    } else {
        result.report_text = render_seg_table({{"U-Net sparse", result.aggregate, nullptr}});
    }

    nlohmann::json agg{{"task", task_name(cfg.task)},
                       {"k", cfg.k},
                       {"seed", cfg.seed},
                       {"metrics", detail::aggregate_json(result.aggregate)}};
    if (result.merged_aggregate) agg["merged_metrics"] = detail::aggregate_json(*result.merged_aggregate);
    detail::write_json(agg, (fs::path(cfg.out_dir) / "aggregate.json").string());
    std::ofstream rep((fs::path(cfg.out_dir) / "report.txt").string());
    rep << result.report_text;

    return result;
}

inline CrossvalResult run_crossval(const ExperimentConfig& cfg) {
    if (cfg.manifest_path.empty()) throw ValidationError("run_crossval: no manifest path configured");
    return run_crossval(cfg, load_dataset(cfg.manifest_path));
}

} // namespace sonoseg
