#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "sonoseg/augment.hpp"
#include "sonoseg/crossval.hpp"
#include "sonoseg/phantom.hpp"

using namespace sonoseg;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> small_corpus(int groups_per_class, int frames, std::uint64_t seed) {
    DatasetSpec spec;
    spec.groups_normal = spec.groups_pneumonia = spec.groups_covid = groups_per_class;
    spec.frames_per_group = frames;
    spec.height = 32;
    spec.width = 32;
    return gen_dataset(spec, seed);
}

} // namespace

TEST_CASE("image-mode split of 912 augmented samples gives folds of 304") {
    DatasetSpec spec;
    spec.groups_normal = 1;
    spec.groups_pneumonia = 0;
    spec.groups_covid = 3;
    spec.frames_per_group = 38; // 4 groups x 38 frames = 152 source images
    spec.height = 32;
    spec.width = 32;
    const auto source = gen_dataset(spec, 77);
    REQUIRE(source.size() == 152);
    const auto augmented = expand_sixfold(source);
    REQUIRE(augmented.size() == 912);
    const FoldSpec folds = kfold_split(augmented, 3, Grouping::by_augmented_image, 5);
    std::array<int, 3> sizes{};
    for (const auto& s : augmented) sizes[static_cast<std::size_t>(folds.assignment.at(s.id))] += 1;
    CHECK(sizes == std::array<int, 3>{304, 304, 304});
}

TEST_CASE("group-mode split keeps whole groups together with unequal fold sizes") {
    // 9 groups with different frame counts.
    std::vector<Sample> samples;
    for (int g = 0; g < 9; ++g) {
        DatasetSpec spec;
        spec.groups_normal = 1;
        spec.groups_pneumonia = 0;
        spec.groups_covid = 0;
        spec.frames_per_group = 2 + g;
        spec.height = 32;
        spec.width = 32;
        auto part = gen_dataset(spec, 100 + static_cast<std::uint64_t>(g));
        for (auto& s : part) {
            s.group_id = "grp" + std::to_string(g);
            s.id = s.group_id + "-" + s.id + std::to_string(g);
            samples.push_back(std::move(s));
        }
    }
    const FoldSpec folds = kfold_split(samples, 3, Grouping::by_group_id, 9);
    std::map<std::string, std::set<int>> group_folds;
    std::array<int, 3> group_count{};
    std::array<int, 3> sample_count{};
    std::set<std::string> counted;
    for (const auto& s : samples) {
        const int f = folds.assignment.at(s.id);
        group_folds[s.group_id].insert(f);
        sample_count[static_cast<std::size_t>(f)] += 1;
        if (counted.insert(s.group_id).second) group_count[static_cast<std::size_t>(f)] += 1;
    }
    for (const auto& [g, fs] : group_folds) CHECK(fs.size() == 1);
    CHECK(group_count == std::array<int, 3>{3, 3, 3});
    // Frame counts differ per group, so sample counts are unequal.
    CHECK((sample_count[0] != sample_count[1] || sample_count[1] != sample_count[2]));
}

TEST_CASE("group integrity holds across many seeds and every sample is assigned once") {
    const auto samples = small_corpus(3, 3, 55);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const FoldSpec folds = kfold_split(samples, 3, Grouping::by_group_id, seed);
        CHECK(folds.assignment.size() == samples.size());
        std::map<std::string, int> group_to_fold;
        for (const auto& s : samples) {
            const int f = folds.assignment.at(s.id);
            CHECK(f >= 0);
            CHECK(f < 3);
            auto [it, fresh] = group_to_fold.emplace(s.group_id, f);
            if (!fresh) CHECK(it->second == f);
        }
    }
}

TEST_CASE("identical split seeds give identical assignments") {
    const auto samples = small_corpus(2, 2, 56);
    const FoldSpec a = kfold_split(samples, 3, Grouping::by_group_id, 7);
    const FoldSpec b = kfold_split(samples, 3, Grouping::by_group_id, 7);
    CHECK(a.assignment == b.assignment);
    const FoldSpec c = kfold_split(samples, 3, Grouping::by_group_id, 8);
    CHECK(a.assignment != c.assignment);
}

TEST_CASE("oversized k is rejected") {
    const auto samples = small_corpus(1, 2, 57); // 3 groups
    CHECK_THROWS_AS(kfold_split(samples, 4, Grouping::by_group_id, 0), ValidationError);
    CHECK_THROWS_AS(kfold_split(samples, 7, Grouping::by_augmented_image, 0), ValidationError);
    CHECK_THROWS_AS(kfold_split(samples, 1, Grouping::by_group_id, 0), ValidationError);
}

TEST_CASE("experiment config json round trip") {
    ExperimentConfig c;
    c.manifest_path = "data/manifest.jsonl";
    c.task = Task::cls_sparse_pretrain;
    c.out_dir = "runs/x";
    c.seed = 12345;
    c.k = 3;
    c.grouping = Grouping::by_augmented_image;
    c.arch.depth = 2;
    c.arch.base_channels = 4;
    c.train.epochs = 9;
    c.train.eval_split = EvalSplit::validation;
    c.pretrain = "auto";
    c.pretrain_epochs = 5;
    const ExperimentConfig r = experiment_from_json(experiment_to_json(c));
    CHECK(r.manifest_path == c.manifest_path);
    CHECK(r.task == c.task);
    CHECK(r.seed == c.seed);
    CHECK(r.grouping == c.grouping);
    CHECK(r.arch.depth == 2);
    CHECK(r.train.epochs == 9);
    CHECK(r.train.eval_split == EvalSplit::validation);
    CHECK(r.pretrain == "auto");
    CHECK(r.pretrain_epochs == 5);
    CHECK_THROWS_AS(task_from_name("segmentation"), ValidationError);
    CHECK_THROWS_AS(grouping_from_name("by_video"), ValidationError);
}

TEST_CASE("seg_dense crossval emits per-fold artifacts and an aggregate") {
    const auto dir = fs::temp_directory_path() / "sonoseg_cv_seg";
    fs::remove_all(dir);
    const auto samples = small_corpus(2, 2, 58); // 6 groups, 12 samples

    ExperimentConfig cfg;
    cfg.task = Task::seg_dense;
    cfg.out_dir = dir.string();
    cfg.seed = 3;
    cfg.k = 3;
    cfg.arch.depth = 2;
    cfg.arch.base_channels = 2;
    cfg.train.epochs = 2;
    const CrossvalResult r = run_crossval(cfg, samples);

    REQUIRE(r.fold_outcomes.size() == 3);
    for (int f = 0; f < 3; ++f) {
        CHECK(fs::exists(dir / ("fold" + std::to_string(f)) / "checkpoint.ckpt"));
        CHECK(fs::exists(dir / ("fold" + std::to_string(f)) / "metrics.json"));
        CHECK(fs::exists(dir / ("fold" + std::to_string(f)) / "metrics_merged.json"));
        CHECK(fs::exists(dir / ("fold" + std::to_string(f)) / "history.jsonl"));
    }
    CHECK(fs::exists(dir / "aggregate.json"));
    CHECK(fs::exists(dir / "report.txt"));
    CHECK(r.aggregate.mean.count("pixel_accuracy") == 1);
    REQUIRE(r.merged_aggregate.has_value());
    CHECK(r.merged_aggregate->mean.count("mean_iou") == 1);
    CHECK(r.report_text.find("U-Net dense") != std::string::npos);
    // merged scoring only carries sparse classes
    for (const auto& [name, v] : r.merged_aggregate->mean)
        CHECK(name.find("Healthy") == std::string::npos);
}

TEST_CASE("crossval is deterministic end to end") {
    const auto dir_a = fs::temp_directory_path() / "sonoseg_cv_det_a";
    const auto dir_b = fs::temp_directory_path() / "sonoseg_cv_det_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    const auto samples = small_corpus(2, 2, 59);
    ExperimentConfig cfg;
    cfg.task = Task::seg_sparse;
    cfg.seed = 11;
    cfg.k = 2;
    cfg.arch.depth = 2;
    cfg.arch.base_channels = 2;
    cfg.train.epochs = 2;

    cfg.out_dir = dir_a.string();
    const CrossvalResult a = run_crossval(cfg, samples);
    cfg.out_dir = dir_b.string();
    const CrossvalResult b = run_crossval(cfg, samples);
    CHECK(a.aggregate.mean == b.aggregate.mean);
    CHECK(a.aggregate.stddev == b.aggregate.stddev);
    CHECK(a.report_text == b.report_text);
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(dir_a / "aggregate.json") == slurp(dir_b / "aggregate.json"));
}

TEST_CASE("pretrain task without a checkpoint is an actionable error") {
    ExperimentConfig cfg;
    cfg.task = Task::cls_dense_pretrain;
    cfg.pretrain = "";
    const auto samples = small_corpus(1, 2, 60);
    CHECK_THROWS_WITH(run_crossval(cfg, samples), Catch::Matchers::ContainsSubstring("--pretrain"));

    cfg.pretrain = "/nonexistent/seg.ckpt";
    cfg.out_dir = (fs::temp_directory_path() / "sonoseg_cv_missing").string();
    CHECK_THROWS_WITH(run_crossval(cfg, samples), Catch::Matchers::ContainsSubstring("not found"));
}

TEST_CASE("cls crossval with auto pretrain trains per-fold segmentation first") {
    const auto dir = fs::temp_directory_path() / "sonoseg_cv_cls";
    fs::remove_all(dir);
    const auto samples = small_corpus(2, 2, 61);
    ExperimentConfig cfg;
    cfg.task = Task::cls_sparse_pretrain;
    cfg.out_dir = dir.string();
    cfg.seed = 4;
    cfg.k = 3;
    cfg.arch.depth = 2;
    cfg.arch.base_channels = 2;
    cfg.train.epochs = 2;
    cfg.pretrain = "auto";
    cfg.pretrain_epochs = 2;
    const CrossvalResult r = run_crossval(cfg, samples);
    REQUIRE(r.fold_outcomes.size() == 3);
    for (int f = 0; f < 3; ++f) {
        CHECK(fs::exists(dir / ("fold" + std::to_string(f)) / "pretrain_seg.ckpt"));
        const ModelWeights w =
            load_weights((dir / ("fold" + std::to_string(f)) / "checkpoint.ckpt").string());
        REQUIRE(w.classifier.has_value());
        CHECK(w.classifier->n_seg_classes == 4); // sparse-pretrained head width
        CHECK(w.unet.n_seg_classes == 4);
    }
    CHECK(r.aggregate.mean.count("accuracy") == 1);
}

TEST_CASE("scratch and pretrained runs differ only in recorded provenance") {
    const auto dir_s = fs::temp_directory_path() / "sonoseg_cv_scratch";
    const auto dir_p = fs::temp_directory_path() / "sonoseg_cv_pre";
    fs::remove_all(dir_s);
    fs::remove_all(dir_p);
    const auto samples = small_corpus(2, 2, 62);
    ExperimentConfig cfg;
    cfg.seed = 5;
    cfg.k = 3;
    cfg.arch.depth = 2;
    cfg.arch.base_channels = 2;
    cfg.train.epochs = 2;

    cfg.task = Task::cls_scratch;
    cfg.out_dir = dir_s.string();
    run_crossval(cfg, samples);
    cfg.task = Task::cls_dense_pretrain;
    cfg.pretrain = "auto";
    cfg.pretrain_epochs = 2;
    cfg.out_dir = dir_p.string();
    run_crossval(cfg, samples);

    auto meta = [](const fs::path& dir) {
        std::ifstream f(dir / "fold0" / "meta.json");
        return nlohmann::json::parse(f);
    };
    CHECK(meta(dir_s)["pretrain"] == "none");
    CHECK(meta(dir_p)["pretrain"].get<std::string>().rfind("auto:", 0) == 0);
    CHECK(meta(dir_s)["init_seed"] == meta(dir_p)["init_seed"]);
    CHECK(meta(dir_s)["fold"] == meta(dir_p)["fold"]);
}

TEST_CASE("validation eval split carves groups out of the training folds") {
    const auto dir = fs::temp_directory_path() / "sonoseg_cv_val";
    fs::remove_all(dir);
    const auto samples = small_corpus(3, 2, 63); // 9 groups
    ExperimentConfig cfg;
    cfg.task = Task::seg_dense;
    cfg.out_dir = dir.string();
    cfg.seed = 6;
    cfg.k = 3;
    cfg.arch.depth = 2;
    cfg.arch.base_channels = 2;
    cfg.train.epochs = 2;
    cfg.train.eval_split = EvalSplit::validation;
    const CrossvalResult r = run_crossval(cfg, samples);
    CHECK(r.fold_outcomes.size() == 3);
}
