#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "sonoseg/phantom.hpp"
#include "sonoseg/train.hpp"

using namespace sonoseg;

namespace {

ModelWeights single_param_model(const Tensor& t) {
    ModelWeights w;
    w.params.emplace_back("p", t);
    return w;
}

std::vector<Sample> tiny_dataset(int groups_per_class, int frames, std::uint64_t seed, bool noise_free) {
    DatasetSpec spec;
    spec.groups_normal = spec.groups_pneumonia = spec.groups_covid = groups_per_class;
    spec.frames_per_group = frames;
    spec.height = 32;
    spec.width = 32;
    spec.noise_free = noise_free;
    return gen_dataset(spec, seed);
}

UNetConfig tiny_arch() {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 4;
    return cfg;
}

} // namespace

TEST_CASE("adam leaves parameters alone under zero gradients") {
    ModelWeights w = single_param_model(Tensor({3}, {1.0f, -2.0f, 3.0f}));
    AdamState adam(w);
    adam.step(w, {{"p", Tensor({3})}}, 0.01);
    CHECK(w.get("p").vec() == std::vector<float>{1.0f, -2.0f, 3.0f});
}

TEST_CASE("first adam step moves each element by about lr in the gradient direction") {
    ModelWeights w = single_param_model(Tensor({3}, {1.0f, -2.0f, 3.0f}));
    AdamState adam(w);
    adam.step(w, {{"p", Tensor({3}, {0.1f, -0.2f, 0.3f})}}, 0.01);
    CHECK(w.get("p")[0] == Catch::Approx(1.0 - 0.01).margin(1e-6));
    CHECK(w.get("p")[1] == Catch::Approx(-2.0 + 0.01).margin(1e-6));
    CHECK(w.get("p")[2] == Catch::Approx(3.0 - 0.01).margin(1e-6));
}

TEST_CASE("identical adam runs produce bit-identical trajectories") {
    auto run = [] {
        ModelWeights w = single_param_model(Tensor({2}, {0.5f, -0.5f}));
        AdamState adam(w);
        for (int i = 0; i < 20; ++i) {
            const float g = 0.1f * static_cast<float>((i % 3) - 1);
            adam.step(w, {{"p", Tensor({2}, {g, -g})}}, 0.005);
        }
        return w.get("p").vec();
    };
    CHECK(run() == run());
}

TEST_CASE("adam rejects mismatched gradient shapes") {
    ModelWeights w = single_param_model(Tensor({3}));
    AdamState adam(w);
    CHECK_THROWS_AS(adam.step(w, {{"p", Tensor({4})}}, 0.01), ShapeError);
}

TEST_CASE("plateau scheduler holds the rate while the metric improves") {
    PlateauScheduler s;
    double lr = 0.001;
    for (int e = 0; e < 12; ++e) lr = s.update(0.1 + 0.01 * e, lr);
    CHECK(lr == 0.001);
}

TEST_CASE("a flat metric for patience+1 epochs halves the rate exactly once") {
    PlateauScheduler s(0.5, 5, 1e-4);
    double lr = 0.001;
    for (int e = 0; e < 6; ++e) lr = s.update(0.42, lr);
    CHECK(lr == Catch::Approx(0.0005));
}

TEST_CASE("an improvement on the patience-th epoch resets the counter") {
    PlateauScheduler s(0.5, 5, 1e-4);
    double lr = 0.001;
    for (int e = 0; e < 5; ++e) lr = s.update(0.42, lr); // best set at e0, then 4 bad epochs
    lr = s.update(0.9, lr);                              // improvement just in time
    CHECK(lr == 0.001);
}

TEST_CASE("sub-min-delta improvements do not reset the counter") {
    PlateauScheduler s(0.5, 3, 1e-4);
    double lr = 0.01;
    lr = s.update(0.5, lr);
    for (int e = 0; e < 3; ++e) lr = s.update(0.5 + 5e-5, lr);
    CHECK(lr == Catch::Approx(0.005));
}

TEST_CASE("loss decreases while overfitting a single batch") {
    for (std::uint64_t seed : {0ull, 1ull, 2ull}) { // documented smoke seeds
        auto data = tiny_dataset(1, 2, 100 + seed, true);
        REQUIRE(data.size() == 6);
        data.resize(4); // one batch of 4
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.batch_size = 4;
        cfg.shuffle_seed = seed;
        const TrainResult r = train_segmentation(data, data, tiny_arch(), cfg, seed);
        REQUIRE(r.history.epochs.size() == 10);
        int decreases = 0;
        for (int e = 1; e < 10; ++e)
            decreases += r.history.epochs[static_cast<std::size_t>(e)].train_loss <
                         r.history.epochs[static_cast<std::size_t>(e - 1)].train_loss;
        INFO("seed " << seed);
        CHECK(decreases >= 7);
        CHECK(r.history.epochs.back().train_loss < r.history.epochs.front().train_loss);
    }
}

TEST_CASE("recorded lr sequence replays through an independent counter simulation") {
    auto data = tiny_dataset(1, 2, 7, true);
    TrainConfig cfg;
    cfg.epochs = 14;
    cfg.batch_size = 4;
    cfg.plateau_patience = 2; // fast halvings for the replay
    const TrainResult r = train_segmentation(data, data, tiny_arch(), cfg, 7);

    double lr = cfg.lr;
    double best = -std::numeric_limits<double>::infinity();
    int bad = 0;
    for (std::size_t e = 0; e < r.history.epochs.size(); ++e) {
        CHECK(r.history.epochs[e].lr == lr);
        const double m = r.history.epochs[e].eval_metric;
        if (m > best + cfg.plateau_min_delta) {
            best = m;
            bad = 0;
        } else if (++bad >= cfg.plateau_patience) {
            lr *= cfg.plateau_factor;
            bad = 0;
        }
    }
    // lr never increases
    for (std::size_t e = 1; e < r.history.epochs.size(); ++e)
        CHECK(r.history.epochs[e].lr <= r.history.epochs[e - 1].lr);
}

TEST_CASE("segmentation training is deterministic in its seed triple") {
    auto data = tiny_dataset(1, 2, 9, false);
    TrainConfig cfg;
    cfg.epochs = 3;
    const TrainResult a = train_segmentation(data, data, tiny_arch(), cfg, 5);
    const TrainResult b = train_segmentation(data, data, tiny_arch(), cfg, 5);
    REQUIRE(a.history.epochs.size() == b.history.epochs.size());
    for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
        CHECK(a.history.epochs[e].train_loss == b.history.epochs[e].train_loss);
        CHECK(a.history.epochs[e].eval_metric == b.history.epochs[e].eval_metric);
    }
    for (std::size_t i = 0; i < a.weights.params.size(); ++i)
        CHECK(a.weights.params[i].second.vec() == b.weights.params[i].second.vec());

    const TrainResult c = train_segmentation(data, data, tiny_arch(), cfg, 6);
    CHECK(a.history.epochs.back().train_loss != c.history.epochs.back().train_loss);
}

TEST_CASE("segmentation training validates inputs") {
    auto data = tiny_dataset(1, 1, 10, true);
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(train_segmentation(data, data, tiny_arch(), cfg, 0), ValidationError);
    cfg = TrainConfig{};
    CHECK_THROWS_AS(train_segmentation({}, data, tiny_arch(), cfg, 0), ValidationError);
    auto mixed = data;
    mixed[0].labels = remap_dense_to_sparse(mixed[0].labels);
    CHECK_THROWS_AS(train_segmentation(mixed, data, tiny_arch(), cfg, 0), ValidationError);
}

TEST_CASE("classification training learns a balanced phantom set beyond chance") {
    auto data = tiny_dataset(5, 2, 11, false); // 30 samples, balanced
    TrainConfig seg_cfg;
    seg_cfg.epochs = 6;
    seg_cfg.shuffle_seed = 3;
    const TrainResult seg = train_segmentation(data, data, tiny_arch(), seg_cfg, 3);

    TrainConfig cls_cfg;
    cls_cfg.epochs = 6;
    cls_cfg.shuffle_seed = 4;
    const TrainResult cls = train_classification(data, data, tiny_arch(), cls_cfg, seg.weights, 4);
    CHECK(cls.history.best_metric > 1.0 / 3.0);
    REQUIRE(cls.weights.classifier.has_value());
    CHECK(cls.weights.classifier->n_seg_classes == 7);
}

TEST_CASE("freeze mode keeps segmentation parameters bit-identical") {
    auto data = tiny_dataset(1, 2, 12, false);
    TrainConfig seg_cfg;
    seg_cfg.epochs = 2;
    const TrainResult seg = train_segmentation(data, data, tiny_arch(), seg_cfg, 8);

    TrainConfig cls_cfg;
    cls_cfg.epochs = 3;
    cls_cfg.freeze_seg = true;
    const TrainResult cls = train_classification(data, data, tiny_arch(), cls_cfg, seg.weights, 9);
    for (const auto& [name, t] : seg.weights.params) {
        INFO(name);
        CHECK(cls.weights.get(name).vec() == t.vec());
    }
    // and the head did move
    bool head_nonzero_delta = false;
    const ModelWeights init = attach_cls_head(seg.weights, ClassifierConfig{7, 3}, derive_seed(9, "cls-head"));
    for (std::int64_t i = 0; i < init.get("head.weight").numel(); ++i)
        head_nonzero_delta |= init.get("head.weight")[i] != cls.weights.get("head.weight")[i];
    CHECK(head_nonzero_delta);
}

TEST_CASE("pretrained architecture mismatches are rejected") {
    auto data = tiny_dataset(1, 1, 13, true);
    TrainConfig seg_cfg;
    seg_cfg.epochs = 1;
    const TrainResult seg = train_segmentation(data, data, tiny_arch(), seg_cfg, 1);
    UNetConfig other = tiny_arch();
    other.base_channels = 8;
    TrainConfig cls_cfg;
    cls_cfg.epochs = 1;
    CHECK_THROWS_AS(train_classification(data, data, other, cls_cfg, seg.weights, 1), ValidationError);
}

TEST_CASE("non-pretrained classification is the absent-pretrain case of the same op") {
    auto data = tiny_dataset(1, 2, 14, true);
    TrainConfig cfg;
    cfg.epochs = 2;
    const TrainResult scratch = train_classification(data, data, tiny_arch(), cfg, std::nullopt, 2);
    REQUIRE(scratch.weights.classifier.has_value());
    CHECK(scratch.history.epochs.size() == 2);
}
