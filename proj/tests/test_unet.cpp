#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sonoseg/rng.hpp"
#include "sonoseg/unet.hpp"

using namespace sonoseg;
namespace fs = std::filesystem;

namespace {

// Closed-form parameter count for the topology, written out independently of
// unet_param_specs.
std::int64_t expected_param_count(int depth, int base, int in_ch, int classes) {
    auto conv = [](int cin, int cout, int k) { return static_cast<std::int64_t>(cout) * (cin * k * k + 1); };
    std::int64_t total = 0;
    for (int i = 0; i < depth; ++i) {
        const int cin = i == 0 ? in_ch : base << (i - 1);
        const int ch = base << i;
        total += conv(cin, ch, 3) + conv(ch, ch, 3);
    }
    const int bott = base << depth;
    total += conv(base << (depth - 1), bott, 3) + conv(bott, bott, 3);
    for (int i = depth - 1; i >= 0; --i) {
        const int above = i == depth - 1 ? bott : base << (i + 1);
        const int ch = base << i;
        total += static_cast<std::int64_t>(above) * ch * 4; // 2x2 up kernel, no bias
        total += conv(2 * ch, ch, 3) + conv(ch, ch, 3);
    }
    total += conv(base, classes, 1);
    return total;
}

Tensor random_batch(int n, int h, int w, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Tensor t({n, 1, h, w});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.next_float();
    return t;
}

} // namespace

TEST_CASE("parameter count matches the closed-form architecture formula") {
    for (auto [depth, base, classes] : {std::tuple{2, 4, 4}, {3, 8, 7}, {2, 2, 7}}) {
        UNetConfig cfg;
        cfg.depth = depth;
        cfg.base_channels = base;
        cfg.n_seg_classes = classes;
        const ModelWeights w = build_unet(cfg, 0);
        CHECK(w.total_params() == expected_param_count(depth, base, 1, classes));
    }
}

TEST_CASE("identical config and seed build bit-identical weights") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 4;
    cfg.n_seg_classes = 4;
    const ModelWeights a = build_unet(cfg, 99);
    const ModelWeights b = build_unet(cfg, 99);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params[i].first == b.params[i].first);
        CHECK(a.params[i].second.vec() == b.params[i].second.vec());
    }
    const ModelWeights c = build_unet(cfg, 100);
    CHECK(a.params[0].second.vec() != c.params[0].second.vec());
}

TEST_CASE("config validation") {
    UNetConfig cfg;
    cfg.depth = 1;
    CHECK_THROWS_AS(build_unet(cfg, 0), ValidationError);
    cfg = UNetConfig{};
    cfg.base_channels = 0;
    CHECK_THROWS_AS(build_unet(cfg, 0), ValidationError);
}

TEST_CASE("seg_forward preserves spatial dims and emits one channel per class") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    const ModelWeights w = build_unet(cfg, 1);
    const Tensor logits = seg_forward(w, random_batch(2, 12, 16, 7));
    CHECK(logits.shape() == Shape{2, 4, 12, 16});
}

TEST_CASE("seg_forward rejects indivisible spatial dims, naming the divisor") {
    UNetConfig cfg;
    cfg.depth = 3;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    const ModelWeights w = build_unet(cfg, 1);
    CHECK_THROWS_WITH(seg_forward(w, random_batch(1, 12, 16, 7)),
                      Catch::Matchers::ContainsSubstring("divisible by 8"));
}

TEST_CASE("zero final layer gives uniform softmax output") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    ModelWeights w = build_unet(cfg, 2);
    w.get_mut("final.weight").fill(0.0f);
    w.get_mut("final.bias").fill(0.0f);
    const Tensor logits = seg_forward(w, random_batch(1, 8, 8, 3));
    for (std::int64_t i = 0; i < logits.numel(); ++i) CHECK(logits[i] == 0.0f);
    Graph<float> g;
    const auto& probs = g.value(g.softmax_channels(g.constant(logits)));
    for (std::int64_t i = 0; i < probs.numel(); ++i) CHECK(probs[i] == Catch::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("seg_forward is deterministic") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 3;
    cfg.n_seg_classes = 4;
    const ModelWeights w = build_unet(cfg, 3);
    const Tensor batch = random_batch(1, 8, 12, 11);
    CHECK(seg_forward(w, batch).vec() == seg_forward(w, batch).vec());
}

TEST_CASE("attach_cls_head keeps segmentation weights bit-identical") {
    for (int classes : {7, 4}) {
        UNetConfig cfg;
        cfg.depth = 2;
        cfg.base_channels = 2;
        cfg.n_seg_classes = classes;
        const ModelWeights seg = build_unet(cfg, 4);
        const ModelWeights cls = attach_cls_head(seg, ClassifierConfig{classes, 3}, 5);
        REQUIRE(cls.classifier.has_value());
        CHECK(cls.get("head.weight").shape() == Shape{3, classes}); // head width follows the schema
        CHECK(cls.get("head.bias").shape() == Shape{3});
        for (const auto& [name, t] : seg.params) CHECK(cls.get(name).vec() == t.vec());

        CHECK_THROWS_AS(attach_cls_head(cls, ClassifierConfig{classes, 3}, 6), UsageError);
        CHECK_THROWS_AS(attach_cls_head(seg, ClassifierConfig{classes + 1, 3}, 6), ValidationError);
    }
}

TEST_CASE("cls_forward rows sum to one and ignore batch order") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    const ModelWeights w = attach_cls_head(build_unet(cfg, 6), ClassifierConfig{4, 3}, 7);
    const Tensor a = random_batch(1, 8, 8, 21);
    const Tensor b = random_batch(1, 8, 8, 22);
    Tensor ab({2, 1, 8, 8});
    std::copy(a.vec().begin(), a.vec().end(), ab.data());
    std::copy(b.vec().begin(), b.vec().end(), ab.data() + 64);
    Tensor ba({2, 1, 8, 8});
    std::copy(b.vec().begin(), b.vec().end(), ba.data());
    std::copy(a.vec().begin(), a.vec().end(), ba.data() + 64);

    const Tensor pab = cls_forward(w, ab);
    const Tensor pba = cls_forward(w, ba);
    REQUIRE(pab.shape() == Shape{2, 3});
    for (int n = 0; n < 2; ++n) {
        double s = 0;
        for (int c = 0; c < 3; ++c) s += pab[n * 3 + c];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    for (int c = 0; c < 3; ++c) {
        CHECK(pab[0 * 3 + c] == pba[1 * 3 + c]);
        CHECK(pab[1 * 3 + c] == pba[0 * 3 + c]);
    }
}

TEST_CASE("zero head weights give the uniform diagnosis distribution") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    ModelWeights w = attach_cls_head(build_unet(cfg, 8), ClassifierConfig{4, 3}, 9);
    w.get_mut("head.weight").fill(0.0f);
    w.get_mut("head.bias").fill(0.0f);
    const Tensor probs = cls_forward(w, random_batch(2, 8, 8, 23));
    for (std::int64_t i = 0; i < probs.numel(); ++i)
        CHECK(probs[i] == Catch::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("an identity-like head reproduces hand-computed GAP softmax") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    ModelWeights w = attach_cls_head(build_unet(cfg, 10), ClassifierConfig{4, 3}, 11);
    // Rows select segmentation channels 0, 1, 2 with unit weight, zero bias.
    Tensor head({3, 4});
    head[0 * 4 + 0] = 1.0f;
    head[1 * 4 + 1] = 1.0f;
    head[2 * 4 + 2] = 1.0f;
    w.get_mut("head.weight") = head;
    w.get_mut("head.bias").fill(0.0f);

    const Tensor batch = random_batch(1, 8, 8, 24);
    const Tensor logits = seg_forward(w, batch);

    // Independent double-precision oracle: pixel softmax, channel means,
    // then softmax over the three selected means.
    std::array<double, 4> area{};
    for (int p = 0; p < 64; ++p) {
        double mx = logits[p];
        for (int c = 1; c < 4; ++c) mx = std::max<double>(mx, logits[c * 64 + p]);
        double denom = 0;
        std::array<double, 4> e{};
        for (int c = 0; c < 4; ++c) {
            e[c] = std::exp(static_cast<double>(logits[c * 64 + p]) - mx);
            denom += e[c];
        }
        for (int c = 0; c < 4; ++c) area[c] += e[c] / denom / 64.0;
    }
    std::array<double, 3> expect{};
    double denom = 0;
    for (int k = 0; k < 3; ++k) denom += std::exp(area[k] - std::max({area[0], area[1], area[2]}));
    for (int k = 0; k < 3; ++k)
        expect[k] = std::exp(area[k] - std::max({area[0], area[1], area[2]})) / denom;

    const Tensor probs = cls_forward(w, batch);
    for (int k = 0; k < 3; ++k) CHECK(probs[k] == Catch::Approx(expect[k]).margin(1e-5));
}

TEST_CASE("cls_forward without a head is a usage error") {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    const ModelWeights w = build_unet(cfg, 12);
    CHECK_THROWS_AS(cls_forward(w, random_batch(1, 8, 8, 25)), UsageError);
}

TEST_CASE("checkpoint round trip is bit-exact and byte-stable") {
    const auto dir = fs::temp_directory_path() / "sonoseg_ckpt";
    fs::create_directories(dir);
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 3;
    cfg.n_seg_classes = 7;
    const ModelWeights w = attach_cls_head(build_unet(cfg, 13), ClassifierConfig{7, 3}, 14);
    const auto p1 = (dir / "a.ckpt").string();
    const auto p2 = (dir / "b.ckpt").string();
    save_weights(w, p1);
    const ModelWeights r = load_weights(p1);
    REQUIRE(r.params.size() == w.params.size());
    for (std::size_t i = 0; i < w.params.size(); ++i) {
        CHECK(r.params[i].first == w.params[i].first);
        CHECK(r.params[i].second.vec() == w.params[i].second.vec());
    }
    CHECK(r.unet == w.unet);
    REQUIRE(r.classifier.has_value());
    CHECK(*r.classifier == *w.classifier);

    save_weights(r, p2);
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("checkpoint loader rejects damage with structured errors") {
    const auto dir = fs::temp_directory_path() / "sonoseg_ckpt_err";
    fs::create_directories(dir);
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.n_seg_classes = 4;
    const ModelWeights w = build_unet(cfg, 15);
    const auto good = (dir / "good.ckpt").string();
    save_weights(w, good);

    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    const std::string bytes = slurp(good);

    SECTION("truncated file") {
        const auto bad = (dir / "trunc.ckpt").string();
        std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 32));
        CHECK_THROWS_WITH(load_weights(bad), Catch::Matchers::ContainsSubstring("unexpected EOF"));
    }
    SECTION("bad magic") {
        std::string corrupted = bytes;
        corrupted[0] = 'X';
        const auto bad = (dir / "magic.ckpt").string();
        std::ofstream(bad, std::ios::binary).write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
        CHECK_THROWS_WITH(load_weights(bad), Catch::Matchers::ContainsSubstring("magic"));
    }
    SECTION("tampered shape names the parameter") {
        // Rewrite the header so enc0.conv1.weight claims a different shape.
        const std::string needle = "\"name\":\"enc0.conv1.weight\",\"shape\":[2,1,3,3]";
        const std::string swap = "\"name\":\"enc0.conv1.weight\",\"shape\":[2,1,3,4]";
        std::string corrupted = bytes;
        const auto pos = corrupted.find(needle);
        REQUIRE(pos != std::string::npos);
        corrupted.replace(pos, needle.size(), swap);
        const auto bad = (dir / "shape.ckpt").string();
        std::ofstream(bad, std::ios::binary).write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
        CHECK_THROWS_WITH(load_weights(bad), Catch::Matchers::ContainsSubstring("enc0.conv1.weight") &&
                                                 Catch::Matchers::ContainsSubstring("shape mismatch"));
    }
}
