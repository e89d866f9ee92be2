#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sonoseg/autodiff.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

/// One gradient-check scenario: named parameter tensors plus a builder that
/// assembles a scalar loss from them. The builder must be a pure function of
/// (graph, param ids, seed) so it can be re-run for finite-difference probes.
struct GradCheckCase {
    std::string name;
    std::function<std::vector<std::pair<std::string, TensorT<double>>>(std::uint64_t)> init;
    std::function<NodeId(Graph<double>&, const std::vector<NodeId>&, std::uint64_t)> build;
};

/// Compares analytic gradients against central finite differences (step
/// 1e-5) in 64-bit mode. Returns the max relative error over all parameter
/// elements, with rel = |a - n| / max(1e-8, |a| + |n|).
inline double grad_check(const GradCheckCase& c, std::uint64_t seed) {
    constexpr double kStep = 1e-5;
    auto tensors = c.init(seed);
    if (tensors.empty()) throw UsageError("grad_check: no parameters in case '" + c.name + "'");

    Graph<double> g;
    std::vector<NodeId> ids;
    ids.reserve(tensors.size());
    for (auto& [name, t] : tensors) ids.push_back(g.param(name, t));
    const NodeId loss = c.build(g, ids, seed);
    g.backward(loss);

    std::vector<TensorT<double>> analytic;
    analytic.reserve(ids.size());
    for (NodeId id : ids) analytic.push_back(g.grad(id));

    auto eval = [&](const std::vector<std::pair<std::string, TensorT<double>>>& ts) {
        Graph<double> g2;
        std::vector<NodeId> ids2;
        ids2.reserve(ts.size());
        for (const auto& [name, t] : ts) ids2.push_back(g2.param(name, t));
        return g2.value(c.build(g2, ids2, seed))[0];
    };

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < tensors.size(); ++pi) {
        auto& t = tensors[pi].second;
        for (std::int64_t e = 0; e < t.numel(); ++e) {
            const double orig = t[e];
            double fp, fm;
            try {
                t[e] = orig + kStep;
                fp = eval(tensors);
                t[e] = orig - kStep;
                fm = eval(tensors);
            } catch (const NumericError& err) {
                throw NumericError("grad_check: non-finite value while probing parameter '" +
                                   tensors[pi].first + "' of case '" + c.name + "': " + err.what());
            }
            t[e] = orig;
            const double numeric = (fp - fm) / (2.0 * kStep);
            const double a = analytic[pi][e];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw NumericError("grad_check: non-finite gradient for parameter '" + tensors[pi].first +
                                   "' of case '" + c.name + "'");
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

namespace detail {

inline TensorT<double> probe_weights(const Shape& shape, std::uint64_t seed) {
    SplitMix64 rng(derive_seed(seed, "gradcheck.probe"));
    return TensorT<double>::uniform(shape, rng, 1.0);
}

// Random tensor whose 2x2 pooling windows have a clear per-window argmax, so
// finite differences never cross it.
inline TensorT<double> pool_safe(const Shape& shape, SplitMix64& rng) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        auto t = TensorT<double>::uniform(shape, rng, 1.0);
        const int H = shape[2], W = shape[3];
        const std::int64_t planes = t.numel() / (static_cast<std::int64_t>(H) * W);
        bool ok = true;
        for (std::int64_t pl = 0; pl < planes && ok; ++pl) {
            const double* p = t.data() + pl * H * W;
            for (int oh = 0; oh < H / 2 && ok; ++oh) {
                for (int ow = 0; ow < W / 2 && ok; ++ow) {
                    double v[4] = {p[2 * oh * W + 2 * ow], p[2 * oh * W + 2 * ow + 1],
                                   p[(2 * oh + 1) * W + 2 * ow], p[(2 * oh + 1) * W + 2 * ow + 1]};
                    std::sort(v, v + 4);
                    if (v[3] - v[2] < 1e-3) ok = false;
                }
            }
        }
        if (ok) return t;
    }
    throw Error("pool_safe: could not draw a tie-free tensor");
}

// Elementwise values kept away from the relu kink at 0.
inline TensorT<double> relu_safe(const Shape& shape, SplitMix64& rng) {
    TensorT<double> t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double sign = rng.next_double() < 0.5 ? -1.0 : 1.0;
        t[i] = sign * (0.1 + 0.9 * rng.next_double());
    }
    return t;
}

inline std::vector<std::int32_t> random_targets(std::int64_t n, int classes, SplitMix64& rng) {
    std::vector<std::int32_t> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(classes)));
    return t;
}

} // namespace detail

/// The per-layer suite run by the `gradcheck` CLI subcommand and the
/// acceptance tests: every layer type the model uses, plus one composite.
inline std::vector<GradCheckCase> standard_gradcheck_cases() {
    using P = std::vector<std::pair<std::string, TensorT<double>>>;
    std::vector<GradCheckCase> cases;

    cases.push_back(
        {"conv2d",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.conv2d"));
             return P{{"input", TensorT<double>::uniform({1, 2, 5, 5}, rng, 1.0)},
                      {"kernel", TensorT<double>::uniform({3, 2, 3, 3}, rng, 1.0)},
                      {"bias", TensorT<double>::uniform({3}, rng, 1.0)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             return g.inner(g.conv2d(p[0], p[1], p[2], 1), detail::probe_weights({1, 3, 5, 5}, seed));
         }});

    cases.push_back(
        {"transposed_conv2d",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.tconv"));
             return P{{"input", TensorT<double>::uniform({1, 3, 3, 3}, rng, 1.0)},
                      {"kernel", TensorT<double>::uniform({3, 2, 2, 2}, rng, 1.0)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             return g.inner(g.transposed_conv2d(p[0], p[1]), detail::probe_weights({1, 2, 6, 6}, seed));
         }});

    cases.push_back(
        {"maxpool2d",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.maxpool"));
             return P{{"input", detail::pool_safe({1, 2, 4, 4}, rng)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             return g.inner(g.maxpool2d(p[0]), detail::probe_weights({1, 2, 2, 2}, seed));
         }});

    cases.push_back(
        {"relu",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.relu"));
             return P{{"input", detail::relu_safe({1, 4, 3, 3}, rng)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             return g.inner(g.relu(p[0]), detail::probe_weights({1, 4, 3, 3}, seed));
         }});

    cases.push_back(
        {"softmax_cross_entropy",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.smce"));
             return P{{"logits", TensorT<double>::uniform({1, 4, 3, 3}, rng, 2.0)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.smce.targets"));
             return g.cross_entropy_pixelwise(g.softmax_channels(p[0]), detail::random_targets(9, 4, rng));
         }});

    cases.push_back(
        {"global_avg_pool",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.gap"));
             return P{{"input", TensorT<double>::uniform({2, 3, 4, 4}, rng, 1.0)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             return g.inner(g.global_avg_pool_channels(p[0]), detail::probe_weights({2, 3}, seed));
         }});

    cases.push_back(
        {"fully_connected",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.fc"));
             return P{{"input", TensorT<double>::uniform({3, 4}, rng, 1.0)},
                      {"weight", TensorT<double>::uniform({2, 4}, rng, 1.0)},
                      {"bias", TensorT<double>::uniform({2}, rng, 1.0)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             return g.inner(g.fully_connected(p[0], p[1], p[2]), detail::probe_weights({3, 2}, seed));
         }});

    cases.push_back(
        {"conv_relu_cross_entropy",
         [](std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.convce"));
             return P{{"input", TensorT<double>::uniform({1, 2, 4, 4}, rng, 1.0)},
                      {"kernel", TensorT<double>::uniform({3, 2, 3, 3}, rng, 1.0)},
                      {"bias", TensorT<double>::uniform({3}, rng, 1.0)}};
         },
         [](Graph<double>& g, const std::vector<NodeId>& p, std::uint64_t seed) {
             SplitMix64 rng(derive_seed(seed, "gc.convce.targets"));
             const NodeId act = g.relu(g.conv2d(p[0], p[1], p[2], 1));
             return g.cross_entropy_pixelwise(g.softmax_channels(act), detail::random_targets(16, 3, rng));
         }});

    return cases;
}

} // namespace sonoseg
