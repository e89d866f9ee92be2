#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sonoseg/tensor.hpp"
#include "sonoseg/unet.hpp"

namespace sonoseg {

/// Adam with bias correction; defaults from the optimizer's original
/// formulation (beta1 0.9, beta2 0.999, eps 1e-8). State is float like the
/// parameters, one shared timestep.
class AdamState {
public:
    explicit AdamState(const ModelWeights& w, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& [name, t] : w.params) {
            m_.emplace_back(name, Tensor(t.shape()));
            v_.emplace_back(name, Tensor(t.shape()));
        }
    }

    int timestep() const { return t_; }

    /// One update over the named gradients. Parameters without a gradient in
    /// `grads` (e.g. frozen ones) are untouched.
    void step(ModelWeights& w, const std::vector<std::pair<std::string, Tensor>>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (const auto& [name, g] : grads) {
            Tensor& p = w.get_mut(name);
            Tensor& m = find(m_, name);
            Tensor& v = find(v_, name);
            if (!p.same_shape(g))
                throw ShapeError("adam_step: gradient shape " + shape_str(g.shape()) +
                                 " does not match parameter '" + name + "' " + shape_str(p.shape()));
            const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    static Tensor& find(std::vector<std::pair<std::string, Tensor>>& list, const std::string& name) {
        for (auto& [n, t] : list)
            if (n == name) return t;
        throw ValidationError("AdamState: unknown parameter '" + name + "'");
    }

    double beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<std::pair<std::string, Tensor>> m_;
    std::vector<std::pair<std::string, Tensor>> v_;
};

/// Reduce-on-plateau, maximize mode: halves the rate when the monitored
/// metric fails to improve by more than min_delta for `patience` consecutive
/// epochs; the counter resets on improvement and after each reduction.
class PlateauScheduler {
public:
    PlateauScheduler(double factor = 0.5, int patience = 5, double min_delta = 1e-4)
        : factor_(factor), patience_(patience), min_delta_(min_delta) {
        if (!(factor > 0.0 && factor < 1.0)) throw ValidationError("PlateauScheduler: factor must be in (0,1)");
        if (patience < 1) throw ValidationError("PlateauScheduler: patience must be >= 1");
    }

    /// Feed this epoch's metric; returns the learning rate for the next epoch.
    double update(double metric, double lr) {
        if (metric > best_ + min_delta_) {
            best_ = metric;
            bad_epochs_ = 0;
        } else if (++bad_epochs_ >= patience_) {
            lr *= factor_;
            bad_epochs_ = 0;
        }
        return lr;
    }

    double best() const { return best_; }

private:
    double factor_;
    int patience_;
    double min_delta_;
    double best_ = -std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
};

} // namespace sonoseg
