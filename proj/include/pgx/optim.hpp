#pragma once

#include <cmath>
#include <map>
#include <string>

#include "pgx/graph.hpp"
#include "pgx/rng.hpp"

namespace pgx {

// Adam with bias correction. Moment buffers are keyed by parameter name and
// created lazily on the first step.
template <typename T>
class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore<T>& params) {
        if (!params.any_grad()) fail("Adam: step called with no gradients populated");
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& name : params.names()) {
            Param<T>& p = params.get(name);
            if (!p.has_grad) continue;
            Moments& m = moments_[name];
            if (m.m.numel() == 0) {
                m.m = Tensor<T>::zeros(p.value.shape);
                m.v = Tensor<T>::zeros(p.value.shape);
            }
            for (int64_t i = 0; i < p.value.numel(); ++i) {
                T g = p.grad[i];
                m.m[i] = static_cast<T>(beta1_ * m.m[i] + (1.0 - beta1_) * g);
                m.v[i] = static_cast<T>(beta2_ * m.v[i] + (1.0 - beta2_) * g * g);
                double mhat = m.m[i] / bc1;
                double vhat = m.v[i] / bc2;
                p.value[i] = static_cast<T>(p.value[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
        params.clear_grads();
    }

    int64_t step_count() const { return t_; }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    struct Moments {
        Tensor<T> m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Moments> moments_;
};

// Truncated-normal initialization, stddev = 1/sqrt(fan_in).
template <typename T>
Tensor<T> init_weight(Shape shape, int64_t fan_in, RngStream& rng) {
    Tensor<T> w(shape);
    double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.truncated_normal(stddev));
    return w;
}

}  // namespace pgx
