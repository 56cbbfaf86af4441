#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "bnn/nn/layers.hpp"

namespace bnn {

/// Bias-corrected Adam. No weight decay. Gradients are zeroed after the step.
template <class T = float>
class Adam {
public:
    explicit Adam(std::vector<Param<T>*> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    std::uint64_t steps() const { return step_; }
    const BasicTensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
    const BasicTensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

    void step(double lr) {
        ++step_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            if (p.trainable) {
                auto& m = m_[i];
                auto& v = v_[i];
                for (std::size_t k = 0; k < p.value.size(); ++k) {
                    const T g = p.grad[k];
                    m[k] = b1 * m[k] + (T{1} - b1) * g;
                    v[k] = b2 * v[k] + (T{1} - b2) * g * g;
                    const double mhat = m[k] / c1;
                    const double vhat = v[k] / c2;
                    p.value[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
                }
            }
            p.zero_grad();
        }
    }

private:
    std::vector<Param<T>*> params_;
    std::vector<BasicTensor<T>> m_, v_;
    double beta1_, beta2_, eps_;
    std::uint64_t step_ = 0;
};

/// Heavy-ball SGD: v = momentum * v + g; p -= lr * v. Under a constant
/// gradient v approaches g / (1 - momentum).
template <class T = float>
class SgdMomentum {
public:
    explicit SgdMomentum(std::vector<Param<T>*> params, double momentum = 0.9)
        : params_(std::move(params)), momentum_(momentum) {
        for (auto* p : params_) velocity_.emplace_back(p->value.shape());
    }

    std::uint64_t steps() const { return step_; }
    const BasicTensor<T>& velocity(std::size_t i) const { return velocity_.at(i); }

    void step(double lr) {
        ++step_;
        const T mu = static_cast<T>(momentum_), rate = static_cast<T>(lr);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            if (p.trainable) {
                auto& v = velocity_[i];
                for (std::size_t k = 0; k < p.value.size(); ++k) {
                    v[k] = mu * v[k] + p.grad[k];
                    p.value[k] -= rate * v[k];
                }
            }
            p.zero_grad();
        }
    }

private:
    std::vector<Param<T>*> params_;
    std::vector<BasicTensor<T>> velocity_;
    double momentum_;
    std::uint64_t step_ = 0;
};

/// Per-epoch learning rate. Warmup epochs ramp linearly as
/// base_lr * (epoch + 1) / warmup, so epoch 0 gets base_lr / warmup and the
/// last warmup epoch gets base_lr. Afterwards cosine annealing:
/// base_lr * 0.5 * (1 + cos(pi * (epoch - warmup) / (total - warmup))).
inline double lr_at(std::size_t epoch, std::size_t total_epochs, double base_lr,
                    std::size_t warmup_epochs) {
    if (epoch < warmup_epochs)
        return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
    if (total_epochs <= warmup_epochs) return base_lr;
    const double progress = static_cast<double>(epoch - warmup_epochs) /
                            static_cast<double>(total_epochs - warmup_epochs);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace bnn
