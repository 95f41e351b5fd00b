#pragma once

#include "duin/graph.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace duin {

/// Linear warmup from zero to max_lr, then cosine decay to min_lr.
struct CosineWarmupSchedule {
    double max_lr = 3e-4;
    double min_lr = 5e-5;
    int warmup_epochs = 40;
    int total_epochs = 400;

    void validate() const {
        if (min_lr > max_lr) throw std::invalid_argument("schedule: min_lr > max_lr");
        if (warmup_epochs >= total_epochs)
            throw std::invalid_argument("schedule: warmup_epochs must be < total_epochs");
    }

    double lr_at(int epoch) const {
        if (epoch < 0 || epoch >= total_epochs)
            throw std::out_of_range("schedule: epoch out of range");
        if (epoch < warmup_epochs) {
            return max_lr * static_cast<double>(epoch) / static_cast<double>(warmup_epochs);
        }
        const double t = static_cast<double>(epoch - warmup_epochs) /
                         static_cast<double>(total_epochs - warmup_epochs);
        return min_lr + (max_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
    }
};

/// AdamW with decoupled weight decay and bias correction. Gradients are
/// zeroed after each step.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Var<T>> params, double beta1 = 0.9, double beta2 = 0.99,
          double weight_decay = 0.01, double eps = 1e-8)
        : params_(std::move(params)),
          beta1_(beta1),
          beta2_(beta2),
          weight_decay_(weight_decay),
          eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Var<T>& p : params_) {
            m_.push_back(Tensor<T>::zeros(p.value().dims()));
            v_.push_back(Tensor<T>::zeros(p.value().dims()));
        }
    }

    int step_count() const { return step_count_; }

    void step(double lr) {
        ++step_count_;
        const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
        const T bc1 = static_cast<T>(1.0 - std::pow(beta1_, step_count_));
        const T bc2 = static_cast<T>(1.0 - std::pow(beta2_, step_count_));
        const T lr_t = static_cast<T>(lr);
        const T wd = static_cast<T>(weight_decay_);
        const T eps = static_cast<T>(eps_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Var<T>& p = params_[i];
            Tensor<T>& g = p.grad();
            if (g.empty()) continue;
            auto gm = g.vec().array();
            auto mm = m_[i].vec().array();
            auto vm = v_[i].vec().array();
            mm = b1 * mm + (T(1) - b1) * gm;
            vm = b2 * vm + (T(1) - b2) * gm.square();
            auto mhat = mm / bc1;
            auto vhat = vm / bc2;
            p.value().vec().array() -=
                lr_t * (mhat / (vhat.sqrt() + eps)) + lr_t * wd * p.value().vec().array();
            g.set_zero();
        }
    }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
    double beta1_, beta2_, weight_decay_, eps_;
    int step_count_ = 0;
};

}  // namespace duin
