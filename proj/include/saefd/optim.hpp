#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "saefd/autograd.hpp"
#include "saefd/common.hpp"

namespace saefd {

// Decoupled-weight-decay Adam. Only trainable parameters are ever registered;
// frozen tensors (base model, trained SAE) never appear here.
template <typename T>
class AdamW {
public:
    struct Options {
        T lr = T(1e-3);  // base rate; step() may override per schedule
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
        T weight_decay = T(0);
    };

    AdamW(std::vector<ag::Var<T>> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            if (!p.requires_grad()) throw usage_error("AdamW: parameter does not require grad");
            slots_.push_back({Mat<T>::Zero(p.rows(), p.cols()), Mat<T>::Zero(p.rows(), p.cols())});
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() { step(opt_.lr); }

    void step(T lr) {
        ++t_;
        const T bc1 = T(1) - std::pow(opt_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(opt_.beta2, static_cast<T>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            const Mat<T> g = p.grad_or_zero();
            if (!g.allFinite())
                throw numerical_error("AdamW: non-finite gradient in parameter " +
                                      std::to_string(i));
            auto& m = slots_[i].m;
            auto& v = slots_[i].v;
            m = opt_.beta1 * m + (T(1) - opt_.beta1) * g;
            v = opt_.beta2 * v + (T(1) - opt_.beta2) * g.cwiseProduct(g);
            const Mat<T> update =
                ((m.array() / bc1) / ((v.array() / bc2).sqrt() + opt_.eps) +
                 opt_.weight_decay * p.value().array())
                    .matrix();
            p.value() -= lr * update;
        }
    }

    std::int64_t steps_taken() const { return t_; }
    const std::vector<ag::Var<T>>& params() const { return params_; }

private:
    struct Slot {
        Mat<T> m, v;
    };
    std::vector<ag::Var<T>> params_;
    std::vector<Slot> slots_;
    Options opt_;
    std::int64_t t_ = 0;
};

// Cosine decay to zero over total_steps, no warmup (SAE training schedule).
inline double cosine_decay_lr(double base, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0) return base;
    if (step >= total_steps) return 0.0;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// Linear warmup to base over warmup_steps, constant afterwards (CL schedule).
inline double warmup_const_lr(double base, std::int64_t step, std::int64_t warmup_steps) {
    if (warmup_steps <= 0 || step >= warmup_steps) return base;
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

}  // namespace saefd
