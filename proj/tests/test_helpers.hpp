#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "saefd/autograd.hpp"
#include "saefd/common.hpp"

// Central finite differences against the analytic backward pass. The loss
// graph is rebuilt by `make` for every probe so the check stays independent
// of any cached state.

namespace testutil {

inline saefd::MatD numeric_grad(saefd::ag::Var<double> param,
                                const std::function<double()>& make, double h = 1e-6) {
    saefd::MatD grad(param.rows(), param.cols());
    for (Eigen::Index i = 0; i < param.rows(); ++i) {
        for (Eigen::Index j = 0; j < param.cols(); ++j) {
            const double saved = param.value()(i, j);
            param.value()(i, j) = saved + h;
            const double up = make();
            param.value()(i, j) = saved - h;
            const double down = make();
            param.value()(i, j) = saved;
            grad(i, j) = (up - down) / (2.0 * h);
        }
    }
    return grad;
}

inline double max_rel_err(const saefd::MatD& a, const saefd::MatD& b) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const double denom = std::max({1e-6, std::abs(a(i, j)), std::abs(b(i, j))});
            worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
        }
    return worst;
}

// Analytic gradient of a freshly built scalar loss w.r.t. one parameter.
inline saefd::MatD analytic_grad(saefd::ag::Var<double> param,
                                 const std::function<saefd::ag::Var<double>()>& build) {
    param.zero_grad();
    auto loss = build();
    loss.backward();
    return param.grad_or_zero();
}

}  // namespace testutil
