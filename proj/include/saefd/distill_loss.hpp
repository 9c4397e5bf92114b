#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "saefd/autograd.hpp"
#include "saefd/common.hpp"
#include "saefd/gated_sae.hpp"

// Sparse-aware feature distillation. Both the current and the anchor
// activations are encoded to pre-ReLU SAE features; the loss combines
//   cosine term:    1 - cos(f_curr, f_anc) per token, averaged over tokens
//                   whose anchor feature norm clears a fraction of the batch
//                   median (near-zero anchors are skipped)
//   magnitude term: MSE restricted to features active (post-ReLU > 0) in the
//                   anchor, normalized per token by the active count
// All inputs arrive packed (row = non-padding token); gradients flow only
// into the current-activation side.

namespace saefd {

template <typename T>
struct FdLossParts {
    ag::Var<T> total;
    T cos_term = T(0);
    T mag_term = T(0);
    int tokens_used_cos = 0;
    int tokens_total = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) throw usage_error("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Returns (loss, tokens_used). threshold_frac gates tokens on
// ||f_anc|| > threshold_frac * median ||f_anc||.
template <typename T>
std::pair<ag::Var<T>, int> cosine_loss(const ag::Var<T>& f_curr, const Mat<T>& f_anc,
                                       T threshold_frac) {
    check_shape(f_curr.rows() == f_anc.rows() && f_curr.cols() == f_anc.cols(),
                "cosine_loss: shape mismatch");
    if (threshold_frac < T(0) || threshold_frac >= T(1))
        throw config_error("train.threshold_frac must be in [0, 1)");
    const Eigen::Index n = f_anc.rows();
    if (n == 0) throw usage_error("cosine_loss: no tokens");

    std::vector<double> norms(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) norms[static_cast<std::size_t>(i)] = f_anc.row(i).norm();
    const double cutoff = static_cast<double>(threshold_frac) * detail::median(norms);

    int used = 0;
    for (double v : norms) used += (v > cutoff) ? 1 : 0;
    if (used == 0) return {ag::Var<T>::scalar(T(0)), 0};

    const T eps = T(1e-8);
    Mat<T> weights = Mat<T>::Zero(n, 1);
    Mat<T> anc_norm_eps(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double v = norms[static_cast<std::size_t>(i)];
        weights(i, 0) = (v > cutoff) ? T(1) / static_cast<T>(used) : T(0);
        anc_norm_eps(i, 0) = static_cast<T>(v) + eps;
    }

    auto anc = ag::Var<T>::constant(f_anc);
    auto dot = ag::rowwise_dot(f_curr, anc);
    auto curr_norm = ag::add_scalar(
        ag::sqrt_pos(ag::add_scalar(ag::rowwise_dot(f_curr, f_curr),
                                    std::numeric_limits<T>::min())),
        eps);
    auto cos = ag::div(dot, ag::mul(curr_norm, ag::Var<T>::constant(std::move(anc_norm_eps))));
    auto one_minus = ag::add_scalar(ag::scale(cos, T(-1)), T(1));
    return {ag::weighted_sum(one_minus, std::move(weights)), used};
}

// MSE over the anchor-active feature set, per-token normalized by |A|,
// averaged over all tokens (empty active sets contribute zero).
template <typename T>
ag::Var<T> magnitude_loss(const ag::Var<T>& f_curr, const Mat<T>& f_anc_pre,
                          const Mat<T>& f_anc_post) {
    check_shape(f_curr.rows() == f_anc_pre.rows() && f_curr.cols() == f_anc_pre.cols() &&
                    f_anc_pre.rows() == f_anc_post.rows() && f_anc_pre.cols() == f_anc_post.cols(),
                "magnitude_loss: shape mismatch");
    const Eigen::Index n = f_anc_pre.rows();
    if (n == 0) throw usage_error("magnitude_loss: no tokens");
    // The post-ReLU side must be relu of the pre-ReLU side; spot-check a row.
    for (Eigen::Index j = 0; j < f_anc_pre.cols(); ++j)
        if (f_anc_post(0, j) != std::max(f_anc_pre(0, j), T(0)))
            throw usage_error("magnitude_loss: f_anc_post is not relu(f_anc_pre)");

    Mat<T> weights = Mat<T>::Zero(n, f_anc_pre.cols());
    const T inv_tokens = T(1) / static_cast<T>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        int active = 0;
        for (Eigen::Index k = 0; k < f_anc_post.cols(); ++k)
            if (f_anc_post(i, k) > T(0)) ++active;
        if (active == 0) continue;
        const T w = inv_tokens / static_cast<T>(active);
        for (Eigen::Index k = 0; k < f_anc_post.cols(); ++k)
            if (f_anc_post(i, k) > T(0)) weights(i, k) = w;
    }
    auto diff = ag::sub(f_curr, ag::Var<T>::constant(f_anc_pre));
    return ag::weighted_sum(ag::square(diff), std::move(weights));
}

// Full distillation loss: encode both sides through the frozen SAE (anchors
// without gradient state), combine the two terms.
template <typename T>
FdLossParts<T> fd_loss(const GatedSae<T>& sae, const ag::Var<T>& h_curr, const Mat<T>& h_anc,
                       T threshold_frac, bool use_cosine = true, bool use_magnitude = true) {
    check_shape(h_curr.rows() == h_anc.rows() && h_curr.cols() == h_anc.cols(),
                "fd_loss: current/anchor shape mismatch");
    auto f_curr = encode_pre_relu(sae, h_curr);
    const Mat<T> f_anc_pre = encode_pre_relu_value(sae, h_anc);
    const Mat<T> f_anc_post = f_anc_pre.cwiseMax(T(0));

    FdLossParts<T> parts;
    parts.tokens_total = static_cast<int>(h_anc.rows());
    ag::Var<T> cos_var = ag::Var<T>::scalar(T(0));
    ag::Var<T> mag_var = ag::Var<T>::scalar(T(0));
    if (use_cosine) {
        auto [loss, used] = cosine_loss(f_curr, f_anc_pre, threshold_frac);
        cos_var = loss;
        parts.tokens_used_cos = used;
    }
    if (use_magnitude) mag_var = magnitude_loss(f_curr, f_anc_pre, f_anc_post);
    parts.total = ag::add(cos_var, mag_var);
    parts.cos_term = cos_var.item();
    parts.mag_term = mag_var.item();
    return parts;
}

// Ablation baseline: MSE directly on raw activations, bypassing the SAE.
// Mean over tokens of the per-token mean squared difference.
template <typename T>
ag::Var<T> raw_mse_loss(const ag::Var<T>& h_curr, const Mat<T>& h_anc) {
    check_shape(h_curr.rows() == h_anc.rows() && h_curr.cols() == h_anc.cols(),
                "raw_mse_loss: shape mismatch");
    if (h_anc.rows() == 0) throw usage_error("raw_mse_loss: no tokens");
    const T inv = T(1) / static_cast<T>(h_anc.rows() * h_anc.cols());
    auto diff = ag::sub(h_curr, ag::Var<T>::constant(h_anc));
    return ag::scale(ag::sum(ag::square(diff)), inv);
}

}  // namespace saefd
