#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saefd/autograd.hpp"
#include "saefd/common.hpp"
#include "saefd/io.hpp"
#include "saefd/optim.hpp"
#include "saefd/rng.hpp"

// Gated sparse autoencoder. Encoding splits into a sigmoid gating pathway
// (which features fire) and a linear magnitude pathway (how strongly):
//   g     = sigmoid(W_gate (h - b_dec) + b_gate)
//   m     = W_enc  (h - b_dec) + b_enc
//   f_pre = g .* m            (keeps gradient flow through the gate)
//   f     = relu(f_pre)       (the sparse code)
// Decoder row k is feature k's unit-norm direction in activation space:
//   h_hat = sum_k f_k W_dec[k,:] + b_dec.

namespace saefd {

struct SaeTrainConfig {
    double l1_coeff = 1e-3;
    double lr = 3e-4;  // cosine decay to zero, no warmup
    int epochs = 30;
    int batch_size = 128;

    void validate() const {
        if (l1_coeff <= 0) throw config_error("sae.l1_coeff must be positive");
        if (lr <= 0) throw config_error("sae.lr must be positive");
        if (epochs < 1) throw config_error("sae.epochs must be >= 1");
        if (batch_size < 1) throw config_error("sae.batch_size must be >= 1");
    }
};

template <typename T>
struct GatedSae {
    ag::Var<T> w_gate, w_enc, w_dec;  // D x d each; decoder rows are directions
    ag::Var<T> b_gate, b_enc;         // 1 x D
    ag::Var<T> b_dec;                 // 1 x d
    int d = 0, dict = 0;

    static GatedSae init(int d, int expansion_factor, std::uint64_t seed) {
        if (d < 1) throw config_error("sae: d must be positive");
        if (expansion_factor < 2) throw config_error("sae.expansion_factor must be >= 2");
        GatedSae s;
        s.d = d;
        s.dict = expansion_factor * d;
        Rng rng(derive_seed(seed, 0x5ae0));
        const T lim = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));
        Mat<T> wg(s.dict, d), we(s.dict, d), wd(s.dict, d);
        rng.fill_uniform(wg, -lim, lim);
        rng.fill_uniform(we, -lim, lim);
        rng.fill_normal(wd);
        for (Eigen::Index k = 0; k < wd.rows(); ++k) wd.row(k) /= wd.row(k).norm();
        s.w_gate = ag::Var<T>::param(std::move(wg));
        s.w_enc = ag::Var<T>::param(std::move(we));
        s.w_dec = ag::Var<T>::param(std::move(wd));
        s.b_gate = ag::Var<T>::param(Mat<T>::Zero(1, s.dict));
        s.b_enc = ag::Var<T>::param(Mat<T>::Zero(1, s.dict));
        s.b_dec = ag::Var<T>::param(Mat<T>::Zero(1, d));
        return s;
    }

    std::vector<ag::Var<T>> params() const { return {w_gate, w_enc, w_dec, b_gate, b_enc, b_dec}; }

    bool frozen() const { return !w_gate.requires_grad(); }

    void freeze() {
        for (auto& p : params()) p.node()->requires_grad = false;
    }

    // Divide every decoder row by its norm. Called after each optimizer step
    // during training, never on a frozen SAE.
    void renormalize_decoder() {
        if (frozen()) throw usage_error("renormalize_decoder on a frozen SAE");
        Mat<T>& wd = w_dec.value();
        for (Eigen::Index k = 0; k < wd.rows(); ++k) {
            const T n = wd.row(k).norm();
            if (n > T(0)) wd.row(k) /= n;
        }
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& p : params()) h = mat_digest(p.value(), h);
        return h;
    }

    GatedSae clone(bool trainable) const {
        GatedSae s;
        s.d = d;
        s.dict = dict;
        auto mk = [&](const ag::Var<T>& v) {
            return trainable ? ag::Var<T>::param(v.value()) : ag::Var<T>::constant(v.value());
        };
        s.w_gate = mk(w_gate);
        s.w_enc = mk(w_enc);
        s.w_dec = mk(w_dec);
        s.b_gate = mk(b_gate);
        s.b_enc = mk(b_enc);
        s.b_dec = mk(b_dec);
        return s;
    }
};

template <typename T>
ag::Var<T> encode_pre_relu(const GatedSae<T>& s, const ag::Var<T>& h) {
    check_shape(h.cols() == s.d, "encode_pre_relu: last dimension must be d");
    auto centered = ag::add_rowvec(h, ag::scale(s.b_dec, T(-1)));
    auto gate = ag::sigmoid(ag::linear(centered, s.w_gate, s.b_gate));
    auto mag = ag::linear(centered, s.w_enc, s.b_enc);
    return ag::mul(gate, mag);
}

template <typename T>
ag::Var<T> encode(const GatedSae<T>& s, const ag::Var<T>& h) {
    return ag::relu(encode_pre_relu(s, h));
}

// Value-only encodes for frozen-SAE consumers (anchors, diagnostics).
template <typename T>
Mat<T> encode_pre_relu_value(const GatedSae<T>& s, const Mat<T>& h) {
    ag::NoGradGuard ng;
    return encode_pre_relu(s, ag::Var<T>::constant(h)).value();
}

template <typename T>
Mat<T> encode_value(const GatedSae<T>& s, const Mat<T>& h) {
    ag::NoGradGuard ng;
    return encode(s, ag::Var<T>::constant(h)).value();
}

template <typename T>
ag::Var<T> decode(const GatedSae<T>& s, const ag::Var<T>& f) {
    check_shape(f.cols() == s.dict, "decode: last dimension must be D");
    return ag::add_rowvec(ag::matmul(f, s.w_dec), s.b_dec);
}

template <typename T>
struct SaeLossParts {
    ag::Var<T> total;  // mean ||h_hat - h||^2 + l1_coeff * mean ||f||_1
    T recon_mse = T(0);
    T l1_term = T(0);
};

template <typename T>
SaeLossParts<T> sae_loss(const GatedSae<T>& s, const ag::Var<T>& h, T l1_coeff) {
    check_shape(h.rows() >= 1, "sae_loss: batch must be nonempty");
    const T inv_n = T(1) / static_cast<T>(h.rows());
    auto f = ag::relu(encode_pre_relu(s, h));
    auto recon = decode(s, f);
    auto mse = ag::scale(ag::sum(ag::square(ag::sub(recon, h))), inv_n);
    auto l1 = ag::scale(ag::sum(f), l1_coeff * inv_n);  // f >= 0, so sum == ||f||_1
    SaeLossParts<T> parts;
    parts.total = ag::add(mse, l1);
    parts.recon_mse = mse.item();
    parts.l1_term = l1.item();
    return parts;
}

template <typename T>
SaeLossParts<T> sae_loss(const GatedSae<T>& s, const Mat<T>& h_batch, T l1_coeff) {
    return sae_loss(s, ag::Var<T>::constant(h_batch), l1_coeff);
}

// 1 - Var(H - decode(encode(H))) / Var(H), elementwise variances summed over
// dimensions. Accumulated in double regardless of T.
template <typename T>
double variance_explained(const GatedSae<T>& s, const Mat<T>& h) {
    if (h.rows() < 2) throw usage_error("variance_explained: need at least 2 samples");
    ag::NoGradGuard ng;
    auto hv = ag::Var<T>::constant(h);
    const Mat<T> recon = decode(s, ag::relu(encode_pre_relu(s, hv))).value();
    const MatD hd = h.template cast<double>();
    const MatD rd = (h - recon).template cast<double>();
    double var_h = 0, var_r = 0;
    for (Eigen::Index j = 0; j < hd.cols(); ++j) {
        const double mh = hd.col(j).mean();
        const double mr = rd.col(j).mean();
        var_h += (hd.col(j).array() - mh).square().sum();
        var_r += (rd.col(j).array() - mr).square().sum();
    }
    if (var_h <= 0) throw usage_error("variance_explained: input has zero variance");
    return 1.0 - var_r / var_h;
}

// Mean count of strictly positive features per token (post-ReLU input).
template <typename T>
double l0_sparsity(const Mat<T>& f) {
    if (f.rows() == 0) return 0.0;
    double total = 0;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
        total += static_cast<double>((f.row(i).array() > T(0)).count());
    return total / static_cast<double>(f.rows());
}

// AdamW + cosine decay on all six tensors; decoder rows renormalized to unit
// norm after every step. Returns the trained SAE, frozen.
template <typename T>
GatedSae<T> train_sae(const GatedSae<T>& init, const Mat<T>& corpus, const SaeTrainConfig& cfg,
                      std::uint64_t seed) {
    cfg.validate();
    if (init.frozen()) throw usage_error("train_sae: SAE is frozen");
    GatedSae<T> sae = init.clone(true);
    if (corpus.rows() < cfg.batch_size)
        throw config_error("sae: corpus smaller than one batch (" +
                           std::to_string(corpus.rows()) + " < " +
                           std::to_string(cfg.batch_size) + ")");
    const int n = static_cast<int>(corpus.rows());
    const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = static_cast<std::int64_t>(batches_per_epoch) * cfg.epochs;

    typename AdamW<T>::Options opt_cfg;
    opt_cfg.weight_decay = T(0);
    AdamW<T> opt(sae.params(), opt_cfg);
    Rng shuffle_rng(derive_seed(seed, 0x5ae5));

    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = shuffle_rng.permutation(n);
        for (int b = 0; b < batches_per_epoch; ++b) {
            const int lo = b * cfg.batch_size;
            const int hi = std::min(n, lo + cfg.batch_size);
            Mat<T> batch(hi - lo, corpus.cols());
            for (int i = lo; i < hi; ++i)
                batch.row(i - lo) = corpus.row(order[static_cast<std::size_t>(i)]);
            auto parts = sae_loss(sae, batch, static_cast<T>(cfg.l1_coeff));
            if (!std::isfinite(static_cast<double>(parts.total.item())))
                throw numerical_error("train_sae: non-finite loss at epoch " +
                                      std::to_string(epoch) + " step " + std::to_string(step));
            opt.zero_grad();
            parts.total.backward();
            opt.step(static_cast<T>(cosine_decay_lr(cfg.lr, step, total_steps)));
            sae.renormalize_decoder();
            ++step;
        }
    }
    sae.freeze();
    return sae;
}

// ---------------------------------------------------------------------------
// Checkpointing ("SFDM" container, SAE kind). Loaded SAEs come back frozen.

template <typename T>
void save_sae(const std::string& path, const GatedSae<T>& s) {
    std::vector<NamedTensor> ts;
    auto push = [&](const char* name, const ag::Var<T>& v) {
        ts.push_back(NamedTensor::from_mat(name, v.value().template cast<float>()));
    };
    push("w_gate", s.w_gate);
    push("w_enc", s.w_enc);
    push("w_dec", s.w_dec);
    push("b_gate", s.b_gate);
    push("b_enc", s.b_enc);
    push("b_dec", s.b_dec);
    save_sfdm(path, ArtifactKind::sae, ts);
}

template <typename T>
GatedSae<T> load_sae(const std::string& path) {
    const SfdmFile f = load_sfdm(path);
    if (f.kind != ArtifactKind::sae) throw format_error(path + ": not an SAE checkpoint");
    GatedSae<T> s;
    auto pull = [&](const char* name) {
        return ag::Var<T>::constant(f.get(name).to_mat().cast<T>());
    };
    s.w_gate = pull("w_gate");
    s.w_enc = pull("w_enc");
    s.w_dec = pull("w_dec");
    s.b_gate = pull("b_gate");
    s.b_enc = pull("b_enc");
    s.b_dec = pull("b_dec");
    s.dict = static_cast<int>(s.w_gate.rows());
    s.d = static_cast<int>(s.w_gate.cols());
    if (s.w_enc.rows() != s.dict || s.w_dec.rows() != s.dict || s.w_enc.cols() != s.d ||
        s.w_dec.cols() != s.d || s.b_gate.cols() != s.dict || s.b_enc.cols() != s.dict ||
        s.b_dec.cols() != s.d)
        throw format_error(path + ": inconsistent SAE tensor shapes");
    return s;
}

}  // namespace saefd
