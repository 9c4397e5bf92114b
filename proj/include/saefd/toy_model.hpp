#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saefd/autograd.hpp"
#include "saefd/common.hpp"
#include "saefd/io.hpp"
#include "saefd/optim.hpp"
#include "saefd/rng.hpp"
#include "saefd/synth_tasks.hpp"

// The system under continual learning: a frozen two-layer position-wise
// encoder (d_in -> d -> d, GELU) with trainable low-rank adapters on both
// layers, and a per-task classifier head over mean-pooled token activations.
// The output of the second GELU is "the" activation tap that the SAE and the
// distillation losses read.

namespace saefd {

// Sequences packed to token rows; padding never enters the math.
template <typename T>
struct PackedBatch {
    Mat<T> tokens;               // N x d_in, N = total non-padding tokens
    std::vector<int> seg;        // N, token row -> sample index
    std::vector<int> offsets;    // B+1, sample b owns rows [offsets[b], offsets[b+1])
    std::vector<int> labels;     // B
    int batch = 0;

    static PackedBatch from(const SampleBatch& sb) {
        PackedBatch out;
        out.batch = sb.batch;
        out.offsets.push_back(0);
        int n = 0;
        for (int b = 0; b < sb.batch; ++b) {
            const int len = sb.length(b);
            if (len == 0) throw usage_error("PackedBatch: all-padding sequence");
            n += len;
            out.offsets.push_back(n);
        }
        out.tokens.resize(n, sb.d_in);
        out.seg.resize(static_cast<std::size_t>(n));
        int row = 0;
        for (int b = 0; b < sb.batch; ++b) {
            for (int j = 0; j < sb.max_len; ++j) {
                if (!sb.mask[static_cast<std::size_t>(b) * static_cast<std::size_t>(sb.max_len) +
                             static_cast<std::size_t>(j)])
                    continue;
                out.tokens.row(row) =
                    sb.inputs.row(static_cast<Eigen::Index>(b) * sb.max_len + j).template cast<T>();
                out.seg[static_cast<std::size_t>(row)] = b;
                ++row;
            }
        }
        out.labels = sb.labels;
        return out;
    }

    int tokens_total() const { return static_cast<int>(tokens.rows()); }
};

template <typename T>
struct BaseModel {
    ag::Var<T> w1, b1, w2, b2;      // frozen
    ag::Var<T> head_w, head_b;      // frozen zero template (k_max x d)
    int d_in = 0, d = 0, k_max = 0;

    static BaseModel init(int d_in, int d, int k_max, std::uint64_t seed) {
        BaseModel m;
        m.d_in = d_in;
        m.d = d;
        m.k_max = k_max;
        Rng rng(derive_seed(seed, 0xb05e));
        // Small gains keep token activations around 1e-2 RMS. That scale
        // puts the published L1 coefficient in its working range on the SAE
        // side: marginal features prune when their magnitude drops below
        // l1_coeff, so the dictionary stays sparse while reconstruction
        // stays accurate.
        Mat<T> w1(d, d_in), w2(d, d);
        rng.fill_normal(w1, static_cast<T>(std::sqrt(0.025 / d_in)));
        rng.fill_normal(w2, static_cast<T>(std::sqrt(0.025 / d)));
        m.w1 = ag::Var<T>::constant(std::move(w1));
        m.b1 = ag::Var<T>::constant(Mat<T>::Zero(1, d));
        m.w2 = ag::Var<T>::constant(std::move(w2));
        m.b2 = ag::Var<T>::constant(Mat<T>::Zero(1, d));
        m.head_w = ag::Var<T>::constant(Mat<T>::Zero(k_max, d));
        m.head_b = ag::Var<T>::constant(Mat<T>::Zero(1, k_max));
        return m;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto* v : {&w1, &b1, &w2, &b2, &head_w, &head_b}) h = mat_digest(v->value(), h);
        return h;
    }
};

// Effective weight = W_frozen + (alpha/rank) * up * down; up is zero at init
// so a fresh adapter is a no-op.
template <typename T>
struct LoraAdapter {
    ag::Var<T> down1, up1;  // rank x d_in, d x rank
    ag::Var<T> down2, up2;  // rank x d,    d x rank
    int rank = 0;
    T alpha = T(0);
    T dropout_p = T(0);

    static LoraAdapter init(const BaseModel<T>& m, int rank, T alpha, T dropout_p,
                            std::uint64_t seed) {
        if (rank < 1 || rank > std::min(m.d_in, m.d))
            throw config_error("model.lora_rank must be in [1, min(d_in, d)]");
        if (dropout_p < T(0) || dropout_p >= T(1))
            throw config_error("model.lora_dropout must be in [0, 1)");
        LoraAdapter a;
        a.rank = rank;
        a.alpha = alpha;
        a.dropout_p = dropout_p;
        Rng rng(derive_seed(seed, 0x10a0));
        Mat<T> d1(rank, m.d_in), d2(rank, m.d);
        const T s1 = T(1) / static_cast<T>(std::sqrt(static_cast<double>(m.d_in)));
        const T s2 = T(1) / static_cast<T>(std::sqrt(static_cast<double>(m.d)));
        rng.fill_uniform(d1, -s1, s1);
        rng.fill_uniform(d2, -s2, s2);
        a.down1 = ag::Var<T>::param(std::move(d1));
        a.up1 = ag::Var<T>::param(Mat<T>::Zero(m.d, rank));
        a.down2 = ag::Var<T>::param(std::move(d2));
        a.up2 = ag::Var<T>::param(Mat<T>::Zero(m.d, rank));
        return a;
    }

    std::vector<ag::Var<T>> trainable() const { return {down1, up1, down2, up2}; }

    LoraAdapter clone() const {
        LoraAdapter a = *this;
        a.down1 = ag::Var<T>::param(down1.value());
        a.up1 = ag::Var<T>::param(up1.value());
        a.down2 = ag::Var<T>::param(down2.value());
        a.up2 = ag::Var<T>::param(up2.value());
        return a;
    }
};

template <typename T>
struct TaskHead {
    ag::Var<T> w, b;
    int num_classes = 0;

    // Fresh heads start at zero: argmax ties break to class 0.
    static TaskHead zeros(int num_classes, int d) {
        TaskHead h;
        h.num_classes = num_classes;
        h.w = ag::Var<T>::param(Mat<T>::Zero(num_classes, d));
        h.b = ag::Var<T>::param(Mat<T>::Zero(1, num_classes));
        return h;
    }

    std::vector<ag::Var<T>> trainable() const { return {w, b}; }
};

namespace detail {

template <typename T>
ag::Var<T> lora_branch(const ag::Var<T>& x, const ag::Var<T>& down, const ag::Var<T>& up, T alpha,
                       int rank, T dropout_p, bool train_mode, Rng* dropout_rng) {
    ag::Var<T> in = x;
    if (train_mode && dropout_p > T(0)) {
        if (dropout_rng == nullptr) throw usage_error("dropout requires an RNG in train mode");
        // Inverted dropout on the adapter input path only; the frozen path
        // stays deterministic.
        Mat<T> m(x.rows(), x.cols());
        const T keep = T(1) - dropout_p;
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                m(i, j) = dropout_rng->uniform() < static_cast<double>(dropout_p) ? T(0) : T(1) / keep;
        in = ag::mul(x, ag::Var<T>::constant(std::move(m)));
    }
    return ag::scale(ag::linear(ag::linear(in, down), up), alpha / static_cast<T>(rank));
}

}  // namespace detail

// Per-token activations of the last encoder layer, N x d (packed rows).
template <typename T>
ag::Var<T> encode_tokens(const BaseModel<T>& m, const LoraAdapter<T>& ad, const ag::Var<T>& tokens,
                         bool train_mode = false, Rng* dropout_rng = nullptr) {
    check_shape(tokens.cols() == m.d_in, "encode_tokens: token dimension mismatch");
    auto pre1 = ag::add(ag::linear(tokens, m.w1, m.b1),
                        detail::lora_branch(tokens, ad.down1, ad.up1, ad.alpha, ad.rank,
                                            ad.dropout_p, train_mode, dropout_rng));
    auto h1 = ag::gelu(pre1);
    auto pre2 = ag::add(ag::linear(h1, m.w2, m.b2),
                        detail::lora_branch(h1, ad.down2, ad.up2, ad.alpha, ad.rank, ad.dropout_p,
                                            train_mode, dropout_rng));
    return ag::gelu(pre2);
}

template <typename T>
struct ForwardOutput {
    ag::Var<T> logits;       // B x K
    ag::Var<T> activations;  // N x d, packed token rows
};

template <typename T>
ForwardOutput<T> forward(const BaseModel<T>& m, const LoraAdapter<T>& ad, const TaskHead<T>& head,
                         const PackedBatch<T>& pb, bool train_mode = false,
                         Rng* dropout_rng = nullptr) {
    auto tokens = ag::Var<T>::constant(pb.tokens);
    auto acts = encode_tokens(m, ad, tokens, train_mode, dropout_rng);
    auto pooled = ag::segment_mean(acts, pb.seg, pb.batch);
    auto logits = ag::linear(pooled, head.w, head.b);
    return {logits, acts};
}

template <typename T>
ag::Var<T> task_loss(const ag::Var<T>& logits, const std::vector<int>& labels) {
    return ag::cross_entropy(logits, labels);
}

// Activation snapshot without gradient state (anchor capture, evaluation).
template <typename T>
Mat<T> collect_activations(const BaseModel<T>& m, const LoraAdapter<T>& ad,
                           const PackedBatch<T>& pb) {
    ag::NoGradGuard ng;
    auto acts = encode_tokens(m, ad, ag::Var<T>::constant(pb.tokens), false, nullptr);
    return acts.value();
}

// Expand packed activation rows back to a zero-padded (B*L) x d layout.
template <typename T>
Mat<T> unpack_rows(const Mat<T>& packed, const PackedBatch<T>& pb, int max_len) {
    Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(pb.batch) * max_len, packed.cols());
    for (int b = 0; b < pb.batch; ++b) {
        const int len = pb.offsets[static_cast<std::size_t>(b) + 1] -
                        pb.offsets[static_cast<std::size_t>(b)];
        out.block(static_cast<Eigen::Index>(b) * max_len, 0, len, packed.cols()) =
            packed.block(pb.offsets[static_cast<std::size_t>(b)], 0, len, packed.cols());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model/adapter checkpointing ("SFDM" container).

template <typename T>
void save_model(const std::string& path, const BaseModel<T>& m) {
    std::vector<NamedTensor> ts;
    auto push = [&](const char* name, const ag::Var<T>& v) {
        ts.push_back(NamedTensor::from_mat(name, v.value().template cast<float>()));
    };
    push("w1", m.w1);
    push("b1", m.b1);
    push("w2", m.w2);
    push("b2", m.b2);
    push("head_w", m.head_w);
    push("head_b", m.head_b);
    save_sfdm(path, ArtifactKind::model, ts);
}

template <typename T>
BaseModel<T> load_model(const std::string& path) {
    const SfdmFile f = load_sfdm(path);
    if (f.kind != ArtifactKind::model) throw format_error(path + ": not a model checkpoint");
    BaseModel<T> m;
    m.w1 = ag::Var<T>::constant(f.get("w1").to_mat().cast<T>());
    m.b1 = ag::Var<T>::constant(f.get("b1").to_mat().cast<T>());
    m.w2 = ag::Var<T>::constant(f.get("w2").to_mat().cast<T>());
    m.b2 = ag::Var<T>::constant(f.get("b2").to_mat().cast<T>());
    m.head_w = ag::Var<T>::constant(f.get("head_w").to_mat().cast<T>());
    m.head_b = ag::Var<T>::constant(f.get("head_b").to_mat().cast<T>());
    m.d_in = static_cast<int>(m.w1.cols());
    m.d = static_cast<int>(m.w1.rows());
    m.k_max = static_cast<int>(m.head_w.rows());
    return m;
}

template <typename T>
void save_adapter(const std::string& path, const LoraAdapter<T>& a) {
    std::vector<NamedTensor> ts;
    ts.push_back(NamedTensor::from_mat("down1", a.down1.value().template cast<float>()));
    ts.push_back(NamedTensor::from_mat("up1", a.up1.value().template cast<float>()));
    ts.push_back(NamedTensor::from_mat("down2", a.down2.value().template cast<float>()));
    ts.push_back(NamedTensor::from_mat("up2", a.up2.value().template cast<float>()));
    MatF meta(1, 3);
    meta << static_cast<float>(a.rank), static_cast<float>(a.alpha),
        static_cast<float>(a.dropout_p);
    ts.push_back(NamedTensor::from_mat("meta", meta));
    save_sfdm(path, ArtifactKind::adapter, ts);
}

template <typename T>
LoraAdapter<T> load_adapter(const std::string& path) {
    const SfdmFile f = load_sfdm(path);
    if (f.kind != ArtifactKind::adapter) throw format_error(path + ": not an adapter checkpoint");
    LoraAdapter<T> a;
    a.down1 = ag::Var<T>::param(f.get("down1").to_mat().cast<T>());
    a.up1 = ag::Var<T>::param(f.get("up1").to_mat().cast<T>());
    a.down2 = ag::Var<T>::param(f.get("down2").to_mat().cast<T>());
    a.up2 = ag::Var<T>::param(f.get("up2").to_mat().cast<T>());
    const MatF meta = f.get("meta").to_mat();
    a.rank = static_cast<int>(meta(0, 0));
    a.alpha = static_cast<T>(meta(0, 1));
    a.dropout_p = static_cast<T>(meta(0, 2));
    return a;
}

}  // namespace saefd
