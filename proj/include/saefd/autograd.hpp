#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "saefd/common.hpp"

// Minimal reverse-mode autodiff over row-major matrices. Everything in the
// pipeline (encoder, LoRA path, SAE, distillation losses) is composed from
// the primitives here, so analytic gradients come from one engine and can be
// finite-difference checked in double precision.
//
// Batches of sequences are packed before entering the graph: row = one
// non-padding token. Padding therefore never reaches the math.

namespace saefd::ag {

inline thread_local bool grad_enabled = true;

struct NoGradGuard {
    NoGradGuard() : prev(grad_enabled) { grad_enabled = false; }
    ~NoGradGuard() { grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    bool prev;
};

template <typename T>
struct Node {
    Mat<T> value;
    Mat<T> grad;  // empty until touched by backward()
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;  // distributes this->grad to parents
    bool requires_grad = false;

    Mat<T>& grad_ref() {
        if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Mat<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        return Var(std::move(n));
    }
    static Var scalar(T v) { return constant(Mat<T>::Constant(1, 1, v)); }
    static Var param(Mat<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Mat<T>& value() const { return node_->value; }
    Mat<T>& value() { return node_->value; }
    const Mat<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    T item() const {
        check_shape(rows() == 1 && cols() == 1, "item() requires a 1x1 value");
        return node_->value(0, 0);
    }

    void zero_grad() {
        if (node_) node_->grad.resize(0, 0);
    }

    // Accumulated gradient, zeros if backward never reached this node.
    Mat<T> grad_or_zero() const {
        if (node_->grad.size() == 0) return Mat<T>::Zero(rows(), cols());
        return node_->grad;
    }

    void backward() const {
        check_shape(rows() == 1 && cols() == 1, "backward() requires a scalar root");
        if (!node_->requires_grad) return;
        std::vector<Node<T>*> order = topo_order();
        node_->grad_ref()(0, 0) += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backprop && n->grad.size() != 0) n->backprop(*n);
        }
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    std::vector<Node<T>*> topo_order() const {
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_op(Mat<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
               std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) {
                n->requires_grad = true;
                break;
            }
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return Var<T>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(
        a.value() + b.value(), {an, bn}, [an, bn](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad;
            if (bn->requires_grad) bn->grad_ref() += out.grad;
        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(
        a.value() - b.value(), {an, bn}, [an, bn](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad;
            if (bn->requires_grad) bn->grad_ref() -= out.grad;
        });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {  // Hadamard
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(
        a.value().cwiseProduct(b.value()), {an, bn}, [an, bn](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad.cwiseProduct(bn->value);
            if (bn->requires_grad) bn->grad_ref() += out.grad.cwiseProduct(an->value);
        });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "div: shape mismatch");
    auto an = a.node(), bn = b.node();
    return detail::make_op<T>(
        a.value().cwiseQuotient(b.value()), {an, bn}, [an, bn](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad.cwiseQuotient(bn->value);
            if (bn->requires_grad)
                bn->grad_ref() -= out.grad.cwiseProduct(out.value).cwiseQuotient(bn->value);
        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    auto an = a.node();
    return detail::make_op<T>(a.value() * c, {an}, [an, c](Node<T>& out) {
        if (an->requires_grad) an->grad_ref() += out.grad * c;
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    auto an = a.node();
    return detail::make_op<T>(
        (a.value().array() + c).matrix(), {an}, [an](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad;
        });
}

// Broadcast-add a 1xM row vector to every row.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& rv) {
    check_shape(rv.rows() == 1 && rv.cols() == a.cols(), "add_rowvec: shape mismatch");
    auto an = a.node(), rn = rv.node();
    return detail::make_op<T>(
        a.value().rowwise() + rv.value().row(0), {an, rn}, [an, rn](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad;
            if (rn->requires_grad) rn->grad_ref() += out.grad.colwise().sum();
        });
}

// ---------------------------------------------------------------------------
// Linear maps

// y = x * W^T (+ b), x: NxI, W: OxI, b: 1xO. The workhorse for affine layers,
// SAE encoders and classifier heads.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
    check_shape(x.cols() == w.cols(), "linear: inner dimension mismatch");
    auto xn = x.node(), wn = w.node();
    Mat<T> y(x.rows(), w.rows());
    y.noalias() = x.value() * w.value().transpose();
    return detail::make_op<T>(std::move(y), {xn, wn}, [xn, wn](Node<T>& out) {
        if (xn->requires_grad) xn->grad_ref().noalias() += out.grad * wn->value;
        if (wn->requires_grad) wn->grad_ref().noalias() += out.grad.transpose() * xn->value;
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return add_rowvec(linear(x, w), b);
}

// y = a * b, a: NxK, b: KxM (no transpose). Used for SAE decoding, where
// decoder row k is feature k's direction.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    check_shape(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    auto an = a.node(), bn = b.node();
    Mat<T> y(a.rows(), b.cols());
    y.noalias() = a.value() * b.value();
    return detail::make_op<T>(std::move(y), {an, bn}, [an, bn](Node<T>& out) {
        if (an->requires_grad) an->grad_ref().noalias() += out.grad * bn->value.transpose();
        if (bn->requires_grad) bn->grad_ref().noalias() += an->value.transpose() * out.grad;
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    auto an = a.node();
    Mat<T> y = a.value().unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    return detail::make_op<T>(std::move(y), {an}, [an](Node<T>& out) {
        if (an->requires_grad)
            an->grad_ref().array() +=
                out.grad.array() * out.value.array() * (T(1) - out.value.array());
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    auto an = a.node();
    return detail::make_op<T>(
        a.value().cwiseMax(T(0)), {an}, [an](Node<T>& out) {
            if (an->requires_grad)
                an->grad_ref().array() +=
                    out.grad.array() * (an->value.array() > T(0)).template cast<T>();
        });
}

// Exact GELU: x * Phi(x) with the Gaussian CDF.
template <typename T>
Var<T> gelu(const Var<T>& a) {
    auto an = a.node();
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    Mat<T> y = a.value().unaryExpr(
        [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
    return detail::make_op<T>(std::move(y), {an}, [an](Node<T>& out) {
        if (!an->requires_grad) return;
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        Mat<T> d = an->value.unaryExpr([](T v) {
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            return cdf + v * pdf;
        });
        an->grad_ref() += out.grad.cwiseProduct(d);
    });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    auto an = a.node();
    return detail::make_op<T>(
        a.value().cwiseProduct(a.value()), {an}, [an](Node<T>& out) {
            if (an->requires_grad)
                an->grad_ref() += T(2) * out.grad.cwiseProduct(an->value);
        });
}

// Elementwise square root; caller guarantees strictly positive input.
template <typename T>
Var<T> sqrt_pos(const Var<T>& a) {
    auto an = a.node();
    return detail::make_op<T>(
        a.value().cwiseSqrt(), {an}, [an](Node<T>& out) {
            if (an->requires_grad)
                an->grad_ref().array() += out.grad.array() * T(0.5) / out.value.array();
        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
    auto an = a.node();
    return detail::make_op<T>(
        Mat<T>::Constant(1, 1, a.value().sum()), {an}, [an](Node<T>& out) {
            if (an->requires_grad) an->grad_ref().array() += out.grad(0, 0);
        });
}

// sum(a .* w) with a constant weight matrix; the building block for all the
// masked/token-averaged losses.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, Mat<T> w) {
    check_shape(a.rows() == w.rows() && a.cols() == w.cols(), "weighted_sum: shape mismatch");
    auto an = a.node();
    const T v = a.value().cwiseProduct(w).sum();
    return detail::make_op<T>(
        Mat<T>::Constant(1, 1, v), {an}, [an, w = std::move(w)](Node<T>& out) {
            if (an->requires_grad) an->grad_ref() += out.grad(0, 0) * w;
        });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.rows() * a.cols()));
}

// Per-row dot product -> Nx1.
template <typename T>
Var<T> rowwise_dot(const Var<T>& a, const Var<T>& b) {
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "rowwise_dot: shape mismatch");
    auto an = a.node(), bn = b.node();
    Mat<T> y = a.value().cwiseProduct(b.value()).rowwise().sum();
    return detail::make_op<T>(std::move(y), {an, bn}, [an, bn](Node<T>& out) {
        const auto g = out.grad.col(0).array();  // Nx1
        if (an->requires_grad)
            an->grad_ref().array() += bn->value.array().colwise() * g;
        if (bn->requires_grad)
            bn->grad_ref().array() += an->value.array().colwise() * g;
    });
}

// Mean over each sample's token rows: tokens NxM + segment id per row -> BxM.
template <typename T>
Var<T> segment_mean(const Var<T>& a, const std::vector<int>& seg, int num_segments) {
    check_shape(static_cast<Eigen::Index>(seg.size()) == a.rows(),
                "segment_mean: segment ids must cover every row");
    std::vector<T> inv_count(static_cast<std::size_t>(num_segments), T(0));
    for (int s : seg) {
        check_shape(s >= 0 && s < num_segments, "segment_mean: segment id out of range");
        inv_count[static_cast<std::size_t>(s)] += T(1);
    }
    for (auto& c : inv_count) {
        if (c == T(0)) throw usage_error("segment_mean: empty segment");
        c = T(1) / c;
    }
    Mat<T> y = Mat<T>::Zero(num_segments, a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        y.row(seg[static_cast<std::size_t>(i)]) +=
            a.value().row(i) * inv_count[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])];
    auto an = a.node();
    return detail::make_op<T>(std::move(y), {an}, [an, seg, inv_count](Node<T>& out) {
        if (!an->requires_grad) return;
        auto& g = an->grad_ref();
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const auto s = static_cast<std::size_t>(seg[static_cast<std::size_t>(i)]);
            g.row(i) += out.grad.row(static_cast<Eigen::Index>(s)) * inv_count[s];
        }
    });
}

// Mean negative log-softmax of the true class. Stable (row-max shifted);
// softmax cached for the backward pass.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const Eigen::Index n = logits.rows(), k = logits.cols();
    check_shape(static_cast<Eigen::Index>(labels.size()) == n,
                "cross_entropy: one label per row required");
    for (int y : labels)
        if (y < 0 || y >= k)
            throw usage_error("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                              std::to_string(k) + ")");
    auto probs = std::make_shared<Mat<T>>(n, k);
    T loss = T(0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T m = logits.value().row(i).maxCoeff();
        Mat<T> e = (logits.value().row(i).array() - m).exp();
        const T z = e.sum();
        probs->row(i) = e / z;
        loss += std::log(z) - (logits.value()(i, labels[static_cast<std::size_t>(i)]) - m);
    }
    loss /= static_cast<T>(n);
    auto ln = logits.node();
    return detail::make_op<T>(
        Mat<T>::Constant(1, 1, loss), {ln}, [ln, probs, labels](Node<T>& out) {
            if (!ln->requires_grad) return;
            const T g = out.grad(0, 0) / static_cast<T>(probs->rows());
            auto& acc = ln->grad_ref();
            acc += *probs * g;
            for (Eigen::Index i = 0; i < probs->rows(); ++i)
                acc(i, labels[static_cast<std::size_t>(i)]) -= g;
        });
}

}  // namespace saefd::ag
