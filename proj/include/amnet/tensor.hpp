// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with reverse-mode automatic
// differentiation on an explicit tape. Eager execution: every operation
// computes its value immediately and, when any input participates in
// gradient tracking, records a backward closure on the tape. One
// backward() traversal then fills the grad buffer of every reachable
// tensor. Single-threaded by contract; all reductions run in a fixed
// order so results are bit-reproducible.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "amnet/errors.hpp"
#include "amnet/rng.hpp"

namespace amnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until first accumulation
    bool requires_grad = false;
    bool on_tape = false; // produced by a recorded op

    bool needs_grad() const { return requires_grad || on_tape; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

} // namespace detail

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->values.assign(shape_numel(t.node_->shape), 0.0);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, std::mt19937_64& eng, double stddev,
                        bool requires_grad = true) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.node_->values) v = rng::normal(eng, 0.0, stddev);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->values.size(); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& values_mut() { return node_->values; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    /// Deep copy of values (gradient state is not copied).
    Tensor clone_values() const {
        Tensor t = from(node_->shape, node_->values, node_->requires_grad);
        return t;
    }

    double item() const {
        if (numel() != 1)
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->values[0];
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of executed differentiable operations. Ops append in
/// execution order, so the record is already topologically sorted; one
/// reverse sweep propagates gradients.
class Tape {
public:
    void record(const Tensor& out, std::function<void()> backward_fn) {
        steps_.push_back({out.node(), std::move(backward_fn)});
    }

    /// Populate grads of every tracked tensor reachable from `loss`.
    /// Intermediate (op-produced) grads are reset each call; leaf grads
    /// accumulate across calls until explicitly zeroed.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        for (auto& s : steps_) {
            s.out->grad.assign(s.out->values.size(), 0.0);
        }
        if (!loss.node()->on_tape && !loss.requires_grad())
            throw Error("backward: loss is not connected to the tape");
        loss.node()->ensure_grad();
        loss.node()->grad[0] = 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
    }

    void clear() { steps_.clear(); }
    std::size_t size() const { return steps_.size(); }

    bool enabled() const { return enabled_; }
    void set_enabled(bool e) { enabled_ = e; }

private:
    struct Step {
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> fn;
    };
    std::vector<Step> steps_;
    bool enabled_ = true;
};

namespace detail {

inline bool track(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->node()->needs_grad()) return true;
    return false;
}

inline void mark_and_record(Tape& tape, const Tensor& out, std::function<void()> fn) {
    out.node()->on_tape = true;
    tape.record(out, std::move(fn));
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const double* ap = a + p * k;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

} // namespace detail

/// Matrix product over the last two axes. Accepts [*, m, k] x [k, n]
/// (right operand broadcast over the batch) or [*, m, k] x [*, k, n]
/// with identical leading extents.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError("matmul: need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    const bool b_broadcast = sb.size() == 2 && sa.size() > 2;
    if (!b_broadcast && sa.size() != sb.size())
        throw ShapeError("matmul: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa[sa.size() - 1];
    const std::size_t kb = sb[sb.size() - 2];
    const std::size_t n = sb[sb.size() - 1];
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(sa) + " vs " +
                         shape_str(sb));
    std::size_t batch = 1;
    Shape out_shape;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
        batch *= sa[i];
        out_shape.push_back(sa[i]);
        if (!b_broadcast && sb[i] != sa[i])
            throw ShapeError("matmul: batch dimensions disagree: " + shape_str(sa) + " vs " +
                             shape_str(sb));
    }
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor out = Tensor::zeros(out_shape);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* pc = out.values_mut().data();
    for (std::size_t t = 0; t < batch; ++t) {
        detail::gemm_nn(pa + t * m * k, b_broadcast ? pb : pb + t * k * n, pc + t * m * n, m, k,
                        n);
    }

    if (detail::track(tape, {&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [an, bn, on, m, k, n, batch, b_broadcast] {
            const double* dc = on->grad.data();
            if (an->needs_grad()) {
                an->ensure_grad();
                for (std::size_t t = 0; t < batch; ++t) {
                    detail::gemm_nt(dc + t * m * n,
                                    b_broadcast ? bn->values.data() : bn->values.data() + t * k * n,
                                    an->grad.data() + t * m * k, m, n, k);
                }
            }
            if (bn->needs_grad()) {
                bn->ensure_grad();
                for (std::size_t t = 0; t < batch; ++t) {
                    detail::gemm_tn(an->values.data() + t * m * k, dc + t * m * n,
                                    b_broadcast ? bn->grad.data() : bn->grad.data() + t * k * n, m,
                                    k, n);
                }
            }
        });
    }
    return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] + b.values()[i];
    if (detail::track(tape, {&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [an, bn, on, n] {
            if (an->needs_grad()) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->needs_grad()) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] * b.values()[i];
    if (detail::track(tape, {&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [an, bn, on, n] {
            if (an->needs_grad()) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->values[i];
            }
            if (bn->needs_grad()) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->values[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] * c;
    if (detail::track(tape, {&a})) {
        auto an = a.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [an, on, c, n] {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

/// Adds a length-d vector over the last axis of x.
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.shape()[0])
        throw ShapeError("add_bias: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(bias.shape()));
    const std::size_t d = bias.numel();
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
            out.values_mut()[r * d + j] = x.values()[r * d + j] + bias.values()[j];
    if (detail::track(tape, {&x, &bias})) {
        auto xn = x.node();
        auto bn = bias.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, bn, on, rows, d] {
            if (xn->needs_grad()) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < rows * d; ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->needs_grad()) {
                bn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += on->grad[r * d + j];
            }
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = std::max(0.0, x.values()[i]);
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                if (xn->values[i] > 0.0) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.values()[i];
        out.values_mut()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                       : std::exp(v) / (1.0 + std::exp(v));
    }
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double y = on->values[i];
                xn->grad[i] += on->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

/// Softmax over the last axis, with per-row max subtraction for stability.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_rows: rank 0 input");
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    for (double v : x.values())
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.values().data() + r * d;
        double* yi = out.values_mut().data() + r * d;
        double mx = xi[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        for (std::size_t j = 0; j < d; ++j) yi[j] /= sum;
    }
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, on, rows, d] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->values.data() + r * d;
                const double* dy = on->grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                double* dx = xn->grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

/// Normalizes the last axis to mean 0 / variance 1, then applies the
/// per-channel affine transform gain * x_hat + bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be > 0");
    const std::size_t d = x.shape().back();
    if (d < 2) throw ShapeError("layer_norm: last axis must have extent > 1");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.values().data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = istd;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xi[j] - mean) * istd;
            (*xhat)[r * d + j] = xh;
            out.values_mut()[r * d + j] = gain.values()[j] * xh + bias.values()[j];
        }
    }
    if (detail::track(tape, {&x, &gain, &bias})) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, gn, bn, on, xhat, inv_std, rows, d] {
            if (gn->needs_grad()) gn->ensure_grad();
            if (bn->needs_grad()) bn->ensure_grad();
            if (xn->needs_grad()) xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = on->grad.data() + r * d;
                const double* xh = xhat->data() + r * d;
                if (gn->needs_grad())
                    for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[j] * xh[j];
                if (bn->needs_grad())
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
                if (xn->needs_grad()) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = dy[j] * gn->values[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    double* dx = xn->grad.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = dy[j] * gn->values[j];
                        dx[j] += (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat) * (*inv_std)[r];
                    }
                }
            }
        });
    }
    return out;
}

/// Inverted dropout: zero with probability `rate` at training time and
/// scale survivors by 1/(1-rate); identity at inference.
inline Tensor dropout(Tape& tape, const Tensor& x, double rate, bool training,
                      std::mt19937_64& eng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    const std::size_t n = x.numel();
    auto mask = std::make_shared<std::vector<double>>(n);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = rng::uniform01(eng) < rate ? 0.0 : keep_scale;
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = x.values()[i] * (*mask)[i];
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, on, mask, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * (*mask)[i];
        });
    }
    return out;
}

/// Gathers rows of a [rows, d] table; gradients scatter-add back to the
/// selected rows.
inline Tensor embedding_rows(Tape& tape, const Tensor& table,
                             const std::vector<std::size_t>& idx) {
    if (table.rank() != 2)
        throw ShapeError("embedding_rows: table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t rows = table.shape()[0];
    const std::size_t d = table.shape()[1];
    Tensor out = Tensor::zeros({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= rows)
            throw ShapeError("embedding_rows: index " + std::to_string(idx[i]) +
                             " out of range for " + shape_str(table.shape()));
        std::memcpy(out.values_mut().data() + i * d, table.values().data() + idx[i] * d,
                    d * sizeof(double));
    }
    if (detail::track(tape, {&table})) {
        auto tn = table.node();
        auto on = out.node();
        auto ids = std::make_shared<std::vector<std::size_t>>(idx);
        detail::mark_and_record(tape, out, [tn, on, ids, d] {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids->size(); ++i) {
                double* dst = tn->grad.data() + (*ids)[i] * d;
                const double* src = on->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

/// Scales each row (all-but-last axes flattened) by a fixed factor.
/// Factors are plain constants and receive no gradient.
inline Tensor scale_rows(Tape& tape, const Tensor& x, const std::vector<double>& factors) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    if (factors.size() != rows)
        throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                         std::to_string(rows) + " rows");
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
            out.values_mut()[r * d + j] = x.values()[r * d + j] * factors[r];
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        auto f = std::make_shared<std::vector<double>>(factors);
        detail::mark_and_record(tape, out, [xn, on, f, rows, d] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j)
                    xn->grad[r * d + j] += on->grad[r * d + j] * (*f)[r];
        });
    }
    return out;
}

/// Outer product of constant per-row factors with a single direction
/// vector: out[r, j] = factors[r] * vec[j].
inline Tensor outer_scale(Tape& tape, const Tensor& vec, const std::vector<double>& factors) {
    if (vec.rank() != 1)
        throw ShapeError("outer_scale: vector must be 1-D, got " + shape_str(vec.shape()));
    const std::size_t d = vec.numel();
    const std::size_t rows = factors.size();
    Tensor out = Tensor::zeros({rows, d});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
            out.values_mut()[r * d + j] = factors[r] * vec.values()[j];
    if (detail::track(tape, {&vec})) {
        auto vn = vec.node();
        auto on = out.node();
        auto f = std::make_shared<std::vector<double>>(factors);
        detail::mark_and_record(tape, out, [vn, on, f, rows, d] {
            vn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) vn->grad[j] += (*f)[r] * on->grad[r * d + j];
        });
    }
    return out;
}

inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    Shape out_shape = s0;
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape()[i] != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(s0));
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    Tensor out = Tensor::zeros(out_shape);
    std::size_t offset = 0; // offset along axis, in elements of `inner`
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(offset);
        const std::size_t width = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.values_mut().data() + o * axis_total * inner + offset,
                        p.values().data() + o * width, width * sizeof(double));
        offset += width;
    }

    bool any = false;
    for (const Tensor& p : parts)
        if (detail::track(tape, {&p})) any = true;
    if (any) {
        auto on = out.node();
        std::vector<std::shared_ptr<detail::TensorNode>> ins;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            ins.push_back(p.node());
            widths.push_back(p.shape()[axis] * inner);
        }
        detail::mark_and_record(tape, out, [on, ins, widths, offsets, outer, axis_total, inner] {
            for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                if (!ins[pi]->needs_grad()) continue;
                ins[pi]->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = on->grad.data() + o * axis_total * inner + offsets[pi];
                    double* dst = ins[pi]->grad.data() + o * widths[pi];
                    for (std::size_t j = 0; j < widths[pi]; ++j) dst[j] += src[j];
                }
            }
        });
    }
    return out;
}

/// Swaps two axes (copying).
inline Tensor transpose(Tape& tape, const Tensor& x, std::size_t ax0, std::size_t ax1) {
    const Shape& s = x.shape();
    if (ax0 >= s.size() || ax1 >= s.size())
        throw ShapeError("transpose: axis out of range for " + shape_str(s));
    Shape out_shape = s;
    std::swap(out_shape[ax0], out_shape[ax1]);

    std::vector<std::size_t> in_strides(s.size(), 1), out_strides(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
    for (std::size_t i = s.size(); i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];

    const std::size_t n = x.numel();
    auto map_index = [out_shape, in_strides, out_strides, ax0, ax1](std::size_t flat_out) {
        std::size_t rem = flat_out, flat_in = 0;
        for (std::size_t i = 0; i < out_shape.size(); ++i) {
            const std::size_t c = rem / out_strides[i];
            rem %= out_strides[i];
            std::size_t in_axis = i;
            if (i == ax0)
                in_axis = ax1;
            else if (i == ax1)
                in_axis = ax0;
            flat_in += c * in_strides[in_axis];
        }
        return flat_in;
    };

    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = x.values()[map_index(i)];
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::mark_and_record(tape, out, [xn, on, map_index, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xn->grad[map_index(i)] += on->grad[i];
        });
    }
    return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    Tensor out = Tensor::from(std::move(new_shape), x.values());
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        const std::size_t n = x.numel();
        detail::mark_and_record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (detail::track(tape, {&x})) {
        auto xn = x.node();
        auto on = out.node();
        const std::size_t n = x.numel();
        detail::mark_and_record(tape, out, [xn, on, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[0];
        });
    }
    return out;
}

/// Elementwise binary cross-entropy of probabilities against fixed 0/1
/// (or soft) targets. Probabilities are clamped to [1e-7, 1-1e-7].
inline Tensor bce_elements(Tape& tape, const Tensor& pred, const std::vector<double>& targets) {
    if (pred.numel() != targets.size())
        throw ShapeError("bce_elements: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(pred.shape()));
    constexpr double kClamp = 1e-7;
    const std::size_t n = pred.numel();
    Tensor out = Tensor::zeros(pred.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(pred.values()[i], kClamp, 1.0 - kClamp);
        const double t = targets[i];
        out.values_mut()[i] = -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    }
    if (detail::track(tape, {&pred})) {
        auto pn = pred.node();
        auto on = out.node();
        auto tg = std::make_shared<std::vector<double>>(targets);
        detail::mark_and_record(tape, out, [pn, on, tg, n] {
            constexpr double kC = 1e-7;
            pn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double p = std::clamp(pn->values[i], kC, 1.0 - kC);
                pn->grad[i] += on->grad[i] * (p - (*tg)[i]) / (p * (1.0 - p));
            }
        });
    }
    return out;
}

/// Elementwise squared error against fixed targets.
inline Tensor mse_elements(Tape& tape, const Tensor& pred, const std::vector<double>& targets) {
    if (pred.numel() != targets.size())
        throw ShapeError("mse_elements: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(pred.shape()));
    const std::size_t n = pred.numel();
    Tensor out = Tensor::zeros(pred.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = pred.values()[i] - targets[i];
        out.values_mut()[i] = diff * diff;
    }
    if (detail::track(tape, {&pred})) {
        auto pn = pred.node();
        auto on = out.node();
        auto tg = std::make_shared<std::vector<double>>(targets);
        detail::mark_and_record(tape, out, [pn, on, tg, n] {
            pn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                pn->grad[i] += on->grad[i] * 2.0 * (pn->values[i] - (*tg)[i]);
        });
    }
    return out;
}

} // namespace amnet
