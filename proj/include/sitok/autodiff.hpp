#pragma once

// Reverse-mode automatic differentiation on a dynamic tape.  Operations
// execute eagerly; when a tape is active and an input requires gradients,
// the op also pushes a backward closure.  backward() replays the closures
// newest-first, accumulating into per-node gradient buffers.
//
// One tape per training step.  Clearing the tape releases the graph (the
// closures hold the only owning references to intermediate nodes).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sitok/errors.hpp"
#include "sitok/tensor.hpp"

namespace sitok::ad {

// Runtime toggle: scan every op output for NaN/Inf and throw instead of
// silently propagating.  Cheap at this scale; on by default.
inline bool& finite_checks() {
    static bool on = true;
    return on;
}

template <class Real>
struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::string name;   // set for parameters, empty for intermediates

    void zero_grad() { grad.fill(Real(0)); }
};

template <class Real>
using Var = std::shared_ptr<Node<Real>>;

template <class Real>
class Tape {
public:
    void record(std::function<void()> back) { backs_.push_back(std::move(back)); }
    std::size_t size() const { return backs_.size(); }
    void clear() { backs_.clear(); }

    void backward(const Var<Real>& root) {
        if (root->value.numel() != 1)
            throw numerical_error("backward: root must be a scalar");
        if (!root->requires_grad)
            throw numerical_error("backward: root is not connected to any parameter");
        root->grad.data[0] = Real(1);
        for (auto it = backs_.rbegin(); it != backs_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> backs_;
};

template <class Real>
inline Tape<Real>*& active_tape() {
    thread_local Tape<Real>* t = nullptr;
    return t;
}

// RAII activation; ops run untaped (inference) outside any scope.
template <class Real>
struct TapeScope {
    explicit TapeScope(Tape<Real>& t) : prev_(active_tape<Real>()) { active_tape<Real>() = &t; }
    ~TapeScope() { active_tape<Real>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<Real>* prev_;
};

// RAII deactivation: everything inside runs untaped even within an active
// scope.  Used for stop-gradient targets and samplers called mid-step.
template <class Real>
struct TapeSuspend {
    TapeSuspend() : prev_(active_tape<Real>()) { active_tape<Real>() = nullptr; }
    ~TapeSuspend() { active_tape<Real>() = prev_; }
    TapeSuspend(const TapeSuspend&) = delete;
    TapeSuspend& operator=(const TapeSuspend&) = delete;

private:
    Tape<Real>* prev_;
};

template <class Real>
Var<Real> make_param(Tensor<Real> v, std::string name = {}) {
    auto n = std::make_shared<Node<Real>>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->grad = Tensor<Real>(n->value.shape);
    n->name = std::move(name);
    return n;
}

template <class Real>
Var<Real> constant(Tensor<Real> v) {
    auto n = std::make_shared<Node<Real>>();
    n->value = std::move(v);
    n->requires_grad = false;
    return n;
}

template <class Real>
Var<Real> detach(const Var<Real>& v) {
    return constant<Real>(v->value);
}

namespace detail {

template <class Real>
Var<Real> make_out(Tensor<Real> v, bool inputs_need_grad, const char* opname) {
    if (finite_checks() && !v.all_finite())
        throw numerical_error(std::string(opname) + ": produced non-finite values");
    auto n = std::make_shared<Node<Real>>();
    n->value = std::move(v);
    n->requires_grad = inputs_need_grad && active_tape<Real>() != nullptr;
    if (n->requires_grad) n->grad = Tensor<Real>(n->value.shape);
    return n;
}

template <class Real, class F>
void record_if(const Var<Real>& out, F&& back) {
    if (out->requires_grad) active_tape<Real>()->record(std::forward<F>(back));
}

template <class Real>
void require_same_shape(const Var<Real>& a, const Var<Real>& b, const char* opname) {
    if (!a->value.same_shape(b->value))
        throw numerical_error(std::string(opname) + ": shape mismatch " +
                              a->value.shape_str() + " vs " + b->value.shape_str());
}

}  // namespace detail

// ----- elementwise and linear ----------------------------------------------

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<Real> v = a->value;
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] += b->value.data[i];
    auto out = detail::make_out(std::move(v), a->requires_grad || b->requires_grad, "add");
    detail::record_if(out, [a, b, out] {
        const auto& g = out->grad.data;
        if (a->requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) a->grad.data[i] += g[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) b->grad.data[i] += g[i];
    });
    return out;
}

template <class Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<Real> v = a->value;
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] -= b->value.data[i];
    auto out = detail::make_out(std::move(v), a->requires_grad || b->requires_grad, "sub");
    detail::record_if(out, [a, b, out] {
        const auto& g = out->grad.data;
        if (a->requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) a->grad.data[i] += g[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) b->grad.data[i] -= g[i];
    });
    return out;
}

template <class Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<Real> v = a->value;
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] *= b->value.data[i];
    auto out = detail::make_out(std::move(v), a->requires_grad || b->requires_grad, "mul");
    detail::record_if(out, [a, b, out] {
        const auto& g = out->grad.data;
        if (a->requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) a->grad.data[i] += g[i] * b->value.data[i];
        if (b->requires_grad)
            for (std::size_t i = 0; i < g.size(); ++i) b->grad.data[i] += g[i] * a->value.data[i];
    });
    return out;
}

template <class Real>
Var<Real> scale(const Var<Real>& a, Real c) {
    Tensor<Real> v = a->value;
    for (Real& x : v.data) x *= c;
    auto out = detail::make_out(std::move(v), a->requires_grad, "scale");
    detail::record_if(out, [a, out, c] {
        for (std::size_t i = 0; i < out->grad.data.size(); ++i)
            a->grad.data[i] += c * out->grad.data[i];
    });
    return out;
}

// x[t,d] + b[d]; the only broadcast this library supports.
template <class Real>
Var<Real> add_bias(const Var<Real>& x, const Var<Real>& b) {
    const int rows = x->value.rows(), cols = x->value.cols();
    if (b->value.numel() != cols)
        throw numerical_error("add_bias: bias length " + b->value.shape_str() +
                              " does not match columns of " + x->value.shape_str());
    Tensor<Real> v = x->value;
    for (int t = 0; t < rows; ++t)
        for (int d = 0; d < cols; ++d) v.at(t, d) += b->value.data[d];
    auto out = detail::make_out(std::move(v), x->requires_grad || b->requires_grad, "add_bias");
    detail::record_if(out, [x, b, out, rows, cols] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->grad.data.size(); ++i)
                x->grad.data[i] += out->grad.data[i];
        if (b->requires_grad)
            for (int t = 0; t < rows; ++t)
                for (int d = 0; d < cols; ++d) b->grad.data[d] += out->grad.at(t, d);
    });
    return out;
}

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.shape[1] != b->value.shape[0])
        throw numerical_error("matmul: incompatible shapes " + a->value.shape_str() + " and " +
                              b->value.shape_str());
    const int m = a->value.shape[0], k = a->value.shape[1], n = b->value.shape[1];
    Tensor<Real> v({m, n});
    gemm<Real>(false, false, m, n, k, a->value.data.data(), b->value.data.data(), v.data.data(),
               false);
    auto out = detail::make_out(std::move(v), a->requires_grad || b->requires_grad, "matmul");
    detail::record_if(out, [a, b, out, m, k, n] {
        // dA += dC B^T,  dB += A^T dC
        if (a->requires_grad)
            gemm<Real>(false, true, m, k, n, out->grad.data.data(), b->value.data.data(),
                       a->grad.data.data(), true);
        if (b->requires_grad)
            gemm<Real>(true, false, k, n, m, a->value.data.data(), out->grad.data.data(),
                       b->grad.data.data(), true);
    });
    return out;
}

template <class Real>
Var<Real> transpose(const Var<Real>& a) {
    const int r = a->value.rows(), c = a->value.cols();
    Tensor<Real> v({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v.at(j, i) = a->value.at(i, j);
    auto out = detail::make_out(std::move(v), a->requires_grad, "transpose");
    detail::record_if(out, [a, out, r, c] {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) a->grad.at(i, j) += out->grad.at(j, i);
    });
    return out;
}

template <class Real>
Var<Real> reshape(const Var<Real>& a, std::vector<int> shape) {
    if (Tensor<Real>::count(shape) != a->value.numel())
        throw numerical_error("reshape: element count mismatch");
    Tensor<Real> v = a->value;
    v.shape = std::move(shape);
    auto out = detail::make_out(std::move(v), a->requires_grad, "reshape");
    detail::record_if(out, [a, out] {
        for (std::size_t i = 0; i < out->grad.data.size(); ++i)
            a->grad.data[i] += out->grad.data[i];
    });
    return out;
}

// ----- structural ops -------------------------------------------------------

template <class Real>
Var<Real> concat(const std::vector<Var<Real>>& parts, int axis) {
    if (parts.empty()) throw numerical_error("concat: no inputs");
    const int r0 = parts[0]->value.rows(), c0 = parts[0]->value.cols();
    bool needs = false;
    int total = 0;
    for (const auto& p : parts) {
        needs = needs || p->requires_grad;
        if (axis == 1 && p->value.rows() != r0)
            throw numerical_error("concat: row mismatch");
        if (axis == 0 && p->value.cols() != c0)
            throw numerical_error("concat: column mismatch");
        total += (axis == 1) ? p->value.cols() : p->value.rows();
    }
    Tensor<Real> v(axis == 1 ? std::vector<int>{r0, total} : std::vector<int>{total, c0});
    int off = 0;
    for (const auto& p : parts) {
        const int pr = p->value.rows(), pc = p->value.cols();
        if (axis == 1) {
            for (int i = 0; i < pr; ++i)
                for (int j = 0; j < pc; ++j) v.at(i, off + j) = p->value.at(i, j);
            off += pc;
        } else {
            for (int i = 0; i < pr; ++i)
                for (int j = 0; j < pc; ++j) v.at(off + i, j) = p->value.at(i, j);
            off += pr;
        }
    }
    auto out = detail::make_out(std::move(v), needs, "concat");
    detail::record_if(out, [parts, out, axis] {
        int off = 0;
        for (const auto& p : parts) {
            const int pr = p->value.rows(), pc = p->value.cols();
            if (p->requires_grad) {
                if (axis == 1) {
                    for (int i = 0; i < pr; ++i)
                        for (int j = 0; j < pc; ++j) p->grad.at(i, j) += out->grad.at(i, off + j);
                } else {
                    for (int i = 0; i < pr; ++i)
                        for (int j = 0; j < pc; ++j) p->grad.at(i, j) += out->grad.at(off + i, j);
                }
            }
            off += (axis == 1) ? pc : pr;
        }
    });
    return out;
}

// Half-open row/column rectangle of a 2-D tensor.
template <class Real>
Var<Real> slice(const Var<Real>& a, int r0, int r1, int c0, int c1) {
    if (r0 < 0 || c0 < 0 || r1 > a->value.rows() || c1 > a->value.cols() || r0 >= r1 || c0 >= c1)
        throw numerical_error("slice: bad range for " + a->value.shape_str());
    Tensor<Real> v({r1 - r0, c1 - c0});
    for (int i = r0; i < r1; ++i)
        for (int j = c0; j < c1; ++j) v.at(i - r0, j - c0) = a->value.at(i, j);
    auto out = detail::make_out(std::move(v), a->requires_grad, "slice");
    detail::record_if(out, [a, out, r0, r1, c0, c1] {
        for (int i = r0; i < r1; ++i)
            for (int j = c0; j < c1; ++j) a->grad.at(i, j) += out->grad.at(i - r0, j - c0);
    });
    return out;
}

template <class Real>
Var<Real> slice_rows(const Var<Real>& a, int r0, int r1) {
    return slice(a, r0, r1, 0, a->value.cols());
}

template <class Real>
Var<Real> slice_cols(const Var<Real>& a, int c0, int c1) {
    return slice(a, 0, a->value.rows(), c0, c1);
}

// Select rows by index, repeats allowed; backward scatter-adds.  Also serves
// as embedding lookup with a table as the source.
template <class Real>
Var<Real> gather_rows(const Var<Real>& a, std::vector<int> idx) {
    const int r = a->value.rows(), c = a->value.cols();
    for (int i : idx)
        if (i < 0 || i >= r) throw numerical_error("gather_rows: index out of range");
    Tensor<Real> v({static_cast<int>(idx.size()), c});
    for (std::size_t t = 0; t < idx.size(); ++t)
        for (int j = 0; j < c; ++j) v.at(static_cast<int>(t), j) = a->value.at(idx[t], j);
    auto out = detail::make_out(std::move(v), a->requires_grad, "gather_rows");
    detail::record_if(out, [a, out, idx = std::move(idx), c] {
        for (std::size_t t = 0; t < idx.size(); ++t)
            for (int j = 0; j < c; ++j)
                a->grad.at(idx[t], j) += out->grad.at(static_cast<int>(t), j);
    });
    return out;
}

// ----- nonlinearities -------------------------------------------------------

template <class Real>
Var<Real> silu(const Var<Real>& a) {
    Tensor<Real> v = a->value;
    for (Real& x : v.data) {
        const Real s = Real(1) / (Real(1) + std::exp(-x));
        x = x * s;
    }
    auto out = detail::make_out(std::move(v), a->requires_grad, "silu");
    detail::record_if(out, [a, out] {
        for (std::size_t i = 0; i < out->grad.data.size(); ++i) {
            const Real x = a->value.data[i];
            const Real s = Real(1) / (Real(1) + std::exp(-x));
            // d/dx [x*sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
            a->grad.data[i] += out->grad.data[i] * s * (Real(1) + x * (Real(1) - s));
        }
    });
    return out;
}

template <class Real>
Var<Real> softmax_lastdim(const Var<Real>& a) {
    Tensor<Real> v(a->value.shape);
    softmax_rows(a->value, v);
    auto out = detail::make_out(std::move(v), a->requires_grad, "softmax_lastdim");
    detail::record_if(out, [a, out] {
        const int r = out->value.rows(), c = out->value.cols();
        for (int i = 0; i < r; ++i) {
            Real dot(0);
            for (int j = 0; j < c; ++j) dot += out->grad.at(i, j) * out->value.at(i, j);
            for (int j = 0; j < c; ++j)
                a->grad.at(i, j) += out->value.at(i, j) * (out->grad.at(i, j) - dot);
        }
    });
    return out;
}

template <class Real>
Var<Real> log_softmax_lastdim(const Var<Real>& a) {
    Tensor<Real> v(a->value.shape);
    log_softmax_rows(a->value, v);
    auto out = detail::make_out(std::move(v), a->requires_grad, "log_softmax_lastdim");
    detail::record_if(out, [a, out] {
        const int r = out->value.rows(), c = out->value.cols();
        for (int i = 0; i < r; ++i) {
            Real gsum(0);
            for (int j = 0; j < c; ++j) gsum += out->grad.at(i, j);
            for (int j = 0; j < c; ++j)
                a->grad.at(i, j) += out->grad.at(i, j) - std::exp(out->value.at(i, j)) * gsum;
        }
    });
    return out;
}

// Per-row inverse RMS: r_t = (mean_d x_{t,d}^2 + eps)^{-1/2}, shape [T,1].
template <class Real>
Var<Real> inv_rms(const Var<Real>& a, Real eps) {
    const int r = a->value.rows(), c = a->value.cols();
    Tensor<Real> v({r, 1});
    for (int i = 0; i < r; ++i) {
        Real m(0);
        for (int j = 0; j < c; ++j) m += a->value.at(i, j) * a->value.at(i, j);
        v.at(i, 0) = Real(1) / std::sqrt(m / Real(c) + eps);
    }
    auto out = detail::make_out(std::move(v), a->requires_grad, "inv_rms");
    detail::record_if(out, [a, out, r, c] {
        for (int i = 0; i < r; ++i) {
            const Real rv = out->value.at(i, 0);
            const Real g = out->grad.at(i, 0);
            const Real k = -g * rv * rv * rv / Real(c);
            for (int j = 0; j < c; ++j) a->grad.at(i, j) += k * a->value.at(i, j);
        }
    });
    return out;
}

// y[t,d] = x[t,d] * r[t]
template <class Real>
Var<Real> scale_rows(const Var<Real>& x, const Var<Real>& r) {
    const int rows = x->value.rows(), cols = x->value.cols();
    if (r->value.numel() != rows)
        throw numerical_error("scale_rows: row scale length mismatch");
    Tensor<Real> v = x->value;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) v.at(i, j) *= r->value.data[i];
    auto out = detail::make_out(std::move(v), x->requires_grad || r->requires_grad, "scale_rows");
    detail::record_if(out, [x, r, out, rows, cols] {
        for (int i = 0; i < rows; ++i) {
            const Real rv = r->value.data[i];
            Real acc(0);
            for (int j = 0; j < cols; ++j) {
                const Real g = out->grad.at(i, j);
                if (x->requires_grad) x->grad.at(i, j) += g * rv;
                acc += g * x->value.at(i, j);
            }
            if (r->requires_grad) r->grad.data[i] += acc;
        }
    });
    return out;
}

// y[t,d] = x[t,d] * g[d]
template <class Real>
Var<Real> scale_cols(const Var<Real>& x, const Var<Real>& g) {
    const int rows = x->value.rows(), cols = x->value.cols();
    if (g->value.numel() != cols)
        throw numerical_error("scale_cols: column scale length mismatch");
    Tensor<Real> v = x->value;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) v.at(i, j) *= g->value.data[j];
    auto out = detail::make_out(std::move(v), x->requires_grad || g->requires_grad, "scale_cols");
    detail::record_if(out, [x, g, out, rows, cols] {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                const Real gr = out->grad.at(i, j);
                if (x->requires_grad) x->grad.at(i, j) += gr * g->value.data[j];
                if (g->requires_grad) g->grad.data[j] += gr * x->value.at(i, j);
            }
    });
    return out;
}

// ----- reductions and losses ------------------------------------------------

template <class Real>
Var<Real> sum_all(const Var<Real>& a) {
    Real s(0);
    for (Real v : a->value.data) s += v;
    auto out = detail::make_out(Tensor<Real>::scalar(s), a->requires_grad, "sum_all");
    detail::record_if(out, [a, out] {
        const Real g = out->grad.data[0];
        for (Real& d : a->grad.data) d += g;
    });
    return out;
}

template <class Real>
Var<Real> mean_all(const Var<Real>& a) {
    const Real inv = Real(1) / Real(a->value.numel());
    Real s(0);
    for (Real v : a->value.data) s += v;
    auto out = detail::make_out(Tensor<Real>::scalar(s * inv), a->requires_grad, "mean_all");
    detail::record_if(out, [a, out, inv] {
        const Real g = out->grad.data[0] * inv;
        for (Real& d : a->grad.data) d += g;
    });
    return out;
}

namespace detail {

// Shared core for the two pointwise regression losses.  row_weights (may be
// empty = all ones) weights entire rows; the normalizer is cols * sum(w), so
// with unit weights this is a plain mean over elements.
template <class Real, bool Squared>
Var<Real> pointwise_loss(const Var<Real>& pred, const Var<Real>& target,
                         const Tensor<Real>& row_weights) {
    require_same_shape(pred, target, Squared ? "l2_loss" : "l1_loss");
    const int rows = pred->value.rows(), cols = pred->value.cols();
    const bool weighted = row_weights.numel() != 0;
    if (weighted && row_weights.numel() != rows)
        throw numerical_error("loss: row weight length mismatch");
    Real wsum(0);
    if (weighted)
        for (Real w : row_weights.data) wsum += w;
    else
        wsum = Real(rows);
    if (wsum <= Real(0)) throw numerical_error("loss: no weighted rows");
    const Real denom = Real(1) / (wsum * Real(cols));
    Real acc(0);
    for (int i = 0; i < rows; ++i) {
        const Real w = weighted ? row_weights.data[i] : Real(1);
        if (w == Real(0)) continue;
        for (int j = 0; j < cols; ++j) {
            const Real d = pred->value.at(i, j) - target->value.at(i, j);
            acc += w * (Squared ? d * d : std::abs(d));
        }
    }
    auto out = make_out(Tensor<Real>::scalar(acc * denom),
                        pred->requires_grad || target->requires_grad,
                        Squared ? "l2_loss" : "l1_loss");
    record_if(out, [pred, target, out, row_weights, weighted, denom, rows, cols] {
        const Real g = out->grad.data[0] * denom;
        for (int i = 0; i < rows; ++i) {
            const Real w = weighted ? row_weights.data[i] : Real(1);
            if (w == Real(0)) continue;
            for (int j = 0; j < cols; ++j) {
                const Real d = pred->value.at(i, j) - target->value.at(i, j);
                Real gd;
                if constexpr (Squared)
                    gd = g * w * Real(2) * d;
                else
                    gd = g * w * (d > Real(0) ? Real(1) : (d < Real(0) ? Real(-1) : Real(0)));
                if (pred->requires_grad) pred->grad.at(i, j) += gd;
                if (target->requires_grad) target->grad.at(i, j) -= gd;
            }
        }
    });
    return out;
}

}  // namespace detail

template <class Real>
Var<Real> l1_loss(const Var<Real>& pred, const Var<Real>& target,
                  const Tensor<Real>& row_weights = {}) {
    return detail::pointwise_loss<Real, false>(pred, target, row_weights);
}

template <class Real>
Var<Real> l2_loss(const Var<Real>& pred, const Var<Real>& target,
                  const Tensor<Real>& row_weights = {}) {
    return detail::pointwise_loss<Real, true>(pred, target, row_weights);
}

// ----- position and time conditioning --------------------------------------

// Rotary position encoding over adjacent dimension pairs: pair i of row t is
// rotated by angle t * base^(-2i/D).  Exact backward is rotation by the
// negated angle applied to the incoming gradient.
template <class Real>
Var<Real> rope(const Var<Real>& x, Real base, int pos_offset = 0) {
    const int rows = x->value.rows(), cols = x->value.cols();
    if (cols % 2 != 0) throw numerical_error("rope: feature dim must be even");
    Tensor<Real> v = x->value;
    for (int t = 0; t < rows; ++t) {
        const Real pos = Real(t + pos_offset);
        for (int i = 0; i < cols / 2; ++i) {
            const Real theta = pos * std::pow(base, Real(-2) * Real(i) / Real(cols));
            const Real c = std::cos(theta), s = std::sin(theta);
            const Real a = v.at(t, 2 * i), b = v.at(t, 2 * i + 1);
            v.at(t, 2 * i) = a * c - b * s;
            v.at(t, 2 * i + 1) = a * s + b * c;
        }
    }
    auto out = detail::make_out(std::move(v), x->requires_grad, "rope");
    detail::record_if(out, [x, out, rows, cols, base, pos_offset] {
        for (int t = 0; t < rows; ++t) {
            const Real pos = Real(t + pos_offset);
            for (int i = 0; i < cols / 2; ++i) {
                const Real theta = pos * std::pow(base, Real(-2) * Real(i) / Real(cols));
                const Real c = std::cos(theta), s = std::sin(theta);
                const Real ga = out->grad.at(t, 2 * i), gb = out->grad.at(t, 2 * i + 1);
                x->grad.at(t, 2 * i) += ga * c + gb * s;
                x->grad.at(t, 2 * i + 1) += -ga * s + gb * c;
            }
        }
    });
    return out;
}

// Sinusoidal features of a column of scalars (times or step sizes) in [0,1].
// Frequencies run geometrically from 1 to 1e4; layout is [sines | cosines].
// Differentiable in the input so gradient checks can probe d(output)/dt.
template <class Real>
Var<Real> sinusoid_features(const Var<Real>& t, int dim) {
    if (t->value.cols() != 1) throw numerical_error("sinusoid_features: input must be [B,1]");
    if (dim % 2 != 0) throw numerical_error("sinusoid_features: dim must be even");
    const int rows = t->value.rows(), half = dim / 2;
    std::vector<Real> freqs(half);
    for (int j = 0; j < half; ++j)
        freqs[j] = half == 1 ? Real(1)
                             : std::pow(Real(10000), Real(j) / Real(half - 1));
    Tensor<Real> v({rows, dim});
    for (int b = 0; b < rows; ++b) {
        const Real tv = t->value.at(b, 0);
        for (int j = 0; j < half; ++j) {
            v.at(b, j) = std::sin(freqs[j] * tv);
            v.at(b, half + j) = std::cos(freqs[j] * tv);
        }
    }
    auto out = detail::make_out(std::move(v), t->requires_grad, "sinusoid_features");
    detail::record_if(out, [t, out, freqs = std::move(freqs), rows, half] {
        for (int b = 0; b < rows; ++b) {
            const Real tv = t->value.at(b, 0);
            Real acc(0);
            for (int j = 0; j < half; ++j) {
                acc += out->grad.at(b, j) * freqs[j] * std::cos(freqs[j] * tv);
                acc -= out->grad.at(b, half + j) * freqs[j] * std::sin(freqs[j] * tv);
            }
            t->grad.at(b, 0) += acc;
        }
    });
    return out;
}

// ----- finite-difference gradient checking ---------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]" of the worst coordinate
    double worst_ad = 0.0;
    double worst_fd = 0.0;

    bool ok(double tol) const { return max_rel_err < tol; }
};

// Compares tape gradients of a scalar-valued builder against central finite
// differences over every coordinate of `wrt`.  The builder must be
// deterministic and rebuild its graph from the same nodes on each call; it is
// evaluated untaped during the differencing passes.  Relative error is
// |ad - fd| / max(1, |fd|).
template <class Real, class MakeLoss>
GradCheckReport grad_check(MakeLoss make_loss, const std::vector<Var<Real>>& wrt,
                           Real h = Real(1e-6)) {
    for (const auto& w : wrt) w->zero_grad();
    std::vector<Tensor<Real>> ad_grads;
    {
        Tape<Real> tape;
        TapeScope<Real> scope(tape);
        Var<Real> loss = make_loss();
        tape.backward(loss);
    }
    ad_grads.reserve(wrt.size());
    for (const auto& w : wrt) ad_grads.push_back(w->grad);
    for (const auto& w : wrt) w->zero_grad();

    GradCheckReport rep;
    for (std::size_t p = 0; p < wrt.size(); ++p) {
        auto& val = wrt[p]->value;
        for (std::size_t i = 0; i < val.data.size(); ++i) {
            const Real orig = val.data[i];
            val.data[i] = orig + h;
            const double fp = static_cast<double>(make_loss()->value.data[0]);
            val.data[i] = orig - h;
            const double fm = static_cast<double>(make_loss()->value.data[0]);
            val.data[i] = orig;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
            const double ad = static_cast<double>(ad_grads[p].data[i]);
            const double rel = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = (wrt[p]->name.empty() ? ("var" + std::to_string(p)) : wrt[p]->name) +
                            "[" + std::to_string(i) + "]";
                rep.worst_ad = ad;
                rep.worst_fd = fd;
            }
        }
    }
    return rep;
}

}  // namespace sitok::ad
