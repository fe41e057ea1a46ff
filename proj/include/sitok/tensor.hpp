#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sitok/errors.hpp"

namespace sitok {

// Dense row-major tensor.  Rank is 1 or 2 in practice (sequences of feature
// rows, weight matrices, scalars as shape {1}); storage is always contiguous.
template <class Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, Real fill = Real(0)) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(count(shape)), fill);
    }

    static Tensor scalar(Real v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from_rows(int rows, int cols, std::initializer_list<Real> vals) {
        Tensor t({rows, cols});
        assert(vals.size() == t.data.size());
        std::copy(vals.begin(), vals.end(), t.data.begin());
        return t;
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    int rows() const { return ndim() == 2 ? shape[0] : (ndim() == 1 ? 1 : 0); }
    int cols() const { return ndim() == 2 ? shape[1] : (ndim() == 1 ? shape[0] : 0); }

    Real& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    Real at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    Real& operator[](std::size_t i) { return data[i]; }
    Real operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(Real v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

// ----- raw kernels ---------------------------------------------------------

// C (+)= A * B with optional transposition of either operand.  Loop orders
// are chosen per case so the inner loop runs over contiguous memory.
template <class Real>
void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          const Real* a, const Real* b, Real* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, Real(0));
    if (!trans_a && !trans_b) {
        // A[m,k] B[k,n]
        for (int i = 0; i < m; ++i) {
            const Real* ai = a + static_cast<std::size_t>(i) * k;
            Real* ci = c + static_cast<std::size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const Real aip = ai[p];
                if (aip == Real(0)) continue;
                const Real* bp = b + static_cast<std::size_t>(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
            }
        }
    } else if (trans_a && !trans_b) {
        // A[k,m]^T B[k,n]
        for (int p = 0; p < k; ++p) {
            const Real* ap = a + static_cast<std::size_t>(p) * m;
            const Real* bp = b + static_cast<std::size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const Real api = ap[i];
                if (api == Real(0)) continue;
                Real* ci = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // A[m,k] B[n,k]^T: rows dot rows
        for (int i = 0; i < m; ++i) {
            const Real* ai = a + static_cast<std::size_t>(i) * k;
            Real* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const Real* bj = b + static_cast<std::size_t>(j) * k;
                Real acc(0);
                for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] += acc;
            }
        }
    } else {
        assert(false && "gemm: double transpose unused");
    }
}

// y[r] = softmax(x[r]) rowwise, numerically stable.
template <class Real>
void softmax_rows(const Tensor<Real>& x, Tensor<Real>& y) {
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
        Real mx = x.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
        Real sum(0);
        for (int j = 0; j < c; ++j) {
            const Real e = std::exp(x.at(i, j) - mx);
            y.at(i, j) = e;
            sum += e;
        }
        const Real inv = Real(1) / sum;
        for (int j = 0; j < c; ++j) y.at(i, j) *= inv;
    }
}

template <class Real>
void log_softmax_rows(const Tensor<Real>& x, Tensor<Real>& y) {
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
        Real mx = x.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
        Real sum(0);
        for (int j = 0; j < c; ++j) sum += std::exp(x.at(i, j) - mx);
        const Real lse = mx + std::log(sum);
        for (int j = 0; j < c; ++j) y.at(i, j) = x.at(i, j) - lse;
    }
}

template <class Real>
Real global_sq_norm(const Tensor<Real>& t) {
    Real s(0);
    for (Real v : t.data) s += v * v;
    return s;
}

}  // namespace sitok
