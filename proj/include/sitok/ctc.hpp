#pragma once

// CTC loss over per-frame log-probabilities, plus greedy decoding and the
// edit distance used to score decoded label sequences.
//
// The loss is implemented as one taped primitive.  The forward pass runs the
// usual log-domain alpha recursion over the blank-extended label sequence;
// the backward pass uses the beta recursion, so the gradient with respect to
// every input cell is analytic (no graph of elementary ops is built for the
// dynamic program).

#include <cmath>
#include <limits>
#include <vector>

#include "sitok/autodiff.hpp"

namespace sitok {

template <class Real>
constexpr Real kLogZero = -std::numeric_limits<Real>::infinity();

template <class Real>
Real log_add(Real a, Real b) {
    if (a == kLogZero<Real>) return b;
    if (b == kLogZero<Real>) return a;
    const Real m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Labels interleaved with blanks: y -> [b, y1, b, y2, ..., yL, b].
inline std::vector<int> ctc_extend_labels(const std::vector<int>& labels, int blank) {
    std::vector<int> ext(2 * labels.size() + 1, blank);
    for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
    return ext;
}

// Shortest frame count that can emit the sequence: one frame per label plus
// one separating blank per adjacent repeat.
inline int ctc_min_frames(const std::vector<int>& labels) {
    int n = int(labels.size());
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++n;
    return n;
}

template <class Real>
struct CtcResult {
    ad::Var<Real> loss;     // null when infeasible
    bool feasible = true;

    Real value() const {
        return feasible ? loss->value.data[0] : std::numeric_limits<Real>::infinity();
    }
};

// log_probs is [T, V]; row t holds log p(symbol | frame t).  Targets too long
// for T frames get the infeasible sentinel (infinite loss, nothing recorded)
// so batch reductions can skip them.
template <class Real>
CtcResult<Real> ctc_loss(const ad::Var<Real>& log_probs, const std::vector<int>& labels,
                         int blank = 0) {
    const int t_len = log_probs->value.rows(), vocab = log_probs->value.cols();
    if (t_len < 1) throw usage_error("ctc: need at least one frame");
    if (blank < 0 || blank >= vocab) throw usage_error("ctc: blank outside vocabulary");
    for (int y : labels)
        if (y < 0 || y >= vocab || y == blank)
            throw usage_error("ctc: label outside vocabulary or equal to blank");

    if (t_len < ctc_min_frames(labels)) return {nullptr, false};

    const auto ext = ctc_extend_labels(labels, blank);
    const int s_len = int(ext.size());
    const auto& lp = log_probs->value;
    const Real nz = kLogZero<Real>;

    // whether state s may be entered from s-2 (skipping the blank between
    // two distinct labels)
    auto can_skip = [&](int s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

    std::vector<std::vector<Real>> alpha(t_len, std::vector<Real>(s_len, nz));
    alpha[0][0] = lp.at(0, ext[0]);
    if (s_len > 1) alpha[0][1] = lp.at(0, ext[1]);
    for (int t = 1; t < t_len; ++t)
        for (int s = 0; s < s_len; ++s) {
            Real a = alpha[t - 1][s];
            if (s >= 1) a = log_add(a, alpha[t - 1][s - 1]);
            if (can_skip(s)) a = log_add(a, alpha[t - 1][s - 2]);
            alpha[t][s] = a == nz ? nz : a + lp.at(t, ext[s]);
        }

    Real log_p = alpha[t_len - 1][s_len - 1];
    if (s_len > 1) log_p = log_add(log_p, alpha[t_len - 1][s_len - 2]);
    if (log_p == nz) return {nullptr, false};

    auto out = ad::detail::make_out(Tensor<Real>::scalar(-log_p), log_probs->requires_grad,
                                    "ctc_loss");
    ad::detail::record_if(out, [log_probs, out, alpha = std::move(alpha), ext, log_p, t_len,
                                s_len, vocab, blank] {
        const auto& lpv = log_probs->value;
        const Real nzero = kLogZero<Real>;
        auto can_skip = [&ext, blank](int s) {
            return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
        };

        // beta excludes the emission at its own frame, so alpha + beta is the
        // log-mass of all full paths passing through (t, s).
        std::vector<std::vector<Real>> beta(t_len, std::vector<Real>(s_len, nzero));
        beta[t_len - 1][s_len - 1] = Real(0);
        if (s_len > 1) beta[t_len - 1][s_len - 2] = Real(0);
        for (int t = t_len - 2; t >= 0; --t)
            for (int s = 0; s < s_len; ++s) {
                Real b = beta[t + 1][s] == nzero
                             ? nzero
                             : beta[t + 1][s] + lpv.at(t + 1, ext[s]);
                if (s + 1 < s_len && beta[t + 1][s + 1] != nzero)
                    b = log_add(b, beta[t + 1][s + 1] + lpv.at(t + 1, ext[s + 1]));
                if (s + 2 < s_len && can_skip(s + 2) && beta[t + 1][s + 2] != nzero)
                    b = log_add(b, beta[t + 1][s + 2] + lpv.at(t + 1, ext[s + 2]));
                beta[t][s] = b;
            }

        const Real g = out->grad.data[0];
        std::vector<Real> per_symbol(vocab);
        for (int t = 0; t < t_len; ++t) {
            std::fill(per_symbol.begin(), per_symbol.end(), nzero);
            for (int s = 0; s < s_len; ++s) {
                if (alpha[t][s] == nzero || beta[t][s] == nzero) continue;
                per_symbol[ext[s]] = log_add(per_symbol[ext[s]], alpha[t][s] + beta[t][s]);
            }
            for (int v = 0; v < vocab; ++v) {
                if (per_symbol[v] == nzero) continue;
                log_probs->grad.at(t, v) -= g * std::exp(per_symbol[v] - log_p);
            }
        }
    });
    return {out, true};
}

// Per-frame argmax (ties to the lowest symbol), collapse runs, drop blanks.
template <class Real>
std::vector<int> ctc_greedy_decode(const Tensor<Real>& scores, int blank = 0) {
    std::vector<int> out;
    int prev = -1;
    for (int t = 0; t < scores.rows(); ++t) {
        int best = 0;
        for (int v = 1; v < scores.cols(); ++v)
            if (scores.at(t, v) > scores.at(t, best)) best = v;
        if (best != prev && best != blank) out.push_back(best);
        prev = best;
    }
    return out;
}

// Levenshtein distance with unit costs.
inline long edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<long> row(m + 1);
    for (std::size_t j = 0; j <= m; ++j) row[j] = long(j);
    for (std::size_t i = 1; i <= n; ++i) {
        long diag = row[0];
        row[0] = long(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const long subst = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
            diag = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, subst});
        }
    }
    return row[m];
}

}  // namespace sitok
