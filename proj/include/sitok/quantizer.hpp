#pragma once

// Discrete bottleneck variants.
//
//  - kVq:  single codebook, nearest-neighbor assignment, EMA codebook
//          updates (no gradient reaches the entries), straight-through
//          estimator into the encoder, beta-weighted commitment loss.
//  - kRvq: the same, stage-wise on residuals; indices are one column per
//          stage and the decoded vector is the sum of the chosen entries.
//  - kFsq: per-dimension tanh bound then snap to a small fixed level grid;
//          the index is the mixed-radix code of the per-dimension digits
//          (dimension 0 least significant).  No codebook, no commit term.
//
// All variants expose the same straight-through contract: the gradient of
// any downstream loss with respect to z equals the gradient with respect
// to z_q, elementwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sitok/autodiff.hpp"
#include "sitok/rng.hpp"

namespace sitok {

using ad::Var;

enum class QuantKind { kVq, kRvq, kFsq };

struct QuantizerConfig {
    QuantKind kind = QuantKind::kVq;
    int codebook_size = 65536;   // per stage
    int code_dim = 32;
    int num_stages = 1;
    double ema_decay = 0.99;
    double commit_beta = 0.25;
    double count_floor = 1e-5;   // denominator floor for EMA normalization
    std::vector<int> fsq_levels; // kFsq only; product == codebook_size

    void validate() const {
        if (kind == QuantKind::kFsq) {
            if (int(fsq_levels.size()) != code_dim)
                throw usage_error("fsq: one level count per code dimension required");
            long prod = 1;
            for (int l : fsq_levels) {
                if (l < 2) throw usage_error("fsq: each dimension needs at least 2 levels");
                prod *= l;
            }
            if (prod != codebook_size)
                throw usage_error("fsq: level product does not equal codebook size");
            if (num_stages != 1) throw usage_error("fsq: single stage only");
        }
        if (kind == QuantKind::kVq && num_stages != 1)
            throw usage_error("vq: use the residual variant for multiple stages");
    }
};

template <class Real>
struct Codebook {
    Tensor<Real> entries;    // [CS, CD]
    Tensor<Real> ema_count;  // [CS]
    Tensor<Real> ema_sum;    // [CS, CD]
    long ema_updates = 0;    // instrumentation: one bump per optimizer step
};

// ----- assignment -----------------------------------------------------------

// Exhaustive nearest entry in squared euclidean distance; ties break to the
// lowest index.
template <class Real>
int nearest_entry(const Codebook<Real>& cb, const Real* z, int code_dim) {
    const int cs = cb.entries.rows();
    int best = 0;
    Real best_d = std::numeric_limits<Real>::max();
    for (int i = 0; i < cs; ++i) {
        const Real* e = cb.entries.data.data() + std::size_t(i) * code_dim;
        Real d(0);
        for (int j = 0; j < code_dim; ++j) {
            const Real diff = z[j] - e[j];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

// ----- fixed-grid scalar quantization helpers -------------------------------

// Uniform levels on [-1, 1]: level i of L is -1 + 2i/(L-1).
template <class Real>
Real fsq_level_value(int digit, int levels) {
    return Real(-1) + Real(2) * Real(digit) / Real(levels - 1);
}

template <class Real>
int fsq_nearest_digit(Real bounded, int levels) {
    const double pos = (double(bounded) + 1.0) * 0.5 * double(levels - 1);
    int d = int(std::lround(pos));
    return std::clamp(d, 0, levels - 1);
}

inline long fsq_index_from_digits(const std::vector<int>& digits,
                                  const std::vector<int>& levels) {
    long index = 0, radix = 1;
    for (std::size_t d = 0; d < digits.size(); ++d) {
        index += long(digits[d]) * radix;
        radix *= levels[d];
    }
    return index;
}

inline std::vector<int> fsq_digits_from_index(long index, const std::vector<int>& levels) {
    std::vector<int> digits(levels.size());
    for (std::size_t d = 0; d < levels.size(); ++d) {
        digits[d] = int(index % levels[d]);
        index /= levels[d];
    }
    return digits;
}

// ----- quantization forward -------------------------------------------------

template <class Real>
struct QuantizeResult {
    Var<Real> z_q;                         // straight-through into z
    Var<Real> commit_loss;                 // scalar (zero for kFsq)
    std::vector<std::vector<int>> indices; // [T][num_stages]
};

// row_weights (empty = all ones) confines the commitment loss to valid rows;
// assignment still happens everywhere so index arrays keep full length.
template <class Real>
QuantizeResult<Real> quantize(const std::vector<Codebook<Real>>& books, const Var<Real>& z,
                              const QuantizerConfig& cfg,
                              const Tensor<Real>& row_weights = {}) {
    cfg.validate();
    const int t = z->value.rows(), cd = z->value.cols();
    if (cd != cfg.code_dim) throw usage_error("quantize: code dimension mismatch");

    QuantizeResult<Real> res;
    res.indices.assign(t, std::vector<int>(cfg.kind == QuantKind::kFsq ? 1 : cfg.num_stages));

    if (cfg.kind == QuantKind::kFsq) {
        Tensor<Real> snapped({t, cd});
        for (int i = 0; i < t; ++i) {
            std::vector<int> digits(cd);
            for (int j = 0; j < cd; ++j) {
                const Real bounded = std::tanh(z->value.at(i, j));
                digits[j] = fsq_nearest_digit(bounded, cfg.fsq_levels[j]);
                snapped.at(i, j) = fsq_level_value<Real>(digits[j], cfg.fsq_levels[j]);
            }
            res.indices[i][0] = int(fsq_index_from_digits(digits, cfg.fsq_levels));
        }
        Tensor<Real> diff = snapped;
        for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= z->value.data[i];
        res.z_q = ad::add(z, ad::constant(std::move(diff)));
        res.commit_loss = ad::constant(Tensor<Real>::scalar(Real(0)));
        return res;
    }

    if (int(books.size()) != cfg.num_stages)
        throw usage_error("quantize: one codebook per stage required");

    // Stage-wise assignment on residuals (a single stage is the plain case).
    Tensor<Real> residual = z->value;
    Tensor<Real> zq_val({t, cd});
    std::vector<Tensor<Real>> stage_entries;  // chosen entry per row, per stage
    for (int s = 0; s < cfg.num_stages; ++s) {
        Tensor<Real> chosen({t, cd});
        for (int i = 0; i < t; ++i) {
            const int idx = nearest_entry(books[s], residual.data.data() + std::size_t(i) * cd, cd);
            res.indices[i][s] = idx;
            for (int j = 0; j < cd; ++j) {
                const Real e = books[s].entries.at(idx, j);
                chosen.at(i, j) = e;
                residual.at(i, j) -= e;
                zq_val.at(i, j) += e;
            }
        }
        stage_entries.push_back(std::move(chosen));
    }

    Tensor<Real> diff = zq_val;
    for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= z->value.data[i];
    res.z_q = ad::add(z, ad::constant(std::move(diff)));

    // commit = beta * sum over stages of mean((r_s - chosen_s)^2); the chosen
    // entries are constants, so the gradient reaches z but not the codebook.
    Var<Real> commit;
    Var<Real> r = z;
    for (int s = 0; s < cfg.num_stages; ++s) {
        auto e = ad::constant(stage_entries[s]);
        auto term = ad::l2_loss(r, e, row_weights);
        commit = commit ? ad::add(commit, term) : term;
        if (s + 1 < cfg.num_stages) r = ad::sub(r, e);
    }
    res.commit_loss = ad::scale(commit, Real(cfg.commit_beta));
    return res;
}

// Reconstruct z_q straight from stored indices (decode path).
template <class Real>
Tensor<Real> decode_indices(const std::vector<Codebook<Real>>& books,
                            const std::vector<std::vector<int>>& indices,
                            const QuantizerConfig& cfg) {
    const int t = int(indices.size());
    Tensor<Real> out({t, cfg.code_dim});
    if (cfg.kind == QuantKind::kFsq) {
        for (int i = 0; i < t; ++i) {
            const auto digits = fsq_digits_from_index(indices[i][0], cfg.fsq_levels);
            for (int j = 0; j < cfg.code_dim; ++j)
                out.at(i, j) = fsq_level_value<Real>(digits[j], cfg.fsq_levels[j]);
        }
        return out;
    }
    for (int i = 0; i < t; ++i)
        for (int s = 0; s < cfg.num_stages; ++s) {
            const int idx = indices[i][s];
            for (int j = 0; j < cfg.code_dim; ++j) out.at(i, j) += books[s].entries.at(idx, j);
        }
    return out;
}

// ----- EMA codebook maintenance ---------------------------------------------

// One decayed-count/decayed-sum update from the rows assigned this step.
// Callers pass valid rows only.  count <- d*count + (1-d)*n_assigned,
// sum <- d*sum + (1-d)*sum_of_rows, entry <- sum / max(count, floor).
template <class Real>
void ema_update(Codebook<Real>& cb, const Tensor<Real>& rows, const std::vector<int>& assigned,
                const QuantizerConfig& cfg) {
    const int cs = cb.entries.rows(), cd = cb.entries.cols();
    if (int(assigned.size()) != rows.rows())
        throw usage_error("ema_update: one assignment per row required");
    std::vector<Real> batch_count(cs, Real(0));
    Tensor<Real> batch_sum({cs, cd});
    for (int i = 0; i < rows.rows(); ++i) {
        const int idx = assigned[i];
        batch_count[idx] += Real(1);
        for (int j = 0; j < cd; ++j) batch_sum.at(idx, j) += rows.at(i, j);
    }
    const Real d = Real(cfg.ema_decay), om = Real(1) - d;
    for (int i = 0; i < cs; ++i) {
        cb.ema_count.data[i] = d * cb.ema_count.data[i] + om * batch_count[i];
        const Real denom = std::max(cb.ema_count.data[i], Real(cfg.count_floor));
        for (int j = 0; j < cd; ++j) {
            cb.ema_sum.at(i, j) = d * cb.ema_sum.at(i, j) + om * batch_sum.at(i, j);
            cb.entries.at(i, j) = cb.ema_sum.at(i, j) / denom;
        }
    }
    ++cb.ema_updates;
}

// Entries whose running count starved below `threshold` are re-seeded from
// random rows of the current batch.  Returns the number of reseeds; a
// threshold of zero disables the mechanism entirely.
template <class Real>
int dead_code_reset(Codebook<Real>& cb, const Tensor<Real>& rows, double threshold, Rng& rng) {
    if (threshold <= 0.0 || rows.rows() == 0) return 0;
    const int cs = cb.entries.rows(), cd = cb.entries.cols();
    int reseeds = 0;
    for (int i = 0; i < cs; ++i) {
        if (double(cb.ema_count.data[i]) >= threshold) continue;
        const int src = int(rng.uniform_int(0, rows.rows() - 1));
        for (int j = 0; j < cd; ++j) {
            cb.entries.at(i, j) = rows.at(src, j);
            cb.ema_sum.at(i, j) = rows.at(src, j);
        }
        cb.ema_count.data[i] = Real(1);
        ++reseeds;
    }
    return reseeds;
}

// Data-driven initialization: a random permutation of the provided rows
// fills as many entries as possible; the rest fall back to normal(0,
// 1/sqrt(CD)).  EMA state starts consistent (count 1, sum == entry).
template <class Real>
Codebook<Real> init_codebook(int codebook_size, int code_dim, const Tensor<Real>& rows,
                             Rng& rng) {
    Codebook<Real> cb;
    cb.entries = Tensor<Real>({codebook_size, code_dim});
    cb.ema_count = Tensor<Real>({codebook_size}, Real(1));
    cb.ema_sum = Tensor<Real>({codebook_size, code_dim});
    std::vector<int> perm(rows.rows());
    for (int i = 0; i < rows.rows(); ++i) perm[i] = i;
    for (int i = rows.rows() - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    const double fallback_std = 1.0 / std::sqrt(double(code_dim));
    for (int i = 0; i < codebook_size; ++i) {
        for (int j = 0; j < code_dim; ++j)
            cb.entries.at(i, j) = i < rows.rows() ? rows.at(perm[i], j)
                                                  : Real(rng.normal(0.0, fallback_std));
        for (int j = 0; j < code_dim; ++j) cb.ema_sum.at(i, j) = cb.entries.at(i, j);
    }
    return cb;
}

// ----- usage statistics -----------------------------------------------------

struct CodebookStats {
    double perplexity = 0.0;   // exp of the entropy of empirical index usage
    double utilization = 0.0;  // distinct indices / codebook size
};

inline CodebookStats codebook_stats(const std::vector<int>& indices, int codebook_size) {
    CodebookStats st;
    if (indices.empty()) return st;
    std::vector<long> counts(codebook_size, 0);
    for (int i : indices) ++counts[i];
    double entropy = 0.0;
    long distinct = 0;
    for (long c : counts) {
        if (c == 0) continue;
        ++distinct;
        const double p = double(c) / double(indices.size());
        entropy -= p * std::log(p);
    }
    st.perplexity = std::exp(entropy);
    st.utilization = double(distinct) / double(codebook_size);
    return st;
}

// Stage s column of a [T][stages] index table.
inline std::vector<int> stage_indices(const std::vector<std::vector<int>>& table, int stage) {
    std::vector<int> out;
    out.reserve(table.size());
    for (const auto& row : table) out.push_back(row[stage]);
    return out;
}

}  // namespace sitok
