#pragma once

// Transformer building blocks in the Llama style: pre-norm residual blocks,
// RMS normalization (optionally modulated by a conditioning embedding),
// rotary position encoding on queries and keys, SiLU-gated MLP, no biases.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sitok/autodiff.hpp"
#include "sitok/rng.hpp"

namespace sitok {

using ad::Var;

enum class Init { kNormal002, kZeros, kOnes };

// Named registry of trainable leaves.  Iteration is name-sorted (std::map),
// which fixes the order for the optimizer, gradient clipping and checkpoint
// layout; creation order fixes the RNG draws at init time.
template <class Real>
struct ParamStore {
    std::map<std::string, Var<Real>> by_name;

    Var<Real> create(const std::string& name, std::vector<int> shape, Init init, Rng& rng) {
        if (by_name.count(name))
            throw usage_error("parameter registered twice: " + name);
        Tensor<Real> t(std::move(shape));
        switch (init) {
            case Init::kNormal002:
                for (Real& v : t.data) v = Real(rng.normal(0.0, 0.02));
                break;
            case Init::kZeros:
                break;
            case Init::kOnes:
                t.fill(Real(1));
                break;
        }
        auto p = ad::make_param(std::move(t), name);
        by_name.emplace(name, p);
        return p;
    }

    Var<Real> at(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw usage_error("unknown parameter: " + name);
        return it->second;
    }

    void zero_grads() {
        for (auto& [_, p] : by_name) p->zero_grad();
    }

    void freeze_prefix(const std::string& prefix) {
        for (auto& [name, p] : by_name)
            if (name.rfind(prefix, 0) == 0) p->requires_grad = false;
    }

    std::vector<Var<Real>> trainable() const {
        std::vector<Var<Real>> out;
        for (const auto& [_, p] : by_name)
            if (p->requires_grad) out.push_back(p);
        return out;
    }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& [_, p] : by_name) n += p->value.numel();
        return n;
    }
};

struct BlockConfig {
    int hidden = 64;
    int intermediate = 128;
    int heads = 4;
    bool causal = true;
    bool adaptive = false;      // conditioning-modulated norms
    double rope_base = 10000.0;
    double norm_eps = 1e-6;

    int head_dim() const { return hidden / heads; }
};

// ----- normalization --------------------------------------------------------

template <class Real>
struct NormParams {
    Var<Real> gain;
    Var<Real> scale_w, shift_w;  // adaptive only; zero-init so the modulated
                                 // norm starts exactly equal to the plain one
    bool adaptive = false;
};

template <class Real>
NormParams<Real> make_norm(ParamStore<Real>& ps, const std::string& prefix, int hidden,
                           bool adaptive, Rng& rng) {
    NormParams<Real> n;
    n.adaptive = adaptive;
    n.gain = ps.create(prefix + ".gain", {hidden}, Init::kOnes, rng);
    if (adaptive) {
        n.scale_w = ps.create(prefix + ".scale_w", {hidden, hidden}, Init::kZeros, rng);
        n.shift_w = ps.create(prefix + ".shift_w", {hidden, hidden}, Init::kZeros, rng);
    }
    return n;
}

template <class Real>
Var<Real> rms_norm(const Var<Real>& x, const Var<Real>& gain, double eps) {
    return ad::scale_cols(ad::scale_rows(x, ad::inv_rms(x, Real(eps))), gain);
}

// y = rms_norm(x) * (1 + cond W_scale) + cond W_shift, applied positionwise
// with a single conditioning row per utterance.
template <class Real>
Var<Real> apply_norm(const Var<Real>& x, const NormParams<Real>& n, double eps,
                     const Var<Real>& cond_emb) {
    Var<Real> y = rms_norm(x, n.gain, eps);
    if (n.adaptive) {
        if (!cond_emb) throw usage_error("modulated norm called without conditioning");
        const int hidden = x->value.cols();
        auto s = ad::matmul(cond_emb, n.scale_w);
        auto ones = ad::constant(Tensor<Real>({1, hidden}, Real(1)));
        y = ad::scale_cols(y, ad::add(ones, s));
        y = ad::add_bias(y, ad::matmul(cond_emb, n.shift_w));
    }
    return y;
}

// ----- attention ------------------------------------------------------------

template <class Real>
struct AttnParams {
    Var<Real> wq, wk, wv, wo;
};

template <class Real>
AttnParams<Real> make_attn(ParamStore<Real>& ps, const std::string& prefix, int hidden,
                           Rng& rng) {
    AttnParams<Real> a;
    a.wq = ps.create(prefix + ".wq", {hidden, hidden}, Init::kNormal002, rng);
    a.wk = ps.create(prefix + ".wk", {hidden, hidden}, Init::kNormal002, rng);
    a.wv = ps.create(prefix + ".wv", {hidden, hidden}, Init::kNormal002, rng);
    a.wo = ps.create(prefix + ".wo", {hidden, hidden}, Init::kNormal002, rng);
    return a;
}

// Additive attention mask: 0 for allowed key j, -1e30 for disallowed.
// Rows at or beyond valid_len keep their own position so softmax stays
// well-behaved there; those rows are excluded from every loss anyway.
template <class Real>
Tensor<Real> attn_mask(int t, int valid, bool causal) {
    Tensor<Real> m({t, t});
    const Real neg = Real(-1e30);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) {
            bool ok = j < valid && (!causal || j <= i);
            if (j == i) ok = true;
            m.at(i, j) = ok ? Real(0) : neg;
        }
    return m;
}

template <class Real>
Var<Real> attention(const Var<Real>& x, const AttnParams<Real>& p, const BlockConfig& cfg,
                    const Var<Real>& mask) {
    const int dh = cfg.head_dim();
    auto q = ad::matmul(x, p.wq);
    auto k = ad::matmul(x, p.wk);
    auto v = ad::matmul(x, p.wv);
    std::vector<Var<Real>> heads;
    heads.reserve(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
        auto qh = ad::rope(ad::slice_cols(q, h * dh, (h + 1) * dh), Real(cfg.rope_base));
        auto kh = ad::rope(ad::slice_cols(k, h * dh, (h + 1) * dh), Real(cfg.rope_base));
        auto vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)),
                                Real(1.0 / std::sqrt(double(dh))));
        auto att = ad::softmax_lastdim(ad::add(scores, mask));
        heads.push_back(ad::matmul(att, vh));
    }
    return ad::matmul(ad::concat(heads, 1), p.wo);
}

// ----- block ----------------------------------------------------------------

template <class Real>
struct BlockParams {
    NormParams<Real> norm1, norm2;
    AttnParams<Real> attn;
    Var<Real> w_gate, w_up, w_down;
};

template <class Real>
BlockParams<Real> make_block(ParamStore<Real>& ps, const std::string& prefix,
                             const BlockConfig& cfg, Rng& rng) {
    BlockParams<Real> b;
    b.norm1 = make_norm(ps, prefix + ".norm1", cfg.hidden, cfg.adaptive, rng);
    b.norm2 = make_norm(ps, prefix + ".norm2", cfg.hidden, cfg.adaptive, rng);
    b.attn = make_attn(ps, prefix + ".attn", cfg.hidden, rng);
    b.w_gate = ps.create(prefix + ".mlp.gate", {cfg.hidden, cfg.intermediate},
                         Init::kNormal002, rng);
    b.w_up = ps.create(prefix + ".mlp.up", {cfg.hidden, cfg.intermediate},
                       Init::kNormal002, rng);
    b.w_down = ps.create(prefix + ".mlp.down", {cfg.intermediate, cfg.hidden},
                         Init::kNormal002, rng);
    return b;
}

template <class Real>
Var<Real> gated_mlp(const Var<Real>& x, const BlockParams<Real>& b) {
    return ad::matmul(ad::mul(ad::silu(ad::matmul(x, b.w_gate)), ad::matmul(x, b.w_up)),
                      b.w_down);
}

template <class Real>
Var<Real> block_forward(const Var<Real>& x, const BlockParams<Real>& b, const BlockConfig& cfg,
                        const Var<Real>& mask, const Var<Real>& cond_emb = {}) {
    auto h = ad::add(x, attention(apply_norm(x, b.norm1, cfg.norm_eps, cond_emb), b.attn, cfg,
                                  mask));
    return ad::add(h, gated_mlp(apply_norm(h, b.norm2, cfg.norm_eps, cond_emb), b));
}

// ----- a stack of blocks with a final norm ----------------------------------

template <class Real>
struct StackParams {
    std::vector<BlockParams<Real>> blocks;
    Var<Real> final_gain;
};

template <class Real>
StackParams<Real> make_stack(ParamStore<Real>& ps, const std::string& prefix, int n_layers,
                             const BlockConfig& cfg, Rng& rng) {
    StackParams<Real> s;
    for (int i = 0; i < n_layers; ++i)
        s.blocks.push_back(make_block(ps, prefix + ".block" + std::to_string(i), cfg, rng));
    s.final_gain = ps.create(prefix + ".final_norm.gain", {cfg.hidden}, Init::kOnes, rng);
    return s;
}

// block_counter, when given, tallies transformer layer executions (used to
// account for decode-time cost).
template <class Real>
Var<Real> stack_forward(Var<Real> x, const StackParams<Real>& s, const BlockConfig& cfg,
                        const Var<Real>& mask, const Var<Real>& cond_emb = {},
                        long* block_counter = nullptr) {
    for (const auto& b : s.blocks) {
        x = block_forward(x, b, cfg, mask, cond_emb);
        if (block_counter) ++*block_counter;
    }
    return rms_norm(x, s.final_gain, cfg.norm_eps);
}

// ----- conditioning embedding of scalars (times, step sizes) ----------------

inline constexpr int kSinusoidDim = 256;

template <class Real>
struct TimeEmbedParams {
    Var<Real> w1, w2;
    int feat_dim = kSinusoidDim;
};

template <class Real>
TimeEmbedParams<Real> make_time_embed(ParamStore<Real>& ps, const std::string& prefix,
                                      int hidden, Rng& rng, int feat_dim = kSinusoidDim) {
    TimeEmbedParams<Real> t;
    t.feat_dim = feat_dim;
    t.w1 = ps.create(prefix + ".w1", {feat_dim, hidden}, Init::kNormal002, rng);
    t.w2 = ps.create(prefix + ".w2", {hidden, hidden}, Init::kNormal002, rng);
    return t;
}

// Two-layer SiLU MLP over sinusoidal features; input is a [1,1] scalar node
// so gradient probes can flow into the time itself.
template <class Real>
Var<Real> time_embed(const Var<Real>& t, const TimeEmbedParams<Real>& p) {
    return ad::matmul(ad::silu(ad::matmul(ad::sinusoid_features(t, p.feat_dim), p.w1)), p.w2);
}

}  // namespace sitok
