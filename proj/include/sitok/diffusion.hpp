#pragma once

// Flow-matching decoder.  A non-causal trunk digests the conditioning
// sequence once per utterance; a smaller non-causal head, modulated by the
// diffusion time (and a step-size input used by few-step decoding), predicts
// the velocity field that transports noise to stacked mel frames.  Splitting
// trunk from head keeps the per-sampling-step cost at head_layers blocks
// instead of the full depth.

#include <cmath>
#include <vector>

#include "sitok/transformer.hpp"

namespace sitok {

struct DecoderConfig {
    int input_dim = 512;   // stacked mel bins per frame
    int cond_dim = 8;      // quantized code width fed as conditioning
    int hidden = 64;
    int intermediate = 128;
    int heads = 4;
    int main_layers = 2;   // run once per utterance
    int head_layers = 1;   // run every sampling step
    int time_feat_dim = kSinusoidDim;

    BlockConfig main_block() const {
        BlockConfig b;
        b.hidden = hidden;
        b.intermediate = intermediate;
        b.heads = heads;
        b.causal = false;
        b.adaptive = false;
        return b;
    }
    BlockConfig head_block() const {
        BlockConfig b = main_block();
        b.adaptive = true;
        return b;
    }
};

template <class Real>
struct DecoderParams {
    Var<Real> cond_proj;          // [cond_dim, hidden]
    Var<Real> null_emb;           // [1, hidden], stands in for dropped conditioning
    StackParams<Real> main;
    Var<Real> in_proj;            // [input_dim, hidden]
    Var<Real> base_proj;          // [hidden, hidden]
    StackParams<Real> head;
    Var<Real> out_proj;           // [hidden, input_dim]
    TimeEmbedParams<Real> time;
    Var<Real> step_w;             // [kSinusoidDim, hidden], zero-init so the
                                  // step-size input is inert until tuned
};

template <class Real>
DecoderParams<Real> make_decoder(ParamStore<Real>& ps, const std::string& prefix,
                                 const DecoderConfig& cfg, Rng& rng) {
    DecoderParams<Real> d;
    d.cond_proj = ps.create(prefix + ".cond_proj", {cfg.cond_dim, cfg.hidden},
                            Init::kNormal002, rng);
    d.null_emb = ps.create(prefix + ".null_emb", {1, cfg.hidden}, Init::kNormal002, rng);
    d.main = make_stack(ps, prefix + ".main", cfg.main_layers, cfg.main_block(), rng);
    d.in_proj = ps.create(prefix + ".in_proj", {cfg.input_dim, cfg.hidden},
                          Init::kNormal002, rng);
    d.base_proj = ps.create(prefix + ".base_proj", {cfg.hidden, cfg.hidden},
                            Init::kNormal002, rng);
    d.head = make_stack(ps, prefix + ".head", cfg.head_layers, cfg.head_block(), rng);
    d.out_proj = ps.create(prefix + ".out_proj", {cfg.hidden, cfg.input_dim},
                           Init::kNormal002, rng);
    d.time = make_time_embed(ps, prefix + ".time", cfg.hidden, rng, cfg.time_feat_dim);
    d.step_w = ps.create(prefix + ".step_w", {cfg.time_feat_dim, cfg.hidden}, Init::kZeros, rng);
    return d;
}

// Trunk features for one utterance.  cond is [T, cond_dim]; when the
// conditioning is dropped (classifier-free training), every row becomes the
// learned null embedding instead.
template <class Real>
Var<Real> decoder_base(const DecoderParams<Real>& p, const DecoderConfig& cfg,
                       const Var<Real>& cond, const Var<Real>& mask, bool drop_cond,
                       long* block_counter = nullptr) {
    Var<Real> h0;
    if (drop_cond) {
        std::vector<int> zeros(cond->value.rows(), 0);
        h0 = ad::gather_rows(p.null_emb, zeros);
    } else {
        h0 = ad::matmul(cond, p.cond_proj);
    }
    return stack_forward(h0, p.main, cfg.main_block(), mask, {}, block_counter);
}

// Conditioning row for the head: learned time embedding plus a zero-init
// projection of the step size.
template <class Real>
Var<Real> time_step_embed(const DecoderParams<Real>& p, const Var<Real>& t,
                          const Var<Real>& d) {
    auto emb = time_embed(t, p.time);
    return ad::add(emb, ad::matmul(ad::sinusoid_features(d, p.time.feat_dim), p.step_w));
}

// One velocity evaluation at (x_t, t, d) given cached trunk features.
template <class Real>
Var<Real> decoder_velocity(const DecoderParams<Real>& p, const DecoderConfig& cfg,
                           const Var<Real>& x_t, const Var<Real>& h_base,
                           const Var<Real>& t, const Var<Real>& d, const Var<Real>& mask,
                           long* block_counter = nullptr) {
    auto h = ad::add(ad::matmul(x_t, p.in_proj), ad::matmul(h_base, p.base_proj));
    auto emb = time_step_embed(p, t, d);
    h = stack_forward(h, p.head, cfg.head_block(), mask, emb, block_counter);
    return ad::matmul(h, p.out_proj);
}

// ----- flow matching --------------------------------------------------------

// Straight-path corruption x_t = t x + (1-t) eps; the matching velocity
// target is x - eps, independent of t.
template <class Real>
Tensor<Real> flow_interpolate(const Tensor<Real>& x, const Tensor<Real>& eps, Real t) {
    if (!x.same_shape(eps)) throw numerical_error("flow_interpolate: shape mismatch");
    Tensor<Real> out(x.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = t * x.data[i] + (Real(1) - t) * eps.data[i];
    return out;
}

template <class Real>
Tensor<Real> flow_velocity_target(const Tensor<Real>& x, const Tensor<Real>& eps) {
    if (!x.same_shape(eps)) throw numerical_error("flow_velocity_target: shape mismatch");
    Tensor<Real> out(x.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] - eps.data[i];
    return out;
}

// Uniform-grid Euler integration from t=0 to t=1: N evaluations at
// t_k = k/N, each advancing x by v/N.  velocity_fn(x, t_k) returns a tensor
// of x's shape.
template <class Real, class VelocityFn>
Tensor<Real> euler_sample(Tensor<Real> x, int steps, VelocityFn&& velocity_fn) {
    if (steps < 1) throw usage_error("euler_sample: need at least one step");
    const Real dt = Real(1) / Real(steps);
    for (int k = 0; k < steps; ++k) {
        const Real t_k = Real(k) / Real(steps);
        Tensor<Real> v = velocity_fn(static_cast<const Tensor<Real>&>(x), t_k);
        if (!v.same_shape(x)) throw numerical_error("euler_sample: velocity shape mismatch");
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += dt * v.data[i];
    }
    return x;
}

// Guided velocity v_u + w (v_c - v_u).  Unit scale short-circuits to the
// conditional branch alone, so default decoding pays for one evaluation.
template <class Real, class CondFn, class UncondFn>
Tensor<Real> cfg_velocity(Real w, CondFn&& cond_fn, UncondFn&& uncond_fn) {
    Tensor<Real> vc = cond_fn();
    if (w == Real(1)) return vc;
    Tensor<Real> vu = uncond_fn();
    if (!vu.same_shape(vc)) throw numerical_error("cfg_velocity: branch shape mismatch");
    Tensor<Real> out(vc.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = vu.data[i] + w * (vc.data[i] - vu.data[i]);
    return out;
}

}  // namespace sitok
