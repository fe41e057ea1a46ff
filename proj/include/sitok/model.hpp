#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "sitok/ctc.hpp"
#include "sitok/diffusion.hpp"
#include "sitok/mel.hpp"
#include "sitok/quantizer.hpp"
#include "sitok/transformer.hpp"

// Full tokenizer: stacked log-mel frames -> causal encoder -> quantizer ->
// (a) CTC head for semantic supervision and (b) diffusion decoder back to
// mel.  One utterance per call; the trainer batches by looping.

namespace sitok {

struct ModelConfig {
    MelConfig mel;

    int encoder_layers = 2;
    int decoder_layers = 2;   // main trunk + per-step head combined
    int head_layers = 1;      // of decoder_layers, run once per sampling step
    int ctc_layers = 2;
    int hidden = 64;
    int intermediate = 128;
    int heads = 4;
    int vocab = 10;           // CTC classes incl. blank 0
    int time_feat_dim = kSinusoidDim;

    QuantizerConfig quant;

    double cond_drop_prob = 0.1;   // per-utterance null-conditioning rate
    double guidance_scale = 1.5;   // decode-time default, CLI-overridable
    int decode_steps = 16;

    int main_layers() const { return decoder_layers - head_layers; }

    BlockConfig encoder_block() const {
        BlockConfig b;
        b.hidden = hidden;
        b.intermediate = intermediate;
        b.heads = heads;
        b.causal = true;
        b.adaptive = false;
        return b;
    }

    // The CTC stack sees only quantized information, so tokens are forced to
    // carry whatever the transcript head needs.  Causal like the encoder.
    BlockConfig ctc_block() const { return encoder_block(); }

    DecoderConfig decoder_config() const {
        DecoderConfig d;
        d.input_dim = mel.stacked_dim();
        d.cond_dim = hidden;   // decoder sees vq_out(z_q), already width `hidden`
        d.hidden = hidden;
        d.intermediate = intermediate;
        d.heads = heads;
        d.main_layers = main_layers();
        d.head_layers = head_layers;
        d.time_feat_dim = time_feat_dim;
        return d;
    }

    void validate() const {
        if (hidden <= 0 || intermediate <= 0 || heads <= 0)
            throw usage_error("model config: dimensions must be positive");
        if (hidden % heads != 0)
            throw usage_error("model config: heads must divide hidden");
        if ((hidden / heads) % 2 != 0)
            throw usage_error("model config: head_dim must be even for rotary phases");
        if (encoder_layers < 1 || ctc_layers < 1)
            throw usage_error("model config: need at least one encoder and ctc layer");
        if (head_layers < 1 || head_layers >= decoder_layers)
            throw usage_error("model config: head_layers must be in [1, decoder_layers)");
        if (vocab < 2) throw usage_error("model config: vocab must include blank plus one label");
        if (time_feat_dim < 2 || time_feat_dim % 2 != 0)
            throw usage_error("model config: time_feat_dim must be even and positive");
        if (cond_drop_prob < 0.0 || cond_drop_prob >= 1.0)
            throw usage_error("model config: cond_drop_prob must be in [0, 1)");
        quant.validate();
    }
};

// Small configuration that trains in minutes on a laptop core and exercises
// every pathway of the full-size models.
inline ModelConfig desk_config() {
    ModelConfig c;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.head_layers = 1;
    c.ctc_layers = 2;
    c.hidden = 64;
    c.intermediate = 128;
    c.heads = 4;
    c.vocab = 10;              // blank + nine tone classes
    c.quant.kind = QuantKind::kVq;
    c.quant.codebook_size = 256;
    c.quant.code_dim = 8;
    c.quant.num_stages = 1;
    return c;
}

// Scaled presets.  Only `desk` is meant to be instantiated here; the large
// ones exist so parameter accounting can be checked against the published
// sizes without allocating anything.
inline ModelConfig preset_config(const std::string& name) {
    if (name == "desk") return desk_config();
    ModelConfig c;
    c.hidden = 1536;
    c.intermediate = 4096;
    c.heads = 16;
    c.ctc_layers = 4;
    c.vocab = 32100;
    c.quant.kind = QuantKind::kVq;
    c.quant.codebook_size = 65536;
    c.quant.code_dim = 32;
    c.quant.num_stages = 1;
    if (name == "S") {
        c.encoder_layers = 8;
        c.decoder_layers = 8;
    } else if (name == "B") {
        c.encoder_layers = 12;
        c.decoder_layers = 12;
    } else if (name == "L") {
        c.encoder_layers = 16;
        c.decoder_layers = 16;
    } else if (name == "XL") {
        c.encoder_layers = 24;
        c.decoder_layers = 24;
    } else {
        throw usage_error("unknown preset: " + name);
    }
    c.head_layers = c.decoder_layers / 4;
    return c;
}

template <class Real>
struct Model {
    ModelConfig cfg;
    ParamStore<Real> store;

    Var<Real> enc_in;               // [stacked_dim, hidden]
    StackParams<Real> enc;
    Var<Real> vq_in;                // [hidden, code_dim]
    Var<Real> vq_out;               // [code_dim, hidden]
    std::vector<Codebook<Real>> books;
    bool books_initialized = false; // flips after data-driven init or FSQ

    StackParams<Real> ctc;
    Var<Real> ctc_out;              // [hidden, vocab]

    DecoderParams<Real> dec;
};

// Creation order is part of the file format: parameter names and shapes must
// be reproducible from config + seed alone.
template <class Real>
Model<Real> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model<Real> m;
    m.cfg = cfg;
    Rng rng(seed);
    const int stacked = cfg.mel.stacked_dim();

    m.enc_in = m.store.create("enc.in", {stacked, cfg.hidden}, Init::kNormal002, rng);
    m.enc = make_stack(m.store, "enc.stack", cfg.encoder_layers, cfg.encoder_block(), rng);
    m.vq_in = m.store.create("vq.in", {cfg.hidden, cfg.quant.code_dim}, Init::kNormal002, rng);
    m.vq_out = m.store.create("vq.out", {cfg.quant.code_dim, cfg.hidden}, Init::kNormal002, rng);

    if (cfg.quant.kind != QuantKind::kFsq) {
        const Tensor<Real> none;
        for (int s = 0; s < cfg.quant.num_stages; ++s)
            m.books.push_back(init_codebook<Real>(cfg.quant.codebook_size, cfg.quant.code_dim,
                                                  none, rng));
    } else {
        m.books_initialized = true;   // nothing data-dependent to seed
    }

    m.ctc = make_stack(m.store, "ctc.stack", cfg.ctc_layers, cfg.ctc_block(), rng);
    m.ctc_out = m.store.create("ctc.out", {cfg.hidden, cfg.vocab}, Init::kNormal002, rng);

    m.dec = make_decoder(m.store, "dec", cfg.decoder_config(), rng);
    return m;
}

// Everything except attention masks follows from shapes, so this mirrors
// build_model arithmetic exactly; validated against an instantiated desk
// model, then trusted for the billion-parameter presets.
inline std::int64_t count_params(const ModelConfig& cfg) {
    const std::int64_t h = cfg.hidden, it = cfg.intermediate;
    const std::int64_t d = cfg.mel.stacked_dim();
    const std::int64_t cd = cfg.quant.code_dim;
    const std::int64_t feat = cfg.decoder_config().time_feat_dim;
    auto block = [&](bool adaptive) {
        return 4 * h * h + 3 * h * it + 2 * h + (adaptive ? 4 * h * h : 0);
    };
    auto stack = [&](std::int64_t layers, bool adaptive) {
        return layers * block(adaptive) + h;   // + final norm gain
    };
    std::int64_t n = 0;
    n += d * h + stack(cfg.encoder_layers, false);
    n += h * cd + cd * h;
    if (cfg.quant.kind != QuantKind::kFsq)
        n += std::int64_t(cfg.quant.num_stages) * cfg.quant.codebook_size * cd;
    n += stack(cfg.ctc_layers, false) + h * cfg.vocab;
    n += h * h + h;                               // cond_proj + null embedding
    n += stack(cfg.main_layers(), false);
    n += d * h + h * h + stack(cfg.head_layers, true) + h * d;
    n += feat * h + h * h;                        // time embedding MLP
    n += feat * h;                                // step-size projection
    return n;
}

struct ForwardOptions {
    bool drop_cond = false;   // replace decoder conditioning with the null row
    bool vq_bypass = false;   // diagnostic: skip quantization, z_q := z
    double fixed_t = -1.0;    // >= 0 pins the flow time instead of sampling
};

template <class Real>
struct ForwardOutputs {
    Var<Real> flow_pred;        // [T, stacked_dim] velocity estimate
    Var<Real> rec_loss;         // masked L1 against x - eps
    Var<Real> ctc_loss;         // null when the transcript is infeasible
    bool ctc_feasible = true;
    Var<Real> commit_loss;      // scalar, zero under bypass or FSQ
    std::vector<std::vector<int>> indices;  // empty under bypass
    Tensor<Real> z_pre;         // [T, code_dim] codes before quantization
    double t = 0.0;
    int valid = 0;
};

namespace model_detail {

template <class Real>
Tensor<Real> valid_row_weights(int total, int valid) {
    Tensor<Real> w({total});
    for (int i = 0; i < valid; ++i) w.data[size_t(i)] = Real(1);
    return w;
}

// Shared front half: stacked frames -> encoder -> pre-quantization codes.
template <class Real>
Var<Real> encode_codes(const Model<Real>& m, const Var<Real>& x, const Var<Real>& mask) {
    auto h = stack_forward(ad::matmul(x, m.enc_in), m.enc, m.cfg.encoder_block(), mask);
    return ad::matmul(h, m.vq_in);
}

template <class Real>
Var<Real> ctc_log_probs(const Model<Real>& m, const Var<Real>& cond, const Var<Real>& mask) {
    auto h = stack_forward(cond, m.ctc, m.cfg.ctc_block(), mask);
    return ad::log_softmax_lastdim(ad::matmul(h, m.ctc_out));
}

}  // namespace model_detail

// One training forward pass over a single utterance.  Draw order from `rng`
// is fixed (flow time first, then noise rows in row-major order) so runs are
// reproducible from the generator state.
template <class Real>
ForwardOutputs<Real> sitok_forward(const Model<Real>& m, const Tensor<Real>& stacked,
                                   int valid_stacked, const std::vector<int>& labels,
                                   Rng& rng, const ForwardOptions& opt = {}) {
    const int t_len = stacked.rows();
    if (stacked.cols() != m.cfg.mel.stacked_dim())
        throw usage_error("sitok_forward: frame width does not match config");
    if (valid_stacked < 1 || valid_stacked > t_len)
        throw usage_error("sitok_forward: valid_stacked out of range");

    ForwardOutputs<Real> out;
    out.valid = valid_stacked;
    out.t = opt.fixed_t >= 0.0 ? opt.fixed_t : rng.uniform();
    Tensor<Real> eps(stacked.shape);
    for (Real& v : eps.data) v = Real(rng.normal());

    auto causal_mask = ad::constant(attn_mask<Real>(t_len, valid_stacked, true));
    auto full_mask = ad::constant(attn_mask<Real>(t_len, valid_stacked, false));
    auto x = ad::constant(stacked);

    auto z = model_detail::encode_codes(m, x, causal_mask);
    out.z_pre = z->value;

    Var<Real> z_q;
    const auto weights = model_detail::valid_row_weights<Real>(t_len, valid_stacked);
    if (opt.vq_bypass) {
        z_q = z;
        out.commit_loss = ad::constant(Tensor<Real>({1}));
    } else {
        auto q = quantize(m.books, z, m.cfg.quant, weights);
        z_q = q.z_q;
        out.commit_loss = q.commit_loss;
        out.indices = std::move(q.indices);
    }
    auto cond = ad::matmul(z_q, m.vq_out);

    auto log_probs = model_detail::ctc_log_probs(m, cond, causal_mask);
    auto valid_log_probs = ad::slice_rows(log_probs, 0, valid_stacked);
    auto ctc = ctc_loss(valid_log_probs, labels, 0);
    out.ctc_feasible = ctc.feasible;
    out.ctc_loss = ctc.loss;

    auto h_base = decoder_base(m.dec, m.cfg.decoder_config(), cond, full_mask, opt.drop_cond);
    const Tensor<Real> x_t = flow_interpolate(stacked, eps, Real(out.t));
    Tensor<Real> t_s({1, 1});
    t_s.data[0] = Real(out.t);
    out.flow_pred = decoder_velocity(m.dec, m.cfg.decoder_config(), ad::constant(x_t), h_base,
                                     ad::constant(t_s), ad::constant(Tensor<Real>({1, 1})),
                                     full_mask);
    out.rec_loss = ad::l1_loss(out.flow_pred, ad::constant(flow_velocity_target(stacked, eps)),
                               weights);
    return out;
}

// Deterministic tokenization; no gradients, no randomness.
template <class Real>
std::vector<std::vector<int>> encode_frames(const Model<Real>& m, const Tensor<Real>& stacked,
                                            int valid_stacked) {
    ad::TapeSuspend<Real> no_tape;
    const int t_len = stacked.rows();
    if (valid_stacked < 1 || valid_stacked > t_len)
        throw usage_error("encode_frames: valid_stacked out of range");
    auto mask = ad::constant(attn_mask<Real>(t_len, valid_stacked, true));
    auto z = model_detail::encode_codes(m, ad::constant(stacked), mask);
    return quantize(m.books, z, m.cfg.quant).indices;
}

// Transcript readout used for evaluation: the CTC stack runs on the
// *quantized* pathway, so this measures what the discrete tokens carry.
template <class Real>
struct Transcription {
    Tensor<Real> log_probs;   // [valid_stacked, vocab]
    std::vector<int> labels;  // greedy decode, blanks stripped
};

template <class Real>
Transcription<Real> transcribe_frames(const Model<Real>& m, const Tensor<Real>& stacked,
                                      int valid_stacked) {
    ad::TapeSuspend<Real> no_tape;
    const int t_len = stacked.rows();
    if (valid_stacked < 1 || valid_stacked > t_len)
        throw usage_error("transcribe_frames: valid_stacked out of range");
    auto mask = ad::constant(attn_mask<Real>(t_len, valid_stacked, true));
    auto z = model_detail::encode_codes(m, ad::constant(stacked), mask);
    auto q = quantize(m.books, z, m.cfg.quant);
    auto cond = ad::matmul(q.z_q, m.vq_out);
    auto lp = model_detail::ctc_log_probs(m, cond, mask);
    Transcription<Real> out;
    out.log_probs = ad::slice_rows(lp, 0, valid_stacked)->value;
    out.labels = ctc_greedy_decode(out.log_probs, 0);
    return out;
}

struct DecodeOptions {
    int steps = 16;
    double guidance = 1.5;
    std::uint64_t seed = 0;
};

// Tokens -> mel frames.  The conditioning trunk runs once per branch; only
// the lightweight head repeats across Euler steps.  The step-size input is
// the actual step width, which is inert unless the decoder was tuned for it.
template <class Real>
Tensor<Real> decode_frames(const Model<Real>& m, const std::vector<std::vector<int>>& tokens,
                           int valid_stacked, const DecodeOptions& opt = {}) {
    ad::TapeSuspend<Real> no_tape;
    const int t_len = int(tokens.size());
    if (t_len == 0) throw data_error("decode_frames: empty token sequence");
    if (valid_stacked < 1 || valid_stacked > t_len)
        throw data_error("decode_frames: valid_stacked out of range");
    if (opt.steps < 1) throw usage_error("decode_frames: need at least one step");
    const int expect_cols = m.cfg.quant.kind == QuantKind::kFsq ? 1 : m.cfg.quant.num_stages;
    const std::int64_t limit = m.cfg.quant.codebook_size;   // == level product for FSQ
    for (const auto& row : tokens) {
        if (int(row.size()) != expect_cols)
            throw data_error("decode_frames: token row width mismatch");
        for (int v : row)
            if (v < 0 || v >= limit) throw data_error("decode_frames: token index out of range");
    }

    const auto& dcfg = m.cfg.decoder_config();
    auto mask = ad::constant(attn_mask<Real>(t_len, valid_stacked, false));
    auto z_q = ad::constant(decode_indices(m.books, tokens, m.cfg.quant));
    auto cond = ad::matmul(z_q, m.vq_out);
    auto base_c = decoder_base(m.dec, dcfg, cond, mask, false);
    Var<Real> base_u;
    if (opt.guidance != 1.0) base_u = decoder_base(m.dec, dcfg, cond, mask, true);

    Tensor<Real> d_s({1, 1});
    d_s.data[0] = Real(1) / Real(opt.steps);
    auto d_c = ad::constant(d_s);
    auto velocity = [&](const Var<Real>& base, const Tensor<Real>& x, Real t) {
        Tensor<Real> t_s({1, 1});
        t_s.data[0] = t;
        return decoder_velocity(m.dec, dcfg, ad::constant(x), base, ad::constant(t_s), d_c,
                                mask)->value;
    };

    Rng rng(opt.seed);
    Tensor<Real> x({t_len, dcfg.input_dim});
    for (Real& v : x.data) v = Real(rng.normal());
    return euler_sample(std::move(x), opt.steps, [&](const Tensor<Real>& xt, Real t) {
        return cfg_velocity(
            Real(opt.guidance), [&] { return velocity(base_c, xt, t); },
            [&] { return velocity(base_u, xt, t); });
    });
}

// Fingerprint of every number that affects encode/decode, so token files can
// be matched to the checkpoint that produced them.  FNV-1a over the f64 bytes
// of parameters in name order, then codebook state.
namespace model_detail {

template <class Real, class NameFilter>
std::string fnv_hash(const Model<Real>& m, NameFilter&& keep) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](double value) {
        std::uint64_t bits;
        static_assert(sizeof bits == sizeof value);
        std::memcpy(&bits, &value, sizeof bits);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffULL;
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, p] : m.store.by_name) {
        if (!keep(name)) continue;
        for (char c : name) {
            h ^= std::uint64_t(static_cast<unsigned char>(c));
            h *= 1099511628211ULL;
        }
        for (Real v : p->value.data) mix(double(v));
    }
    for (const auto& cb : m.books) {
        for (Real v : cb.entries.data) mix(double(v));
        for (Real v : cb.ema_count.data) mix(double(v));
        for (Real v : cb.ema_sum.data) mix(double(v));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace model_detail

template <class Real>
std::string model_hash(const Model<Real>& m) {
    return model_detail::fnv_hash(m, [](const std::string&) { return true; });
}

// Covers only what fixes the token semantics: the encoder, the quantizer
// projections, and the codebooks.  Decoder-only fine-tuning leaves this hash
// unchanged, so tokens written before fine-tuning still decode.
template <class Real>
std::string tokenizer_hash(const Model<Real>& m) {
    return model_detail::fnv_hash(m, [](const std::string& name) {
        return name.rfind("enc.", 0) == 0 || name.rfind("vq.", 0) == 0;
    });
}

}  // namespace sitok
