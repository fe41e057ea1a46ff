#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sitok/corpus.hpp"
#include "sitok/formats.hpp"
#include "sitok/model.hpp"
#include "sitok/shortcut.hpp"

// Training loop: loss assembly, AdamW with linear warmup, global-norm
// clipping, duration-packed batches, codebook EMA, and per-stage parameter
// freezing.  Everything is deterministic given a seed, and a checkpoint plus
// its trainer snapshot resumes the next step bit-exactly.

namespace sitok {

enum class TrainStage { kBase, kDecoderFinetune, kShortcutFinetune };

struct TrainConfig {
    double lr_peak = 8e-5;
    int warmup_steps = 32000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 0.5;
    double lambda_ctc = 0.1;
    double duration_budget = 300.0;   // seconds of audio per packed batch
    std::vector<std::string> freeze;  // extra prefixes on top of the stage set
    std::uint64_t seed = 0;
    int steps = 1000;
    int checkpoint_every = 0;         // 0 writes only the final checkpoint
    double dead_code_threshold = 0.0; // <= 0 disables reseeding
    ShortcutConfig shortcut;

    void validate() const {
        if (lr_peak <= 0) throw usage_error("train config: lr_peak must be positive");
        if (warmup_steps < 1) throw usage_error("train config: warmup_steps must be >= 1");
        if (lambda_ctc < 0) throw usage_error("train config: lambda_ctc must be >= 0");
        if (clip_norm <= 0) throw usage_error("train config: clip_norm must be positive");
        if (duration_budget <= 0) throw usage_error("train config: duration_budget must be positive");
        if (steps < 1) throw usage_error("train config: need at least one step");
    }
};

// Tuned for the toy corpus: short warmup, small batches, and a much hotter
// peak rate than the full-scale recipe (a 2-layer model on 8 utterances
// would barely move at 8e-5).
inline TrainConfig desk_train_config() {
    TrainConfig c;
    c.lr_peak = 2e-3;
    c.warmup_steps = 200;
    c.duration_budget = 8.0;
    c.steps = 2000;
    return c;
}

inline void to_json(nlohmann::json& j, const ShortcutConfig& c) {
    j = {{"base_steps", c.base_steps},
         {"self_consistency_fraction", c.self_consistency_fraction}};
}

inline void from_json(const nlohmann::json& j, ShortcutConfig& c) {
    c.base_steps = j.value("base_steps", c.base_steps);
    c.self_consistency_fraction = j.value("self_consistency_fraction", c.self_consistency_fraction);
}

// Like the model config, absent keys keep whatever the preset already chose.
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr_peak", c.lr_peak},
         {"warmup_steps", c.warmup_steps},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"weight_decay", c.weight_decay},
         {"clip_norm", c.clip_norm},
         {"lambda_ctc", c.lambda_ctc},
         {"duration_budget", c.duration_budget},
         {"freeze", c.freeze},
         {"seed", c.seed},
         {"steps", c.steps},
         {"checkpoint_every", c.checkpoint_every},
         {"dead_code_threshold", c.dead_code_threshold},
         {"shortcut", c.shortcut}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.lambda_ctc = j.value("lambda_ctc", c.lambda_ctc);
    c.duration_budget = j.value("duration_budget", c.duration_budget);
    c.freeze = j.value("freeze", c.freeze);
    c.seed = j.value("seed", c.seed);
    c.steps = j.value("steps", c.steps);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.dead_code_threshold = j.value("dead_code_threshold", c.dead_code_threshold);
    if (j.contains("shortcut")) j.at("shortcut").get_to(c.shortcut);
}

struct LossReport {
    long step = 0;
    double total = 0, rec = 0, ctc = 0, vq = 0;
    double grad_norm = 0;   // pre-clip global norm
    double lr = 0;
    double utilization = 0, perplexity = 0;
    int ctc_infeasible = 0;
    int cond_drops = 0;
};

inline void to_json(nlohmann::json& j, const LossReport& r) {
    j = {{"step", r.step},
         {"total", r.total},
         {"rec", r.rec},
         {"ctc", r.ctc},
         {"vq", r.vq},
         {"grad_norm", r.grad_norm},
         {"lr", r.lr},
         {"utilization", r.utilization},
         {"perplexity", r.perplexity},
         {"ctc_infeasible", r.ctc_infeasible},
         {"cond_drops", r.cond_drops}};
}

// ----- schedule, clipping, optimizer --------------------------------------

inline double lr_schedule(long step, const TrainConfig& cfg) {
    if (step < cfg.warmup_steps) return cfg.lr_peak * double(step) / double(cfg.warmup_steps);
    return cfg.lr_peak;
}

// Global L2 norm over every gradient; scales in place when above max_norm.
// Returns the applied scale (1 when no rescale happened).
template <class Real>
double clip_grads(const std::vector<Var<Real>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (Real g : p->grad.data) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for (const auto& p : params)
        for (Real& g : p->grad.data) g = Real(double(g) * scale);
    return scale;
}

struct AdamWState {
    std::map<std::string, Tensor<double>> m, v;
    long updates = 0;   // shared step count for bias correction
};

// Bias-corrected AdamW with decoupled weight decay.  Moments are kept in
// double regardless of the training precision so checkpoints store them
// losslessly.
template <class Real>
void adamw_step(const std::vector<Var<Real>>& params, AdamWState& st, double lr,
                const TrainConfig& cfg) {
    ++st.updates;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.updates));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.updates));
    for (const auto& p : params) {
        if (p->name.empty()) throw usage_error("adamw_step: parameters must be named");
        auto& m = st.m.try_emplace(p->name, Tensor<double>(p->value.shape)).first->second;
        auto& v = st.v.try_emplace(p->name, Tensor<double>(p->value.shape)).first->second;
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const double g = double(p->grad.data[i]);
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            const double theta = double(p->value.data[i]);
            p->value.data[i] =
                Real(theta - lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * theta));
        }
    }
}

// ----- batching -----------------------------------------------------------

// Greedy in-order packing: a batch closes when the next utterance would push
// it past the budget.  An utterance that alone exceeds the budget is a data
// error, not a silent singleton.
template <class Real>
std::vector<std::vector<int>> pack_batches(const std::vector<TrainUtterance<Real>>& utts,
                                           double budget_seconds) {
    std::vector<std::vector<int>> batches;
    std::vector<int> cur;
    double used = 0.0;
    for (int i = 0; i < int(utts.size()); ++i) {
        const double d = utts[size_t(i)].duration;
        if (d > budget_seconds)
            throw data_error("utterance exceeds the duration budget: " + utts[size_t(i)].id);
        if (!cur.empty() && used + d > budget_seconds) {
            batches.push_back(std::move(cur));
            cur.clear();
            used = 0.0;
        }
        cur.push_back(i);
        used += d;
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
    return batches;
}

// The null-conditioning coin the trainer flips for every utterance; isolated
// so the empirical rate can be measured against the exact production rule.
inline bool cond_drop_decision(Rng& rng, double p) { return rng.bernoulli(p); }

// ----- per-stage freezing -------------------------------------------------

// Base training keeps the step-size projection pinned at its zero init so
// shortcut fine-tuning provably starts from the pretrained decoder.  Earlier
// stages may have frozen other parameters on the same model, so everything
// thaws before the stage set applies.
template <class Real>
void apply_stage_freeze(Model<Real>& m, TrainStage stage, const std::vector<std::string>& extra) {
    for (auto& [name, var] : m.store.by_name) {
        var->requires_grad = true;
        if (var->grad.numel() == 0) var->grad = Tensor<Real>(var->value.shape);
    }
    switch (stage) {
        case TrainStage::kBase:
            m.store.freeze_prefix("dec.step_w");
            break;
        case TrainStage::kDecoderFinetune:
            m.store.freeze_prefix("enc.");
            m.store.freeze_prefix("vq.");
            m.store.freeze_prefix("ctc.");
            m.store.freeze_prefix("dec.step_w");
            break;
        case TrainStage::kShortcutFinetune:
            m.store.freeze_prefix("enc.");
            m.store.freeze_prefix("vq.");
            m.store.freeze_prefix("ctc.");
            break;
    }
    for (const auto& prefix : extra) m.store.freeze_prefix(prefix);
}

// Codebooks only learn (EMA, reseeding, data-driven init) during base
// training; both fine-tuning stages treat them as fixed, as does an explicit
// freeze of the whole quantizer module.
inline bool codebooks_trainable(TrainStage stage, const std::vector<std::string>& extra) {
    if (stage != TrainStage::kBase) return false;
    for (const auto& p : extra)
        if (p == "vq" || p == "vq.") return false;
    return true;
}

// ----- loss assembly ------------------------------------------------------

namespace train_detail {

template <class Real>
Var<Real> mean_of(const std::vector<Var<Real>>& parts) {
    if (parts.empty()) return ad::constant(Tensor<Real>({1}));
    Var<Real> acc = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
    return ad::scale(acc, Real(1) / Real(parts.size()));
}

// Residual rows feeding stage s: the encoder output minus everything the
// earlier stages already explained.
template <class Real>
Tensor<Real> stage_rows(const Model<Real>& m, const Tensor<Real>& z_rows,
                        const std::vector<std::vector<int>>& row_indices, int stage) {
    Tensor<Real> rows = z_rows;
    for (int s = 0; s < stage; ++s)
        for (int r = 0; r < rows.rows(); ++r) {
            const int idx = row_indices[size_t(r)][size_t(s)];
            for (int c = 0; c < rows.cols(); ++c)
                rows.at(r, c) -= m.books[size_t(s)].entries.at(idx, c);
        }
    return rows;
}

}  // namespace train_detail

// One per-utterance contribution to the shortcut fine-tuning objective.
// Draw order: branch coin, then either (t, noise) for the flow term or
// (t, d, noise) for the consistency term.
template <class Real>
struct ShortcutOutputs {
    Var<Real> loss;          // L2, masked
    Var<Real> commit_loss;
    std::vector<std::vector<int>> indices;
    bool consistency = false;
};

template <class Real>
ShortcutOutputs<Real> shortcut_forward(const Model<Real>& m, const TrainUtterance<Real>& utt,
                                       Rng& rng, const ShortcutConfig& scfg) {
    const int t_len = utt.stacked.rows();
    const auto dcfg = m.cfg.decoder_config();
    auto causal_mask = ad::constant(attn_mask<Real>(t_len, utt.valid_stacked, true));
    auto full_mask = ad::constant(attn_mask<Real>(t_len, utt.valid_stacked, false));

    ShortcutOutputs<Real> out;
    out.consistency = rng.bernoulli(scfg.self_consistency_fraction);

    auto z = model_detail::encode_codes(m, ad::constant(utt.stacked), causal_mask);
    const auto weights = model_detail::valid_row_weights<Real>(t_len, utt.valid_stacked);
    auto q = quantize(m.books, z, m.cfg.quant, weights);
    out.commit_loss = q.commit_loss;
    out.indices = std::move(q.indices);
    auto cond = ad::matmul(q.z_q, m.vq_out);
    auto h_base = decoder_base(m.dec, dcfg, cond, full_mask, false);

    auto scalar = [](Real v) {
        Tensor<Real> t({1, 1});
        t.data[0] = v;
        return ad::constant(t);
    };
    auto velocity_at = [&](const Var<Real>& x, Real t, Real d) {
        return decoder_velocity(m.dec, dcfg, x, h_base, scalar(t), scalar(d), full_mask);
    };

    if (!out.consistency) {
        const Real t = Real(rng.uniform());
        Tensor<Real> eps(utt.stacked.shape);
        for (Real& v : eps.data) v = Real(rng.normal());
        auto pred = velocity_at(ad::constant(flow_interpolate(utt.stacked, eps, t)), t, Real(0));
        out.loss = ad::l2_loss(pred, ad::constant(flow_velocity_target(utt.stacked, eps)), weights);
        return out;
    }

    const auto td = sample_shortcut_td(rng, scfg.base_steps);
    Tensor<Real> eps(utt.stacked.shape);
    for (Real& v : eps.data) v = Real(rng.normal());
    const Tensor<Real> x_t = flow_interpolate(utt.stacked, eps, Real(td.t));
    auto fn = [&](const Tensor<Real>& x, Real t, Real d) {
        return velocity_at(ad::constant(x), t, d)->value;
    };
    const auto target = shortcut_target<Real>(fn, x_t, Real(td.t), Real(td.d));
    // one 2d step must explain the two d half-steps above
    auto pred = velocity_at(ad::constant(x_t), Real(td.t), Real(2 * td.d));
    out.loss = ad::l2_loss(pred, ad::constant(target.target), weights);
    return out;
}

// ----- the loop -----------------------------------------------------------

template <class Real>
struct TrainResult {
    std::vector<LossReport> reports;
    TrainerSnapshot snapshot;
};

namespace train_detail {

template <class Real>
void init_books_from_batch(Model<Real>& m, const std::vector<TrainUtterance<Real>>& utts,
                           const std::vector<int>& batch, Rng& rng) {
    ad::TapeSuspend<Real> no_tape;
    int total_rows = 0;
    for (int i : batch) total_rows += utts[size_t(i)].valid_stacked;
    Tensor<Real> rows({total_rows, m.cfg.quant.code_dim});
    int at = 0;
    for (int i : batch) {
        const auto& u = utts[size_t(i)];
        auto mask = ad::constant(attn_mask<Real>(u.stacked.rows(), u.valid_stacked, true));
        auto z = model_detail::encode_codes(m, ad::constant(u.stacked), mask);
        for (int r = 0; r < u.valid_stacked; ++r, ++at)
            for (int c = 0; c < rows.cols(); ++c) rows.at(at, c) = z->value.at(r, c);
    }
    for (int s = 0; s < int(m.books.size()); ++s) {
        m.books[size_t(s)] =
            init_codebook<Real>(m.cfg.quant.codebook_size, m.cfg.quant.code_dim, rows, rng);
        if (s + 1 < int(m.books.size())) {
            const int cd = rows.cols();
            for (int r = 0; r < rows.rows(); ++r) {
                const int idx = nearest_entry(m.books[size_t(s)],
                                              rows.data.data() + std::size_t(r) * std::size_t(cd), cd);
                for (int c = 0; c < cd; ++c) rows.at(r, c) -= m.books[size_t(s)].entries.at(idx, c);
            }
        }
    }
    m.books_initialized = true;
}

}  // namespace train_detail

// Runs `cfg.steps` optimizer steps, cycling through the packed batches in
// order.  Reports stream through `on_report` and come back in the result.
// Passing `resume` continues an earlier run: the step counter, optimizer
// moments, and rng stream pick up exactly where the snapshot left off.
template <class Real>
TrainResult<Real> train(Model<Real>& m, const std::vector<TrainUtterance<Real>>& corpus,
                        const TrainConfig& cfg, TrainStage stage,
                        const std::function<void(const LossReport&)>& on_report = {},
                        const std::string& checkpoint_path = "",
                        const TrainerSnapshot* resume = nullptr) {
    cfg.validate();
    if (corpus.empty()) throw data_error("train: empty corpus");
    const auto batches = pack_batches(corpus, cfg.duration_budget);
    apply_stage_freeze(m, stage, cfg.freeze);
    auto trainable = m.store.trainable();
    if (trainable.empty()) throw usage_error("train: every parameter is frozen");

    Rng rng(cfg.seed);
    AdamWState opt;
    long start_step = 0;
    if (resume) {
        rng.deserialize(resume->rng_state);
        opt.m = resume->opt_m;
        opt.v = resume->opt_v;
        opt.updates = resume->opt_updates;
        start_step = resume->step;
    }

    TrainResult<Real> result;
    for (long step = start_step; step < cfg.steps; ++step) {
        const auto& batch = batches[size_t(step % long(batches.size()))];
        auto step_error = [&](const numerical_error& e) {
            return numerical_error(std::string(e.what()) + " at train step " + std::to_string(step));
        };
        try {
            if (!m.books_initialized && codebooks_trainable(stage, cfg.freeze))
                train_detail::init_books_from_batch(m, corpus, batch, rng);
        } catch (const numerical_error& e) {
            throw step_error(e);
        }

        ad::Tape<Real> tape;
        ad::TapeScope<Real> scope(tape);
        m.store.zero_grads();

        std::vector<Var<Real>> recs, ctcs, commits;
        std::vector<Tensor<Real>> batch_z;
        std::vector<std::vector<std::vector<int>>> batch_idx;
        std::vector<int> batch_valid;
        LossReport rep;
        rep.step = step;
        Var<Real> total;
        // a non-finite loss, whether it trips a guard inside an op or only
        // shows up in the batch total, aborts with the offending step
        try {
            for (int i : batch) {
                const auto& utt = corpus[size_t(i)];
                if (stage == TrainStage::kShortcutFinetune) {
                    auto so = shortcut_forward(m, utt, rng, cfg.shortcut);
                    recs.push_back(so.loss);
                    commits.push_back(so.commit_loss);
                    batch_idx.push_back(std::move(so.indices));
                    batch_valid.push_back(utt.valid_stacked);
                } else {
                    ForwardOptions opts;
                    opts.drop_cond = cond_drop_decision(rng, m.cfg.cond_drop_prob);
                    if (opts.drop_cond) ++rep.cond_drops;
                    auto out =
                        sitok_forward(m, utt.stacked, utt.valid_stacked, utt.labels, rng, opts);
                    recs.push_back(out.rec_loss);
                    commits.push_back(out.commit_loss);
                    if (out.ctc_feasible)
                        ctcs.push_back(out.ctc_loss);
                    else
                        ++rep.ctc_infeasible;
                    batch_z.push_back(std::move(out.z_pre));
                    batch_idx.push_back(std::move(out.indices));
                    batch_valid.push_back(utt.valid_stacked);
                }
            }

            auto rec = train_detail::mean_of(recs);
            auto ctc = train_detail::mean_of(ctcs);
            auto vq = train_detail::mean_of(commits);
            total = ad::add(ad::add(rec, ad::scale(ctc, Real(cfg.lambda_ctc))), vq);

            rep.rec = double(rec->value.data[0]);
            rep.ctc = double(ctc->value.data[0]);
            rep.vq = double(vq->value.data[0]);
            rep.total = double(total->value.data[0]);
            if (!std::isfinite(rep.total)) throw numerical_error("non-finite loss");
        } catch (const numerical_error& e) {
            throw step_error(e);
        }
        rep.lr = lr_schedule(step, cfg);

        tape.backward(total);
        double sq = 0.0;
        for (const auto& p : trainable)
            for (Real g : p->grad.data) sq += double(g) * double(g);
        rep.grad_norm = std::sqrt(sq);
        clip_grads(trainable, cfg.clip_norm);
        adamw_step(trainable, opt, rep.lr, cfg);

        if (codebooks_trainable(stage, cfg.freeze) && m.cfg.quant.kind != QuantKind::kFsq) {
            // one EMA application per codebook per optimizer step
            for (int s = 0; s < int(m.books.size()); ++s) {
                int total_rows = 0;
                for (int v : batch_valid) total_rows += v;
                Tensor<Real> rows({total_rows, m.cfg.quant.code_dim});
                std::vector<int> assigned(std::size_t(total_rows), 0);
                int at = 0;
                for (std::size_t b = 0; b < batch_z.size(); ++b) {
                    auto res =
                        train_detail::stage_rows(m, batch_z[b], batch_idx[b], s);
                    for (int r = 0; r < batch_valid[b]; ++r, ++at) {
                        assigned[size_t(at)] = batch_idx[b][size_t(r)][size_t(s)];
                        for (int c = 0; c < rows.cols(); ++c) rows.at(at, c) = res.at(r, c);
                    }
                }
                ema_update(m.books[size_t(s)], rows, assigned, m.cfg.quant);
                if (cfg.dead_code_threshold > 0)
                    dead_code_reset(m.books[size_t(s)], rows, cfg.dead_code_threshold, rng);
            }
        }

        if (!batch_idx.empty() && !batch_idx[0].empty() && !batch_idx[0][0].empty()) {
            std::vector<int> first_stage;
            for (std::size_t b = 0; b < batch_idx.size(); ++b)
                for (int r = 0; r < batch_valid[b]; ++r)
                    first_stage.push_back(batch_idx[b][size_t(r)][0]);
            const auto stats = codebook_stats(first_stage, m.cfg.quant.codebook_size);
            rep.utilization = stats.utilization;
            rep.perplexity = stats.perplexity;
        }

        result.reports.push_back(rep);
        if (on_report) on_report(rep);

        const bool last = step + 1 == cfg.steps;
        if (!checkpoint_path.empty() &&
            (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0))) {
            TrainerSnapshot snap;
            snap.step = step + 1;
            snap.seed = cfg.seed;
            snap.rng_state = rng.serialize();
            snap.opt_m = opt.m;
            snap.opt_v = opt.v;
            snap.opt_updates = opt.updates;
            save_checkpoint(checkpoint_path, m, &snap);
        }
    }

    result.snapshot.step = cfg.steps;
    result.snapshot.seed = cfg.seed;
    result.snapshot.rng_state = rng.serialize();
    result.snapshot.opt_m = std::move(opt.m);
    result.snapshot.opt_v = std::move(opt.v);
    result.snapshot.opt_updates = opt.updates;
    return result;
}

}  // namespace sitok
