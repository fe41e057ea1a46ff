// Command-line front end: training stages, token encode/decode, desk-scale
// evaluation, toy corpus generation, and a self-contained oracle check.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
// Errors print a single JSON line on stderr so scripts can parse them.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sitok/corpus.hpp"
#include "sitok/metrics.hpp"
#include "sitok/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sitok;

namespace {

struct Flags {
    std::string config;
    std::string data;
    std::string ckpt;
    std::string out;
    int steps = 16;
    double cfg_scale = 1.0;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string preset = "desk";
    int count = 8;  // gen-corpus only
};

struct Resolved {
    ModelConfig model;
    TrainConfig train;
};

Resolved resolve_config(const Flags& f) {
    Resolved r;
    if (f.preset == "desk") {
        r.model = desk_config();
        r.train = desk_train_config();
    } else {
        r.model = preset_config(f.preset);
    }
    if (!f.config.empty()) {
        std::ifstream in(f.config);
        if (!in) throw data_error("cannot open config file: " + f.config);
        json doc;
        try {
            doc = json::parse(in);
        } catch (const json::exception& e) {
            throw data_error("config file " + f.config + ": " + e.what());
        }
        if (doc.contains("model")) doc.at("model").get_to(r.model);
        if (doc.contains("train")) doc.at("train").get_to(r.train);
    }
    if (f.seed_given) r.train.seed = f.seed;
    r.model.validate();
    r.train.validate();
    return r;
}

std::string manifest_path(const std::string& dir) {
    return (fs::path(dir) / "manifest.jsonl").string();
}

void require_flag(const std::string& value, const char* what) {
    if (value.empty()) throw usage_error(std::string("missing required flag: ") + what);
}

// Training checkpoints and metrics land next to --out; the final checkpoint
// is always written even when periodic checkpointing is off.
void run_training(const Flags& f, TrainStage stage) {
    require_flag(f.data, "--data");
    require_flag(f.out, "--out");
    Resolved rc = resolve_config(f);

    Model<float> model = [&] {
        if (stage == TrainStage::kBase && f.ckpt.empty())
            return build_model<float>(rc.model, rc.train.seed);
        require_flag(f.ckpt, "--ckpt");
        return load_checkpoint<float>(f.ckpt);
    }();
    if (!f.ckpt.empty() && !f.config.empty()) {
        json given = rc.model, loaded = model.cfg;
        if (given != loaded)
            throw data_error("config file disagrees with the checkpoint model configuration");
    }

    TrainerSnapshot snap;
    const TrainerSnapshot* resume = nullptr;
    if (stage == TrainStage::kBase && !f.ckpt.empty()) {
        load_checkpoint<float>(f.ckpt, &snap);  // rereads; keeps the model load simple
        resume = &snap;
    }

    auto corpus = load_training_set<float>(manifest_path(f.data), model.cfg.mel);
    std::ofstream metrics(f.out + ".metrics.jsonl",
                          resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw data_error("cannot open metrics stream: " + f.out + ".metrics.jsonl");
    auto emit = [&](const LossReport& r) {
        json j = r;
        metrics << j.dump() << "\n";
    };
    auto res = train(model, corpus, rc.train, stage, emit, f.out, resume);
    std::printf("trained %d steps, final loss %.6f, checkpoint %s\n", int(res.reports.size()),
                res.reports.empty() ? 0.0 : res.reports.back().total, f.out.c_str());
}

void run_encode(const Flags& f) {
    require_flag(f.ckpt, "--ckpt");
    require_flag(f.data, "--data");
    require_flag(f.out, "--out");
    auto model = load_checkpoint<float>(f.ckpt);
    auto corpus = load_training_set<float>(manifest_path(f.data), model.cfg.mel);
    const std::string hash = tokenizer_hash(model);
    std::vector<TokenRecord> records;
    for (const auto& u : corpus) {
        TokenRecord r;
        r.id = u.id;
        r.frame_rate = model.cfg.mel.frame_rate_hz();
        r.cs = model.cfg.quant.codebook_size;
        r.valid_len = u.valid_stacked;
        r.tokens = encode_frames(model, u.stacked, u.valid_stacked);
        r.cn = r.tokens.empty() ? 0 : int(r.tokens[0].size());
        r.model_hash = hash;
        records.push_back(std::move(r));
    }
    write_token_file(f.out, records);
    std::printf("encoded %d utterances to %s\n", int(records.size()), f.out.c_str());
}

void run_decode(const Flags& f) {
    require_flag(f.ckpt, "--ckpt");
    require_flag(f.data, "--data");
    require_flag(f.out, "--out");
    auto model = load_checkpoint<float>(f.ckpt);
    const std::string hash = tokenizer_hash(model);
    auto records = read_token_file(f.data);
    fs::create_directories(f.out);
    int idx = 0;
    for (const auto& r : records) {
        if (r.model_hash != hash)
            throw data_error("token file " + f.data + ": id " + r.id +
                             " was produced by a different tokenizer (hash mismatch)");
        DecodeOptions opt;
        opt.steps = f.steps;
        opt.guidance = f.cfg_scale;
        opt.seed = f.seed + std::uint64_t(idx);
        auto stacked = decode_frames(model, r.tokens, r.valid_len, opt);
        auto mel = unstack_frames(stacked, model.cfg.mel.stack);
        write_smel((fs::path(f.out) / (r.id + ".smel")).string(), mel,
                   r.valid_len * model.cfg.mel.stack);
        ++idx;
    }
    std::printf("decoded %d utterances to %s\n", idx, f.out.c_str());
}

// Compares decoded mel (<id>.smel next to the manifest) against mel
// recomputed from the reference waveform.  The decoder reports stack-padded
// valid lengths, so the hypothesis is trimmed to the reference valid span.
void run_eval(const Flags& f) {
    require_flag(f.data, "--data");
    MelConfig mel;
    if (!f.ckpt.empty())
        mel = load_checkpoint<float>(f.ckpt).cfg.mel;
    else
        mel = resolve_config(f).model.mel;

    auto entries = read_manifest(manifest_path(f.data));
    json table = json::array();
    double sum_l1 = 0, sum_cos = 0;
    for (const auto& e : entries) {
        const fs::path wav_path = fs::path(e.wav_path).is_absolute()
                                      ? fs::path(e.wav_path)
                                      : fs::path(f.data) / e.wav_path;
        auto wav = read_wav(wav_path.string());
        if (wav.sample_rate != mel.sample_rate)
            throw data_error("sample rate mismatch in " + e.wav_path);
        auto ms = extract_mel<float>(wav.samples, mel);
        MelFileData<float> ref{ms.frames, ms.valid_len};
        auto hyp = read_smel<float>((fs::path(f.data) / (e.id + ".smel")).string());
        if (hyp.frames.shape != ref.frames.shape)
            throw data_error("decoded mel shape mismatch for " + e.id);
        if (hyp.valid_len < ref.valid_len)
            throw data_error("decoded mel valid_len shorter than reference for " + e.id);
        hyp.valid_len = ref.valid_len;
        auto m = eval_reconstruction(ref, hyp);
        sum_l1 += m.mel_l1;
        sum_cos += m.mel_cos;
        table.push_back({{"id", e.id}, {"mel_l1", m.mel_l1}, {"mel_cos", m.mel_cos}});
    }
    if (entries.empty()) throw data_error("eval: empty manifest");
    json report = {{"count", entries.size()},
                   {"mel_l1", sum_l1 / double(entries.size())},
                   {"mel_cos", sum_cos / double(entries.size())},
                   {"utterances", table}};
    if (f.out.empty()) {
        std::cout << report.dump(2) << "\n";
    } else {
        std::ofstream out(f.out);
        if (!out) throw data_error("cannot write report: " + f.out);
        out << report.dump(2) << "\n";
        std::printf("evaluated %d utterances, report %s\n", int(entries.size()), f.out.c_str());
    }
}

void run_gen_corpus(const Flags& f) {
    require_flag(f.out, "--out");
    GeneratorConfig g;
    g.validate();
    const std::uint64_t seed = f.seed_given ? f.seed : 42;
    auto corpus = generate_corpus(g, f.count, seed);
    write_corpus(f.out, corpus, g.sample_rate);
    std::printf("wrote %d utterances to %s\n", int(corpus.size()), f.out.c_str());
}

// ----- selfcheck ----------------------------------------------------------

void expect(bool ok, const char* what) {
    if (!ok) throw numerical_error(what);
}

void check_rng() {
    Rng a(7), b(7);
    for (int i = 0; i < 5; ++i) expect(a.next_u64() == b.next_u64(), "seeded streams diverge");
    Rng c(9);
    c.uniform();
    const std::string state = c.serialize();
    const double next = c.uniform();
    Rng d(9);
    d.deserialize(state);
    expect(d.uniform() == next, "state restore breaks the stream");
}

void check_autodiff() {
    ad::Tape<double> tape;
    ad::TapeScope<double> scope(tape);
    Rng rng(11);
    auto w = ad::make_param(Tensor<double>({3, 3}), "w");
    for (auto& v : w->value.data) v = rng.normal() * 0.3;
    Tensor<double> x({2, 3}), tgt({2, 3});
    for (auto& v : x.data) v = rng.normal();
    for (auto& v : tgt.data) v = rng.normal();
    auto loss_of = [&] { return ad::l2_loss(ad::silu(ad::matmul(ad::constant(x), w)), ad::constant(tgt)); };
    auto loss = loss_of();
    tape.backward(loss);
    const double h = 1e-6;
    for (int i : {0, 4, 8}) {
        const double keep = w->value.data[size_t(i)];
        w->value.data[size_t(i)] = keep + h;
        const double up = loss_of()->value.data[0];
        w->value.data[size_t(i)] = keep - h;
        const double dn = loss_of()->value.data[0];
        w->value.data[size_t(i)] = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = w->grad.data[size_t(i)];
        expect(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}) < 1e-6,
               "finite differences disagree with backprop");
    }
}

void check_mel() {
    MelConfig cfg;
    std::vector<double> wave(7680);
    for (std::size_t i = 0; i < wave.size(); ++i)
        wave[i] = 0.3 * std::sin(2.0 * M_PI * 440.0 * double(i) / cfg.sample_rate);
    auto ms = extract_mel<double>(wave, cfg);
    expect(ms.valid_len == int(wave.size()) / cfg.hop, "mel frame count off");
    expect(ms.frames.rows() % cfg.stack == 0, "mel rows not padded to the stack size");
    expect(ms.frames.cols() == cfg.n_mels, "mel bin count off");
    // triangle peaks sit between DFT bins, so sampled maxima are in (0, 1]
    const auto fb = mel_filterbank(cfg);
    for (const auto& row : fb) {
        double peak = 0;
        for (double v : row) peak = std::max(peak, v);
        expect(peak > 0.0 && peak <= 1.0 + 1e-12, "filterbank rows must peak in (0, 1]");
    }
}

void check_ctc() {
    const int t_len = 4, vocab = 3;
    const std::vector<int> labels = {1, 2};
    Rng rng(13);
    Tensor<double> scores({t_len, vocab});
    for (auto& v : scores.data) v = rng.normal();
    ad::Tape<double> tape;
    ad::TapeScope<double> scope(tape);
    auto log_probs = ad::log_softmax_lastdim(ad::constant(scores));
    auto res = ctc_loss(log_probs, labels);
    expect(res.feasible, "feasible instance reported infeasible");

    double total = 0.0;
    std::vector<int> path(t_len);
    const int n_paths = int(std::pow(vocab, t_len));
    for (int code = 0; code < n_paths; ++code) {
        int c = code;
        for (int i = 0; i < t_len; ++i) {
            path[size_t(i)] = c % vocab;
            c /= vocab;
        }
        std::vector<int> collapsed;
        int prev = -1;
        for (int s : path) {
            if (s != prev && s != 0) collapsed.push_back(s);
            prev = s;
        }
        if (collapsed != labels) continue;
        double lp = 0;
        for (int i = 0; i < t_len; ++i) lp += log_probs->value.at(i, path[size_t(i)]);
        total += std::exp(lp);
    }
    expect(std::abs(-std::log(total) - res.loss->value.data[0]) < 1e-9,
           "ctc loss deviates from the brute-force path sum");
}

void check_quantizer() {
    QuantizerConfig cfg;
    cfg.codebook_size = 8;
    cfg.code_dim = 4;
    Rng rng(17);
    Tensor<double> seed_rows({16, 4});
    for (auto& v : seed_rows.data) v = rng.normal();
    auto cb = init_codebook<double>(cfg.codebook_size, cfg.code_dim, seed_rows, rng);
    Tensor<double> z({6, 4});
    for (auto& v : z.data) v = rng.normal();
    for (int r = 0; r < z.rows(); ++r) {
        const int fast = nearest_entry(cb, z.data.data() + std::size_t(r) * 4, 4);
        int best = -1;
        double best_d = 1e300;
        for (int e = 0; e < cfg.codebook_size; ++e) {
            double d = 0;
            for (int c = 0; c < 4; ++c) {
                const double diff = z.at(r, c) - cb.entries.at(e, c);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = e;
            }
        }
        expect(fast == best, "nearest-entry search disagrees with brute force");
    }

    QuantizerConfig fsq;
    fsq.kind = QuantKind::kFsq;
    fsq.code_dim = 2;
    fsq.fsq_levels = {4, 2};
    fsq.codebook_size = 8;
    for (long idx = 0; idx < 8; ++idx) {
        const auto digits = fsq_digits_from_index(idx, fsq.fsq_levels);
        expect(fsq_index_from_digits(digits, fsq.fsq_levels) == idx,
               "fsq digit packing is not a bijection");
    }
}

void check_diffusion() {
    Rng rng(19);
    Tensor<double> x0({3, 5}), x1({3, 5});
    for (auto& v : x0.data) v = rng.normal();
    for (auto& v : x1.data) v = rng.normal();
    for (int steps : {1, 4, 8}) {
        auto out = euler_sample(x0, steps, [&](const Tensor<double>&, double) {
            Tensor<double> v(x1.shape);
            for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = x1.data[i] - x0.data[i];
            return v;
        });
        for (std::size_t i = 0; i < out.data.size(); ++i)
            expect(std::abs(out.data[i] - x1.data[i]) < 1e-12,
                   "integrating the exact straight-line field misses the target");
    }
}

void check_shortcut() {
    const auto grid = shortcut_d_grid(8);
    expect(grid == std::vector<double>({0.125, 0.25, 0.5}), "dyadic grid is wrong");
    // dyadic values make every partial sum exact, so the comparison is bitwise
    Tensor<double> x({2, 3});
    x.data = {0.5, -0.25, 1.0, 0.75, -1.5, 0.125};
    Tensor<double> field({2, 3});
    field.data = {0.25, 0.5, -0.5, 0.125, 1.0, -0.75};
    auto fn = [&](const Tensor<double>&, double, double) { return field; };
    auto one = few_step_sample<double>(fn, x, 1);
    auto two = few_step_sample<double>(fn, x, 2);
    for (std::size_t i = 0; i < one.data.size(); ++i)
        expect(one.data[i] == two.data[i], "constant-field composition is not step-count invariant");
}

void check_trainer() {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ad::Tape<double> tape;
    ad::TapeScope<double> scope(tape);
    auto p = ad::make_param(Tensor<double>::scalar(0.0), "p");
    p->grad.data = {1.0};
    AdamWState st;
    std::vector<Var<double>> params{p};
    adamw_step(params, st, 0.1, cfg);
    expect(std::abs(p->value.data[0] + 0.1 / (1.0 + 1e-8)) < 1e-15,
           "first optimizer step deviates from the closed form");

    std::vector<TrainUtterance<double>> utts(3);
    utts[0].duration = 100;
    utts[1].duration = 150;
    utts[2].duration = 200;
    for (int i = 0; i < 3; ++i) utts[size_t(i)].id = "u" + std::to_string(i);
    const auto b = pack_batches(utts, 300.0);
    expect(b.size() == 2 && b[0] == std::vector<int>({0, 1}) && b[1] == std::vector<int>({2}),
           "greedy packing trace is wrong");
}

int run_selfcheck() {
    struct Suite {
        const char* name;
        void (*fn)();
    };
    const Suite suites[] = {
        {"rng", check_rng},           {"autodiff", check_autodiff},
        {"mel", check_mel},           {"ctc", check_ctc},
        {"quantizer", check_quantizer}, {"diffusion", check_diffusion},
        {"shortcut", check_shortcut}, {"trainer", check_trainer},
    };
    int failures = 0;
    for (const auto& s : suites) {
        try {
            s.fn();
            std::printf("%-10s PASS\n", s.name);
        } catch (const std::exception& e) {
            std::printf("%-10s FAIL  %s\n", s.name, e.what());
            ++failures;
        }
    }
    if (failures) {
        std::printf("%d suite(s) failed\n", failures);
        return 3;
    }
    std::printf("all suites passed\n");
    return 0;
}

void error_line(const char* category, const std::string& detail) {
    json j = {{"error", category}, {"detail", detail}};
    std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech tokenizer workbench"};
    app.require_subcommand(1);

    Flags f;
    std::function<int()> action;

    auto add_common = [&](CLI::App* cmd, bool with_decode_flags) {
        cmd->add_option("--config", f.config, "JSON config file");
        cmd->add_option("--data", f.data, "corpus directory or token file");
        cmd->add_option("--ckpt", f.ckpt, "checkpoint path");
        cmd->add_option("--out", f.out, "output path");
        cmd->add_option("--seed", f.seed, "rng seed")->each([&](const std::string&) {
            f.seed_given = true;
        });
        cmd->add_option("--preset", f.preset, "model preset: desk, S, B, L, XL")
            ->check(CLI::IsMember({"desk", "S", "B", "L", "XL"}));
        if (with_decode_flags) {
            cmd->add_option("--steps", f.steps, "sampling steps");
            cmd->add_option("--cfg-scale", f.cfg_scale, "guidance scale");
        }
    };

    auto* train_cmd = app.add_subcommand("train", "train a model from scratch (or resume via --ckpt)");
    add_common(train_cmd, false);
    train_cmd->callback([&] { action = [&] { run_training(f, TrainStage::kBase); return 0; }; });

    auto* ftd = app.add_subcommand("finetune-decoder", "train only the decoder from a checkpoint");
    add_common(ftd, false);
    ftd->callback([&] { action = [&] { run_training(f, TrainStage::kDecoderFinetune); return 0; }; });

    auto* fts = app.add_subcommand("finetune-shortcut", "few-step consistency fine-tuning");
    add_common(fts, false);
    fts->callback([&] { action = [&] { run_training(f, TrainStage::kShortcutFinetune); return 0; }; });

    auto* enc = app.add_subcommand("encode", "wav corpus to token file");
    add_common(enc, false);
    enc->callback([&] { action = [&] { run_encode(f); return 0; }; });

    auto* dec = app.add_subcommand("decode", "token file to mel (SMEL) files");
    add_common(dec, true);
    dec->callback([&] { action = [&] { run_decode(f); return 0; }; });

    auto* ev = app.add_subcommand("eval", "compare decoded mel against references");
    add_common(ev, false);
    ev->callback([&] { action = [&] { run_eval(f); return 0; }; });

    auto* gen = app.add_subcommand("gen-corpus", "write the synthetic tone corpus");
    add_common(gen, false);
    gen->add_option("--count", f.count, "number of utterances");
    gen->callback([&] { action = [&] { run_gen_corpus(f); return 0; }; });

    auto* sc = app.add_subcommand("selfcheck", "run the built-in oracle suites");
    sc->callback([&] { action = run_selfcheck; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        return action();
    } catch (const usage_error& e) {
        error_line("usage", e.what());
        return 1;
    } catch (const data_error& e) {
        error_line("data", e.what());
        return 2;
    } catch (const numerical_error& e) {
        error_line("numerical", e.what());
        return 3;
    } catch (const std::exception& e) {
        error_line("data", e.what());
        return 2;
    }
}
