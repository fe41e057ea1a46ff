#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sitok/errors.hpp"
#include "sitok/mel.hpp"
#include "sitok/rng.hpp"
#include "sitok/wav.hpp"

// Synthetic tone "speech": each label is a pure tone held for a fixed
// segment, so the class is recoverable from any single mel frame inside the
// segment.  That makes tiny-scale semantic experiments observable: tokens
// either carry the tone identity or they don't.

namespace sitok {

struct GeneratorConfig {
    int n_classes = 9;          // labels 1..n_classes; 0 is the CTC blank
    double f_lo = 200.0;        // class k sits at k * f_lo, harmonically spaced
    double f_hi = 2000.0;
    int sample_rate = 24000;
    double segment_ms = 320.0;  // 4 model frames at 12.5 Hz, CTC-feasible
    int min_labels = 2;
    int max_labels = 6;
    double amplitude = 0.3;
    double noise_floor = 0.01;  // additive Gaussian level
    double fade_ms = 10.0;      // crossfade span at segment boundaries

    double tone_hz(int label) const { return f_lo * label; }

    int segment_samples() const {
        return int(std::lround(segment_ms / 1000.0 * sample_rate));
    }

    void validate() const {
        if (n_classes < 1) throw usage_error("toy corpus: need at least one class");
        if (tone_hz(n_classes) > f_hi)
            throw usage_error("toy corpus: top tone exceeds the frequency budget");
        if (min_labels < 1 || max_labels < min_labels)
            throw usage_error("toy corpus: bad label-count range");
        if (segment_ms < 160.0)
            throw usage_error("toy corpus: segments too short for CTC feasibility");
        if (fade_ms * 2 > segment_ms) throw usage_error("toy corpus: fade longer than segment");
    }
};

struct ToyUtterance {
    std::string id;
    std::vector<double> samples;
    std::vector<int> labels;
    double duration = 0.0;   // seconds
};

// Draw order is part of the contract: label count, labels, one phase per
// segment, then one noise sample per output sample.
inline ToyUtterance generate_utterance(const GeneratorConfig& cfg, Rng& rng) {
    cfg.validate();
    ToyUtterance u;
    const int n = int(rng.uniform_int(cfg.min_labels, cfg.max_labels));
    u.labels.reserve(n);
    for (int i = 0; i < n; ++i)
        u.labels.push_back(int(rng.uniform_int(1, cfg.n_classes)));

    std::vector<double> phase(n);
    for (double& p : phase) p = rng.uniform(0.0, 2.0 * M_PI);

    const int seg = cfg.segment_samples();
    const int total = n * seg;
    const int half_fade = int(std::lround(cfg.fade_ms / 1000.0 * cfg.sample_rate)) / 2;
    u.samples.resize(total);
    u.duration = double(total) / cfg.sample_rate;

    auto tone = [&](int s, int t) {
        const double f = cfg.tone_hz(u.labels[size_t(s)]);
        return cfg.amplitude * std::sin(2.0 * M_PI * f * t / cfg.sample_rate + phase[size_t(s)]);
    };
    for (int t = 0; t < total; ++t) {
        const int s = t / seg;
        const int into = t - s * seg;
        double x;
        if (s > 0 && into < half_fade) {
            // raised-cosine blend across the boundary, previous tone extended
            const double w = 0.5 - 0.5 * std::cos(M_PI * (into + half_fade) / (2.0 * half_fade));
            x = (1.0 - w) * tone(s - 1, t) + w * tone(s, t);
        } else if (s + 1 < n && seg - into <= half_fade) {
            const double w =
                0.5 - 0.5 * std::cos(M_PI * (half_fade - (seg - into)) / (2.0 * half_fade));
            x = (1.0 - w) * tone(s, t) + w * tone(s + 1, t);
        } else {
            x = tone(s, t);
        }
        u.samples[size_t(t)] = x + cfg.noise_floor * rng.normal();
    }
    return u;
}

inline std::vector<ToyUtterance> generate_corpus(const GeneratorConfig& cfg, int n,
                                                 std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ToyUtterance> out;
    out.reserve(size_t(std::max(n, 0)));
    for (int i = 0; i < n; ++i) {
        auto u = generate_utterance(cfg, rng);
        char buf[16];
        std::snprintf(buf, sizeof buf, "utt%04d", i);
        u.id = buf;
        out.push_back(std::move(u));
    }
    return out;
}

// The frozen training split used by the end-to-end checks.
inline std::vector<ToyUtterance> overfit8_corpus(const GeneratorConfig& cfg = {}) {
    return generate_corpus(cfg, 8, 42);
}

// ----- on-disk corpus: WAVs plus a JSONL manifest -------------------------

struct ManifestEntry {
    std::string id;
    std::vector<int> labels;
    std::string wav_path;
};

inline void write_corpus(const std::string& dir, const std::vector<ToyUtterance>& corpus,
                         int sample_rate) {
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir + "/manifest.jsonl");
    if (!mf) throw data_error("cannot open manifest for writing in " + dir);
    for (const auto& u : corpus) {
        const std::string wav = u.id + ".wav";
        write_wav(dir + "/" + wav, u.samples, sample_rate);
        nlohmann::json j{{"id", u.id}, {"labels", u.labels}, {"wav_path", wav}};
        mf << j.dump() << "\n";
    }
    if (!mf) throw data_error("manifest write failed in " + dir);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("cannot open manifest: " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("bad JSON at " + where + ": " + e.what());
        }
        ManifestEntry e;
        try {
            e.id = j.at("id").get<std::string>();
            e.labels = j.at("labels").get<std::vector<int>>();
            e.wav_path = j.at("wav_path").get<std::string>();
        } catch (const nlohmann::json::exception& ex) {
            throw data_error("missing manifest field at " + where + ": " + ex.what());
        }
        if (e.labels.empty()) throw data_error("empty label sequence at " + where);
        out.push_back(std::move(e));
    }
    return out;
}

// A corpus item ready for the trainer: stacked normalized log-mel plus the
// transcript and the clock-time duration used for batch packing.
template <class Real>
struct TrainUtterance {
    std::string id;
    Tensor<Real> stacked;     // [T, n_mels * stack]
    int valid_stacked = 0;
    std::vector<int> labels;
    double duration = 0.0;
};

template <class Real>
TrainUtterance<Real> prepare_utterance(const std::vector<double>& samples,
                                       const std::vector<int>& labels, const std::string& id,
                                       const MelConfig& mel_cfg) {
    TrainUtterance<Real> u;
    u.id = id;
    u.labels = labels;
    u.duration = double(samples.size()) / mel_cfg.sample_rate;
    auto mel = extract_mel<Real>(samples, mel_cfg);
    u.stacked = stack_frames(mel.frames, mel_cfg.stack);
    u.valid_stacked = mel.valid_stacked(mel_cfg.stack);
    return u;
}

template <class Real>
std::vector<TrainUtterance<Real>> load_training_set(const std::string& manifest_path,
                                                    const MelConfig& mel_cfg) {
    const auto dir = manifest_path.substr(0, manifest_path.find_last_of('/'));
    std::vector<TrainUtterance<Real>> out;
    for (const auto& e : read_manifest(manifest_path)) {
        const auto wav = read_wav(dir + "/" + e.wav_path);
        if (wav.sample_rate != mel_cfg.sample_rate)
            throw data_error("sample rate mismatch for " + e.id);
        out.push_back(prepare_utterance<Real>(wav.samples, e.labels, e.id, mel_cfg));
    }
    return out;
}

template <class Real>
std::vector<TrainUtterance<Real>> prepare_corpus(const std::vector<ToyUtterance>& corpus,
                                                 const MelConfig& mel_cfg) {
    std::vector<TrainUtterance<Real>> out;
    out.reserve(corpus.size());
    for (const auto& u : corpus)
        out.push_back(prepare_utterance<Real>(u.samples, u.labels, u.id, mel_cfg));
    return out;
}

}  // namespace sitok
