#pragma once

// Log-mel analysis frontend.
//
// Pipeline per utterance: reflect-centered STFT (periodic Hann), power
// spectrum, triangular mel filterbank on the 2595*log10(1 + f/700) scale,
// log with an absolute floor, global mean/variance normalization, then
// stacking so `stack` adjacent hops fuse into one model frame (480-sample
// hops at 24 kHz with stack 4 give 12.5 model frames per second).  All
// analysis math runs in double regardless of the model precision.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sitok/errors.hpp"
#include "sitok/fft.hpp"
#include "sitok/tensor.hpp"

namespace sitok {

struct MelConfig {
    int sample_rate = 24000;
    int n_fft = 1920;
    int win_length = 1920;
    int hop = 480;
    int n_mels = 128;
    double fmin = 0.0;
    double fmax = 12000.0;
    int stack = 4;                // adjacent frames fused into one model frame
    double log_floor = 1e-10;     // applied before the log
    double norm_mean = -4.92;     // global log-mel statistics
    double norm_var = 8.14;       // normalization divides by sqrt of this

    double frame_rate_hz() const { return double(sample_rate) / hop / stack; }
    int stacked_dim() const { return n_mels * stack; }
};

// Frames are rows; valid_len counts unpadded (pre-stack-padding) rows.
template <class Real>
struct MelSpectrogram {
    Tensor<Real> frames;  // [n_frames, n_mels], n_frames a multiple of stack
    int valid_len = 0;

    int n_frames() const { return frames.rows(); }
    int valid_stacked(int stack) const { return (valid_len + stack - 1) / stack; }
};

namespace mel_detail {

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace mel_detail

// Center frequencies of the triangular filters in Hz.  Exposed separately so
// tests can resolve "which filter should a pure tone light up" without going
// through the filterbank matrix itself.
inline std::vector<double> mel_center_frequencies(const MelConfig& cfg) {
    const double mlo = mel_detail::hz_to_mel(cfg.fmin);
    const double mhi = mel_detail::hz_to_mel(cfg.fmax);
    std::vector<double> centers(cfg.n_mels);
    for (int i = 0; i < cfg.n_mels; ++i)
        centers[i] = mel_detail::mel_to_hz(mlo + (mhi - mlo) * double(i + 1) / (cfg.n_mels + 1));
    return centers;
}

// Triangular filterbank [n_mels, n_fft/2+1], peak weight 1 per filter.
inline std::vector<std::vector<double>> mel_filterbank(const MelConfig& cfg) {
    const int bins = cfg.n_fft / 2 + 1;
    const double mlo = mel_detail::hz_to_mel(cfg.fmin);
    const double mhi = mel_detail::hz_to_mel(cfg.fmax);
    std::vector<double> edges(cfg.n_mels + 2);
    for (int i = 0; i < cfg.n_mels + 2; ++i)
        edges[i] = mel_detail::mel_to_hz(mlo + (mhi - mlo) * double(i) / (cfg.n_mels + 1));

    std::vector<std::vector<double>> fb(cfg.n_mels, std::vector<double>(bins, 0.0));
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            const double f = double(k) * cfg.sample_rate / cfg.n_fft;
            double w = 0.0;
            if (f > left && f < right)
                w = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
            fb[m][k] = w;
        }
    }
    return fb;
}

namespace mel_detail {

// Reflect padding without repeating the edge sample: index -k maps to k.
inline double sample_reflected(const std::vector<double>& x, long i) {
    const long n = long(x.size());
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return x[std::clamp(i, 0L, n - 1)];
}

}  // namespace mel_detail

// Normalized log-mel value of an all-zero frame; padding rows are filled
// with this constant.
inline double mel_silence_floor(const MelConfig& cfg) {
    return (std::log(cfg.log_floor) - cfg.norm_mean) / std::sqrt(cfg.norm_var);
}

template <class Real>
MelSpectrogram<Real> extract_mel(const std::vector<double>& wave, const MelConfig& cfg) {
    if (cfg.win_length != cfg.n_fft)
        throw usage_error("extract_mel: window length must equal the transform size");
    const int valid = int(wave.size()) / cfg.hop;
    if (valid == 0)
        throw data_error("extract_mel: utterance shorter than one hop");
    const int total = (valid + cfg.stack - 1) / cfg.stack * cfg.stack;

    std::vector<double> window(cfg.n_fft);
    for (int i = 0; i < cfg.n_fft; ++i)
        window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.n_fft);
    const auto fb = mel_filterbank(cfg);
    // Unitary-transform power convention: the spectrum is divided by n_fft
    // (as if the DFT were orthonormal) and by the squared window sum, so the
    // mel energies are independent of the transform length and window choice.
    // Under this scaling a full-scale tone sits a couple of decades above the
    // log floor while broadband noise at the generator's -40 dB floor falls
    // below it, which keeps the normalized features well separated.
    double win_sum = 0.0;
    for (double w : window) win_sum += w;
    const double power_scale = 1.0 / (win_sum * win_sum * cfg.n_fft);
    const double inv_std = 1.0 / std::sqrt(cfg.norm_var);

    MelSpectrogram<Real> out;
    out.frames = Tensor<Real>({total, cfg.n_mels});
    out.valid_len = valid;

    std::vector<double> frame(cfg.n_fft);
    const int half = cfg.n_fft / 2;
    for (int t = 0; t < valid; ++t) {
        // frame t is centered on sample t*hop of the original signal
        const long start = long(t) * cfg.hop - half;
        for (int i = 0; i < cfg.n_fft; ++i)
            frame[i] = mel_detail::sample_reflected(wave, start + i) * window[i];
        const auto power = power_spectrum(frame);
        for (int m = 0; m < cfg.n_mels; ++m) {
            double acc = 0.0;
            const auto& w = fb[m];
            for (std::size_t k = 0; k < power.size(); ++k) acc += w[k] * power[k];
            const double logmel = std::log(std::max(acc * power_scale, cfg.log_floor));
            out.frames.at(t, m) = Real((logmel - cfg.norm_mean) * inv_std);
        }
    }
    const Real floor_val = Real(mel_silence_floor(cfg));
    for (int t = valid; t < total; ++t)
        for (int m = 0; m < cfg.n_mels; ++m) out.frames.at(t, m) = floor_val;
    return out;
}

// [T, B] -> [T/stack, B*stack]; within a stacked row the earliest frame's
// bins come first.
template <class Real>
Tensor<Real> stack_frames(const Tensor<Real>& mel, int stack) {
    const int t = mel.rows(), b = mel.cols();
    if (t % stack != 0) throw usage_error("stack_frames: frame count not a multiple of stack");
    Tensor<Real> out({t / stack, b * stack});
    for (int i = 0; i < t / stack; ++i)
        for (int s = 0; s < stack; ++s)
            for (int j = 0; j < b; ++j) out.at(i, s * b + j) = mel.at(i * stack + s, j);
    return out;
}

template <class Real>
Tensor<Real> unstack_frames(const Tensor<Real>& stacked, int stack) {
    const int t = stacked.rows(), bs = stacked.cols();
    if (bs % stack != 0) throw usage_error("unstack_frames: width not a multiple of stack");
    const int b = bs / stack;
    Tensor<Real> out({t * stack, b});
    for (int i = 0; i < t; ++i)
        for (int s = 0; s < stack; ++s)
            for (int j = 0; j < b; ++j) out.at(i * stack + s, j) = stacked.at(i, s * b + j);
    return out;
}

}  // namespace sitok
