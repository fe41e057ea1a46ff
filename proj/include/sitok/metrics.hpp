#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "sitok/formats.hpp"

namespace sitok {

// log2 restricted to exact powers of two; bitrate claims must not round.
inline int exact_log2(std::int64_t v) {
    if (v < 2 || (v & (v - 1)) != 0)
        throw usage_error("exact_log2: " + std::to_string(v) + " is not a power of two");
    int n = 0;
    while (v > 1) {
        v >>= 1;
        ++n;
    }
    return n;
}

// bits/s = frame_rate * streams * log2(codebook), with the frame rate kept
// as the exact ratio sample_rate / (hop * stack) so nothing goes through
// floating point.  Configurations that do not divide evenly are rejected
// rather than rounded.
inline std::int64_t bitrate_bps(const MelConfig& mel, int num_streams,
                                std::int64_t codebook_size) {
    if (num_streams < 1) throw usage_error("bitrate_bps: need at least one stream");
    const std::int64_t num =
        std::int64_t(mel.sample_rate) * num_streams * exact_log2(codebook_size);
    const std::int64_t den = std::int64_t(mel.hop) * mel.stack;
    if (den <= 0 || num % den != 0)
        throw usage_error("bitrate_bps: rate is not an integer bit/s count");
    return num / den;
}

// 200 -> "0.20", 700 -> "0.70"; integer arithmetic only.
inline std::string bitrate_kbps_label(std::int64_t bps) {
    if (bps < 0) throw usage_error("bitrate_kbps_label: negative rate");
    if (bps % 10 != 0) throw usage_error("bitrate_kbps_label: rate not representable at 2 decimals");
    const std::int64_t whole = bps / 1000;
    const std::int64_t cents = (bps % 1000) / 10;
    return std::to_string(whole) + "." + (cents < 10 ? "0" : "") + std::to_string(cents);
}

struct ReconstructionMetrics {
    double mel_l1 = 0.0;    // mean absolute difference over valid frames
    double mel_cos = 0.0;   // mean per-frame cosine similarity over valid frames
};

// Reference and hypothesis must agree on geometry before any comparison:
// shape or valid_len mismatches are data errors, not quietly-truncated scores.
// Padded frames never contribute.
template <class Real>
ReconstructionMetrics eval_reconstruction(const MelFileData<Real>& ref,
                                          const MelFileData<Real>& hyp) {
    if (ref.frames.rows() != hyp.frames.rows() || ref.frames.cols() != hyp.frames.cols())
        throw data_error("eval_reconstruction: frame shape mismatch");
    if (ref.valid_len != hyp.valid_len)
        throw data_error("eval_reconstruction: valid_len mismatch");
    if (ref.valid_len < 1) throw data_error("eval_reconstruction: no valid frames");

    const int t = ref.valid_len, d = ref.frames.cols();
    ReconstructionMetrics m;
    for (int i = 0; i < t; ++i) {
        double dot = 0, na = 0, nb = 0;
        for (int j = 0; j < d; ++j) {
            const double a = double(ref.frames.at(i, j));
            const double b = double(hyp.frames.at(i, j));
            m.mel_l1 += std::abs(a - b);
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        m.mel_cos += dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
    }
    m.mel_l1 /= double(t) * d;
    m.mel_cos /= t;
    return m;
}

}  // namespace sitok
