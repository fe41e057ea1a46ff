#pragma once

// Mixed-radix Cooley-Tukey FFT over factors {2,3,5}, with a naive DFT
// fallback for any leftover prime.  Covers the analysis size 1920 = 2^7*3*5
// without zero padding, is deterministic, and has no global planner state,
// so concurrent extraction from data-loading threads is safe.

#include <cmath>
#include <complex>
#include <vector>

namespace sitok {

using cplx = std::complex<double>;

namespace fft_detail {

inline void dft_naive(std::vector<cplx>& x) {
    const std::size_t n = x.size();
    std::vector<cplx> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        cplx acc(0.0, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double ang = -2.0 * M_PI * double(j * k % n) / double(n);
            acc += x[j] * cplx(std::cos(ang), std::sin(ang));
        }
        out[k] = acc;
    }
    x.swap(out);
}

}  // namespace fft_detail

// In-place forward FFT (engineering sign convention, unnormalized).
inline void fft(std::vector<cplx>& x) {
    const std::size_t n = x.size();
    if (n <= 1) return;
    std::size_t p = 0;
    for (std::size_t cand : {2, 3, 5})
        if (n % cand == 0) {
            p = cand;
            break;
        }
    if (p == 0) {
        fft_detail::dft_naive(x);
        return;
    }
    const std::size_t m = n / p;
    std::vector<std::vector<cplx>> subs(p, std::vector<cplx>(m));
    for (std::size_t k = 0; k < m; ++k)
        for (std::size_t j = 0; j < p; ++j) subs[j][k] = x[j + p * k];
    for (auto& s : subs) fft(s);
    for (std::size_t k = 0; k < n; ++k) {
        cplx acc(0.0, 0.0);
        for (std::size_t j = 0; j < p; ++j) {
            const double ang = -2.0 * M_PI * double(j * k % n) / double(n);
            acc += cplx(std::cos(ang), std::sin(ang)) * subs[j][k % m];
        }
        x[k] = acc;
    }
}

// Power spectrum |X[k]|^2 for k = 0..n/2 of a real frame.
inline std::vector<double> power_spectrum(const std::vector<double>& frame) {
    std::vector<cplx> buf(frame.size());
    for (std::size_t i = 0; i < frame.size(); ++i) buf[i] = cplx(frame[i], 0.0);
    fft(buf);
    std::vector<double> power(frame.size() / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) power[k] = std::norm(buf[k]);
    return power;
}

}  // namespace sitok
