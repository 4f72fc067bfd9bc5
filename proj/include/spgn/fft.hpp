#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <utility>
#include <numbers>
#include <span>
#include <vector>

namespace spgn::fft {

using cplx = std::complex<double>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// exp(-2 pi i k / n) for k < n / 2, cached per thread and length.
inline const std::vector<cplx>& twiddles(std::size_t n) {
    thread_local std::map<std::size_t, std::vector<cplx>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::vector<cplx> tw(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k)
        tw[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
    return cache.emplace(n, std::move(tw)).first->second;
}

// In-place iterative radix-2. Unnormalized in both directions.
inline void radix2(std::vector<cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const auto& tw = twiddles(n);
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len / 2, stride = n / len;
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t k = 0; k < half; ++k) {
                const cplx w = inverse ? std::conj(tw[k * stride]) : tw[k * stride];
                const cplx u = a[i + k];
                const cplx v = a[i + k + half] * w;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
        }
    }
}

struct BluesteinPlan {
    std::size_t m = 0;
    std::vector<cplx> chirp;       // exp(sign i pi k^2 / n)
    std::vector<cplx> filter_fft;  // transform of the conjugate chirp, length m
};

inline const BluesteinPlan& bluestein_plan(std::size_t n, bool inverse) {
    thread_local std::map<std::pair<std::size_t, bool>, BluesteinPlan> cache;
    auto it = cache.find({n, inverse});
    if (it != cache.end()) return it->second;
    BluesteinPlan p;
    p.m = next_pow2(2 * n - 1);
    const double sign = inverse ? 1.0 : -1.0;
    p.chirp.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        // k^2 mod 2n keeps the angle argument small and exact.
        const std::size_t k2 = (k * k) % (2 * n);
        p.chirp[k] = std::polar(1.0, sign * std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n));
    }
    p.filter_fft.assign(p.m, cplx{});
    p.filter_fft[0] = std::conj(p.chirp[0]);
    for (std::size_t k = 1; k < n; ++k) p.filter_fft[k] = p.filter_fft[p.m - k] = std::conj(p.chirp[k]);
    radix2(p.filter_fft, false);
    return cache.emplace(std::make_pair(n, inverse), std::move(p)).first->second;
}

// Bluestein chirp-z for arbitrary lengths.
inline void bluestein(std::vector<cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    const auto& p = bluestein_plan(n, inverse);
    std::vector<cplx> x(p.m);
    for (std::size_t k = 0; k < n; ++k) x[k] = a[k] * p.chirp[k];
    radix2(x, false);
    for (std::size_t k = 0; k < p.m; ++k) x[k] *= p.filter_fft[k];
    radix2(x, true);
    const double inv_m = 1.0 / static_cast<double>(p.m);
    for (std::size_t k = 0; k < n; ++k) a[k] = x[k] * inv_m * p.chirp[k];
}

} // namespace detail

/// Discrete Fourier transform of any length. The inverse is scaled by 1/n so
/// that inverse(forward(x)) == x.
inline std::vector<cplx> transform(std::span<const cplx> in, bool inverse = false) {
    std::vector<cplx> a(in.begin(), in.end());
    if (a.size() <= 1) return a;
    if (detail::is_pow2(a.size()))
        detail::radix2(a, inverse);
    else
        detail::bluestein(a, inverse);
    if (inverse) {
        const double s = 1.0 / static_cast<double>(a.size());
        for (auto& v : a) v *= s;
    }
    return a;
}

inline std::vector<cplx> forward_real(std::span<const double> x) {
    std::vector<cplx> c(x.begin(), x.end());
    return transform(c, false);
}

inline std::vector<cplx> inverse(std::span<const cplx> spectrum) { return transform(spectrum, true); }

} // namespace spgn::fft
