#pragma once

// Power spectra, split-frequency selection and the ideal FFT-mask filter bank
// used to expand a series into band-limited streams.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spgn/errors.hpp"
#include "spgn/fft.hpp"
#include "spgn/series.hpp"

namespace spgn::spectral {

/// Nyquist frequency in cycles/sample.
inline constexpr double kNyquist = 0.5;

enum class SplitStrategy { equal_power, equal_freq, exponential };

inline std::string_view to_string(SplitStrategy s) {
    switch (s) {
    case SplitStrategy::equal_power: return "equal_power";
    case SplitStrategy::equal_freq: return "equal_freq";
    case SplitStrategy::exponential: return "exponential";
    }
    return "?";
}

inline SplitStrategy parse_strategy(std::string_view name) {
    if (name == "equal_power" || name == "power" || name == "ours") return SplitStrategy::equal_power;
    if (name == "equal_freq" || name == "freq" || name == "average") return SplitStrategy::equal_freq;
    if (name == "exponential" || name == "exp") return SplitStrategy::exponential;
    throw SplitError("unknown split strategy '" + std::string(name) + "'");
}

/// One-sided power spectrum over bins 0..floor(L/2).
struct PowerSpectrum {
    std::vector<double> psd;
    std::vector<double> bin_freqs;  // cycles/sample
    std::size_t length = 0;         // length of the analysed series

    std::size_t top_bin() const noexcept { return psd.empty() ? 0 : psd.size() - 1; }
};

struct BandPartition {
    std::size_t s = 0;
    std::vector<double> boundaries;  // s + 1 values, 0 .. Nyquist
    SplitStrategy strategy = SplitStrategy::equal_power;

    double lo(std::size_t band) const { return boundaries.at(band); }
    double hi(std::size_t band) const { return boundaries.at(band + 1); }

    friend bool operator==(const BandPartition&, const BandPartition&) = default;
};

/// The s band-limited streams followed by the original series (stream index s).
struct SpectrumExpansion {
    std::vector<std::vector<double>> bands;
    std::vector<double> original;
    BandPartition partition;

    std::size_t stream_count() const noexcept { return bands.size() + 1; }

    const std::vector<double>& stream(std::size_t i) const {
        return i < bands.size() ? bands[i] : original;
    }
};

inline double bin_frequency(std::size_t bin, std::size_t length) {
    return static_cast<double>(bin) / static_cast<double>(length);
}

/// Half-open ownership [lo, hi); the Nyquist bin belongs to the band whose
/// upper edge is Nyquist.
inline bool band_owns(double lo, double hi, double f) {
    return lo <= f && (f < hi || hi >= kNyquist);
}

inline PowerSpectrum compute_psd(std::span<const double> x) {
    if (x.size() < kMinSeriesLength)
        throw ShapeError("compute_psd: series length " + std::to_string(x.size()) + " < " +
                         std::to_string(kMinSeriesLength));
    const auto spec = fft::forward_real(x);
    const std::size_t L = x.size();
    const std::size_t bins = L / 2 + 1;
    PowerSpectrum out;
    out.length = L;
    out.psd.resize(bins);
    out.bin_freqs.resize(bins);
    for (std::size_t k = 0; k < bins; ++k) {
        out.psd[k] = std::norm(spec[k]) / static_cast<double>(L);
        out.bin_freqs[k] = bin_frequency(k, L);
    }
    return out;
}

inline PowerSpectrum compute_psd(const TimeSeries& ts) { return compute_psd(ts.view()); }

/// Frequency-weighted cumulative power H(n) = sum_{i=1..n} psd[i] * f_i.
inline double cumulative_power(const PowerSpectrum& spectrum, std::size_t upto_bin) {
    if (upto_bin > spectrum.top_bin())
        throw ContractError("cumulative_power: bin " + std::to_string(upto_bin) + " beyond top bin " +
                            std::to_string(spectrum.top_bin()));
    double h = 0.0;
    for (std::size_t i = 1; i <= upto_bin; ++i) h += spectrum.psd[i] * spectrum.bin_freqs[i];
    return h;
}

inline double total_weighted_power(const PowerSpectrum& spectrum) {
    return cumulative_power(spectrum, spectrum.top_bin());
}

namespace detail {

// H for every bin at once, accumulated in the same order as cumulative_power.
inline std::vector<double> cumulative_curve(const PowerSpectrum& spectrum) {
    std::vector<double> h(spectrum.psd.size(), 0.0);
    double acc = 0.0;
    for (std::size_t i = 1; i < h.size(); ++i) {
        acc += spectrum.psd[i] * spectrum.bin_freqs[i];
        h[i] = acc;
    }
    return h;
}

} // namespace detail

inline BandPartition split_frequencies(const PowerSpectrum& spectrum, std::size_t s, SplitStrategy strategy) {
    if (s < 1) throw SplitError("split_frequencies: band count must be >= 1");
    if (spectrum.psd.size() < s + 1)
        throw SplitError("split_frequencies: " + std::to_string(spectrum.psd.size()) + " bins cannot hold " +
                         std::to_string(s) + " bands");

    BandPartition part;
    part.s = s;
    part.strategy = strategy;
    part.boundaries.assign(s + 1, 0.0);
    part.boundaries[s] = kNyquist;

    switch (strategy) {
    case SplitStrategy::equal_freq:
        for (std::size_t j = 1; j < s; ++j)
            part.boundaries[j] = kNyquist * static_cast<double>(j) / static_cast<double>(s);
        break;
    case SplitStrategy::exponential:
        for (std::size_t j = 1; j < s; ++j)
            part.boundaries[j] = kNyquist * std::ldexp(1.0, static_cast<int>(j) - static_cast<int>(s));
        break;
    case SplitStrategy::equal_power: {
        const auto h = detail::cumulative_curve(spectrum);
        const double total = h.back();
        if (!(total > 0.0))
            throw SplitError("split_frequencies: spectrum carries no frequency-weighted power");
        const std::size_t top = spectrum.top_bin();

        // Boundary bin indices; index 0 is the DC edge, s is the Nyquist edge.
        // With even L the top bin sits on Nyquist and belongs to the last band.
        std::vector<std::size_t> edge(s + 1, 0);
        edge[s] = spectrum.bin_freqs[top] >= kNyquist ? top : top + 1;
        for (std::size_t j = 1; j < s; ++j) {
            const double target = total / static_cast<double>(s) * static_cast<double>(j);
            const auto it = std::lower_bound(h.begin(), h.end(), target);
            edge[j] = it == h.end() ? top : static_cast<std::size_t>(it - h.begin());
        }
        // Empty bands are repaired by advancing the boundary one bin; then pull
        // back from the top so every band keeps at least one bin.
        for (std::size_t j = 1; j < s; ++j) edge[j] = std::max(edge[j], edge[j - 1] + 1);
        for (std::size_t j = s - 1; j >= 1; --j) edge[j] = std::min(edge[j], edge[j + 1] - 1);
        for (std::size_t j = 1; j < s; ++j) part.boundaries[j] = spectrum.bin_freqs[edge[j]];
        break;
    }
    }
    return part;
}

namespace detail {

inline std::vector<double> masked_inverse(const std::vector<fft::cplx>& spectrum, double lo, double hi) {
    const std::size_t L = spectrum.size();
    std::vector<fft::cplx> masked(L, fft::cplx{0.0, 0.0});
    for (std::size_t k = 0; k <= L / 2; ++k) {
        if (!band_owns(lo, hi, bin_frequency(k, L))) continue;
        masked[k] = spectrum[k];
        if (k != 0 && L - k != k) masked[L - k] = spectrum[L - k];
    }
    const auto time = fft::inverse(masked);
    std::vector<double> out(L);
    for (std::size_t t = 0; t < L; ++t) out[t] = time[t].real();
    return out;
}

inline void check_band(double lo, double hi) {
    if (!(lo >= 0.0 && lo < hi && hi <= kNyquist))
        throw FilterError("bandpass: need 0 <= f_lo < f_hi <= 0.5, got [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + ")");
}

} // namespace detail

/// Ideal band-pass: keeps the FFT bins whose frequency lies in [f_lo, f_hi).
inline std::vector<double> bandpass(std::span<const double> x, double f_lo, double f_hi) {
    detail::check_band(f_lo, f_hi);
    if (x.empty()) return {};
    return detail::masked_inverse(fft::forward_real(x), f_lo, f_hi);
}

inline TimeSeries bandpass(const TimeSeries& ts, double f_lo, double f_hi) {
    TimeSeries out = ts;
    out.values = bandpass(ts.view(), f_lo, f_hi);
    return out;
}

/// Splits x into s band-limited streams using its own power spectrum.
inline SpectrumExpansion expand(std::span<const double> x, std::size_t s, SplitStrategy strategy) {
    const auto spectrum = compute_psd(x);
    SpectrumExpansion out;
    out.partition = split_frequencies(spectrum, s, strategy);
    out.original.assign(x.begin(), x.end());
    const auto freq = fft::forward_real(x);
    out.bands.reserve(s);
    for (std::size_t j = 0; j < s; ++j)
        out.bands.push_back(detail::masked_inverse(freq, out.partition.lo(j), out.partition.hi(j)));
    return out;
}

inline SpectrumExpansion expand(const TimeSeries& ts, std::size_t s, SplitStrategy strategy) {
    return expand(ts.view(), s, strategy);
}

/// Per-band sum of psd over the bins a partition assigns to each band.
inline std::vector<double> band_energies(const PowerSpectrum& spectrum, const BandPartition& part,
                                         bool frequency_weighted = false) {
    std::vector<double> e(part.s, 0.0);
    for (std::size_t k = 0; k < spectrum.psd.size(); ++k) {
        const double f = spectrum.bin_freqs[k];
        for (std::size_t j = 0; j < part.s; ++j) {
            if (band_owns(part.lo(j), part.hi(j), f)) {
                e[j] += frequency_weighted ? spectrum.psd[k] * f : spectrum.psd[k];
                break;
            }
        }
    }
    return e;
}

} // namespace spgn::spectral
