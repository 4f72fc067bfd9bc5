#pragma once

// Built-in confounder task. Every class owns a signature of tones above the
// lowest bins; every instance also carries a low-frequency wander drawn from a
// pool that all classes share, so whole-series distances mix in a component
// that says nothing about the class.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "spgn/data.hpp"
#include "spgn/errors.hpp"

namespace spgn::synthetic {

struct ConfounderConfig {
    std::size_t length = 64;
    std::size_t train_classes = 40;
    std::size_t test_classes = 10;
    std::size_t per_class = 20;

    /// Class signature: one tone in each of `tones` contiguous regions of bins
    /// [mid_lo, mid_hi], equal amplitudes, phases uniform per class.
    std::size_t tones = 3;
    std::size_t mid_lo = 4;
    std::size_t mid_hi = 28;
    double signal_amplitude = 1.0;
    double phase_jitter = 0.2;       // radians, per instance and bin
    double amplitude_jitter = 0.15;  // relative, per instance

    /// Confounder: bins [1, low_hi], one template per pool entry, shared by
    /// every class.
    std::size_t low_hi = 3;
    std::size_t confounder_pool = 4;
    double confounder_amplitude = 1.0;
    double confounder_jitter = 0.2;

    double noise_std = 0.3;  // white noise before z-normalization
};

namespace detail {

struct Tone {
    double bin;
    double phase;
    double amplitude;
};

inline std::vector<double> render(const std::vector<Tone>& tones, std::size_t L) {
    std::vector<double> x(L, 0.0);
    for (const auto& t : tones)
        for (std::size_t i = 0; i < L; ++i)
            x[i] += t.amplitude *
                    std::sin(2.0 * std::numbers::pi * t.bin * static_cast<double>(i) / static_cast<double>(L) + t.phase);
    return x;
}

// Bins lo..hi with random amplitudes rescaled so the template has RMS `rms`.
inline std::vector<Tone> random_template(std::size_t lo, std::size_t hi, double rms, Rng& rng) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Tone> t;
    double power = 0.0;
    for (std::size_t b = lo; b <= hi; ++b) {
        const double a = std::hypot(gauss(rng), gauss(rng));
        t.push_back({static_cast<double>(b), phase(rng), a});
        power += 0.5 * a * a;
    }
    const double scale = power > 0.0 ? rms / std::sqrt(power) : 0.0;
    for (auto& tone : t) tone.amplitude *= scale;
    return t;
}

// Bin range of region r when lo..hi is cut into `count` contiguous regions.
inline std::pair<std::size_t, std::size_t> region(std::size_t lo, std::size_t hi, std::size_t count, std::size_t r) {
    const std::size_t width = hi - lo + 1;
    return {lo + r * width / count, lo + (r + 1) * width / count - 1};
}

// One tone per region of lo..hi, equal amplitudes, RMS `rms`.
inline std::vector<Tone> random_tones(std::size_t lo, std::size_t hi, std::size_t count, double rms, Rng& rng) {
    count = std::min(count, hi - lo + 1);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const double a = rms * std::sqrt(2.0 / static_cast<double>(count));
    std::vector<Tone> t;
    for (std::size_t r = 0; r < count; ++r) {
        const auto [b0, b1] = region(lo, hi, count, r);
        std::uniform_int_distribution<std::size_t> pick(b0, b1);
        t.push_back({static_cast<double>(pick(rng)), phase(rng), a});
    }
    return t;
}

} // namespace detail

struct ConfounderTask {
    Dataset train;
    Dataset test;
};

/// Generates disjoint train and test classes from one seed.
inline ConfounderTask make_confounder_task(const ConfounderConfig& cfg, std::uint64_t seed) {
    if (cfg.mid_lo < 1 || cfg.mid_lo > cfg.mid_hi || 2 * cfg.mid_hi >= cfg.length || cfg.low_hi < 1 ||
        cfg.confounder_pool == 0 || cfg.per_class == 0)
        throw ContractError("synthetic: invalid band layout");
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<std::vector<detail::Tone>> pool;
    for (std::size_t k = 0; k < cfg.confounder_pool; ++k)
        pool.push_back(detail::random_template(1, cfg.low_hi, cfg.confounder_amplitude, rng));

    auto make_split = [&](std::size_t classes, Split split, const char* suffix) {
        Dataset ds;
        ds.name = std::string("synthetic_") + suffix;
        ds.split = split;
        std::size_t row = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            ds.classes.push_back(static_cast<int>(c));
            const auto sig = detail::random_tones(cfg.mid_lo, cfg.mid_hi, cfg.tones, cfg.signal_amplitude, rng);
            for (std::size_t i = 0; i < cfg.per_class; ++i) {
                std::vector<detail::Tone> tones;
                const double amp = 1.0 + cfg.amplitude_jitter * gauss(rng);
                for (const auto& t : sig)
                    tones.push_back({t.bin, t.phase + cfg.phase_jitter * gauss(rng), t.amplitude * amp});
                std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                const double conf_amp = 1.0 + cfg.confounder_jitter * gauss(rng);
                for (const auto& t : pool[pick(rng)])
                    tones.push_back({t.bin, t.phase + cfg.confounder_jitter * gauss(rng), t.amplitude * conf_amp});
                TimeSeries ts;
                ts.values = detail::render(tones, cfg.length);
                for (double& v : ts.values) v += cfg.noise_std * gauss(rng);
                znormalize(ts.values);
                ts.label = static_cast<int>(c);
                ts.source_id = row++;
                ds.series.push_back(std::move(ts));
            }
        }
        return ds;
    };

    ConfounderTask task;
    task.train = make_split(cfg.train_classes, Split::train, "train");
    task.test = make_split(cfg.test_classes, Split::test, "test");
    return task;
}

} // namespace spgn::synthetic
