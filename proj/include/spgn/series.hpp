#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

namespace spgn {

/// Shortest series the pipeline accepts (four halvings in the encoder).
inline constexpr std::size_t kMinSeriesLength = 8;

/// One labeled univariate sequence.
struct TimeSeries {
    std::vector<double> values;
    int label = 0;
    std::size_t source_id = 0;

    std::size_t size() const noexcept { return values.size(); }
    std::span<const double> view() const noexcept { return values; }

    friend bool operator==(const TimeSeries&, const TimeSeries&) = default;
};

inline double mean_of(std::span<const double> x) {
    if (x.empty()) return 0.0;
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Population standard deviation (ddof = 0).
inline double stddev_of(std::span<const double> x) {
    if (x.empty()) return 0.0;
    const double m = mean_of(x);
    double acc = 0.0;
    for (double v : x) acc += (v - m) * (v - m);
    return std::sqrt(acc / static_cast<double>(x.size()));
}

/// Mean of squares.
inline double power_of(std::span<const double> x) {
    if (x.empty()) return 0.0;
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return acc / static_cast<double>(x.size());
}

/// Z-normalizes in place. Constant (or numerically constant) series become all zeros.
inline void znormalize(std::vector<double>& x) {
    const double m = mean_of(x);
    const double sd = stddev_of(x);
    if (!(sd > 1e-12 * (1.0 + std::abs(m)))) {
        std::fill(x.begin(), x.end(), 0.0);
        return;
    }
    for (double& v : x) v = (v - m) / sd;
}

} // namespace spgn
