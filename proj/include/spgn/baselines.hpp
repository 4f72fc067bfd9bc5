#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spgn/data.hpp"
#include "spgn/errors.hpp"

namespace spgn::baselines {

struct DtwConfig {
    /// Sakoe-Chiba half-width in samples; unbanded when empty.
    std::optional<std::size_t> window;
};

/// Alignment cost with |a_i - b_j| cell cost and steps (i-1, j), (i, j-1),
/// (i-1, j-1). Two rolling rows.
inline double dtw_distance(std::span<const double> a, std::span<const double> b, const DtwConfig& cfg = {}) {
    if (a.empty() || b.empty()) throw ContractError("dtw_distance: empty series");
    const std::size_t n = a.size(), m = b.size();
    // A band narrower than the length difference admits no path; widen it.
    const std::size_t w = cfg.window ? std::max(*cfg.window, n > m ? n - m : m - n) : std::max(n, m);
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
        std::fill(cur.begin(), cur.end(), inf);
        const std::size_t lo = i > w ? i - w : 1;
        const std::size_t hi = std::min(m, i + w);
        for (std::size_t j = lo; j <= hi; ++j) {
            const double cost = std::abs(a[i - 1] - b[j - 1]);
            cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

inline double dtw_distance(const TimeSeries& a, const TimeSeries& b, const DtwConfig& cfg = {}) {
    return dtw_distance(a.view(), b.view(), cfg);
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("euclidean_distance: lengths differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

enum class Distance { euclid, dtw };

inline Distance parse_distance(std::string_view name) {
    if (name == "euclid" || name == "euclidean" || name == "ed") return Distance::euclid;
    if (name == "dtw") return Distance::dtw;
    throw ContractError("unknown distance '" + std::string(name) + "'");
}

/// 1-NN over the episode's supports; ties go to the lowest support index.
/// Returns episode-local labels, one per query.
inline std::vector<int> nn_classify(const Episode& ep, Distance distance, const DtwConfig& dtw = {}) {
    std::vector<int> out;
    out.reserve(ep.query.size());
    for (const auto& q : ep.query) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t s = 0; s < ep.support.size(); ++s) {
            const double d = distance == Distance::dtw ? dtw_distance(q, ep.support[s], dtw)
                                                       : euclidean_distance(q.view(), ep.support[s].view());
            if (d < best) {
                best = d;
                arg = s;
            }
        }
        out.push_back(ep.support_labels.at(arg));
    }
    return out;
}

} // namespace spgn::baselines
