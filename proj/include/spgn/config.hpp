#pragma once

// Run configuration files: one `key = value` per line, `#` starts a comment.
// Keys mirror RunConfig fields; noise is given as noise_band (low|mid|high)
// or noise_f_lo/noise_f_hi, plus noise_snr_db.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <string>
#include <string_view>

#include "spgn/engine.hpp"
#include "spgn/errors.hpp"

namespace spgn {

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

} // namespace detail

inline ConfigMap parse_config(std::istream& in) {
    ConfigMap out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view s = line;
        if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
        s = detail::trim(s);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(s.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        out[std::string(key)] = std::string(detail::trim(s.substr(eq + 1)));
    }
    return out;
}

inline ConfigMap load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    return parse_config(in);
}

/// Applies recognised keys; unknown keys are an error so typos surface.
inline void apply_config(RunConfig& cfg, const ConfigMap& kv) {
    using namespace detail;
    std::optional<NoiseSpec> noise = cfg.noise;
    auto noise_ref = [&]() -> NoiseSpec& {
        if (!noise) noise = NoiseSpec{};
        return *noise;
    };
    for (const auto& [k, v] : kv) {
        if (k == "way") cfg.way = to_count(k, v);
        else if (k == "shot") cfg.shot = to_count(k, v);
        else if (k == "queries") cfg.queries = to_count(k, v);
        else if (k == "bands") cfg.bands = to_count(k, v);
        else if (k == "strategy") {
            try {
                cfg.strategy = spectral::parse_strategy(v);
            } catch (const Error& e) {
                throw ConfigError(k + ": " + e.what());
            }
        }
        else if (k == "layers") cfg.layers = to_count(k, v);
        else if (k == "lr") cfg.lr = to_real(k, v);
        else if (k == "lr_decay") cfg.lr_decay = to_real(k, v);
        else if (k == "lr_period") cfg.lr_period = to_count(k, v);
        else if (k == "weight_decay") cfg.weight_decay = to_real(k, v);
        else if (k == "epochs") cfg.epochs = to_count(k, v);
        else if (k == "episodes_per_epoch") cfg.episodes_per_epoch = to_count(k, v);
        else if (k == "eval_episodes") cfg.eval_episodes = to_count(k, v);
        else if (k == "seed") cfg.seed = to_count(k, v);
        else if (k == "use_sra") cfg.use_sra = to_bool(k, v);
        else if (k == "use_sp") cfg.use_sp = to_bool(k, v);
        else if (k == "workers") cfg.workers = to_count(k, v);
        else if (k == "share_relation") cfg.share_relation = to_bool(k, v);
        else if (k == "shared_encoder") cfg.shared_encoder = to_bool(k, v);
        else if (k == "noise_band") {
            if (v == "none") {
                noise.reset();
                continue;
            }
            try {
                const double snr = noise ? noise->snr_db : NoiseSpec{}.snr_db;
                noise = NoiseSpec::preset(parse_noise_band(v), snr);
            } catch (const Error& e) {
                throw ConfigError(k + ": " + e.what());
            }
        }
        else if (k == "noise_f_lo") noise_ref().f_lo = to_real(k, v);
        else if (k == "noise_f_hi") noise_ref().f_hi = to_real(k, v);
        else if (k == "noise_snr_db") noise_ref().snr_db = to_real(k, v);
        else throw ConfigError("unknown config key '" + k + "'");
    }
    cfg.noise = noise;
}

} // namespace spgn
