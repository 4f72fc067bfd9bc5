#pragma once

// UCR loading, dataset cache, episode sampling and band-limited noise injection.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spgn/errors.hpp"
#include "spgn/series.hpp"
#include "spgn/spectral.hpp"

namespace spgn {

using Rng = std::mt19937_64;

enum class Split { train, test };

struct Dataset {
    std::string name;
    std::vector<TimeSeries> series;
    std::vector<int> classes;  // sorted, contiguous 0..C-1 after loading
    Split split = Split::train;
    std::size_t dropped_rows = 0;  // rows rejected for NaN/Inf samples

    std::size_t length() const { return series.empty() ? 0 : series.front().size(); }
    std::size_t class_count() const { return classes.size(); }

    /// Indices of the series carrying each class, in dataset order.
    std::map<int, std::vector<std::size_t>> by_class() const {
        std::map<int, std::vector<std::size_t>> out;
        for (int c : classes) out[c];
        for (std::size_t i = 0; i < series.size(); ++i) out[series[i].label].push_back(i);
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class UcrFormat { tsv, csv, automatic };

namespace detail {

inline bool parse_double(std::string_view tok, double& out) {
    while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\r')) tok.remove_prefix(1);
    while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\r')) tok.remove_suffix(1);
    if (tok.empty()) return false;
    if (tok.front() == '+') tok.remove_prefix(1);
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), out);
    if (res.ec == std::errc() && res.ptr == tok.data() + tok.size()) return true;
    // from_chars rejects "nan"/"inf" spellings in some forms; accept the usual ones.
    std::string low(tok);
    std::transform(low.begin(), low.end(), low.begin(), [](unsigned char c) { return std::tolower(c); });
    if (low == "nan" || low == "-nan") { out = std::numeric_limits<double>::quiet_NaN(); return true; }
    if (low == "inf" || low == "infinity") { out = std::numeric_limits<double>::infinity(); return true; }
    if (low == "-inf" || low == "-infinity") { out = -std::numeric_limits<double>::infinity(); return true; }
    return false;
}

inline std::vector<std::string_view> split_line(std::string_view line, char sep) {
    std::vector<std::string_view> toks;
    if (sep == ' ') {
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
            std::size_t j = i;
            while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
            if (j > i) toks.push_back(line.substr(i, j - i));
            i = j;
        }
        return toks;
    }
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        toks.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return toks;
}

inline char detect_separator(std::string_view line) {
    if (line.find('\t') != std::string_view::npos) return '\t';
    if (line.find(',') != std::string_view::npos) return ',';
    return ' ';
}

} // namespace detail

/// Parses UCR rows `label <sep> v1 <sep> v2 ...` from a stream. Series are
/// z-normalized and labels remapped to 0..C-1 in first-appearance order.
inline Dataset parse_ucr(std::istream& in, UcrFormat format, std::string name = "dataset") {
    Dataset ds;
    ds.name = std::move(name);
    std::map<double, int> remap;
    std::string line;
    std::size_t lineno = 0;
    std::size_t expected = 0;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view sv(line);
        while (!sv.empty() && (sv.back() == '\r' || sv.back() == ' ' || sv.back() == '\t')) sv.remove_suffix(1);
        if (sv.empty()) continue;
        const char sep = format == UcrFormat::tsv ? '\t' : format == UcrFormat::csv ? ',' : detail::detect_separator(sv);
        const auto toks = detail::split_line(sv, sep);
        if (toks.size() < 2) throw LoadError("row has no samples", lineno);

        double label_value = 0.0;
        if (!detail::parse_double(toks[0], label_value) || !std::isfinite(label_value))
            throw LoadError("non-numeric label '" + std::string(toks[0]) + "'", lineno);

        TimeSeries ts;
        ts.values.reserve(toks.size() - 1);
        bool finite = true;
        for (std::size_t i = 1; i < toks.size(); ++i) {
            double v = 0.0;
            if (!detail::parse_double(toks[i], v))
                throw LoadError("non-numeric token '" + std::string(toks[i]) + "'", lineno);
            finite = finite && std::isfinite(v);
            ts.values.push_back(v);
        }
        if (expected == 0) {
            expected = ts.values.size();
            if (expected < kMinSeriesLength)
                throw LoadError("series length " + std::to_string(expected) + " below minimum " +
                                    std::to_string(kMinSeriesLength),
                                lineno);
        } else if (ts.values.size() != expected) {
            throw LoadError("ragged row: " + std::to_string(ts.values.size()) + " samples, expected " +
                                std::to_string(expected),
                            lineno);
        }
        const std::size_t this_row = row++;
        if (!finite) {
            ++ds.dropped_rows;
            continue;
        }
        auto [it, inserted] = remap.try_emplace(label_value, static_cast<int>(remap.size()));
        ts.label = it->second;
        ts.source_id = this_row;
        znormalize(ts.values);
        ds.series.push_back(std::move(ts));
    }
    if (ds.series.empty()) throw LoadError(row ? "every row contains non-finite samples" : "empty file");
    for (std::size_t c = 0; c < remap.size(); ++c) ds.classes.push_back(static_cast<int>(c));
    return ds;
}

inline Dataset load_ucr(const std::filesystem::path& path, UcrFormat format = UcrFormat::automatic) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    if (format == UcrFormat::automatic) {
        const auto ext = path.extension().string();
        if (ext == ".tsv") format = UcrFormat::tsv;
        else if (ext == ".csv") format = UcrFormat::csv;
    }
    auto ds = parse_ucr(in, format, path.stem().string());
    const auto stem = path.stem().string();
    if (stem.ends_with("_TEST")) {
        ds.split = Split::test;
        ds.name = stem.substr(0, stem.size() - 5);
    } else if (stem.ends_with("_TRAIN")) {
        ds.name = stem.substr(0, stem.size() - 6);
    }
    return ds;
}

/// Writes rows in the tab-separated UCR layout with round-trip precision.
inline void write_ucr(std::ostream& out, const Dataset& ds) {
    char buf[64];
    for (const auto& ts : ds.series) {
        out << ts.label;
        for (double v : ts.values) {
            const auto res = std::to_chars(buf, buf + sizeof buf, v);
            out << '\t' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
        }
        out << '\n';
    }
}

// Dataset cache: a text header followed by raw little-endian float64 samples.
//   SPGNDATA 1
//   name <name>
//   split train|test
//   rows <n> length <L> classes <C> dropped <d>
//   <n records of: int32 label, uint64 source_id, L float64>

inline void save_cache(const std::filesystem::path& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write cache " + path.string());
    out << "SPGNDATA 1\nname " << ds.name << "\nsplit " << (ds.split == Split::train ? "train" : "test")
        << "\nrows " << ds.series.size() << " length " << ds.length() << " classes " << ds.classes.size()
        << " dropped " << ds.dropped_rows << "\n";
    for (const auto& ts : ds.series) {
        const std::int32_t label = ts.label;
        const std::uint64_t sid = ts.source_id;
        out.write(reinterpret_cast<const char*>(&label), sizeof label);
        out.write(reinterpret_cast<const char*>(&sid), sizeof sid);
        out.write(reinterpret_cast<const char*>(ts.values.data()),
                  static_cast<std::streamsize>(ts.values.size() * sizeof(double)));
    }
}

inline Dataset load_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open cache " + path.string());
    std::string magic, version, key, split;
    Dataset ds;
    std::size_t rows = 0, length = 0, classes = 0;
    in >> magic >> version;
    if (magic != "SPGNDATA" || version != "1") throw LoadError("not a dataset cache: " + path.string());
    in >> key;
    in.get();
    std::getline(in, ds.name);
    in >> key >> split >> key >> rows >> key >> length >> key >> classes >> key >> ds.dropped_rows;
    if (!in) throw LoadError("corrupt cache header: " + path.string());
    in.get();
    ds.split = split == "test" ? Split::test : Split::train;
    ds.series.resize(rows);
    for (auto& ts : ds.series) {
        std::int32_t label = 0;
        std::uint64_t sid = 0;
        in.read(reinterpret_cast<char*>(&label), sizeof label);
        in.read(reinterpret_cast<char*>(&sid), sizeof sid);
        ts.values.resize(length);
        in.read(reinterpret_cast<char*>(ts.values.data()), static_cast<std::streamsize>(length * sizeof(double)));
        ts.label = label;
        ts.source_id = sid;
    }
    if (!in) throw LoadError("truncated cache: " + path.string());
    for (std::size_t c = 0; c < classes; ++c) ds.classes.push_back(static_cast<int>(c));
    return ds;
}

/// One N-way K-shot task. Supports come grouped by class (K per class), then
/// queries grouped by class. Episode-local labels index `class_ids`.
struct Episode {
    std::size_t way = 0;
    std::size_t shot = 0;
    std::vector<TimeSeries> support;
    std::vector<int> support_labels;
    std::vector<TimeSeries> query;
    std::vector<int> query_labels;
    std::vector<int> class_ids;  // dataset class of each episode-local label

    std::size_t instance_count() const { return support.size() + query.size(); }

    const TimeSeries& instance(std::size_t i) const {
        return i < support.size() ? support[i] : query[i - support.size()];
    }

    friend bool operator==(const Episode&, const Episode&) = default;
};

inline Episode sample_episode(const Dataset& ds, std::size_t way, std::size_t shot, std::size_t queries_per_class,
                              Rng& rng) {
    if (way < 1 || shot < 1) throw EpisodeError("way and shot must be positive");
    if (ds.classes.size() < way)
        throw EpisodeError("dataset '" + ds.name + "' has " + std::to_string(ds.classes.size()) +
                           " classes, episode needs " + std::to_string(way));
    const auto groups = ds.by_class();

    std::vector<int> classes = ds.classes;
    // Partial Fisher-Yates: first `way` entries become the sampled classes.
    for (std::size_t i = 0; i < way; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, classes.size() - 1);
        std::swap(classes[i], classes[pick(rng)]);
    }
    classes.resize(way);

    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.class_ids = classes;
    const std::size_t need = shot + queries_per_class;
    std::vector<std::vector<std::size_t>> chosen(way);
    for (std::size_t c = 0; c < way; ++c) {
        auto idx = groups.at(classes[c]);
        if (idx.size() < need)
            throw EpisodeError("class " + std::to_string(classes[c]) + " of '" + ds.name + "' has " +
                               std::to_string(idx.size()) + " series, episode needs " + std::to_string(need));
        for (std::size_t i = 0; i < need; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        idx.resize(need);
        chosen[c] = std::move(idx);
    }
    for (std::size_t c = 0; c < way; ++c)
        for (std::size_t i = 0; i < shot; ++i) {
            ep.support.push_back(ds.series[chosen[c][i]]);
            ep.support_labels.push_back(static_cast<int>(c));
        }
    for (std::size_t c = 0; c < way; ++c)
        for (std::size_t i = shot; i < need; ++i) {
            ep.query.push_back(ds.series[chosen[c][i]]);
            ep.query_labels.push_back(static_cast<int>(c));
        }
    return ep;
}

enum class NoiseBand { low, mid, high };

/// Band-limited Gaussian noise. Band edges are fractions of Nyquist.
struct NoiseSpec {
    double f_lo = 0.0;
    double f_hi = 1.0;
    double snr_db = std::numeric_limits<double>::infinity();

    static NoiseSpec preset(NoiseBand band, double snr_db) {
        switch (band) {
        case NoiseBand::low: return {0.0, 1.0 / 6.0, snr_db};
        case NoiseBand::mid: return {1.0 / 6.0, 0.5, snr_db};
        case NoiseBand::high: return {0.5, 1.0, snr_db};
        }
        return {};
    }

    bool disabled() const { return std::isinf(snr_db) && snr_db > 0; }

    void validate() const {
        if (!(f_lo >= 0.0 && f_lo < f_hi && f_hi <= 1.0))
            throw NoiseError("noise band must satisfy 0 <= f_lo < f_hi <= 1 (fractions of Nyquist)");
        if (std::isnan(snr_db) || (std::isinf(snr_db) && snr_db < 0))
            throw NoiseError("snr_db must be finite (or +inf to disable)");
    }
};

inline NoiseBand parse_noise_band(std::string_view name) {
    if (name == "low") return NoiseBand::low;
    if (name == "mid" || name == "middle") return NoiseBand::mid;
    if (name == "high") return NoiseBand::high;
    throw NoiseError("unknown noise band '" + std::string(name) + "'");
}

/// Adds white Gaussian noise restricted to the spec band, scaled so that
/// 10 log10(power(series) / power(noise)) == snr_db.
inline TimeSeries add_band_noise(const TimeSeries& series, const NoiseSpec& spec, Rng& rng) {
    spec.validate();
    if (spec.disabled()) return series;
    const double signal_power = power_of(series.view());
    if (!(signal_power > 0.0)) throw NoiseError("series has zero power; SNR is undefined");

    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> white(series.size());
    for (double& v : white) v = gauss(rng);
    auto noise = spectral::bandpass(white, spec.f_lo * spectral::kNyquist, spec.f_hi * spectral::kNyquist);
    const double noise_power = power_of(noise);
    if (!(noise_power > 0.0)) throw NoiseError("noise band contains no frequency bins at this length");

    const double target = signal_power / std::pow(10.0, spec.snr_db / 10.0);
    const double scale = std::sqrt(target / noise_power);
    TimeSeries out = series;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += scale * noise[i];
    return out;
}

inline Episode add_band_noise(const Episode& ep, const NoiseSpec& spec, Rng& rng) {
    Episode out = ep;
    for (auto& ts : out.support) ts = add_band_noise(ts, spec, rng);
    for (auto& ts : out.query) ts = add_band_noise(ts, spec, rng);
    return out;
}

} // namespace spgn
