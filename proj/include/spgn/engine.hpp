#pragma once

// Episodic training, evaluation and the experiment harnesses built on them.

#include <algorithm>
#include <chrono>
#include <exception>
#include <limits>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "spgn/baselines.hpp"
#include "spgn/data.hpp"
#include "spgn/errors.hpp"
#include "spgn/model.hpp"
#include "spgn/nn.hpp"

namespace spgn {

struct RunConfig {
    std::size_t way = 5;
    std::size_t shot = 5;
    std::size_t queries = 1;  // per class
    std::size_t bands = 8;
    spectral::SplitStrategy strategy = spectral::SplitStrategy::equal_power;
    std::size_t layers = 3;
    double lr = 1e-3;
    double lr_decay = 0.5;
    std::size_t lr_period = 30;  // epochs
    double weight_decay = 1e-5;
    std::size_t epochs = 60;
    std::size_t episodes_per_epoch = 200;
    std::size_t eval_episodes = 600;
    std::uint64_t seed = 0;
    bool use_sra = true;
    bool use_sp = true;
    std::optional<NoiseSpec> noise;
    std::size_t workers = 0;  // evaluation threads; 0 = hardware concurrency
    bool share_relation = true;
    bool shared_encoder = true;

    /// Epoch count may be zero (an untrained model); everything else must be positive.
    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string(name) + " must be positive");
        };
        positive(way, "way");
        positive(shot, "shot");
        positive(queries, "queries");
        positive(bands, "bands");
        positive(layers, "layers");
        positive(lr_period, "lr_period");
        positive(episodes_per_epoch, "episodes_per_epoch");
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
        if (noise) noise->validate();
    }

    Variant variant() const { return variant_from_flags(use_sra, use_sp); }

    ModelConfig model_config() const {
        ModelConfig m;
        m.bands = bands;
        m.strategy = strategy;
        m.variant = variant();
        m.graph.layers = layers;
        m.graph.share_relation_across_streams = share_relation;
        m.shared_encoder = shared_encoder;
        return m;
    }

    double lr_at(std::size_t epoch) const {
        return lr * std::pow(lr_decay, static_cast<double>(epoch / lr_period));
    }
};

struct RunMetrics {
    std::vector<double> accuracies;  // per episode, percent
    double mean_acc = 0.0;
    double ci95 = 0.0;
    std::vector<double> loss_curve;  // per training step
    double wall_clock_s = 0.0;
};

/// Mean and 1.96 * std / sqrt(n) with the population standard deviation.
inline void summarize(RunMetrics& m) {
    const auto n = static_cast<double>(m.accuracies.size());
    if (m.accuracies.empty()) {
        m.mean_acc = m.ci95 = 0.0;
        return;
    }
    double sum = 0.0;
    for (double a : m.accuracies) sum += a;
    const double mean = sum / n;
    double ss = 0.0;
    for (double a : m.accuracies) ss += (a - mean) * (a - mean);
    m.mean_acc = mean;
    m.ci95 = 1.96 * std::sqrt(ss / n) / std::sqrt(n);
}

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

enum class Stream : std::uint64_t { init = 1, train = 2, eval = 3, noise = 4 };

inline std::uint64_t derive(std::uint64_t seed, Stream s, std::uint64_t index = 0) {
    return splitmix(splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(s)) ^ index);
}

inline std::size_t worker_count(std::size_t requested, std::size_t jobs) {
    std::size_t w = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
    return std::max<std::size_t>(1, std::min(w, jobs));
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = worker_count(workers, n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace detail

struct TrainedModel {
    Model<float> model;
    RunMetrics metrics;
};

/// Episodic Adam training. Deterministic given the config seed.
inline TrainedModel train(const Dataset& train_set, const RunConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    TrainedModel out{Model<float>(cfg.model_config(), detail::derive(cfg.seed, detail::Stream::init)), {}};
    auto& model = out.model;
    nn::Adam<float> opt(model.params(), cfg.weight_decay);
    Rng rng(detail::derive(cfg.seed, detail::Stream::train));
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at(epoch);
        for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e, ++step) {
            const auto ep = sample_episode(train_set, cfg.way, cfg.shot, cfg.queries, rng);
            const auto in = model.prepare(ep);
            ad::Tape<float> tape;
            const auto res = model.forward(tape, in, ad::Mode::train);
            const auto loss = model.loss(res, in);
            const double value = loss.item();
            if (!std::isfinite(value)) throw TrainError("loss diverged", step);
            model.params().zero_grad();
            tape.backward(loss);
            opt.step(lr);
            out.metrics.loss_curve.push_back(value);
        }
    }
    out.metrics.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

/// A wrongly classified query next to the support it was matched with.
struct WrongPair {
    std::size_t episode = 0;
    TimeSeries query;
    TimeSeries support;
    int true_class = 0;       // dataset class ids
    int predicted_class = 0;
};

struct EvalTrace {
    std::vector<WrongPair> wrong;
};

/// Episode `index` of the evaluation stream; identical for every method
/// evaluated with the same seed and task shape.
inline Episode eval_episode(const Dataset& ds, const RunConfig& cfg, std::size_t way, std::size_t index) {
    Rng rng(detail::derive(cfg.seed, detail::Stream::eval, index));
    auto ep = sample_episode(ds, way, cfg.shot, cfg.queries, rng);
    if (cfg.noise && !cfg.noise->disabled()) {
        Rng noise_rng(detail::derive(cfg.seed, detail::Stream::noise, index));
        ep = add_band_noise(ep, *cfg.noise, noise_rng);
    }
    return ep;
}

namespace detail {

// Shared driver: `classify` returns (predicted label, matched support index)
// per query.
template <class Classify>
RunMetrics run_eval(const Dataset& ds, const RunConfig& cfg, std::size_t way, EvalTrace* trace, Classify&& classify) {
    if (cfg.eval_episodes == 0) throw EvalError("evaluation needs at least one episode");
    const auto t0 = std::chrono::steady_clock::now();
    RunMetrics m;
    m.accuracies.assign(cfg.eval_episodes, 0.0);
    std::vector<std::vector<WrongPair>> wrong(trace ? cfg.eval_episodes : 0);
    parallel_for(cfg.eval_episodes, cfg.workers, [&](std::size_t i) {
        const auto ep = eval_episode(ds, cfg, way, i);
        const auto pred = classify(ep);
        std::size_t correct = 0;
        for (std::size_t q = 0; q < ep.query.size(); ++q) {
            if (pred[q].first == ep.query_labels[q]) {
                ++correct;
            } else if (trace) {
                wrong[i].push_back({i, ep.query[q], ep.support[pred[q].second],
                                    ep.class_ids[static_cast<std::size_t>(ep.query_labels[q])],
                                    ep.class_ids[static_cast<std::size_t>(pred[q].first)]});
            }
        }
        m.accuracies[i] = 100.0 * static_cast<double>(correct) / static_cast<double>(ep.query.size());
    });
    if (trace)
        for (auto& w : wrong)
            for (auto& p : w) trace->wrong.push_back(std::move(p));
    summarize(m);
    m.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

} // namespace detail

/// Predicted episode-local label and matched support index for every query.
inline std::vector<std::pair<int, std::size_t>> classify(const Model<float>& model, const Episode& ep) {
    const auto in = model.prepare(ep);
    ad::Tape<float> tape;
    const auto out = model.forward(tape, in, ad::Mode::eval);
    const auto& probs = out.final_probs.value();
    const std::size_t ns = ep.support.size(), nq = ep.query.size(), way = ep.way;
    const ad::Tensor<float>* edges = out.edges.empty() ? nullptr : &out.edges.back().value();
    std::vector<std::pair<int, std::size_t>> res;
    for (std::size_t q = 0; q < nq; ++q) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < way; ++c)
            if (probs.data[q * way + c] > probs.data[q * way + best]) best = c;
        // Matched support: strongest edge within the predicted class.
        std::size_t match = ns;
        for (std::size_t s = 0; s < ns; ++s) {
            if (static_cast<std::size_t>(ep.support_labels[s]) != best) continue;
            if (match == ns) match = s;
            if (edges) {
                const std::size_t n = ns + nq;
                if (edges->data[(ns + q) * n + s] > edges->data[(ns + q) * n + match]) match = s;
            }
        }
        res.emplace_back(static_cast<int>(best), match);
    }
    return res;
}

/// Accuracy over cfg.eval_episodes episodes at the configured way.
/// Parameters are only read.
inline RunMetrics evaluate(const Dataset& test_set, const Model<float>& model, const RunConfig& cfg,
                           EvalTrace* trace = nullptr, std::optional<std::size_t> way = std::nullopt) {
    return detail::run_eval(test_set, cfg, way.value_or(cfg.way), trace,
                            [&](const Episode& ep) { return classify(model, ep); });
}

/// 1-NN baseline on the same episodes `evaluate` would draw.
inline RunMetrics evaluate_nn(const Dataset& test_set, const RunConfig& cfg, baselines::Distance distance,
                              const baselines::DtwConfig& dtw = {}, EvalTrace* trace = nullptr) {
    return detail::run_eval(test_set, cfg, cfg.way, trace, [&](const Episode& ep) {
        std::vector<std::pair<int, std::size_t>> res;
        for (const auto& q : ep.query) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t s = 0; s < ep.support.size(); ++s) {
                const double d = distance == baselines::Distance::dtw
                                     ? baselines::dtw_distance(q, ep.support[s], dtw)
                                     : baselines::euclidean_distance(q.view(), ep.support[s].view());
                if (d < best) {
                    best = d;
                    arg = s;
                }
            }
            res.emplace_back(ep.support_labels[arg], arg);
        }
        return res;
    });
}

/// Train on one dataset and evaluate on another.
inline RunMetrics train_and_evaluate(const Dataset& train_set, const Dataset& test_set, const RunConfig& cfg,
                                     EvalTrace* trace = nullptr) {
    auto trained = train(train_set, cfg);
    auto m = evaluate(test_set, trained.model, cfg, trace);
    m.loss_curve = std::move(trained.metrics.loss_curve);
    m.wall_clock_s += trained.metrics.wall_clock_s;
    return m;
}

// ---------------------------------------------------------------------------
// Experiment harnesses

struct AblationTable {
    RunMetrics baseline, sra, sp, full;
};

inline AblationTable ablate(const Dataset& train_set, const Dataset& test_set, RunConfig cfg) {
    AblationTable t;
    auto run = [&](bool sra, bool sp) {
        cfg.use_sra = sra;
        cfg.use_sp = sp;
        return train_and_evaluate(train_set, test_set, cfg);
    };
    t.baseline = run(false, false);
    t.sra = run(true, false);
    t.sp = run(false, true);
    t.full = run(true, true);
    return t;
}

/// Train on the source split, evaluate on the target without fine-tuning.
inline RunMetrics cross_domain(const Dataset& source_train, const Dataset& target_test, const RunConfig& cfg) {
    return train_and_evaluate(source_train, target_test, cfg);
}

/// Train at `train_way`, evaluate the same parameters at `eval_way`.
inline RunMetrics cross_way(const Dataset& train_set, const Dataset& test_set, std::size_t train_way,
                            std::size_t eval_way, RunConfig cfg) {
    if (eval_way == 0 || eval_way > test_set.class_count())
        throw EpisodeError("eval way " + std::to_string(eval_way) + " exceeds the " +
                           std::to_string(test_set.class_count()) + " classes of '" + test_set.name + "'");
    cfg.way = train_way;
    auto trained = train(train_set, cfg);
    auto m = evaluate(test_set, trained.model, cfg, nullptr, eval_way);
    m.loss_curve = std::move(trained.metrics.loss_curve);
    return m;
}

struct SweepRow {
    std::size_t value = 0;
    RunMetrics metrics;
};

inline std::vector<SweepRow> split_sweep(const Dataset& train_set, const Dataset& test_set, RunConfig cfg,
                                         const std::vector<std::size_t>& s_values) {
    std::vector<SweepRow> rows;
    for (auto s : s_values) {
        cfg.bands = s;
        rows.push_back({s, train_and_evaluate(train_set, test_set, cfg)});
    }
    return rows;
}

inline std::vector<SweepRow> k_sweep(const Dataset& train_set, const Dataset& test_set, RunConfig cfg,
                                     const std::vector<std::size_t>& k_values) {
    std::vector<SweepRow> rows;
    for (auto k : k_values) {
        cfg.shot = k;
        rows.push_back({k, train_and_evaluate(train_set, test_set, cfg)});
    }
    return rows;
}

struct NoiseComparison {
    RunMetrics spgn_clean, spgn_noisy, dtw_clean, dtw_noisy;
    double spgn_drop() const { return spgn_clean.mean_acc - spgn_noisy.mean_acc; }
    double dtw_drop() const { return dtw_clean.mean_acc - dtw_noisy.mean_acc; }
};

/// Clean versus noisy accuracy of a trained model and of DTW 1-NN. Noise
/// touches evaluation episodes only; all four runs share base episodes.
inline NoiseComparison noise_eval(const Dataset& test_set, const Model<float>& model, RunConfig cfg,
                                  const NoiseSpec& noise) {
    NoiseComparison r;
    cfg.noise.reset();
    r.spgn_clean = evaluate(test_set, model, cfg);
    r.dtw_clean = evaluate_nn(test_set, cfg, baselines::Distance::dtw);
    cfg.noise = noise;
    r.spgn_noisy = evaluate(test_set, model, cfg);
    r.dtw_noisy = evaluate_nn(test_set, cfg, baselines::Distance::dtw);
    return r;
}

// ---------------------------------------------------------------------------
// Misclassification diagnostics

/// Bands whose relative energy gap |a - b| / max(a, b) exceeds tau. Both
/// series are measured on the first series' partition so bands line up.
inline std::size_t differing_bands(const TimeSeries& a, const TimeSeries& b, std::size_t bands,
                                   spectral::SplitStrategy strategy, double tau) {
    const auto pa = spectral::compute_psd(a);
    const auto pb = spectral::compute_psd(b);
    const auto part = spectral::split_frequencies(pa, bands, strategy);
    const auto ea = spectral::band_energies(pa, part);
    const auto eb = spectral::band_energies(pb, part);
    std::size_t n = 0;
    for (std::size_t j = 0; j < ea.size(); ++j) {
        const double hi = std::max(ea[j], eb[j]);
        if (hi <= 0.0) continue;
        if (std::abs(ea[j] - eb[j]) / hi > tau) ++n;
    }
    return n;
}

struct BandStats {
    std::map<std::size_t, std::size_t> histogram;  // differing-band count -> pairs
    std::size_t pairs = 0;
    std::size_t exactly_one = 0;
    std::size_t exactly_two = 0;
    std::size_t at_least_two = 0;
};

inline BandStats misclassified_band_stats(const EvalTrace& trace, std::size_t bands,
                                          spectral::SplitStrategy strategy, double tau = 0.5) {
    BandStats st;
    for (const auto& p : trace.wrong) {
        const auto k = differing_bands(p.query, p.support, bands, strategy, tau);
        ++st.histogram[k];
        ++st.pairs;
        if (k == 1) ++st.exactly_one;
        if (k == 2) ++st.exactly_two;
        if (k >= 2) ++st.at_least_two;
    }
    return st;
}

} // namespace spgn
