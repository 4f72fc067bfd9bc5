#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "spgn/config.hpp"
#include "spgn/engine.hpp"

using namespace spgn;

namespace {

// Classes are single tones at distinct bins with random phase plus a little
// white noise.
Dataset tone_dataset(const std::vector<double>& bins, std::size_t per_class, std::size_t L, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> g(0.0, 0.1);
    Dataset ds;
    ds.name = "tones";
    std::size_t row = 0;
    for (std::size_t c = 0; c < bins.size(); ++c) {
        ds.classes.push_back(static_cast<int>(c));
        for (std::size_t i = 0; i < per_class; ++i) {
            TimeSeries ts;
            const double ph = phase(rng);
            for (std::size_t t = 0; t < L; ++t)
                ts.values.push_back(std::sin(2.0 * std::numbers::pi * bins[c] * static_cast<double>(t) / static_cast<double>(L) + ph) +
                                    g(rng));
            znormalize(ts.values);
            ts.label = static_cast<int>(c);
            ts.source_id = row++;
            ds.series.push_back(std::move(ts));
        }
    }
    return ds;
}

RunConfig small_config() {
    RunConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.bands = 3;
    cfg.layers = 2;
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 10;
    cfg.eval_episodes = 20;
    cfg.workers = 1;
    return cfg;
}

std::vector<double> tone(std::size_t L, const std::vector<std::pair<double, double>>& parts) {
    std::vector<double> x(L, 0.0);
    for (const auto& [bin, amp] : parts)
        for (std::size_t t = 0; t < L; ++t)
            x[t] += amp * std::sin(2.0 * std::numbers::pi * bin * static_cast<double>(t) / static_cast<double>(L) + 0.4);
    return x;
}

} // namespace

TEST_CASE("confidence interval on five accuracies") {
    RunMetrics m;
    m.accuracies = {100, 80, 60, 80, 100};
    summarize(m);
    // mean 84, population variance 1120 / 5 = 224, 1.96 * sqrt(224 / 5).
    CHECK(m.mean_acc == Catch::Approx(84.0).epsilon(1e-15));
    CHECK(std::abs(m.ci95 - 13.118829216054) < 1e-9);
}

TEST_CASE("learning-rate schedule") {
    RunConfig cfg;
    CHECK(cfg.lr_at(0) == 1e-3);
    CHECK(cfg.lr_at(29) == 1e-3);
    CHECK(cfg.lr_at(30) == 5e-4);
    CHECK(cfg.lr_at(60) == 2.5e-4);
}

TEST_CASE("config validation") {
    RunConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto bad = cfg;
    bad.way = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.lr_decay = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.epochs = 0;
    CHECK_NOTHROW(bad.validate());
}

TEST_CASE("config files") {
    std::istringstream in("# run\nway = 3\nshot=2   # inline comment\n\nstrategy = equal_freq\nuse_sp = false\n"
                          "noise_band = high\nnoise_snr_db = 5\nlr = 2e-3\n");
    RunConfig cfg;
    apply_config(cfg, parse_config(in));
    CHECK(cfg.way == 3);
    CHECK(cfg.shot == 2);
    CHECK(cfg.strategy == spectral::SplitStrategy::equal_freq);
    CHECK(cfg.variant() == Variant::sra);
    CHECK(cfg.lr == 2e-3);
    REQUIRE(cfg.noise.has_value());
    CHECK(cfg.noise->f_lo == 0.5);
    CHECK(cfg.noise->snr_db == 5.0);

    std::istringstream typo("wya = 3\n");
    CHECK_THROWS_AS(apply_config(cfg, parse_config(typo)), ConfigError);
    std::istringstream junk("way = three\n");
    CHECK_THROWS_AS(apply_config(cfg, parse_config(junk)), ConfigError);
    std::istringstream noeq("way 3\n");
    CHECK_THROWS_AS(parse_config(noeq), ConfigError);
}

TEST_CASE("both ablation flags off is the baseline path") {
    RunConfig cfg;
    cfg.use_sra = cfg.use_sp = false;
    CHECK(cfg.model_config().variant == Variant::baseline);
    CHECK(cfg.model_config().stream_count() == 1);
}

TEST_CASE("training") {
    const auto ds = tone_dataset({3, 7, 11, 15}, 8, 32, 1);

    SECTION("zero epochs returns the initial parameters") {
        auto cfg = small_config();
        cfg.epochs = 0;
        const auto t = train(ds, cfg);
        CHECK(t.metrics.loss_curve.empty());
        CHECK(t.metrics.accuracies.empty());
        Model<float> fresh(cfg.model_config(), detail::derive(cfg.seed, detail::Stream::init));
        CHECK(t.model.params().checksum() == fresh.params().checksum());
    }
    SECTION("identical config, identical loss curve") {
        const auto cfg = small_config();
        const auto a = train(ds, cfg);
        const auto b = train(ds, cfg);
        CHECK(a.metrics.loss_curve.size() == 10);
        CHECK(a.metrics.loss_curve == b.metrics.loss_curve);
        CHECK(a.model.params().checksum() == b.model.params().checksum());
    }
    SECTION("divergence names the step") {
        // One Adam step of this size overflows float activations.
        auto cfg = small_config();
        cfg.lr = 1e30;
        try {
            train(ds, cfg);
            FAIL("expected TrainError");
        } catch (const TrainError& e) {
            CHECK(e.step() >= 1);
            CHECK(e.step() < 10);
        }
    }
}

TEST_CASE("evaluation") {
    const auto ds = tone_dataset({3, 7, 11, 15}, 8, 32, 2);
    auto cfg = small_config();

    SECTION("parameters are only read") {
        cfg.epochs = 0;
        const auto t = train(ds, cfg);
        const auto before = t.model.params().checksum();
        evaluate(ds, t.model, cfg);
        CHECK(t.model.params().checksum() == before);
    }
    SECTION("no episodes") {
        cfg.eval_episodes = 0;
        CHECK_THROWS_AS(evaluate_nn(ds, cfg, baselines::Distance::euclid), EvalError);
    }
    SECTION("one perfect episode") {
        Dataset twins;
        twins.classes = {0, 1};
        for (int c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 2; ++i) {
                TimeSeries ts;
                ts.values = tone(32, {{3.0 + 5 * c, 1.0}});
                ts.label = c;
                ts.source_id = static_cast<std::size_t>(2 * c) + i;
                twins.series.push_back(ts);
            }
        cfg.eval_episodes = 1;
        const auto m = evaluate_nn(twins, cfg, baselines::Distance::euclid);
        CHECK(m.mean_acc == 100.0);
        CHECK(m.ci95 == 0.0);
    }
    SECTION("an untrained model is at chance on noise") {
        Dataset noise;
        Rng rng(3);
        std::normal_distribution<double> g(0.0, 1.0);
        noise.classes = {0, 1};
        for (std::size_t i = 0; i < 40; ++i) {
            TimeSeries ts;
            ts.values.resize(32);
            for (auto& v : ts.values) v = g(rng);
            ts.label = static_cast<int>(i % 2);
            ts.source_id = i;
            noise.series.push_back(ts);
        }
        cfg.epochs = 0;
        cfg.eval_episodes = 500;
        const auto t = train(noise, cfg);
        const auto m = evaluate(noise, t.model, cfg);
        CHECK(std::abs(m.mean_acc - 50.0) <= 5.0);
    }
    SECTION("worker count does not change results") {
        cfg.epochs = 0;
        const auto t = train(ds, cfg);
        cfg.workers = 1;
        const auto serial = evaluate(ds, t.model, cfg);
        cfg.workers = 3;
        const auto parallel = evaluate(ds, t.model, cfg);
        CHECK(serial.accuracies == parallel.accuracies);
    }
    SECTION("evaluation episodes do not depend on training") {
        const auto before = eval_episode(ds, cfg, 2, 5);
        auto longer = cfg;
        longer.epochs = 2;
        train(ds, longer);
        CHECK(eval_episode(ds, cfg, 2, 5) == before);
        CHECK(eval_episode(ds, longer, 2, 5) == before);
        auto other = cfg;
        other.seed = 1;
        CHECK_FALSE(eval_episode(ds, other, 2, 5) == before);
    }
    SECTION("noise touches evaluation episodes only through the noise stream") {
        cfg.noise = NoiseSpec::preset(NoiseBand::high, 10.0);
        const auto noisy = eval_episode(ds, cfg, 2, 4);
        cfg.noise.reset();
        const auto clean = eval_episode(ds, cfg, 2, 4);
        CHECK(noisy.support_labels == clean.support_labels);
        CHECK(noisy.class_ids == clean.class_ids);
        CHECK_FALSE(noisy.support[0].values == clean.support[0].values);
    }
}

TEST_CASE("harness contracts") {
    const auto ds = tone_dataset({3, 7, 11}, 6, 32, 4);
    auto cfg = small_config();
    cfg.episodes_per_epoch = 4;
    cfg.eval_episodes = 10;

    CHECK_THROWS_AS(cross_way(ds, ds, 2, 4, cfg), EpisodeError);
    const auto same_way = cross_way(ds, ds, 2, 2, cfg);
    const auto plain = train_and_evaluate(ds, ds, cfg);
    CHECK(same_way.accuracies == plain.accuracies);
    CHECK(same_way.loss_curve == plain.loss_curve);
    CHECK(cross_domain(ds, ds, cfg).accuracies == plain.accuracies);
    const auto wider = cross_way(ds, ds, 2, 3, cfg);
    CHECK(wider.accuracies.size() == 10);

    const auto rows = split_sweep(ds, ds, cfg, {2, 3});
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].metrics.accuracies == plain.accuracies);
    const auto krows = k_sweep(ds, ds, cfg, {1, 2});
    CHECK(krows[0].metrics.accuracies == plain.accuracies);
}

TEST_CASE("separable two-class task") {
    const auto train_set = tone_dataset({4, 12}, 20, 64, 5);
    auto test_set = tone_dataset({4, 12}, 20, 64, 6);
    test_set.split = Split::test;
    RunConfig cfg;
    cfg.way = 2;
    cfg.shot = 1;
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 100;
    cfg.eval_episodes = 200;
    cfg.workers = 1;
    const auto t = train(train_set, cfg);

    SECTION("loss falls over the first 50 steps") {
        const auto& lc = t.metrics.loss_curve;
        double head = 0.0, tail = 0.0;
        for (std::size_t i = 0; i < 10; ++i) {
            head += lc[i];
            tail += lc[40 + i];
        }
        CHECK(tail < head);
    }
    SECTION("100 episodes reach 95%") {
        CHECK(evaluate(test_set, t.model, cfg).mean_acc >= 95.0);
    }
    SECTION("a query duplicating a support takes its class") {
        for (std::size_t i = 0; i < 20; ++i) {
            auto ep = eval_episode(test_set, cfg, 2, i);
            ep.query[1] = ep.support[1];
            const auto pred = classify(t.model, ep);
            CHECK(pred[1].first == ep.support_labels[1]);
            CHECK(pred[1].second == 1);
        }
    }
}

TEST_CASE("differing-band diagnostic") {
    using spectral::SplitStrategy;
    TimeSeries a, b;
    a.values = tone(64, {{4, 1.0}, {12, 1.0}, {20, 1.0}, {28, 1.0}});

    SECTION("identical pair") {
        for (double tau : {0.01, 0.5, 0.9}) CHECK(differing_bands(a, a, 4, SplitStrategy::equal_freq, tau) == 0);
        CHECK(differing_bands(a, a, 8, SplitStrategy::equal_power, 0.5) == 0);
    }
    SECTION("one band ten times stronger") {
        b.values = tone(64, {{4, 1.0}, {12, std::sqrt(10.0)}, {20, 1.0}, {28, 1.0}});
        CHECK(differing_bands(a, b, 4, SplitStrategy::equal_freq, 0.5) == 1);
    }
    SECTION("threshold zero counts every numeric difference") {
        b.values = a.values;
        for (auto& v : b.values) v *= 1.01;
        CHECK(differing_bands(a, b, 4, SplitStrategy::equal_freq, 0.0) == 4);
        CHECK(differing_bands(a, b, 4, SplitStrategy::equal_freq, 0.5) == 0);
    }
    SECTION("histogram") {
        EvalTrace trace;
        CHECK(misclassified_band_stats(trace, 4, SplitStrategy::equal_freq).histogram.empty());
        b.values = tone(64, {{4, 1.0}, {12, 4.0}, {20, 4.0}, {28, 1.0}});
        TimeSeries c;
        c.values = tone(64, {{4, 1.0}, {12, 4.0}, {20, 1.0}, {28, 1.0}});
        trace.wrong.push_back({0, a, b, 0, 1});
        trace.wrong.push_back({1, a, c, 0, 1});
        trace.wrong.push_back({2, a, a, 0, 1});
        const auto st = misclassified_band_stats(trace, 4, SplitStrategy::equal_freq);
        CHECK(st.pairs == 3);
        CHECK(st.exactly_one == 1);
        CHECK(st.exactly_two == 1);
        CHECK(st.at_least_two == 1);
        CHECK(st.histogram.at(0) == 1);
    }
}
