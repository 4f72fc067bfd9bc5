#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>

#include "spgn/graph.hpp"
#include "spgn/model.hpp"

using namespace spgn;
using ad::Mode;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sd);
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = g(rng);
    return t;
}

graph::GraphConfig small_config(std::size_t layers) {
    graph::GraphConfig cfg;
    cfg.embedding = 12;
    cfg.relation_hidden = 8;
    cfg.edge_hidden = 5;
    cfg.layers = layers;
    return cfg;
}

graph::GraphLabels labels_for(std::vector<int> support, std::size_t queries, std::size_t way) {
    graph::GraphLabels l;
    l.support_labels = std::move(support);
    l.query_count = queries;
    l.way = way;
    return l;
}

void require_row_stochastic(const Tensor<double>& E, double tol = 1e-6) {
    const std::size_t n = E.dim(0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            REQUIRE(E.data[i * n + j] >= 0.0);
            s += E.data[i * n + j];
        }
        REQUIRE(std::abs(s - 1.0) < tol);
    }
}

} // namespace

TEST_CASE("relation") {
    nn::ParamSet<double> ps;
    std::mt19937_64 rng(1);
    graph::RelationNet<double> rel(ps, "rel", 12, 8, rng);

    SECTION("equal inputs give sigmoid(0)") {
        Tape<double> tape;
        auto v = tape.constant(randn({12}, 2));
        CHECK(graph::relation(tape, v, v, rel, Mode::eval).item() == 0.5);
    }
    SECTION("symmetric and inside (0, 1)") {
        for (std::uint64_t k = 0; k < 1000; ++k) {
            Tape<double> tape;
            auto a = tape.constant(randn({12}, 10 + 2 * k, 2.0));
            auto b = tape.constant(randn({12}, 11 + 2 * k, 2.0));
            const double ab = graph::relation(tape, a, b, rel, Mode::eval).item();
            const double ba = graph::relation(tape, b, a, rel, Mode::eval).item();
            REQUIRE(ab == ba);
            REQUIRE(ab > 0.0);
            REQUIRE(ab < 1.0);
        }
    }
    SECTION("shape mismatch") {
        Tape<double> tape;
        CHECK_THROWS_AS(graph::relation(tape, tape.constant(randn({12}, 3)), tape.constant(randn({11}, 4)), rel, Mode::eval),
                        ShapeError);
    }
}

TEST_CASE("initial edges") {
    nn::ParamSet<double> ps;
    std::mt19937_64 rng(5);
    const std::size_t S = 3;
    graph::SpectralGraph<double> g(ps, "graph", small_config(2), S, rng);
    const auto labels = labels_for({0, 1}, 2, 2);

    SECTION("label factor") {
        const auto f = graph::edge_label_factor<double>(labels);
        CHECK(f.data[0 * 4 + 1] == 0.0);  // differing supports
        CHECK(f.data[1 * 4 + 0] == 0.0);
        CHECK(f.data[0 * 4 + 2] == 0.5);  // support-query
        CHECK(f.data[2 * 4 + 3] == 0.5);  // query-query
        CHECK(f.data[0] == 0.0);          // self edge added separately
    }
    SECTION("differing supports are cut, queries are damped") {
        Tape<double> tape;
        auto V = tape.constant(randn({S, 4, 12}, 6));
        const auto& E = graph::init_edges(tape, V, labels, g.relations(0), g.combiner(0), Mode::eval).value();
        require_row_stochastic(E);
        CHECK(E.data[0 * 4 + 1] == 0.0);
        CHECK(E.data[1 * 4 + 0] == 0.0);
        // Unnormalized query entry = 0.5 * combiner output; recover it from
        // the row: raw_ij / raw_ii with raw_ii = 1.
        for (std::size_t i = 2; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                if (i == j) continue;
                const double raw = E.data[i * 4 + j] / E.data[i * 4 + i];
                CHECK(raw > 0.0);
                CHECK(raw < 0.5);
            }
    }
    SECTION("equal features give equal edge weights per factor") {
        Tape<double> tape;
        Tensor<double> same({S, 5, 12});
        const auto row = randn({12}, 7);
        for (std::size_t k = 0; k < S * 5; ++k)
            std::copy(row.data.begin(), row.data.end(), same.data.begin() + static_cast<std::ptrdiff_t>(k * 12));
        const auto l5 = labels_for({0, 0, 1}, 2, 2);
        const auto& E = graph::init_edges(tape, tape.constant(same), l5, g.relations(0), g.combiner(0), Mode::eval).value();
        const double w = E.data[0 * 5 + 1] / E.data[0];
        CHECK(E.data[1 * 5 + 0] / E.data[1 * 5 + 1] == Catch::Approx(w));
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 3; j < 5; ++j)
                if (i != j) CHECK(E.data[i * 5 + j] / E.data[i * 5 + i] == Catch::Approx(0.5 * w));
    }
}

TEST_CASE("node update") {
    nn::ParamSet<double> ps;
    std::mt19937_64 rng(8);
    graph::NodeNet<double> net(ps, "node", 12, rng);

    SECTION("identity edges aggregate the node itself") {
        Tape<double> tape;
        const auto Vt = randn({2, 3, 12}, 9);
        auto V = tape.constant(Vt);
        const auto& out = graph::update_nodes(tape, V, tape.constant(graph::identity<double>(3)), net, Mode::eval).value();
        auto self = tape.constant(Tensor<double>(Shape{6, 12}, Vt.data));
        const auto& want = net(tape, ad::concat(std::vector<Var<double>>{self, self}, 1), Mode::eval).value();
        REQUIRE(out.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(out.data[i] == want.data[i]);
    }
    SECTION("twins under symmetric edges stay twins") {
        Tape<double> tape;
        auto Vt = randn({1, 3, 12}, 10);
        std::copy(Vt.data.begin(), Vt.data.begin() + 12, Vt.data.begin() + 12);
        Tensor<double> E(Shape{3, 3}, std::vector<double>{0.4, 0.4, 0.2, 0.4, 0.4, 0.2, 0.3, 0.3, 0.4});
        const auto& out = graph::update_nodes(tape, tape.constant(Vt), tape.constant(E), net, Mode::eval).value();
        for (std::size_t d = 0; d < 12; ++d) CHECK(out.data[d] == out.data[12 + d]);
    }
    SECTION("gradient through one update on three nodes") {
        Tensor<double> E(Shape{3, 3}, std::vector<double>{0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.25, 0.25, 0.5});
        const auto w = randn({2, 3, 12}, 11);
        const auto res = nn::grad_check(
            [&](Tape<double>& t, std::span<const Var<double>> v) {
                auto out = graph::update_nodes(t, v[0], v[1], net, Mode::train);
                return ad::sum(ad::mul(out, t.constant(w)));
            },
            {randn({2, 3, 12}, 12), E});
        CHECK(res.max_rel_error < 1e-4);
    }
}

TEST_CASE("edge update") {
    nn::ParamSet<double> ps;
    std::mt19937_64 rng(13);
    graph::SpectralGraph<double> g(ps, "graph", small_config(1), 2, rng);
    Tensor<double> prev(Shape{3, 3}, std::vector<double>{0.6, 0.0, 0.4, 0.0, 0.7, 0.3, 0.2, 0.5, 0.3});
    Tape<double> tape;
    auto V = tape.constant(randn({2, 3, 12}, 14));
    auto Ep = tape.constant(prev);

    SECTION("zero stays zero and rows sum to one") {
        const auto& E = graph::update_edges(tape, V, Ep, g.relations(1), &g.combiner(1), Mode::eval).value();
        require_row_stochastic(E);
        CHECK(E.data[1] == 0.0);
        CHECK(E.data[3] == 0.0);
    }
    SECTION("unit combiner re-normalizes the previous edges") {
        Tensor<double> unnorm = prev;
        for (auto& v : unnorm.data) v *= 3.0;
        const auto& E = graph::update_edges(tape, V, tape.constant(unnorm), g.relations(1), static_cast<const graph::EdgeNet<double>*>(nullptr), Mode::eval).value();
        for (std::size_t i = 0; i < 9; ++i) CHECK(E.data[i] == Catch::Approx(prev.data[i]).margin(1e-15));
    }
}

TEST_CASE("prediction") {
    const auto labels = labels_for({0, 1}, 1, 2);
    SECTION("hand-evaluated softmax") {
        Tape<double> tape;
        Tensor<double> E(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0.9, 0.1, 0.0});
        const auto& p = graph::predict(tape, tape.constant(E), labels).value();
        const double a = std::exp(0.9), b = std::exp(0.1);
        CHECK(p.data[0] == Catch::Approx(a / (a + b)).epsilon(1e-12));
        CHECK(p.data[1] == Catch::Approx(b / (a + b)).epsilon(1e-12));
        CHECK(p.data[0] == Catch::Approx(0.6900).margin(5e-5));
    }
    SECTION("equal mass is uniform, more mass is more probable") {
        Tape<double> tape;
        Tensor<double> E(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0.3, 0.3, 0.4});
        const auto& p = graph::predict(tape, tape.constant(E), labels).value();
        CHECK(p.data[0] == Catch::Approx(0.5));
        double last = p.data[0];
        for (double m : {0.35, 0.4, 0.5}) {
            Tensor<double> e2 = E;
            e2.data[6] = m;
            const double now = graph::predict(tape, tape.constant(e2), labels).value().data[0];
            CHECK(now > last);
            last = now;
        }
    }
    SECTION("softmax ignores a shared shift") {
        Tape<double> tape;
        const auto s = randn({4, 5}, 15);
        auto shifted = s;
        for (auto& v : shifted.data) v += 3.7;
        const auto& a = ad::softmax(tape.constant(s), 1).value();
        const auto& b = ad::softmax(tape.constant(shifted), 1).value();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-6);
    }
}

TEST_CASE("layer loss") {
    Tape<double> tape;
    SECTION("perfect predictions") {
        auto p = tape.constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}));
        CHECK(graph::loss<double>({p, p, p}, {0, 1}).item() == 0.0);
    }
    SECTION("uniform predictions over three layers") {
        auto p = tape.constant(Tensor<double>(Shape{2, 2}, 0.5));
        CHECK(graph::loss<double>({p, p, p}, {0, 1}).item() == Catch::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
        CHECK(graph::loss<double>({p, p, p}, {0, 1}).item() == Catch::Approx(2.0794).margin(1e-4));
    }
    SECTION("zero probability is clamped") {
        auto p = tape.constant(Tensor<double>(Shape{1, 2}, std::vector<double>{0, 1}));
        CHECK(graph::loss<double>({p}, {0}).item() == Catch::Approx(-std::log(1e-12)));
    }
    SECTION("needs a layer") { CHECK_THROWS_AS(graph::loss<double>({}, {0}), ContractError); }
}

TEST_CASE("graph forward invariants") {
    nn::ParamSet<double> ps;
    std::mt19937_64 rng(16);
    const std::size_t S = 3, T = 3;
    graph::SpectralGraph<double> g(ps, "graph", small_config(T), S, rng);
    const auto labels = labels_for({0, 0, 1, 1, 2, 2}, 3, 3);

    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        Tape<double> tape;
        const auto res = g.forward(tape, tape.constant(randn({S, 9, 12}, 100 + trial)), labels,
                                   trial % 2 ? Mode::train : Mode::eval);
        REQUIRE(res.edges.size() == T + 1);
        REQUIRE(res.probs.size() == T + 1);
        for (const auto& Ev : res.edges) {
            const auto& E = Ev.value();
            require_row_stochastic(E);
            for (std::size_t i = 0; i < 6; ++i)
                for (std::size_t j = 0; j < 6; ++j)
                    if (labels.support_labels[i] != labels.support_labels[j]) REQUIRE(E.data[i * 9 + j] == 0.0);
        }
        for (const auto& Pv : res.probs) {
            const auto& P = Pv.value();
            REQUIRE(P.shape == Shape{3, 3});
            for (std::size_t q = 0; q < 3; ++q)
                REQUIRE(std::abs(P.data[q * 3] + P.data[q * 3 + 1] + P.data[q * 3 + 2] - 1.0) < 1e-12);
        }
    }

    SECTION("permuting instances permutes predictions") {
        // Swap supports 0<->3 style moves that keep labels attached, and
        // reverse the queries.
        const std::vector<std::size_t> perm{2, 3, 0, 1, 5, 4, 8, 7, 6};  // new position -> old index
        auto plabels = labels;
        for (std::size_t i = 0; i < 6; ++i) plabels.support_labels[i] = labels.support_labels[perm[i]];
        const auto V = randn({S, 9, 12}, 200);
        Tensor<double> Vp(V.shape);
        for (std::size_t k = 0; k < S; ++k)
            for (std::size_t i = 0; i < 9; ++i)
                std::copy_n(V.data.begin() + static_cast<std::ptrdiff_t>((k * 9 + perm[i]) * 12), 12,
                            Vp.data.begin() + static_cast<std::ptrdiff_t>((k * 9 + i) * 12));
        Tape<double> tape;
        const auto a = g.forward(tape, tape.constant(V), labels, Mode::eval);
        const auto b = g.forward(tape, tape.constant(Vp), plabels, Mode::eval);
        for (std::size_t l = 0; l <= T; ++l) {
            const auto& Ea = a.edges[l].value();
            const auto& Eb = b.edges[l].value();
            for (std::size_t i = 0; i < 9; ++i)
                for (std::size_t j = 0; j < 9; ++j)
                    CHECK(std::abs(Eb.data[i * 9 + j] - Ea.data[perm[i] * 9 + perm[j]]) < 1e-6);
            const auto& Pa = a.probs[l].value();
            const auto& Pb = b.probs[l].value();
            for (std::size_t q = 0; q < 3; ++q)
                for (std::size_t c = 0; c < 3; ++c)
                    CHECK(std::abs(Pb.data[q * 3 + c] - Pa.data[(perm[6 + q] - 6) * 3 + c]) < 1e-6);
        }
    }
}

TEST_CASE("model variants") {
    Episode ep;
    ep.way = 2;
    ep.shot = 1;
    std::mt19937_64 rng(17);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int i = 0; i < 4; ++i) {
        TimeSeries ts;
        ts.values.resize(32);
        for (auto& v : ts.values) v = gauss(rng);
        ts.source_id = static_cast<std::size_t>(i);
        (i < 2 ? ep.support : ep.query).push_back(ts);
        (i < 2 ? ep.support_labels : ep.query_labels).push_back(i % 2);
    }
    ep.class_ids = {0, 1};

    SECTION("one layer, one band runs end to end") {
        ModelConfig cfg;
        cfg.bands = 1;
        cfg.graph.layers = 1;
        Model<double> m(cfg, 1);
        const auto in = m.prepare(ep);
        Tape<double> tape;
        const auto out = m.forward(tape, in, Mode::eval);
        const auto& p = out.final_probs.value();
        for (std::size_t q = 0; q < 2; ++q) CHECK(std::abs(p.data[2 * q] + p.data[2 * q + 1] - 1.0) < 1e-12);
        CHECK(out.layer_probs.size() == 1);
        CHECK(out.edges.size() == 2);
    }
    SECTION("every variant trains a step") {
        for (auto v : {Variant::baseline, Variant::sra, Variant::sp, Variant::full}) {
            ModelConfig cfg;
            cfg.bands = 3;
            cfg.variant = v;
            Model<float> m(cfg, 2);
            const auto in = m.prepare(ep);
            Tape<float> tape;
            const auto out = m.forward(tape, in, Mode::train);
            const auto loss = m.loss(out, in);
            CHECK(std::isfinite(loss.item()));
            tape.backward(loss);
            CHECK(out.layer_probs.size() == (v == Variant::sp || v == Variant::full ? 3u : 1u));
        }
        ModelConfig rel;
        rel.variant = Variant::baseline;
        rel.prototype_baseline = false;
        Model<double> m(rel, 2);
        const auto in = m.prepare(ep);
        Tape<double> tape;
        const auto out = m.forward(tape, in, Mode::eval);
        CHECK(out.edges.size() == 1);
        CHECK(out.layer_probs.size() == 1);
        CHECK(in.stream_count == 1);

        CHECK(variant_from_flags(false, false) == Variant::baseline);
        CHECK(variant_from_flags(true, false) == Variant::sra);
        CHECK(variant_from_flags(false, true) == Variant::sp);
        CHECK(variant_from_flags(true, true) == Variant::full);
    }
    SECTION("end-to-end gradient check in 64-bit") {
        ModelConfig cfg;
        cfg.bands = 2;
        cfg.graph = small_config(2);
        cfg.encoder.widths = {3, 4, 4, 4};
        cfg.encoder.kernel = 3;
        cfg.encoder.layers_per_block = 1;
        Model<double> m(cfg, 3);
        const auto in = m.prepare(ep);
        const auto res = nn::grad_check_params(
            [&](Tape<double>& t) { return m.loss(m.forward(t, in, Mode::train), in); }, m.params());
        CHECK(res.max_rel_error < 1e-3);
    }
}
