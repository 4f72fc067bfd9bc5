#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "spgn/diffcore.hpp"
#include "spgn/nn.hpp"

using namespace spgn;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using Vars = std::span<const Var<double>>;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = u(rng);
    return t;
}

// Values bounded away from zero so kinks and poles stay out of the FD stencil.
Tensor<double> away_from_zero(Shape s, std::uint64_t seed) {
    auto t = random_tensor(std::move(s), seed, 0.2, 1.5);
    std::mt19937_64 rng(seed + 1);
    for (auto& v : t.data)
        if (rng() & 1) v = -v;
    return t;
}

// Reduces an op output to a scalar with fixed random weights so every output
// coordinate carries a distinct gradient.
Var<double> readout(Tape<double>& tape, const Var<double>& y) {
    return ad::sum(ad::mul(y, tape.constant(random_tensor(y.shape(), 777))));
}

double check(const std::function<Var<double>(Tape<double>&, Vars)>& fn, std::vector<Tensor<double>> inputs) {
    return nn::grad_check([&](Tape<double>& t, Vars v) { return readout(t, fn(t, v)); }, std::move(inputs))
        .max_rel_error;
}

} // namespace

TEST_CASE("forward definitions") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>(Shape{3}, std::vector<double>{-1, 0, 2}));
    CHECK(ad::relu(x).value().data == ad::Buffer<double>{0, 0, 2});
    CHECK(ad::sigmoid(tape.constant(Tensor<double>::scalar(0.0))).item() == 0.5);

    SECTION("identity kernel keeps the signal") {
        auto sig = random_tensor({1, 1, 8}, 1);
        Tensor<double> w(Shape{1, 1, 3});
        w.data[1] = 1.0;
        auto y = ad::conv1d(tape.constant(sig), tape.constant(w), tape.constant(Tensor<double>(Shape{1})));
        CHECK(y.value() == sig);
    }
    SECTION("softmax rows sum to one with entries in (0, 1)") {
        auto s = ad::softmax(tape.constant(random_tensor({7, 5}, 2, -20, 20)), 1);
        for (std::size_t r = 0; r < 7; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 5; ++c) {
                const double p = s.value().data[r * 5 + c];
                CHECK(p > 0.0);
                CHECK(p < 1.0);
                sum += p;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
    SECTION("shape errors name the op and both shapes") {
        auto a = tape.constant(Tensor<double>(Shape{2, 3}));
        auto b = tape.constant(Tensor<double>(Shape{4, 5}));
        try {
            ad::matmul(a, b);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("matmul") != std::string::npos);
            CHECK(msg.find("[2,3]") != std::string::npos);
            CHECK(msg.find("[4,5]") != std::string::npos);
        }
        CHECK_THROWS_AS(ad::add(a, b), ShapeError);
        CHECK_THROWS_AS(ad::concat(std::vector<Var<double>>{a, b}, 0), ShapeError);
    }
}

TEST_CASE("backward on hand-derived examples") {
    SECTION("sum of squares") {
        Tape<double> tape;
        auto x = tape.variable(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
        tape.backward(ad::sum(ad::square(x)));
        CHECK(tape.grad(x).data == ad::Buffer<double>{2, 4, 6});
    }
    SECTION("sigmoid times four at zero") {
        Tape<double> tape;
        auto w = tape.variable(Tensor<double>::scalar(0.0));
        tape.backward(ad::scale(ad::sigmoid(w), 4.0));
        CHECK(tape.grad(w).data[0] == Catch::Approx(1.0).epsilon(1e-15));
    }
    SECTION("unreachable leaves get zero gradient") {
        Tape<double> tape;
        auto x = tape.variable(Tensor<double>(Shape{2}, 1.0));
        auto y = tape.variable(Tensor<double>(Shape{2}, 3.0));
        tape.backward(ad::sum(x));
        CHECK(tape.grad(y).data == ad::Buffer<double>{0, 0});
    }
    SECTION("non-scalar loss") {
        Tape<double> tape;
        auto x = tape.variable(Tensor<double>(Shape{2}, 1.0));
        CHECK_THROWS_AS(tape.backward(ad::square(x)), ContractError);
    }
    SECTION("parameter gradients accumulate across backward calls until zeroed") {
        nn::ParamSet<double> ps;
        auto& p = ps.add("p", {2}, true, 1.5);
        for (int i = 0; i < 2; ++i) {
            Tape<double> tape;
            tape.backward(ad::sum(ad::square(tape.parameter(p))));
        }
        CHECK(p.grad.data == ad::Buffer<double>{6, 6});
        ps.zero_grad();
        CHECK(p.grad.data == ad::Buffer<double>{0, 0});
    }
}

TEST_CASE("every op matches central differences") {
    constexpr double tol = 1e-4;
    const auto a23 = random_tensor({2, 3}, 10);
    const auto b23 = random_tensor({2, 3}, 11);

    CHECK(check([](auto&, Vars v) { return ad::add(v[0], v[1]); }, {a23, b23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::sub(v[0], v[1]); }, {a23, b23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::mul(v[0], v[1]); }, {a23, b23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::div(v[0], v[1]); }, {a23, away_from_zero({2, 3}, 12)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::add(v[0], v[1]); }, {a23, random_tensor({1, 3}, 13)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::mul(v[0], v[1]); }, {random_tensor({2, 1, 3}, 14), random_tensor({1, 4, 3}, 15)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::square(v[0]); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::scale(v[0], 2.5); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::add_scalar(v[0], -0.7); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::relu(v[0]); }, {away_from_zero({2, 3}, 16)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::sigmoid(v[0]); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::exp(v[0]); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::log(v[0]); }, {random_tensor({2, 3}, 17, 0.3, 2.0)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::sqrt(v[0]); }, {random_tensor({2, 3}, 18, 0.3, 2.0)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::reshape(v[0], Shape{3, 2}); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::transpose(v[0]); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::slice(v[0], 1, 1, 2); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::concat(std::vector<Var<double>>{v[0], v[1]}, 0); }, {a23, b23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::concat(std::vector<Var<double>>{v[0], v[1]}, 1); },
                {a23, random_tensor({2, 4}, 19)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::sum(v[0]); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::sum(v[0], 0); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::sum(v[0], 1, true); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::mean(v[0]); }, {a23}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::mean(v[0], 1); }, {random_tensor({2, 3, 4}, 20)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::softmax(v[0], 1); }, {random_tensor({3, 4}, 21, -2, 2)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::softmax(v[0], 0); }, {random_tensor({3, 4}, 22, -2, 2)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::cross_entropy(ad::softmax(v[0], 1), std::vector<int>{2, 0, 1}); },
                {random_tensor({3, 4}, 23, -2, 2)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::matmul(v[0], v[1]); }, {a23, random_tensor({3, 4}, 24)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::linear(v[0], v[1], v[2]); },
                {random_tensor({5, 3}, 25), random_tensor({4, 3}, 26), random_tensor({4}, 27)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::conv1d(v[0], v[1], v[2]); },
                {random_tensor({2, 3, 9}, 28), random_tensor({4, 3, 5}, 29), random_tensor({4}, 30)}) < tol);
    CHECK(check([](auto&, Vars v) { return ad::avg_pool2(v[0]); }, {random_tensor({2, 3, 9}, 31)}) < tol);

    SECTION("batchnorm in train mode, batch of 4") {
        nn::ParamSet<double> ps;
        auto& rm = ps.add("rm", {3}, false, 0.0);
        auto& rv = ps.add("rv", {3}, false, 1.0);
        const ad::BatchNormState<double> st{&rm, &rv};
        CHECK(check([&](auto&, Vars v) { return ad::batchnorm(v[0], v[1], v[2], st, ad::Mode::train); },
                    {random_tensor({4, 3}, 32), random_tensor({3}, 33, 0.5, 1.5), random_tensor({3}, 34)}) < tol);
        CHECK(check([&](auto&, Vars v) { return ad::batchnorm(v[0], v[1], v[2], st, ad::Mode::train); },
                    {random_tensor({4, 3, 6}, 35), random_tensor({3}, 36, 0.5, 1.5), random_tensor({3}, 37)}) < tol);
        CHECK(check([&](auto&, Vars v) { return ad::batchnorm(v[0], v[1], v[2], st, ad::Mode::eval); },
                    {random_tensor({4, 3}, 38), random_tensor({3}, 39, 0.5, 1.5), random_tensor({3}, 40)}) < tol);
    }
}

TEST_CASE("linear maps check exactly") {
    const double err = nn::grad_check(
        [](Tape<double>& t, Vars v) {
            return ad::sum(ad::scale(ad::matmul(t.constant(random_tensor({2, 4}, 41)), v[0]), 3.0));
        },
        {random_tensor({4, 3}, 42)}).max_rel_error;
    CHECK(err < 1e-10);
}

TEST_CASE("gradient linearity") {
    const auto x0 = random_tensor({3, 4}, 50);
    auto grad_of = [&](const std::function<Var<double>(Var<double>)>& f) {
        Tape<double> tape;
        auto x = tape.variable(x0);
        tape.backward(f(x));
        return tape.grad(x);
    };
    auto f = [](Var<double> x) { return ad::sum(ad::sigmoid(ad::square(x))); };
    auto g = [](Var<double> x) { return ad::sum(ad::exp(ad::scale(x, 0.5))); };
    const double a = 1.7, b = -0.6;
    const auto gf = grad_of(f), gg = grad_of(g);
    const auto gc = grad_of([&](Var<double> x) { return ad::add(ad::scale(f(x), a), ad::scale(g(x), b)); });
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(gc.data[i] - (a * gf.data[i] + b * gg.data[i])) < 1e-10);
}

TEST_CASE("identical tapes give bitwise-identical gradients") {
    auto run = [] {
        Tape<float> tape;
        auto x = tape.variable(random_tensor({6, 16}, 60).cast<float>());
        auto w = tape.variable(random_tensor({8, 16}, 61).cast<float>());
        auto y = ad::softmax(ad::linear(x, w, tape.constant(Tensor<float>(Shape{8}))), 1);
        tape.backward(ad::sum(ad::square(y)));
        return std::make_pair(tape.grad(x), tape.grad(w));
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoint round-trip") {
    std::mt19937_64 rng(70);
    nn::ParamSet<float> a;
    nn::Linear<float>(a, "fc", 5, 3, rng);
    nn::BatchNorm<float>(a, "bn", 3);
    for (auto& v : a.find("bn.running_mean")->value.data) v = 0.25f;
    const auto path = std::filesystem::temp_directory_path() / "spgn_ckpt_test.bin";
    nn::save_checkpoint(path, a);

    nn::ParamSet<float> b;
    std::mt19937_64 other(71);
    nn::Linear<float>(b, "fc", 5, 3, other);
    nn::BatchNorm<float>(b, "bn", 3);
    CHECK(a.checksum() != b.checksum());
    nn::load_checkpoint(path, b);
    CHECK(a.checksum() == b.checksum());

    nn::ParamSet<float> wrong;
    nn::Linear<float>(wrong, "fc", 5, 4, other);
    nn::BatchNorm<float>(wrong, "bn", 3);
    CHECK_THROWS_AS(nn::load_checkpoint(path, wrong), Error);
    std::filesystem::remove(path);
}

TEST_CASE("Adam moves a quadratic toward its minimum") {
    nn::ParamSet<double> ps;
    auto& p = ps.add("p", {2}, true, 3.0);
    nn::Adam<double> opt(ps, 0.0);
    for (int i = 0; i < 500; ++i) {
        ps.zero_grad();
        Tape<double> tape;
        tape.backward(ad::sum(ad::square(tape.parameter(p))));
        opt.step(0.05);
    }
    for (double v : p.value.data) CHECK(std::abs(v) < 0.05);
}
