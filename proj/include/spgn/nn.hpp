#pragma once

// Parameter ownership, the small set of layers the networks are built from,
// the Adam optimizer, checkpoints and finite-difference gradient checking.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "spgn/diffcore.hpp"
#include "spgn/errors.hpp"

namespace spgn::nn {

using ad::Mode;
using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Owns every parameter and buffer of a model. Addresses are stable for the
/// lifetime of the set, including across moves.
template <class T>
class ParamSet {
public:
    Parameter<T>& add(std::string name, Shape shape, bool trainable = true, T fill = T(0)) {
        auto p = std::make_unique<Parameter<T>>();
        p->name = std::move(name);
        p->value = Tensor<T>(std::move(shape), fill);
        p->trainable = trainable;
        p->zero_grad();
        items_.push_back(std::move(p));
        return *items_.back();
    }

    std::size_t size() const noexcept { return items_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *items_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *items_[i]; }

    Parameter<T>* find(const std::string& name) {
        for (auto& p : items_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    void zero_grad() {
        for (auto& p : items_) p->zero_grad();
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : items_)
            if (p->trainable) n += p->value.size();
        return n;
    }

    /// FNV-1a over names and raw bytes of every value (buffers included).
    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* data, std::size_t bytes) {
            const auto* c = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < bytes; ++i) {
                h ^= c[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& p : items_) {
            mix(p->name.data(), p->name.size());
            mix(p->value.data.data(), p->value.data.size() * sizeof(T));
        }
        return h;
    }

    /// Copies values from another set with identical names and shapes.
    template <class U>
    void assign_from(const ParamSet<U>& other) {
        if (other.size() != size()) throw ContractError("assign_from: parameter count mismatch");
        for (std::size_t i = 0; i < size(); ++i) {
            auto& dst = *items_[i];
            const auto& src = other[i];
            if (dst.name != src.name || dst.value.shape != src.value.shape)
                throw ContractError("assign_from: parameter '" + dst.name + "' does not match '" + src.name + "'");
            for (std::size_t k = 0; k < dst.value.size(); ++k) dst.value.data[k] = static_cast<T>(src.value.data[k]);
        }
    }

private:
    std::vector<std::unique_ptr<Parameter<T>>> items_;
};

template <class T>
void fan_in_uniform(Parameter<T>& p, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : p.value.data) v = static_cast<T>(u(rng));
}

template <class T>
struct Linear {
    Parameter<T>* weight = nullptr;  // (out, in)
    Parameter<T>* bias = nullptr;    // (out)

    Linear() = default;
    Linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
        weight = &ps.add(name + ".weight", {out, in});
        bias = &ps.add(name + ".bias", {out});
        fan_in_uniform(*weight, in, rng);
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
        return ad::linear(x, tape.parameter(*weight), tape.parameter(*bias));
    }
};

template <class T>
struct Conv1d {
    Parameter<T>* weight = nullptr;  // (out, in, k)
    Parameter<T>* bias = nullptr;

    Conv1d() = default;
    Conv1d(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
           std::mt19937_64& rng) {
        weight = &ps.add(name + ".weight", {out, in, kernel});
        bias = &ps.add(name + ".bias", {out});
        fan_in_uniform(*weight, in * kernel, rng);
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
        return ad::conv1d(x, tape.parameter(*weight), tape.parameter(*bias));
    }
};

template <class T>
struct BatchNorm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* running_mean = nullptr;
    Parameter<T>* running_var = nullptr;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm() = default;
    BatchNorm(ParamSet<T>& ps, const std::string& name, std::size_t channels) {
        gamma = &ps.add(name + ".gamma", {channels}, true, T(1));
        beta = &ps.add(name + ".beta", {channels}, true, T(0));
        running_mean = &ps.add(name + ".running_mean", {channels}, false, T(0));
        running_var = &ps.add(name + ".running_var", {channels}, false, T(1));
    }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x, Mode mode) const {
        return ad::batchnorm(x, tape.parameter(*gamma), tape.parameter(*beta),
                             ad::BatchNormState<T>{running_mean, running_var, momentum, eps}, mode);
    }
};

/// Adam with L2 weight decay folded into the gradient.
template <class T>
class Adam {
public:
    Adam(ParamSet<T>& params, double weight_decay = 1e-5, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(params), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_.emplace_back(params[i].value.size(), 0.0);
            v_.emplace_back(params[i].value.size(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.trainable) continue;
            if (p.grad.shape != p.value.shape) p.zero_grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < p.value.size(); ++k) {
                const double g = static_cast<double>(p.grad.data[k]) + wd_ * static_cast<double>(p.value.data[k]);
                m[k] = b1_ * m[k] + (1.0 - b1_) * g;
                v[k] = b2_ * v[k] + (1.0 - b2_) * g * g;
                const double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
                p.value.data[k] = static_cast<T>(static_cast<double>(p.value.data[k]) - update);
            }
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    ParamSet<T>& params_;
    double wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Checkpoint layout:
//   SPGNCKPT 1\n
//   <count>\n
//   per entry: <name> <ndim> <d0> ... \n followed by numel little-endian float32
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& ps) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out << "SPGNCKPT 1\n" << ps.size() << "\n";
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& p = ps[i];
        out << p.name << ' ' << p.value.shape.size();
        for (auto d : p.value.shape) out << ' ' << d;
        out << '\n';
        std::vector<float> raw(p.value.data.begin(), p.value.data.end());
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
    }
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

/// Loads values into an existing set; names and shapes must match exactly.
template <class T>
void load_checkpoint(const std::filesystem::path& path, ParamSet<T>& ps) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    std::string magic;
    int version = 0;
    std::size_t count = 0;
    in >> magic >> version >> count;
    if (magic != "SPGNCKPT" || version != 1) throw Error("not a checkpoint (or unsupported version): " + path.string());
    if (count != ps.size())
        throw Error("checkpoint holds " + std::to_string(count) + " entries, model has " + std::to_string(ps.size()));
    for (std::size_t i = 0; i < count; ++i) {
        std::string name;
        std::size_t nd = 0;
        in >> name >> nd;
        Shape shape(nd);
        for (auto& d : shape) in >> d;
        in.get();
        auto& p = ps[i];
        if (!in || name != p.name || shape != p.value.shape)
            throw Error("checkpoint entry '" + name + "' " + ad::shape_str(shape) + " does not match '" + p.name +
                        "' " + ad::shape_str(p.value.shape));
        std::vector<float> raw(ad::numel(shape));
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
        if (!in) throw Error("truncated checkpoint " + path.string());
        for (std::size_t k = 0; k < raw.size(); ++k) p.value.data[k] = static_cast<T>(raw[k]);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckOptions {
    double step = 1e-4;
    /// Coordinates sampled per input tensor; 0 checks every coordinate.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
    /// Denominator floor of the relative error.
    double floor = 1e-6;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (max_coords == 0 || max_coords >= n) return idx;
    for (std::size_t i = 0; i < max_coords; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(max_coords);
    return idx;
}

inline void accumulate(GradCheckResult& r, double analytic, double numeric, double floor) {
    const double abs_err = std::abs(analytic - numeric);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
    ++r.checked;
}

} // namespace detail

/// Compares reverse-mode gradients of a scalar function of `inputs` against
/// central differences. `fn(tape, vars)` must return a scalar Var.
template <class Fn>
GradCheckResult grad_check(Fn&& fn, std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {}) {
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& in : inputs) vars.push_back(tape.variable(in));
        auto loss = fn(tape, std::span<const Var<double>>(vars));
        tape.backward(loss);
        for (const auto& v : vars) analytic.push_back(tape.grad(v));
    }
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& in : xs) vars.push_back(tape.constant(in));
        return fn(tape, std::span<const Var<double>>(vars)).item();
    };
    GradCheckResult res;
    std::mt19937_64 rng(opt.seed);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t k : detail::pick_coords(inputs[i].size(), opt.max_coords, rng)) {
            const double orig = inputs[i].data[k];
            inputs[i].data[k] = orig + opt.step;
            const double fp = eval(inputs);
            inputs[i].data[k] = orig - opt.step;
            const double fm = eval(inputs);
            inputs[i].data[k] = orig;
            detail::accumulate(res, analytic[i].data[k], (fp - fm) / (2.0 * opt.step), opt.floor);
        }
    }
    return res;
}

/// Same check against the trainable parameters of a set. `fn(tape)` builds
/// the loss reading parameters through tape.parameter().
template <class Fn>
GradCheckResult grad_check_params(Fn&& fn, ParamSet<double>& params, const GradCheckOptions& opt = {}) {
    params.zero_grad();
    {
        Tape<double> tape;
        auto loss = fn(tape);
        tape.backward(loss);
    }
    std::vector<Tensor<double>> analytic;
    for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params[i].grad);

    // Buffers (running statistics) are restored around every probe so each
    // evaluation sees identical state.
    std::vector<Tensor<double>> buffers;
    for (std::size_t i = 0; i < params.size(); ++i) buffers.push_back(params[i].value);
    auto eval = [&]() {
        Tape<double> tape;
        const double v = fn(tape).item();
        for (std::size_t i = 0; i < params.size(); ++i)
            if (!params[i].trainable) params[i].value = buffers[i];
        return v;
    };
    GradCheckResult res;
    std::mt19937_64 rng(opt.seed);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable) continue;
        for (std::size_t k : detail::pick_coords(p.value.size(), opt.max_coords, rng)) {
            const double orig = p.value.data[k];
            p.value.data[k] = orig + opt.step;
            const double fp = eval();
            p.value.data[k] = orig - opt.step;
            const double fm = eval();
            p.value.data[k] = orig;
            detail::accumulate(res, analytic[i].data[k], (fp - fm) / (2.0 * opt.step), opt.floor);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!params[i].trainable) params[i].value = buffers[i];
    return res;
}

} // namespace spgn::nn
