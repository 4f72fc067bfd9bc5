#pragma once

// Define-by-run reverse-mode automatic differentiation over dense arrays.
//
// A Tape records every forward op together with a closure that pushes the
// output gradient back to its inputs. Nodes live in a deque so references to
// recorded values stay valid while the tape grows.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "spgn/errors.hpp"

namespace spgn::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// 64-byte aligned storage. Eigen picks vectorization paths from buffer
/// alignment, so fixed alignment keeps results independent of heap history.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
        return true;
    }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) { check(); }
    Tensor(Shape s, const std::vector<T>& d) : shape(std::move(s)), data(d.begin(), d.end()) { check(); }

    void check() const {
        if (data.size() != numel(shape))
            throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, Buffer<T>{v}); }

    std::size_t size() const noexcept { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape, Buffer<U>(data.begin(), data.end()));
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

enum class Mode { train, eval };

/// A named array owned outside any tape. Non-trainable parameters hold
/// buffers such as batch-norm running statistics.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    void zero_grad() {
        if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
        else std::fill(grad.data.begin(), grad.data.end(), T(0));
    }
};

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }
    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape; }
    std::size_t size() const { return value().size(); }
    T item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return value().data[0];
    }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

    /// Leaf whose gradient is kept on the tape (read back with grad()).
    Var<T> variable(Tensor<T> value) { return push(std::move(value), true, nullptr); }

    /// Leaf bound to a Parameter; backward() accumulates into param.grad.
    Var<T> parameter(Parameter<T>& p) { return push(p.value, p.trainable, &p); }

    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
        bool needs = false;
        for (const auto& v : inputs) {
            if (&v.tape() != this) throw ContractError("op mixes variables from different tapes");
            needs = needs || nodes_[v.id()].requires_grad;
        }
        auto var = push(std::move(value), needs, nullptr);
        if (needs) nodes_.back().backward = std::move(fn);
        return var;
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient accumulator for a node, allocated (zeroed) on first use.
    Buffer<T>& grad_buffer(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    const Buffer<T>& output_grad(std::size_t id) const { return nodes_[id].grad; }

    /// Reverse sweep from a scalar loss. Each recorded op runs at most once.
    void backward(const Var<T>& loss) {
        if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
        if (loss.size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        for (auto& n : nodes_) n.grad.clear();
        if (!nodes_[loss.id()].requires_grad) return;
        grad_buffer(loss.id())[0] = T(1);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param) {
                if (n.param->grad.shape != n.param->value.shape) n.param->zero_grad();
                auto& g = n.param->grad.data;
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
            }
        }
    }

    /// Gradient of the last backward() w.r.t. a node; zeros when unreachable.
    Tensor<T> grad(const Var<T>& v) const {
        const auto& n = nodes_.at(v.id());
        if (n.grad.empty()) return Tensor<T>(n.value.shape);
        return Tensor<T>(n.value.shape, n.grad);
    }

private:
    struct Node {
        Tensor<T> value;
        Buffer<T> grad;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
    };

    Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param) {
        nodes_.push_back(Node{std::move(value), {}, {}, param, requires_grad});
        return Var<T>(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise ops with broadcasting

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = da == 1 ? db : da;
    }
    return out;
}

// Strides of `in` laid against `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t i = in.size() - 1 - k;
        const std::size_t o = out.size() - 1 - k;
        st[o] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    return st;
}

template <class F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t n = numel(out);
    if (n == 0) return;
    const std::size_t nd = out.size();
    if (nd == 0) {
        f(0, 0, 0);
        return;
    }
    const std::size_t inner = out[nd - 1];
    const std::size_t a_in = sa[nd - 1], b_in = sb[nd - 1];
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0, ib = 0, oi = 0;
    for (std::size_t o = 0, outer = n / inner; o < outer; ++o) {
        std::size_t pa = ia, pb = ib;
        for (std::size_t k = 0; k < inner; ++k, ++oi, pa += a_in, pb += b_in) f(oi, pa, pb);
        for (std::size_t d = nd - 1; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { add, sub, mul, div };

template <class T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op, const char* name) {
    auto& tape = a.tape();
    const auto& av = a.value();
    const auto& bv = b.value();
    const bool same = av.shape == bv.shape;
    const Shape out_shape = same ? av.shape : broadcast_shape(av.shape, bv.shape, name);
    const auto sa = broadcast_strides(av.shape, out_shape);
    const auto sb = broadcast_strides(bv.shape, out_shape);
    Tensor<T> out(out_shape);
    auto kernel = [&](auto&& fn) {
        if (same)
            for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = fn(av.data[i], bv.data[i]);
        else
            broadcast_loop(out_shape, sa, sb,
                           [&](std::size_t o, std::size_t i, std::size_t j) { out.data[o] = fn(av.data[i], bv.data[j]); });
    };
    switch (op) {
    case BinOp::add: kernel([](T x, T y) { return x + y; }); break;
    case BinOp::sub: kernel([](T x, T y) { return x - y; }); break;
    case BinOp::mul: kernel([](T x, T y) { return x * y; }); break;
    case BinOp::div: kernel([](T x, T y) { return x / y; }); break;
    }
    const std::size_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        const auto& x = t.value(ia).data;
        const auto& y = t.value(ib).data;
        const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
        Buffer<T>* ga = ga_on ? &t.grad_buffer(ia) : nullptr;
        Buffer<T>* gb = gb_on ? &t.grad_buffer(ib) : nullptr;
        broadcast_loop(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
            const T go = g[o];
            switch (op) {
            case BinOp::add:
                if (ga) (*ga)[i] += go;
                if (gb) (*gb)[j] += go;
                break;
            case BinOp::sub:
                if (ga) (*ga)[i] += go;
                if (gb) (*gb)[j] -= go;
                break;
            case BinOp::mul:
                if (ga) (*ga)[i] += go * y[j];
                if (gb) (*gb)[j] += go * x[i];
                break;
            case BinOp::div:
                if (ga) (*ga)[i] += go / y[j];
                if (gb) (*gb)[j] -= go * x[i] / (y[j] * y[j]);
                break;
            }
        });
    });
}

// y = f(x) with dy/dx = df(x, y).
template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
    const auto& av = a.value();
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(av.data[i]);
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        const auto& x = t.value(ia).data;
        const auto& y = t.value(self).data;
        auto& gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
    });
}

// Decomposes a shape around `axis` into (outer, extent, inner).
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

} // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) { return detail::binary(a, b, detail::BinOp::add, "add"); }
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) { return detail::binary(a, b, detail::BinOp::sub, "sub"); }
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) { return detail::binary(a, b, detail::BinOp::mul, "mul"); }
template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) { return detail::binary(a, b, detail::BinOp::div, "div"); }

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    return detail::unary(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}
template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
    return detail::unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}
template <class T>
Var<T> neg(const Var<T>& a) { return scale(a, T(-1)); }
template <class T>
Var<T> square(const Var<T>& a) {
    return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <class T>
Var<T> relu(const Var<T>& a) {
    return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <class T>
Var<T> sigmoid(const Var<T>& a) {
    return detail::unary(
        a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Var<T> exp(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
/// log(max(x, floor)); zero gradient where clamped.
template <class T>
Var<T> log(const Var<T>& a, T floor = T(1e-12)) {
    return detail::unary(
        a, [floor](T x) { return std::log(std::max(x, floor)); },
        [floor](T x, T) { return x > floor ? T(1) / x : T(0); });
}
/// sqrt(x + eps).
template <class T>
Var<T> sqrt(const Var<T>& a, T eps = T(0)) {
    return detail::unary(a, [eps](T x) { return std::sqrt(x + eps); }, [](T, T y) { return T(0.5) / y; });
}

// ---------------------------------------------------------------------------
// Shape ops

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor<T> out(std::move(shape), a.value().data);
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        auto& gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
        if (!ok) throw ShapeError("concat: " + shape_str(s0) + " vs " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    std::size_t outer, extent, inner;
    detail::axis_split(out_shape, axis, outer, extent, inner);
    Tensor<T> out(out_shape);
    std::vector<std::size_t> ids, widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[axis] * inner;
        const auto& src = p.value().data;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                        out.data.begin() + static_cast<std::ptrdiff_t>(o * extent * inner + offset));
        offset += w;
        ids.push_back(p.id());
        widths.push_back(w);
    }
    const std::size_t row = extent * inner;
    return parts[0].tape().record(std::move(out), std::span<const Var<T>>(parts), [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                auto& gx = t.grad_buffer(ids[k]);
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < widths[k]; ++i) gx[o * widths[k] + i] += g[o * row + off + i];
            }
            off += widths[k];
        }
    });
}

/// Elements [start, start + len) along `axis`.
template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = a.shape();
    if (axis >= s.size() || start + len > s[axis])
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer, extent, inner;
    detail::axis_split(s, axis, outer, extent, inner);
    Shape out_shape = s;
    out_shape[axis] = len;
    Tensor<T> out(out_shape);
    const auto& src = a.value().data;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), len * inner,
                    out.data.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        auto& gx = t.grad_buffer(ia);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i) gx[(o * extent + start) * inner + i] += g[o * len * inner + i];
    });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    const Shape& s = a.shape();
    if (s.size() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(s));
    const std::size_t r = s[0], c = s[1];
    Tensor<T> out(Shape{c, r});
    const auto& x = a.value().data;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = x[i * c + j];
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        auto& gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
    T acc = T(0);
    for (T v : a.value().data) acc += v;
    const std::size_t ia = a.id();
    return a.tape().record(Tensor<T>::scalar(acc), {a}, [=](Tape<T>& t, std::size_t self) {
        const T g = t.output_grad(self)[0];
        for (auto& v : t.grad_buffer(ia)) v += g;
    });
}

template <class T>
Var<T> sum(const Var<T>& a, std::size_t axis, bool keepdim = false) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw ShapeError("sum: axis " + std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer, extent, inner;
    detail::axis_split(s, axis, outer, extent, inner);
    Shape out_shape = s;
    if (keepdim) out_shape[axis] = 1;
    else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(out_shape);
    const auto& x = a.value().data;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i) out.data[o * inner + i] += x[(o * extent + e) * inner + i];
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        auto& gx = t.grad_buffer(ia);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t e = 0; e < extent; ++e)
                for (std::size_t i = 0; i < inner; ++i) gx[(o * extent + e) * inner + i] += g[o * inner + i];
    });
}

template <class T>
Var<T> mean(const Var<T>& a) { return scale(sum(a), T(1) / static_cast<T>(a.size())); }

template <class T>
Var<T> mean(const Var<T>& a, std::size_t axis, bool keepdim = false) {
    if (axis >= a.shape().size()) throw ShapeError("mean: axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    const T n = static_cast<T>(a.shape()[axis]);
    return scale(sum(a, axis, keepdim), T(1) / n);
}

template <class T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw ShapeError("softmax: axis " + std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer, extent, inner;
    detail::axis_split(s, axis, outer, extent, inner);
    Tensor<T> out(s);
    const auto& x = a.value().data;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            T mx = x[o * extent * inner + i];
            for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, x[(o * extent + e) * inner + i]);
            T z = T(0);
            for (std::size_t e = 0; e < extent; ++e) {
                const std::size_t k = (o * extent + e) * inner + i;
                out.data[k] = std::exp(x[k] - mx);
                z += out.data[k];
            }
            for (std::size_t e = 0; e < extent; ++e) out.data[(o * extent + e) * inner + i] /= z;
        }
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        const auto& y = t.value(self).data;
        auto& gx = t.grad_buffer(ia);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                T dot = T(0);
                for (std::size_t e = 0; e < extent; ++e) {
                    const std::size_t k = (o * extent + e) * inner + i;
                    dot += g[k] * y[k];
                }
                for (std::size_t e = 0; e < extent; ++e) {
                    const std::size_t k = (o * extent + e) * inner + i;
                    gx[k] += y[k] * (g[k] - dot);
                }
            }
    });
}

/// Mean negative log-likelihood of `labels` under row-wise probabilities
/// (M, N). Probabilities are clamped at `floor` before the logarithm.
template <class T>
Var<T> cross_entropy(const Var<T>& probs, const std::vector<int>& labels, T floor = T(1e-12)) {
    const Shape& s = probs.shape();
    if (s.size() != 2 || s[0] != labels.size())
        throw ShapeError("cross_entropy: probabilities " + shape_str(s) + " for " + std::to_string(labels.size()) +
                         " labels");
    const std::size_t m = s[0], n = s[1];
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= n) throw ShapeError("cross_entropy: label out of range");
    const auto& p = probs.value().data;
    T acc = T(0);
    for (std::size_t i = 0; i < m; ++i) acc -= std::log(std::max(p[i * n + static_cast<std::size_t>(labels[i])], floor));
    const std::size_t ip = probs.id();
    return probs.tape().record(Tensor<T>::scalar(acc / static_cast<T>(m)), {probs}, [=](Tape<T>& t, std::size_t self) {
        const T g = t.output_grad(self)[0];
        const auto& pv = t.value(ip).data;
        auto& gp = t.grad_buffer(ip);
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t k = i * n + static_cast<std::size_t>(labels[i]);
            if (pv[k] > floor) gp[k] -= g / (pv[k] * static_cast<T>(m));
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: " + shape_str(sa) + " x " + shape_str(sb));
    const auto m = static_cast<Eigen::Index>(sa[0]), k = static_cast<Eigen::Index>(sa[1]),
               n = static_cast<Eigen::Index>(sb[1]);
    Tensor<T> out(Shape{sa[0], sb[1]});
    detail::MapMat<T>(out.data.data(), m, n).noalias() =
        detail::CMapMat<T>(a.value().data.data(), m, k) * detail::CMapMat<T>(b.value().data.data(), k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
        detail::CMapMat<T> g(t.output_grad(self).data(), m, n);
        if (t.requires_grad(ia))
            detail::MapMat<T>(t.grad_buffer(ia).data(), m, k).noalias() +=
                g * detail::CMapMat<T>(t.value(ib).data.data(), k, n).transpose();
        if (t.requires_grad(ib))
            detail::MapMat<T>(t.grad_buffer(ib).data(), k, n).noalias() +=
                detail::CMapMat<T>(t.value(ia).data.data(), m, k).transpose() * g;
    });
}

/// x (B, in) . W^T + b with W (out, in), b (out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1] || b.shape() != Shape{sw[0]})
        throw ShapeError("linear: x " + shape_str(sx) + ", W " + shape_str(sw) + ", b " + shape_str(b.shape()));
    const auto bsz = static_cast<Eigen::Index>(sx[0]), in = static_cast<Eigen::Index>(sx[1]),
               outd = static_cast<Eigen::Index>(sw[0]);
    Tensor<T> out(Shape{sx[0], sw[0]});
    detail::MapMat<T> y(out.data.data(), bsz, outd);
    y.noalias() = detail::CMapMat<T>(x.value().data.data(), bsz, in) *
                  detail::CMapMat<T>(w.value().data.data(), outd, in).transpose();
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data.data(), outd);
    const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
    return x.tape().record(std::move(out), {x, w, b}, [=](Tape<T>& t, std::size_t self) {
        detail::CMapMat<T> g(t.output_grad(self).data(), bsz, outd);
        if (t.requires_grad(ix))
            detail::MapMat<T>(t.grad_buffer(ix).data(), bsz, in).noalias() +=
                g * detail::CMapMat<T>(t.value(iw).data.data(), outd, in);
        if (t.requires_grad(iw))
            detail::MapMat<T>(t.grad_buffer(iw).data(), outd, in).noalias() +=
                g.transpose() * detail::CMapMat<T>(t.value(ix).data.data(), bsz, in);
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), outd) += g.colwise().sum();
        }
    });
}

/// Stride-1 same-padded cross-correlation. x (B, Cin, L), w (Cout, Cin, K), b (Cout).
template <class T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 3 || sw.size() != 3 || sx[1] != sw[1] || b.shape() != Shape{sw[0]})
        throw ShapeError("conv1d: x " + shape_str(sx) + ", w " + shape_str(sw) + ", b " + shape_str(b.shape()));
    const std::size_t B = sx[0], Cin = sx[1], L = sx[2], Cout = sw[0], K = sw[2];
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((K - 1) / 2);
    const std::size_t rows = Cin * K, cols = B * L;

    // im2col: column (b, t) holds the receptive field of output position t.
    auto col = std::make_shared<Buffer<T>>(rows * cols, T(0));
    const auto& xv = x.value().data;
    for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t k = 0; k < K; ++k) {
            T* dst = col->data() + (ci * K + k) * cols;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
            for (std::size_t bi = 0; bi < B; ++bi) {
                const T* src = xv.data() + (bi * Cin + ci) * L;
                for (std::size_t t = 0; t < L; ++t) {
                    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) + shift;
                    if (s >= 0 && s < static_cast<std::ptrdiff_t>(L)) dst[bi * L + t] = src[s];
                }
            }
        }
    detail::RowMat<T> prod = detail::CMapMat<T>(w.value().data.data(), static_cast<Eigen::Index>(Cout),
                                                static_cast<Eigen::Index>(rows)) *
                             detail::CMapMat<T>(col->data(), static_cast<Eigen::Index>(rows),
                                                static_cast<Eigen::Index>(cols));
    Tensor<T> out(Shape{B, Cout, L});
    const auto& bv = b.value().data;
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t co = 0; co < Cout; ++co) {
            T* dst = out.data.data() + (bi * Cout + co) * L;
            const T* src = prod.data() + co * cols + bi * L;
            for (std::size_t t = 0; t < L; ++t) dst[t] = src[t] + bv[co];
        }

    const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
    return x.tape().record(std::move(out), {x, w, b}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        detail::RowMat<T> gm(static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(cols));
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t co = 0; co < Cout; ++co)
                for (std::size_t tt = 0; tt < L; ++tt)
                    gm(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(bi * L + tt)) = g[(bi * Cout + co) * L + tt];
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t co = 0; co < Cout; ++co) gb[co] += gm.row(static_cast<Eigen::Index>(co)).sum();
        }
        detail::CMapMat<T> colm(col->data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (t.requires_grad(iw))
            detail::MapMat<T>(t.grad_buffer(iw).data(), static_cast<Eigen::Index>(Cout),
                              static_cast<Eigen::Index>(rows))
                .noalias() += gm * colm.transpose();
        if (t.requires_grad(ix)) {
            detail::RowMat<T> gcol = detail::CMapMat<T>(t.value(iw).data.data(), static_cast<Eigen::Index>(Cout),
                                                        static_cast<Eigen::Index>(rows))
                                         .transpose() *
                                     gm;
            auto& gx = t.grad_buffer(ix);
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t k = 0; k < K; ++k) {
                    const T* src = gcol.data() + (ci * K + k) * cols;
                    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
                    for (std::size_t bi = 0; bi < B; ++bi) {
                        T* dst = gx.data() + (bi * Cin + ci) * L;
                        for (std::size_t tt = 0; tt < L; ++tt) {
                            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(tt) + shift;
                            if (s >= 0 && s < static_cast<std::ptrdiff_t>(L)) dst[s] += src[bi * L + tt];
                        }
                    }
                }
        }
    });
}

/// Mean pooling with window and stride 2 over the last axis of (B, C, L);
/// output length floor(L/2), or 1 when L == 1.
template <class T>
Var<T> avg_pool2(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("avg_pool2: expected (B, C, L), got " + shape_str(s));
    const std::size_t rows = s[0] * s[1], L = s[2];
    if (L < 2) return reshape(x, s);
    const std::size_t Lo = L / 2;
    Tensor<T> out(Shape{s[0], s[1], Lo});
    const auto& xv = x.value().data;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < Lo; ++t)
            out.data[r * Lo + t] = (xv[r * L + 2 * t] + xv[r * L + 2 * t + 1]) * T(0.5);
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t tt = 0; tt < Lo; ++tt) {
                gx[r * L + 2 * tt] += g[r * Lo + tt] * T(0.5);
                gx[r * L + 2 * tt + 1] += g[r * Lo + tt] * T(0.5);
            }
    });
}

/// Running statistics carried by a batch-norm layer between passes.
template <class T>
struct BatchNormState {
    Parameter<T>* running_mean = nullptr;
    Parameter<T>* running_var = nullptr;
    T momentum = T(0.1);
    T eps = T(1e-5);
};

/// Per-channel normalization of (B, C) or (B, C, L). Train mode normalizes
/// with batch statistics and updates the running estimates; eval mode uses
/// the running estimates.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T> state, Mode mode) {
    const Shape& s = x.shape();
    if ((s.size() != 2 && s.size() != 3) || gamma.shape() != Shape{s[1]} || beta.shape() != Shape{s[1]})
        throw ShapeError("batchnorm: x " + shape_str(s) + ", gamma " + shape_str(gamma.shape()));
    const std::size_t B = s[0], C = s[1], L = s.size() == 3 ? s[2] : 1;
    const std::size_t n = B * L;
    const auto& xv = x.value().data;
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;

    Buffer<T> mu(C, T(0)), invstd(C, T(0));
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            T m = T(0);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t t = 0; t < L; ++t) m += xv[(bi * C + c) * L + t];
            m /= static_cast<T>(n);
            T v = T(0);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t t = 0; t < L; ++t) {
                    const T d = xv[(bi * C + c) * L + t] - m;
                    v += d * d;
                }
            const T var = v / static_cast<T>(n);
            mu[c] = m;
            invstd[c] = T(1) / std::sqrt(var + state.eps);
            if (state.running_mean && state.running_var) {
                const T unbiased = n > 1 ? v / static_cast<T>(n - 1) : var;
                auto& rm = state.running_mean->value.data[c];
                auto& rv = state.running_var->value.data[c];
                rm = (T(1) - state.momentum) * rm + state.momentum * m;
                rv = (T(1) - state.momentum) * rv + state.momentum * unbiased;
            }
        }
    } else {
        if (!state.running_mean || !state.running_var) throw ContractError("batchnorm: eval mode needs running stats");
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = state.running_mean->value.data[c];
            invstd[c] = T(1) / std::sqrt(state.running_var->value.data[c] + state.eps);
        }
    }

    auto xhat = std::make_shared<Buffer<T>>(xv.size());
    Tensor<T> out(s);
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < L; ++t) {
                const std::size_t k = (bi * C + c) * L + t;
                (*xhat)[k] = (xv[k] - mu[c]) * invstd[c];
                out.data[k] = gv[c] * (*xhat)[k] + bv[c];
            }

    const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();
    const bool batch_stats = mode == Mode::train;
    return x.tape().record(std::move(out), {x, gamma, beta}, [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.output_grad(self);
        const auto& gam = t.value(ig).data;
        Buffer<T> sum_g(C, T(0)), sum_gx(C, T(0));
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t tt = 0; tt < L; ++tt) {
                    const std::size_t k = (bi * C + c) * L + tt;
                    sum_g[c] += g[k];
                    sum_gx[c] += g[k] * (*xhat)[k];
                }
        if (t.requires_grad(ig)) {
            auto& gg = t.grad_buffer(ig);
            for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (t.requires_grad(ibeta)) {
            auto& gb = t.grad_buffer(ibeta);
            for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (t.requires_grad(ix)) {
            auto& gx = t.grad_buffer(ix);
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t tt = 0; tt < L; ++tt) {
                        const std::size_t k = (bi * C + c) * L + tt;
                        if (batch_stats)
                            gx[k] += gam[c] * invstd[c] * (g[k] - inv_n * sum_g[c] - (*xhat)[k] * inv_n * sum_gx[c]);
                        else
                            gx[k] += gam[c] * invstd[c] * g[k];
                    }
        }
    });
}

} // namespace spgn::ad
