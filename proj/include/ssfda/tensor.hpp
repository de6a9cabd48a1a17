#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Every op that has at least one grad-requiring input records a TapeNode on
// its result. A node keeps its parents alive, so the graph behind a loss lives
// exactly as long as the loss tensor. backward() linearizes the graph with a
// depth-first post-order walk (a valid topological order) and replays it in
// reverse, each rule accumulating into its parents' grad buffers.
//
// Broadcasting is limited to scalar-tensor pairs. Convolutions use the
// cross-correlation convention (no kernel flip).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace ssfda {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

class Tensor;

namespace detail {

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

struct TapeNode {
    std::string_view op;
    std::vector<ImplPtr> parents;
    // Reads the output's grad and accumulates into the parents' grads.
    std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until something accumulates into it
    bool requires_grad = false;
    std::unique_ptr<TapeNode> node;

    std::span<double> grad_buffer() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad;
    }
};

} // namespace detail

class Tensor {
public:
    Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape.empty()) throw Error("tensor shape must have at least one dimension");
        for (auto d : shape)
            if (d == 0) throw Error("tensor dimensions must be positive, got " + shape_str(shape));
        if (values.size() != numel_of(shape))
            throw Error("tensor of shape " + shape_str(shape) + " needs " +
                        std::to_string(numel_of(shape)) + " values, got " +
                        std::to_string(values.size()));
        impl_->shape = std::move(shape);
        impl_->values = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->values.size(); }

    std::span<const double> values() const { return impl_->values; }
    /// Direct write access, meant for leaves (parameter updates, perturbation in grad checks).
    std::span<double> mutable_values() { return impl_->values; }
    double operator[](std::size_t i) const { return impl_->values[i]; }

    double item() const {
        if (numel() != 1) throw Error("item() on tensor of shape " + shape_str(shape()));
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    bool is_leaf() const { return impl_->node == nullptr; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->grad_buffer(); }
    void zero_grad() { impl_->grad.clear(); }

    std::string_view op() const { return impl_->node ? impl_->node->op : std::string_view{"leaf"}; }

    /// Fresh leaf holding a copy of the values; never records onto the tape.
    Tensor detach() const { return Tensor(shape(), impl_->values, false); }
    Tensor clone(bool requires_grad) const { return Tensor(shape(), impl_->values, requires_grad); }

    const detail::ImplPtr& impl() const { return impl_; }
    explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

private:
    detail::ImplPtr impl_;
};

namespace detail {

using BackwardFn = std::function<void(const TensorImpl& out)>;

/// Build an op result, recording a tape node only if some parent needs gradients.
inline Tensor make_result(Shape shape, std::vector<double> values, std::string_view op,
                          std::initializer_list<Tensor> parents, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
        auto& impl = *out.impl();
        impl.requires_grad = true;
        impl.node = std::make_unique<TapeNode>();
        impl.node->op = op;
        for (const auto& p : parents) impl.node->parents.push_back(p.impl());
        impl.node->backward = std::move(backward);
    }
    return out;
}

inline bool is_scalar(const Tensor& t) { return t.numel() == 1; }

inline void check_binary(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() == b.shape() || is_scalar(a) || is_scalar(b)) return;
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

inline Shape broadcast_shape(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return a.shape();
    return is_scalar(a) ? b.shape() : a.shape();
}

/// Accumulate an elementwise upstream contribution into a (possibly scalar-broadcast) parent.
template <typename F>
void accumulate_into(TensorImpl& parent, std::size_t n, F&& contribution) {
    if (!parent.requires_grad) return;
    auto g = parent.grad_buffer();
    if (g.size() == n) {
        for (std::size_t i = 0; i < n; ++i) g[i] += contribution(i);
    } else {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += contribution(i);
        g[0] += total;
    }
}

template <typename F>
Tensor unary(const Tensor& x, std::string_view op, F&& f, BackwardFn backward) {
    std::vector<double> out(x.numel());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return make_result(x.shape(), std::move(out), op, {x}, std::move(backward));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "add");
    const auto shape = detail::broadcast_shape(a, b);
    const auto n = numel_of(shape);
    const auto av = a.values(), bv = b.values();
    const bool sa = av.size() != n, sb = bv.size() != n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = av[sa ? 0 : i] + bv[sb ? 0 : i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result(shape, std::move(out), "add", {a, b}, [ai, bi](const auto& o) {
        detail::accumulate_into(*ai, o.grad.size(), [&](std::size_t i) { return o.grad[i]; });
        detail::accumulate_into(*bi, o.grad.size(), [&](std::size_t i) { return o.grad[i]; });
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "sub");
    const auto shape = detail::broadcast_shape(a, b);
    const auto n = numel_of(shape);
    const auto av = a.values(), bv = b.values();
    const bool sa = av.size() != n, sb = bv.size() != n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = av[sa ? 0 : i] - bv[sb ? 0 : i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result(shape, std::move(out), "sub", {a, b}, [ai, bi](const auto& o) {
        detail::accumulate_into(*ai, o.grad.size(), [&](std::size_t i) { return o.grad[i]; });
        detail::accumulate_into(*bi, o.grad.size(), [&](std::size_t i) { return -o.grad[i]; });
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_binary(a, b, "mul");
    const auto shape = detail::broadcast_shape(a, b);
    const auto n = numel_of(shape);
    const auto av = a.values(), bv = b.values();
    const bool sa = av.size() != n, sb = bv.size() != n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = av[sa ? 0 : i] * bv[sb ? 0 : i];
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result(shape, std::move(out), "mul", {a, b},
                               [ai, bi, sa, sb](const auto& o) {
        const auto& av = ai->values;
        const auto& bv = bi->values;
        detail::accumulate_into(*ai, o.grad.size(),
                                [&](std::size_t i) { return o.grad[i] * bv[sb ? 0 : i]; });
        detail::accumulate_into(*bi, o.grad.size(),
                                [&](std::size_t i) { return o.grad[i] * av[sa ? 0 : i]; });
    });
}

/// x * c for a constant c.
inline Tensor scale(const Tensor& x, double c) {
    auto xi = x.impl();
    return detail::unary(x, "scale", [c](double v) { return v * c; }, [xi, c](const auto& o) {
        detail::accumulate_into(*xi, o.grad.size(), [&](std::size_t i) { return o.grad[i] * c; });
    });
}

/// x + c for a constant c.
inline Tensor add_scalar(const Tensor& x, double c) {
    auto xi = x.impl();
    return detail::unary(x, "add_scalar", [c](double v) { return v + c; }, [xi](const auto& o) {
        detail::accumulate_into(*xi, o.grad.size(), [&](std::size_t i) { return o.grad[i]; });
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(scale(a, -1.0), c); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Tensor relu(const Tensor& x) {
    auto xi = x.impl();
    return detail::unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                         [xi](const auto& o) {
        const auto& xv = xi->values;
        detail::accumulate_into(*xi, o.grad.size(),
                                [&](std::size_t i) { return xv[i] > 0.0 ? o.grad[i] : 0.0; });
    });
}

inline double sigmoid_value(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    auto xi = x.impl();
    return detail::unary(x, "sigmoid", sigmoid_value, [xi](const auto& o) {
        const auto& s = o.values;
        detail::accumulate_into(*xi, o.grad.size(),
                                [&](std::size_t i) { return o.grad[i] * s[i] * (1.0 - s[i]); });
    });
}

/// Natural log. Inputs must be strictly positive; callers clamp first.
inline Tensor log(const Tensor& x) {
    for (double v : x.values())
        if (!(v > 0.0)) throw Error("log: non-positive input " + std::to_string(v));
    auto xi = x.impl();
    return detail::unary(x, "log", [](double v) { return std::log(v); }, [xi](const auto& o) {
        const auto& xv = xi->values;
        detail::accumulate_into(*xi, o.grad.size(), [&](std::size_t i) { return o.grad[i] / xv[i]; });
    });
}

inline Tensor exp(const Tensor& x) {
    auto xi = x.impl();
    return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [xi](const auto& o) {
        const auto& e = o.values;
        detail::accumulate_into(*xi, o.grad.size(), [&](std::size_t i) { return o.grad[i] * e[i]; });
    });
}

/// Clamp into [lo, hi]; gradient passes only where lo <= x <= hi.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    auto xi = x.impl();
    return detail::unary(x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
                         [xi, lo, hi](const auto& o) {
        const auto& xv = xi->values;
        detail::accumulate_into(*xi, o.grad.size(), [&](std::size_t i) {
            return (xv[i] >= lo && xv[i] <= hi) ? o.grad[i] : 0.0;
        });
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw Error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto xi = x.impl();
    std::vector<double> v(x.values().begin(), x.values().end());
    return detail::make_result(std::move(shape), std::move(v), "reshape", {x}, [xi](const auto& o) {
        detail::accumulate_into(*xi, o.grad.size(), [&](std::size_t i) { return o.grad[i]; });
    });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw Error("transpose: expected rank 2, got " + shape_str(x.shape()));
    const auto r = x.dim(0), c = x.dim(1);
    std::vector<double> out(r * c);
    const auto xv = x.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
    auto xi = x.impl();
    return detail::make_result({c, r}, std::move(out), "transpose", {x}, [xi, r, c](const auto& o) {
        if (!xi->requires_grad) return;
        auto g = xi->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

// View a reduction over one axis as (outer, axis, inner) strides.
struct AxisView {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

} // namespace detail

inline Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    auto xi = x.impl();
    return detail::make_result({1}, {total}, "sum", {x}, [xi](const auto& o) {
        const double g0 = o.grad[0];
        detail::accumulate_into(*xi, xi->values.size(), [&](std::size_t) { return g0; });
    });
}

/// Sum over the listed axes; reduced axes are dropped (a full reduction yields shape [1]).
inline Tensor sum(const Tensor& x, std::vector<std::size_t> axes) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (auto a : axes)
        if (a >= x.rank())
            throw Error("sum: axis " + std::to_string(a) + " out of range for " + shape_str(x.shape()));
    std::vector<bool> reduced(x.rank(), false);
    for (auto a : axes) reduced[a] = true;
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (!reduced[i]) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape = {1};

    // Map each input coordinate to its output slot; accumulation runs in input order.
    const auto n = x.numel();
    std::vector<std::size_t> target(n);
    {
        std::vector<std::size_t> idx(x.rank(), 0);
        for (std::size_t flat = 0; flat < n; ++flat) {
            std::size_t t = 0;
            for (std::size_t d = 0; d < x.rank(); ++d)
                if (!reduced[d]) t = t * x.dim(d) + idx[d];
            target[flat] = t;
            for (std::size_t d = x.rank(); d-- > 0;) {
                if (++idx[d] < x.dim(d)) break;
                idx[d] = 0;
            }
        }
    }
    std::vector<double> out(numel_of(out_shape), 0.0);
    const auto xv = x.values();
    for (std::size_t i = 0; i < n; ++i) out[target[i]] += xv[i];
    auto xi = x.impl();
    return detail::make_result(out_shape, std::move(out), "sum_axes", {x},
                               [xi, target = std::move(target)](const auto& o) {
        detail::accumulate_into(*xi, target.size(), [&](std::size_t i) { return o.grad[target[i]]; });
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) {
    auto s = sum(x, axes);
    return scale(s, static_cast<double>(s.numel()) / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Softmax

/// Softmax along `axis`, max-shifted for stability.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank())
        throw Error("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const auto v = detail::axis_view(x.shape(), axis);
    const auto xv = x.values();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.len * v.inner + in;
            double mx = xv[base];
            for (std::size_t k = 1; k < v.len; ++k) mx = std::max(mx, xv[base + k * v.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < v.len; ++k) {
                const double e = std::exp(xv[base + k * v.inner] - mx);
                out[base + k * v.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < v.len; ++k) out[base + k * v.inner] /= z;
        }
    }
    auto xi = x.impl();
    return detail::make_result(x.shape(), std::move(out), "softmax", {x}, [xi, v](const auto& o) {
        if (!xi->requires_grad) return;
        auto g = xi->grad_buffer();
        const auto& s = o.values;
        for (std::size_t ou = 0; ou < v.outer; ++ou) {
            for (std::size_t in = 0; in < v.inner; ++in) {
                const std::size_t base = ou * v.len * v.inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < v.len; ++k) {
                    const auto i = base + k * v.inner;
                    dot += o.grad[i] * s[i];
                }
                for (std::size_t k = 0; k < v.len; ++k) {
                    const auto i = base + k * v.inner;
                    g[i] += s[i] * (o.grad[i] - dot);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw Error("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::MapMat(out.data(), m, n).noalias() =
        detail::ConstMapMat(a.values().data(), m, k) * detail::ConstMapMat(b.values().data(), k, n);
    auto ai = a.impl(), bi = b.impl();
    return detail::make_result({m, n}, std::move(out), "matmul", {a, b},
                               [ai, bi, m, k, n](const auto& o) {
        detail::ConstMapMat G(o.grad.data(), m, n);
        if (ai->requires_grad)
            detail::MapMat(ai->grad_buffer().data(), m, k).noalias() +=
                G * detail::ConstMapMat(bi->values.data(), k, n).transpose();
        if (bi->requires_grad)
            detail::MapMat(bi->grad_buffer().data(), k, n).noalias() +=
                detail::ConstMapMat(ai->values.data(), m, k).transpose() * G;
    });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
    std::size_t c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& kernel, std::size_t stride,
                                      std::size_t pad) {
    if (x.size() != 3 || kernel.size() != 4)
        throw Error("conv2d: expected input C×H×W and kernel Cout×Cin×kh×kw, got " + shape_str(x) +
                    " and " + shape_str(kernel));
    if (kernel[1] != x[0])
        throw Error("conv2d: kernel expects " + std::to_string(kernel[1]) + " input channels, input has " +
                    std::to_string(x[0]));
    if (kernel[2] % 2 == 0 || kernel[3] % 2 == 0)
        throw Error("conv2d: kernel spatial size must be odd, got " + shape_str(kernel));
    if (stride == 0) throw Error("conv2d: stride must be positive");
    Conv2dGeometry g{x[0], x[1], x[2], kernel[0], kernel[2], kernel[3], stride, pad, 0, 0};
    const auto ih = static_cast<long long>(g.h + 2 * pad) - static_cast<long long>(g.kh);
    const auto iw = static_cast<long long>(g.w + 2 * pad) - static_cast<long long>(g.kw);
    if (ih < 0 || iw < 0)
        throw Error("conv2d: non-positive output size for input " + shape_str(x) + ", kernel " +
                    shape_str(kernel) + ", pad " + std::to_string(pad));
    g.h_out = static_cast<std::size_t>(ih) / stride + 1;
    g.w_out = static_cast<std::size_t>(iw) / stride + 1;
    return g;
}

namespace detail {

// cols[(ci*kh + ky)*kw + kx][oy*w_out + ox] = x[ci][oy*s - pad + ky][ox*s - pad + kx] (0 outside)
inline std::vector<double> im2col(std::span<const double> x, const Conv2dGeometry& g) {
    const std::size_t plane = g.h_out * g.w_out;
    std::vector<double> cols(g.c_in * g.kh * g.kw * plane, 0.0);
    for (std::size_t ci = 0; ci < g.c_in; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols.data() + ((ci * g.kh + ky) * g.kw + kx) * plane;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const auto iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
                    const double* src = x.data() + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const auto ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long long>(g.w)) continue;
                        row[oy * g.w_out + ox] = src[ix];
                    }
                }
            }
    return cols;
}

inline void col2im_add(std::span<const double> cols, std::span<double> dx, const Conv2dGeometry& g) {
    const std::size_t plane = g.h_out * g.w_out;
    for (std::size_t ci = 0; ci < g.c_in; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols.data() + ((ci * g.kh + ky) * g.kw + kx) * plane;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const auto iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
                    double* dst = dx.data() + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const auto ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long long>(g.w)) continue;
                        dst[ix] += row[oy * g.w_out + ox];
                    }
                }
            }
}

inline Tensor conv2d_impl(const Tensor& x, const Tensor& kernel, const Tensor* bias, std::size_t stride,
                          std::size_t pad) {
    const auto g = conv2d_geometry(x.shape(), kernel.shape(), stride, pad);
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.c_out))
        throw Error("conv2d: bias shape " + shape_str(bias->shape()) + " does not match " +
                    std::to_string(g.c_out) + " output channels");
    const std::size_t plane = g.h_out * g.w_out;
    const std::size_t patch = g.c_in * g.kh * g.kw;
    auto cols = std::make_shared<std::vector<double>>(im2col(x.values(), g));
    std::vector<double> out(g.c_out * plane);
    MapMat O(out.data(), g.c_out, plane);
    O.noalias() = ConstMapMat(kernel.values().data(), g.c_out, patch) * ConstMapMat(cols->data(), patch, plane);
    if (bias)
        for (std::size_t co = 0; co < g.c_out; ++co) O.row(co).array() += (*bias)[co];

    auto xi = x.impl(), ki = kernel.impl();
    ImplPtr bi = bias ? bias->impl() : nullptr;
    BackwardFn back = [xi, ki, bi, cols, g, plane, patch](const TensorImpl& o) {
        ConstMapMat G(o.grad.data(), g.c_out, plane);
        if (ki->requires_grad)
            MapMat(ki->grad_buffer().data(), g.c_out, patch).noalias() +=
                G * ConstMapMat(cols->data(), patch, plane).transpose();
        if (bi && bi->requires_grad) {
            auto gb = bi->grad_buffer();
            for (std::size_t co = 0; co < g.c_out; ++co) {
                double s = 0.0;
                for (std::size_t p = 0; p < plane; ++p) s += o.grad[co * plane + p];
                gb[co] += s;
            }
        }
        if (xi->requires_grad) {
            std::vector<double> dcols(patch * plane);
            MapMat(dcols.data(), patch, plane).noalias() =
                ConstMapMat(ki->values.data(), g.c_out, patch).transpose() * G;
            col2im_add(dcols, xi->grad_buffer(), g);
        }
    };
    Shape shape{g.c_out, g.h_out, g.w_out};
    if (bias) return make_result(std::move(shape), std::move(out), "conv2d", {x, kernel, *bias}, std::move(back));
    return make_result(std::move(shape), std::move(out), "conv2d", {x, kernel}, std::move(back));
}

} // namespace detail

/// 2-D cross-correlation. x: C_in×H×W, kernel: C_out×C_in×kh×kw (odd kh, kw).
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride = 1, std::size_t pad = 0) {
    return detail::conv2d_impl(x, kernel, nullptr, stride, pad);
}

/// Same, plus a per-output-channel bias of shape [C_out].
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
    return detail::conv2d_impl(x, kernel, &bias, stride, pad);
}

// ---------------------------------------------------------------------------
// Bilinear resampling

enum class ResizeFactor { Half, Double };

namespace detail {

struct Tap {
    std::size_t lo, hi;
    double w_lo, w_hi;
};

// align_corners=false source coordinate, clamped at the border the way common frameworks do.
inline std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        auto lo = static_cast<std::size_t>(src);
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        const double frac = src - static_cast<double>(lo);
        taps[i] = {lo, hi, 1.0 - frac, frac};
    }
    return taps;
}

} // namespace detail

/// Bilinear resize of a C×H×W tensor by 0.5 or 2 (align_corners = false).
inline Tensor bilinear_resize(const Tensor& x, ResizeFactor factor) {
    if (x.rank() != 3) throw Error("bilinear_resize: expected C×H×W, got " + shape_str(x.shape()));
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::size_t ho, wo;
    if (factor == ResizeFactor::Half) {
        if (h % 2 || w % 2)
            throw Error("bilinear_resize: halving needs even height and width, got " + shape_str(x.shape()));
        ho = h / 2;
        wo = w / 2;
    } else {
        ho = h * 2;
        wo = w * 2;
    }
    auto ty = std::make_shared<std::vector<detail::Tap>>(detail::resize_taps(h, ho));
    auto tx = std::make_shared<std::vector<detail::Tap>>(detail::resize_taps(w, wo));
    std::vector<double> out(c * ho * wo);
    const auto xv = x.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = xv.data() + ch * h * w;
        for (std::size_t i = 0; i < ho; ++i) {
            const auto& a = (*ty)[i];
            for (std::size_t j = 0; j < wo; ++j) {
                const auto& b = (*tx)[j];
                out[(ch * ho + i) * wo + j] =
                    a.w_lo * (b.w_lo * src[a.lo * w + b.lo] + b.w_hi * src[a.lo * w + b.hi]) +
                    a.w_hi * (b.w_lo * src[a.hi * w + b.lo] + b.w_hi * src[a.hi * w + b.hi]);
            }
        }
    }
    auto xi = x.impl();
    return detail::make_result({c, ho, wo}, std::move(out), "bilinear_resize", {x},
                               [xi, ty, tx, c, h, w, ho, wo](const auto& o) {
        if (!xi->requires_grad) return;
        auto g = xi->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* dst = g.data() + ch * h * w;
            for (std::size_t i = 0; i < ho; ++i) {
                const auto& a = (*ty)[i];
                for (std::size_t j = 0; j < wo; ++j) {
                    const auto& b = (*tx)[j];
                    const double up = o.grad[(ch * ho + i) * wo + j];
                    dst[a.lo * w + b.lo] += up * a.w_lo * b.w_lo;
                    dst[a.lo * w + b.hi] += up * a.w_lo * b.w_hi;
                    dst[a.hi * w + b.lo] += up * a.w_hi * b.w_lo;
                    dst[a.hi * w + b.hi] += up * a.w_hi * b.w_hi;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Populate grads of every grad-requiring leaf reachable from `loss`. Leaf grads
/// accumulate across calls; intermediate grads are reset at the start of each call.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw Error("backward: loss is not on the tape (no input requires grad)");

    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->node && next < node->node->parents.size()) {
            auto* parent = node->node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (auto* t : order)
        if (t->node) t->grad.assign(t->values.size(), 0.0);
    loss.impl()->grad_buffer()[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* t = *it;
        if (!t->node) continue;
        const bool nonzero = std::any_of(t->grad.begin(), t->grad.end(), [](double g) { return g != 0.0; });
        if (nonzero) t->node->backward(*t);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Max over all input coordinates of |analytic - numeric| / max(1e-12, |analytic| + |numeric|),
/// with central differences of step `eps`. `inputs` must be grad-requiring leaves.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                         std::vector<Tensor> inputs, double eps = 1e-5) {
    if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");
    for (auto& t : inputs) {
        if (!t.requires_grad() || !t.is_leaf()) throw Error("grad_check: inputs must be grad-requiring leaves");
        t.zero_grad();
    }
    backward(fn(inputs));
    double worst = 0.0;
    for (auto& t : inputs) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        auto vals = t.mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + eps;
            const double up = fn(inputs).item();
            vals[i] = saved - eps;
            const double down = fn(inputs).item();
            vals[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double err =
                std::abs(analytic[i] - numeric) / std::max(1e-12, std::abs(analytic[i]) + std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace ssfda
