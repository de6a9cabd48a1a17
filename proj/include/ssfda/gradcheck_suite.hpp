#pragma once

// Finite-difference checks for every differentiable op and for the whole model.
// Each check runs over several seeds and keeps the worst relative error.
//
// Setting `fault` to a check name wraps that op's output in a node whose
// backward rule is wrong on purpose (gradient scaled by 1.5). The suite must
// then report that check as failing.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "curriculum.hpp"
#include "distill.hpp"
#include "rng.hpp"
#include "segnet.hpp"
#include "tensor.hpp"
#include "train.hpp"

namespace ssfda {

struct GradCheckOptions {
    std::size_t seeds = 20;
    double tolerance = 1e-4;
    double eps = 1e-5;
    std::string fault; // name of the check to sabotage; empty = none
};

struct GradCheckResult {
    std::string name;
    double max_error = 0.0;
    bool passed = false;
};

namespace detail {

inline Tensor faulty_identity(const Tensor& x) {
    auto xi = x.impl();
    return make_result(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), "fault", {x},
                       [xi](const TensorImpl& o) {
                           accumulate_into(*xi, o.grad.size(), [&](std::size_t i) { return 1.5 * o.grad[i]; });
                       });
}

/// Values in (lo, hi), kept at least `gap` away from each listed kink.
inline Tensor random_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, std::vector<double> kinks = {},
                          double gap = 1e-2) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) {
        bool ok = false;
        while (!ok) {
            x = rng.uniform(lo, hi);
            ok = true;
            for (double k : kinks)
                if (std::abs(x - k) < gap) ok = false;
        }
    }
    return Tensor(std::move(shape), std::move(v), true);
}

/// Weighted sum with fixed random weights, so every output element matters to the scalar.
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(y.numel());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return sum(mul(y, Tensor(y.shape(), std::move(w))));
}

struct Case {
    std::string name;
    // Builds leaves for one seed and returns the scalar function of them.
    std::function<std::pair<std::vector<Tensor>, std::function<Tensor(const std::vector<Tensor>&)>>(
        std::uint64_t, bool fault)>
        make;
};

inline NetConfig tiny_net() {
    NetConfig n;
    n.width = 8;
    n.height = 8;
    n.channels = {8, 8};
    n.reduction = 4;
    return n;
}

inline std::vector<Case> grad_cases() {
    using Leaves = std::vector<Tensor>;
    using Fn = std::function<Tensor(const Leaves&)>;
    auto wrap = [](bool fault, Tensor y) { return fault ? faulty_identity(y) : y; };
    std::vector<Case> cases;

    auto unary_case = [&](std::string name, std::function<Tensor(const Tensor&)> op, double lo, double hi,
                          std::vector<double> kinks = {}) {
        cases.push_back({name, [=](std::uint64_t seed, bool fault) {
                             Rng rng(seed);
                             Leaves in{random_leaf(rng, {2, 3, 4}, lo, hi, kinks)};
                             Fn f = [=](const Leaves& x) { return probe(wrap(fault, op(x[0])), seed + 1); };
                             return std::make_pair(in, f);
                         }});
    };
    auto binary_case = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op, Shape sa,
                           Shape sb) {
        cases.push_back({name, [=](std::uint64_t seed, bool fault) {
                             Rng rng(seed);
                             Leaves in{random_leaf(rng, sa), random_leaf(rng, sb)};
                             Fn f = [=](const Leaves& x) { return probe(wrap(fault, op(x[0], x[1])), seed + 1); };
                             return std::make_pair(in, f);
                         }});
    };

    binary_case("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 4}, {3, 4});
    binary_case("add_broadcast", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 4}, {1});
    binary_case("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, {3, 4}, {3, 4});
    binary_case("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {3, 4}, {3, 4});
    binary_case("mul_broadcast", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {1}, {3, 4});
    binary_case("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {3, 5}, {5, 4});
    unary_case("scale", [](const Tensor& x) { return scale(x, -1.7); }, -1, 1);
    unary_case("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, -1, 1);
    unary_case("relu", [](const Tensor& x) { return relu(x); }, -1, 1, {0.0});
    unary_case("sigmoid", [](const Tensor& x) { return sigmoid(x); }, -4, 4);
    unary_case("log", [](const Tensor& x) { return log(x); }, 0.2, 2);
    unary_case("exp", [](const Tensor& x) { return exp(x); }, -2, 2);
    unary_case("clamp", [](const Tensor& x) { return clamp(x, -0.5, 0.5); }, -1, 1, {-0.5, 0.5});
    unary_case("abs", [](const Tensor& x) { return detail::abs_op(x); }, -1, 1, {0.0});
    unary_case("reshape", [](const Tensor& x) { return reshape(x, {4, 6}); }, -1, 1);
    unary_case("transpose", [](const Tensor& x) { return transpose(reshape(x, {4, 6})); }, -1, 1);
    unary_case("sum", [](const Tensor& x) { return sum(x); }, -1, 1);
    unary_case("sum_axes", [](const Tensor& x) { return sum(x, {0, 2}); }, -1, 1);
    unary_case("mean", [](const Tensor& x) { return mean(x); }, -1, 1);
    unary_case("mean_axes", [](const Tensor& x) { return mean(x, {1}); }, -1, 1);
    unary_case("softmax", [](const Tensor& x) { return softmax(x, 2); }, -2, 2);
    unary_case("softmax_axis0", [](const Tensor& x) { return softmax(x, 0); }, -2, 2);

    cases.push_back({"conv2d", [=](std::uint64_t seed, bool fault) {
                         Rng rng(seed);
                         Leaves in{random_leaf(rng, {2, 6, 5}), random_leaf(rng, {3, 2, 3, 3}), random_leaf(rng, {3})};
                         Fn f = [=](const Leaves& x) { return probe(wrap(fault, conv2d(x[0], x[1], x[2], 1, 1)), seed + 1); };
                         return std::make_pair(in, f);
                     }});
    cases.push_back({"conv2d_stride2", [=](std::uint64_t seed, bool fault) {
                         Rng rng(seed);
                         Leaves in{random_leaf(rng, {2, 7, 6}), random_leaf(rng, {3, 2, 3, 3})};
                         Fn f = [=](const Leaves& x) { return probe(wrap(fault, conv2d(x[0], x[1], 2, 1)), seed + 1); };
                         return std::make_pair(in, f);
                     }});
    cases.push_back({"conv2d_1x1", [=](std::uint64_t seed, bool fault) {
                         Rng rng(seed);
                         Leaves in{random_leaf(rng, {4, 3, 3}), random_leaf(rng, {2, 4, 1, 1}), random_leaf(rng, {2})};
                         Fn f = [=](const Leaves& x) { return probe(wrap(fault, conv2d(x[0], x[1], x[2], 1, 0)), seed + 1); };
                         return std::make_pair(in, f);
                     }});
    unary_case("bilinear_double", [](const Tensor& x) { return bilinear_resize(reshape(x, {2, 3, 4}), ResizeFactor::Double); }, -1, 1);
    cases.push_back({"bilinear_half", [=](std::uint64_t seed, bool fault) {
                         Rng rng(seed);
                         Leaves in{random_leaf(rng, {2, 4, 6})};
                         Fn f = [=](const Leaves& x) { return probe(wrap(fault, bilinear_resize(x[0], ResizeFactor::Half)), seed + 1); };
                         return std::make_pair(in, f);
                     }});
    cases.push_back({"self_attention", [=](std::uint64_t seed, bool fault) {
                         Rng rng(seed);
                         Leaves in{random_leaf(rng, {8, 2, 3}), random_leaf(rng, {2, 8}), random_leaf(rng, {2, 8}),
                                   random_leaf(rng, {8, 8}), random_leaf(rng, {1})};
                         Fn f = [=](const Leaves& x) {
                             ModelParams p;
                             p.add("attn.query", x[1]);
                             p.add("attn.key", x[2]);
                             p.add("attn.value", x[3]);
                             p.add("attn.gamma", x[4]);
                             return probe(wrap(fault, self_attention(x[0], p)), seed + 1);
                         };
                         return std::make_pair(in, f);
                     }});
    cases.push_back({"bce_loss", [=](std::uint64_t seed, bool fault) {
                         Rng rng(seed);
                         Leaves in{random_leaf(rng, {1, 4, 5}, 0.05, 0.95)};
                         std::vector<double> y(20);
                         for (auto& v : y) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
                         const Tensor target({1, 4, 5}, y);
                         Fn f = [=](const Leaves& x) { return wrap(fault, bce_loss(x[0], target)); };
                         return std::make_pair(in, f);
                     }});
    for (auto mode : {EntropyMode::Paper, EntropyMode::Binary})
        cases.push_back({"entropy_loss_" + to_string(mode), [=](std::uint64_t seed, bool fault) {
                             Rng rng(seed);
                             Leaves in{random_leaf(rng, {1, 4, 5}, 0.05, 0.95)};
                             Fn f = [=](const Leaves& x) { return wrap(fault, entropy_loss(x[0], mode)); };
                             return std::make_pair(in, f);
                         }});
    for (auto kind : {DistanceKind::Mse, DistanceKind::L1})
        cases.push_back({"model_distance_" + to_string(kind), [=](std::uint64_t seed, bool fault) {
                             Rng rng(seed);
                             Leaves in{random_leaf(rng, {3, 4}), random_leaf(rng, {5})};
                             ModelParams anchor;
                             // Keep differences away from the |.| kink.
                             anchor.add("a", Tensor({3, 4}, std::vector<double>(in[0].values().begin(), in[0].values().end())));
                             anchor.add("b", Tensor({5}, std::vector<double>(in[1].values().begin(), in[1].values().end())));
                             for (std::size_t t = 0; t < anchor.size(); ++t)
                                 for (auto& v : anchor[t].second.mutable_values())
                                     v += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 0.5);
                             Fn f = [=](const Leaves& x) {
                                 ModelParams p;
                                 p.add("a", x[0]);
                                 p.add("b", x[1]);
                                 return wrap(fault, model_distance(p, anchor, kind));
                             };
                             return std::make_pair(in, f);
                         }});
    cases.push_back({"full_model", [=](std::uint64_t seed, bool fault) {
                         const auto net = tiny_net();
                         Rng rng(derive_seed(seed, "gradcheck"));
                         ModelParams params;
                         Tensor image;
                         Mask label(8, 8);
                         // Redraw until no ReLU input lies within 1e-3 of the kink; finite differences
                         // are meaningless across it.
                         for (bool smooth = false; !smooth;) {
                             params = init_params(net, rng.below(~std::uint64_t{0}));
                             params.at("attn.gamma").mutable_values()[0] = rng.uniform(0.3, 1.0);
                             for (const char* b : {"enc0.bias", "enc1.bias", "dec0.bias", "dec1.bias", "head.bias"})
                                 for (auto& v : params.at(b).mutable_values()) v = rng.uniform(-0.1, 0.1);
                             std::vector<double> img(3 * 64);
                             for (auto& v : img) v = rng.uniform();
                             image = Tensor({3, 8, 8}, img);
                             for (auto& v : label.data) v = rng.uniform() < 0.4;
                             std::vector<Tensor> pre;
                             forward(params.detached(), net, image, &pre);
                             smooth = true;
                             for (const auto& z : pre)
                                 for (double v : z.values()) smooth = smooth && std::abs(v) >= 1e-3;
                         }
                         Leaves in;
                         std::vector<std::string> names;
                         for (const auto& [name, t] : params) {
                             in.push_back(t);
                             names.push_back(name);
                         }
                         Fn f = [=](const Leaves& x) {
                             ModelParams p;
                             for (std::size_t i = 0; i < x.size(); ++i) p.add(names[i], x[i]);
                             const auto prob = wrap(fault, forward(p, net, image));
                             // Mean BCE plus a signed probe keeps the scalar near unit size, so central
                             // differences at eps 1e-5 still resolve the smallest parameter gradients.
                             return add(scale(bce_loss(prob, label), 1.0 / 64.0), probe(prob, seed + 1));
                         };
                         return std::make_pair(in, f);
                     }});
    return cases;
}

} // namespace detail

inline std::vector<std::string> grad_check_names() {
    std::vector<std::string> out;
    for (const auto& c : detail::grad_cases()) out.push_back(c.name);
    return out;
}

inline std::vector<GradCheckResult> run_grad_suite(const GradCheckOptions& opt = {}) {
    const auto cases = detail::grad_cases();
    if (!opt.fault.empty()) {
        bool known = false;
        for (const auto& c : cases) known = known || c.name == opt.fault;
        if (!known) throw Error("grad-check: unknown op '" + opt.fault + "'");
    }
    std::vector<GradCheckResult> results;
    for (const auto& c : cases) {
        GradCheckResult r{c.name, 0.0, false};
        for (std::size_t s = 0; s < opt.seeds; ++s) {
            auto [leaves, fn] = c.make(derive_seed(0x6c6f6f70ULL, s), c.name == opt.fault);
            r.max_error = std::max(r.max_error, grad_check(fn, leaves, opt.eps));
        }
        r.passed = r.max_error <= opt.tolerance;
        results.push_back(r);
    }
    return results;
}

} // namespace ssfda
