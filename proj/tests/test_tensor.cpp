#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "ssfda/gradcheck_suite.hpp"
#include "ssfda/tensor.hpp"

using namespace ssfda;

namespace {

Tensor rand_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), true);
}

Tensor rand_const(Rng& rng, Shape shape) {
    auto t = rand_leaf(rng, std::move(shape));
    return t.detach();
}

// Direct quadruple loop; cross-correlation, zero padding.
std::vector<double> naive_conv(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
    const auto ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(co * ho * wo, 0.0);
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v) {
                            const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                            const long s = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                            if (r < 0 || s < 0 || r >= static_cast<long>(h) || s >= static_cast<long>(w)) continue;
                            acc += x[(c * h + r) * w + s] * k[((o * ci + c) * kh + u) * kw + v];
                        }
                out[(o * ho + i) * wo + j] = acc;
            }
    return out;
}

// Half-pixel-center bilinear sampling of one channel, written from the textbook formula.
double bilinear_sample(const std::vector<double>& img, std::size_t h, std::size_t w, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
    const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - y0, fx = x - x0;
    return (1 - fy) * ((1 - fx) * img[y0 * w + x0] + fx * img[y0 * w + x1]) +
           fy * ((1 - fx) * img[y1 * w + x0] + fx * img[y1 * w + x1]);
}

std::vector<double> oracle_resize(const Tensor& x, std::size_t ho, std::size_t wo) {
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out;
    for (std::size_t ch = 0; ch < c; ++ch) {
        std::vector<double> plane(x.values().begin() + ch * h * w, x.values().begin() + (ch + 1) * h * w);
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j)
                out.push_back(bilinear_sample(plane, h, w, (i + 0.5) * h / ho - 0.5, (j + 0.5) * w / wo - 0.5));
    }
    return out;
}

} // namespace

TEST(Elementwise, AddValues) {
    const auto r = add(Tensor({2}, {1, 2}), Tensor({2}, {3, 4}));
    EXPECT_EQ(r[0], 4);
    EXPECT_EQ(r[1], 6);
}

TEST(Elementwise, MulByZeroAnnihilates) {
    auto x = Tensor({3}, {1.5, -2.0, 0.25}, true);
    const auto y = mul(x, Tensor::zeros({3}));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
    backward(sum(y));
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Elementwise, ScaleDerivativeIsTheConstant) {
    Rng rng(11);
    for (int t = 0; t < 5; ++t) {
        auto x = rand_leaf(rng, {4, 3});
        const double c = rng.uniform(-3, 3);
        const double err = grad_check([c](const std::vector<Tensor>& in) { return sum(scale(in[0], c)); }, {x});
        EXPECT_LE(err, 1e-10);
        for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, c);
    }
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
    try {
        add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
        FAIL() << "expected an error";
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3, 2]"), std::string::npos) << msg;
    }
    EXPECT_THROW(mul(Tensor::zeros({4}), Tensor::zeros({5})), Error);
    EXPECT_THROW(sub(Tensor::zeros({4}), Tensor::zeros({2, 2})), Error);
    EXPECT_NO_THROW(add(Tensor::zeros({4}), Tensor::scalar(1.0)));
}

TEST(Matmul, IdentityAndHandSum) {
    Rng rng(3);
    const auto a = rand_const(rng, {3, 4});
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
    const auto r = matmul(a, Tensor({4, 4}, eye));
    EXPECT_EQ(std::memcmp(r.values().data(), a.values().data(), 12 * sizeof(double)), 0);

    const auto s = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {1, 1}));
    EXPECT_EQ(s.shape(), (Shape{2, 1}));
    EXPECT_EQ(s[0], 3);
    EXPECT_EQ(s[1], 7);
}

TEST(Matmul, GradientAgainstFiniteDifferences) {
    Rng rng(5);
    for (int t = 0; t < 5; ++t) {
        auto a = rand_leaf(rng, {4, 5});
        auto b = rand_leaf(rng, {5, 3});
        const auto w = rand_const(rng, {4, 3});
        const double err = grad_check([&](const std::vector<Tensor>& in) { return sum(mul(matmul(in[0], in[1]), w)); },
                                      {a, b});
        EXPECT_LE(err, 1e-6);
    }
}

TEST(Matmul, InnerDimensionMismatch) { EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error); }

TEST(Conv2d, IdentityKernelAndBoxSum) {
    Rng rng(9);
    const auto x = rand_const(rng, {1, 4, 5});
    const auto y = conv2d(x, Tensor({1, 1, 1, 1}, {1.0}), 1, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);

    const auto box = conv2d(Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), 1, 0);
    ASSERT_EQ(box.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(box[0], 9.0);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
    Rng rng(21);
    struct Geo {
        std::size_t ci, co, h, w, k, stride, pad;
    };
    for (const auto& g : {Geo{2, 3, 5, 5, 3, 2, 1}, Geo{3, 4, 8, 6, 3, 1, 1}, Geo{1, 2, 7, 7, 1, 1, 0},
                          Geo{4, 2, 6, 9, 3, 2, 0}, Geo{2, 2, 5, 4, 5, 1, 2}}) {
        const auto x = rand_const(rng, {g.ci, g.h, g.w});
        const auto k = rand_const(rng, {g.co, g.ci, g.k, g.k});
        const auto y = conv2d(x, k, g.stride, g.pad);
        const auto ref = naive_conv(x, k, g.stride, g.pad);
        ASSERT_EQ(y.numel(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
}

TEST(Conv2d, GradientStride2Pad1) {
    Rng rng(31);
    for (int t = 0; t < 5; ++t) {
        auto x = rand_leaf(rng, {2, 5, 5});
        auto k = rand_leaf(rng, {3, 2, 3, 3});
        auto b = rand_leaf(rng, {3});
        const auto w = rand_const(rng, {3, 3, 3});
        const double err = grad_check(
            [&](const std::vector<Tensor>& in) { return sum(mul(conv2d(in[0], in[1], in[2], 2, 1), w)); }, {x, k, b});
        EXPECT_LE(err, 1e-6);
    }
}

TEST(Conv2d, NonPositiveOutputSize) {
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), 1, 0), Error);
    EXPECT_THROW(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 1), Error);
}

TEST(Unary, PointValues) {
    EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    const auto r = relu(Tensor({2}, {-3.0, 3.0}));
    EXPECT_EQ(r[0], 0.0);
    EXPECT_EQ(r[1], 3.0);
    EXPECT_NEAR(exp(Tensor::scalar(1.0)).item(), std::exp(1.0), 1e-15);
    EXPECT_NEAR(log(Tensor::scalar(2.0)).item(), std::log(2.0), 1e-15);
}

TEST(Unary, SigmoidGradient) {
    Rng rng(41);
    for (int t = 0; t < 5; ++t) {
        auto x = rand_leaf(rng, {3, 4}, -3, 3);
        const double err = grad_check([](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); }, {x});
        EXPECT_LE(err, 1e-8);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            EXPECT_NEAR(x.grad()[i], s * (1 - s), 1e-15);
        }
    }
}

TEST(Unary, SigmoidStaysInsideOpenInterval) {
    const auto s = sigmoid(Tensor({4}, {-800.0, -40.0, 40.0, 800.0}));
    for (double v : s.values()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    const auto c = clamp(s, 1e-7, 1 - 1e-7);
    for (double v : c.values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Softmax, UniformAndStable) {
    const auto u = softmax(Tensor({3}, {0, 0, 0}), 0);
    for (double v : u.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    const auto s = softmax(Tensor({2}, {1000, 0}), 0);
    EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
    EXPECT_NEAR(s[0], 1.0, 1e-12);
    EXPECT_NEAR(s[1], 0.0, 1e-12);
}

TEST(Softmax, SlicesSumToOne) {
    Rng rng(51);
    for (std::size_t axis : {0u, 1u}) {
        const auto x = rand_const(rng, {5, 7});
        const auto y = softmax(scale(x, 20.0), axis);
        const auto s = sum(y, {axis});
        for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-9);
    }
}

TEST(Softmax, Gradient3x4) {
    Rng rng(61);
    for (std::size_t axis : {0u, 1u})
        for (int t = 0; t < 3; ++t) {
            auto x = rand_leaf(rng, {3, 4}, -2, 2);
            const auto w = rand_const(rng, {3, 4});
            const double err =
                grad_check([&](const std::vector<Tensor>& in) { return sum(mul(softmax(in[0], axis), w)); }, {x});
            EXPECT_LE(err, 1e-6);
        }
}

TEST(Reduction, SumMeanValues) {
    EXPECT_EQ(sum(Tensor({3}, {1, 2, 3})).item(), 6.0);
    EXPECT_NEAR(mean(Tensor::full({4, 5}, 2.5)).item(), 2.5, 1e-15);
    auto x = Tensor::full({2, 5}, 1.0, true);
    backward(mean(x));
    for (double g : x.grad()) EXPECT_NEAR(g, 0.1, 1e-15);
}

TEST(Reduction, AxisSumMatchesLoops) {
    Rng rng(71);
    const auto x = rand_const(rng, {2, 3, 4});
    const auto s = sum(x, {1});
    ASSERT_EQ(s.numel(), 8u);
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t c = 0; c < 4; ++c) {
            double acc = 0.0;
            for (std::size_t b = 0; b < 3; ++b) acc += x[(a * 3 + b) * 4 + c];
            EXPECT_NEAR(s[a * 4 + c], acc, 1e-15);
        }
}

TEST(Bilinear, ConstantsAndUpsampledPoint) {
    const auto c = bilinear_resize(Tensor::full({2, 4, 6}, 0.7), ResizeFactor::Half);
    for (double v : c.values()) EXPECT_NEAR(v, 0.7, 1e-15);
    const auto u = bilinear_resize(Tensor({1, 1, 1}, {3.25}), ResizeFactor::Double);
    ASSERT_EQ(u.shape(), (Shape{1, 2, 2}));
    for (double v : u.values()) EXPECT_EQ(v, 3.25);
}

TEST(Bilinear, DownsampleRampMatchesClosedForm) {
    std::vector<double> ramp(16);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) ramp[r * 4 + c] = 4.0 * r + c;
    const auto d = bilinear_resize(Tensor({1, 4, 4}, ramp), ResizeFactor::Half);
    // Output (i, j) samples source (2i + 0.5, 2j + 0.5); a ramp is linear there.
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) EXPECT_NEAR(d[i * 2 + j], 4.0 * (2 * i + 0.5) + (2 * j + 0.5), 1e-14);
}

TEST(Bilinear, RandomImagesMatchSamplingOracle) {
    Rng rng(81);
    for (int t = 0; t < 5; ++t) {
        const auto x = rand_const(rng, {2, 6, 8});
        const auto down = bilinear_resize(x, ResizeFactor::Half);
        const auto up = bilinear_resize(x, ResizeFactor::Double);
        const auto rd = oracle_resize(x, 3, 4), ru = oracle_resize(x, 12, 16);
        for (std::size_t i = 0; i < rd.size(); ++i) EXPECT_NEAR(down[i], rd[i], 1e-14);
        for (std::size_t i = 0; i < ru.size(); ++i) EXPECT_NEAR(up[i], ru[i], 1e-14);
    }
}

TEST(Bilinear, OddHalvingRejected) {
    EXPECT_THROW(bilinear_resize(Tensor::zeros({1, 5, 4}), ResizeFactor::Half), Error);
    EXPECT_THROW(bilinear_resize(Tensor::zeros({1, 4, 3}), ResizeFactor::Half), Error);
}

TEST(Backward, SimpleGradients) {
    Rng rng(91);
    auto x = rand_leaf(rng, {6});
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
    x.zero_grad();
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(x.grad()[i], 2 * x[i], 1e-15);
}

TEST(Backward, LeafGradsAccumulateAcrossCalls) {
    auto x = Tensor({3}, {1, 2, 3}, true);
    backward(sum(x));
    backward(sum(scale(x, 2.0)));
    for (double g : x.grad()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, RejectsNonScalarAndOffTape) {
    auto x = Tensor({3}, {1, 2, 3}, true);
    EXPECT_THROW(backward(scale(x, 2.0)), Error);
    EXPECT_THROW(backward(sum(Tensor({3}, {1, 2, 3}))), Error);
}

TEST(Backward, ZeroUpstreamGivesZeroDownstream) {
    Rng rng(101);
    auto x = rand_leaf(rng, {2, 4, 4});
    auto k = rand_leaf(rng, {3, 2, 3, 3});
    const auto y = relu(conv2d(x, k, 1, 1));
    backward(sum(mul(y, Tensor::zeros(y.shape()))));
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
    for (double g : k.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, DetachStopsGradient) {
    auto x = Tensor({2}, {1.0, 2.0}, true);
    auto y = Tensor({2}, {3.0, 4.0}, true);
    backward(sum(mul(x, y.detach())));
    EXPECT_FALSE(y.has_grad());
    EXPECT_EQ(x.grad()[0], 3.0);
}

TEST(GradCheck, ExactForLinearFunctions) {
    Rng rng(111);
    auto x = rand_leaf(rng, {4, 4});
    const auto w = rand_const(rng, {4, 4});
    EXPECT_LE(grad_check([&](const std::vector<Tensor>& in) { return sum(mul(in[0], w)); }, {x}), 1e-10);
}

TEST(GradCheck, SigmoidOfSum) {
    Rng rng(121);
    for (int t = 0; t < 5; ++t) {
        auto x = rand_leaf(rng, {5}, -0.4, 0.4);
        EXPECT_LE(grad_check([](const std::vector<Tensor>& in) { return sigmoid(sum(in[0])); }, {x}), 1e-7);
    }
}

TEST(GradCheck, ConvReluChain) {
    Rng rng(131);
    int checked = 0;
    while (checked < 5) {
        auto x = rand_leaf(rng, {2, 6, 6});
        auto k = rand_leaf(rng, {3, 2, 3, 3});
        const auto pre = conv2d(x.detach(), k.detach(), 1, 1);
        // Finite differences straddling a kink are meaningless; draw again.
        if (std::any_of(pre.values().begin(), pre.values().end(), [](double z) { return std::abs(z) < 1e-3; }))
            continue;
        const auto w = rand_const(rng, pre.shape());
        EXPECT_LE(grad_check([&](const std::vector<Tensor>& in) { return sum(mul(relu(conv2d(in[0], in[1], 1, 1)), w)); },
                             {x, k}),
                  1e-5);
        ++checked;
    }
}

TEST(GradCheck, RejectsBadArguments) {
    auto x = Tensor({2}, {1.0, 2.0}, true);
    auto f = [](const std::vector<Tensor>& in) { return sum(in[0]); };
    EXPECT_THROW(grad_check(f, {x}, 0.0), Error);
    EXPECT_THROW(grad_check(f, {Tensor({2}, {1.0, 2.0})}), Error);
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
    Rng rng(141);
    const auto x = rand_const(rng, {3, 8, 8});
    const auto k = rand_const(rng, {4, 3, 3, 3});
    auto run = [&] { return softmax(reshape(bilinear_resize(relu(conv2d(x, k, 2, 1)), ResizeFactor::Double), {4, 64}), 1); };
    const auto a = run(), b = run();
    EXPECT_EQ(std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)), 0);
}

// One case per differentiable op plus the whole tiny model, 20 seeds each.
TEST(GradSuite, EveryOpPassesAtDefaultTolerance) {
    const auto results = run_grad_suite();
    EXPECT_EQ(results.size(), grad_check_names().size());
    for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << " max error " << r.max_error;
}

TEST(GradSuite, InjectedFaultIsCaught) {
    GradCheckOptions opt;
    opt.seeds = 3;
    for (const std::string name : {"relu", "conv2d", "full_model"}) {
        opt.fault = name;
        for (const auto& r : run_grad_suite(opt)) {
            if (r.name == name) {
                EXPECT_FALSE(r.passed) << name;
            }
        }
    }
    opt.fault = "no_such_op";
    EXPECT_THROW(run_grad_suite(opt), Error);
}
