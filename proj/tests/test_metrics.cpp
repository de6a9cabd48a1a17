#include <gtest/gtest.h>

#include <cmath>

#include "ssfda/evaluation.hpp"
#include "ssfda/metrics.hpp"
#include "ssfda/train.hpp"

using namespace ssfda;

namespace {

Mask random_mask(Rng& rng, std::size_t h, std::size_t w, double p = 0.5) {
    Mask m(h, w);
    for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
    return m;
}

} // namespace

TEST(Binarize, InclusiveThreshold) {
    const auto m = binarize(Tensor({1, 1, 4}, {0.5, 0.49, 0.51, 0.0}));
    EXPECT_EQ(m.data, (std::vector<std::uint8_t>{1, 0, 1, 0}));
    EXPECT_THROW(binarize(Tensor::zeros({2, 2, 2})), Error);
}

TEST(Binarize, SameRuleAsPseudoLabels) {
    // Step 2 labels with tau = 0.5 come from the same function; pin that on a real model output.
    NetConfig net;
    net.width = net.height = 16;
    net.channels = {8, 8};
    net.reduction = 4;
    const auto p = init_params(net, 2);
    const auto prob = forward(p, net, generate_scene(1, 16, 16).image);
    const auto a = binarize(prob, AdaptConfig{}.tau);
    Mask b(16, 16);
    for (std::size_t i = 0; i < 256; ++i) b.data[i] = prob[i] >= 0.5;
    EXPECT_EQ(a.data, b.data);
}

TEST(Confusion, HandCountedCases) {
    Mask pred(2, 2), gt(2, 2);
    pred.data = {1, 1, 0, 0};
    gt.data = {1, 0, 0, 0};
    EXPECT_EQ(confusion(pred, gt), (Confusion{1, 1, 0, 2}));

    Rng rng(1);
    const auto x = random_mask(rng, 5, 7);
    const auto same = confusion(x, x);
    EXPECT_EQ(same.fp + same.fn, 0u);
    Mask inv = x;
    for (auto& v : inv.data) v = 1 - v;
    const auto opp = confusion(inv, x);
    EXPECT_EQ(opp.tp + opp.tn, 0u);
}

TEST(Confusion, RandomMasksAgainstIndependentCount) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const std::size_t h = 1 + rng.below(9), w = 1 + rng.below(9);
        const auto pred = random_mask(rng, h, w, rng.uniform()), gt = random_mask(rng, h, w, rng.uniform());
        std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                const int p = pred(r, c), g = gt(r, c);
                tp += p && g;
                fp += p && !g;
                fn += !p && g;
                tn += !p && !g;
            }
        const auto c = confusion(pred, gt);
        EXPECT_EQ(c, (Confusion{tp, fp, fn, tn}));
        EXPECT_EQ(c.total(), h * w);
        // Exact rational checks on the derived metrics.
        const auto r = report(c);
        auto ratio = [](std::uint64_t a, std::uint64_t b) { return static_cast<double>(a) / static_cast<double>(b); };
        if (tp + fp + fn) {
            EXPECT_EQ(*r.road_iou, ratio(tp, tp + fp + fn));
        }
        if (tn + fp + fn) {
            EXPECT_EQ(*r.bg_iou, ratio(tn, tn + fp + fn));
        }
        if (tp + fn) {
            EXPECT_EQ(*r.recall, ratio(tp, tp + fn));
        }
        if (tp + fp) {
            EXPECT_EQ(*r.precision, ratio(tp, tp + fp));
        }
    }
}

TEST(Confusion, Errors) {
    EXPECT_THROW(confusion(Mask(2, 2), Mask(2, 3)), Error);
    Mask bad(2, 2);
    bad.data[1] = 3;
    EXPECT_THROW(confusion(bad, Mask(2, 2)), Error);
}

TEST(Report, PerfectPrediction) {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        auto m = random_mask(rng, 6, 6);
        m.data[0] = 1;
        m.data[1] = 0;
        const auto r = report(confusion(m, m));
        for (const auto& v : {r.road_iou, r.bg_iou, r.miou, r.recall, r.precision, r.f1}) EXPECT_EQ(v, 1.0);
    }
}

TEST(Report, HandArithmetic) {
    const auto r = report(Confusion{1, 1, 0, 2});
    EXPECT_DOUBLE_EQ(*r.road_iou, 0.5);
    EXPECT_DOUBLE_EQ(*r.bg_iou, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(*r.miou, 7.0 / 12.0);
    EXPECT_DOUBLE_EQ(*r.recall, 1.0);
    EXPECT_DOUBLE_EQ(*r.precision, 0.5);
    EXPECT_DOUBLE_EQ(*r.f1, 2.0 / 3.0);
}

TEST(Report, NoRoadAnywhere) {
    const auto r = report(Confusion{0, 0, 0, 9});
    EXPECT_FALSE(r.road_iou);
    EXPECT_FALSE(r.recall);
    EXPECT_FALSE(r.precision);
    EXPECT_FALSE(r.f1);
    EXPECT_FALSE(r.miou);
    EXPECT_EQ(r.bg_iou, 1.0);
    EXPECT_EQ(format_metric(r.road_iou), "nan");
}

TEST(Report, RangeAndF1Identity) {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        const Confusion c{rng.below(20), rng.below(20), rng.below(20), rng.below(20)};
        const auto r = report(c);
        for (const auto& v : {r.road_iou, r.bg_iou, r.miou, r.recall, r.precision, r.f1})
            if (v) {
                EXPECT_GE(*v, 0.0);
                EXPECT_LE(*v, 1.0);
            }
        if (r.precision && r.recall && *r.precision + *r.recall > 0) {
            EXPECT_NEAR(*r.f1, 2 * *r.precision * *r.recall / (*r.precision + *r.recall), 1e-12);
        }
        if (r.road_iou && r.bg_iou) {
            EXPECT_DOUBLE_EQ(*r.miou, (*r.road_iou + *r.bg_iou) / 2);
        }
    }
}

TEST(Report, PixelPermutationInvariance) {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const auto pred = random_mask(rng, 4, 6), gt = random_mask(rng, 4, 6);
        std::vector<std::size_t> order(24);
        for (std::size_t i = 0; i < 24; ++i) order[i] = i;
        rng.shuffle(order);
        Mask p2(4, 6), g2(4, 6);
        for (std::size_t i = 0; i < 24; ++i) {
            p2.data[i] = pred.data[order[i]];
            g2.data[i] = gt.data[order[i]];
        }
        EXPECT_EQ(confusion(pred, gt), confusion(p2, g2));
    }
}

TEST(Aggregation, MicroDiffersFromMacro) {
    // Image A: tiny road, missed. Image B: large road, perfect.
    Mask pa(4, 4), ga(4, 4), pb(4, 4, 1), gb(4, 4, 1);
    ga.data[0] = 1;
    pb.data[0] = 0;
    gb.data[0] = 0;
    const std::vector<Confusion> per{confusion(pa, ga), confusion(pb, gb)};
    const auto micro = report(per[0] + per[1]).miou;
    const auto macro = macro_miou(per);
    ASSERT_TRUE(micro && macro);
    // A: road IoU 0, bg IoU 15/16. B: road 15/15, bg 1/1.
    EXPECT_DOUBLE_EQ(*macro, ((0 + 15.0 / 16) / 2 + 1.0) / 2);
    EXPECT_DOUBLE_EQ(*micro, (15.0 / 16 + 16.0 / 17) / 2);
    EXPECT_NE(*micro, *macro);
}

TEST(Aggregation, EvaluateSumsConfusions) {
    NetConfig net;
    net.width = net.height = 16;
    net.channels = {8, 8};
    net.reduction = 4;
    auto p = init_params(net, 6);
    p.at("head.bias").mutable_values()[0] = 0.02;
    std::vector<Scene> data;
    for (std::uint64_t s = 0; s < 5; ++s) data.push_back(generate_scene(s, 16, 16));
    const auto res = evaluate(p, net, data);
    Confusion total;
    double entropy = 0.0;
    for (const auto& s : data) {
        const auto prob = forward(p.detached(), net, s.image);
        total += confusion(binarize(prob), s.label);
        entropy += prediction_entropy(prob, EntropyMode::Paper);
    }
    EXPECT_EQ(res.total, total);
    EXPECT_EQ(res.metrics().miou, report(total).miou);
    EXPECT_NEAR(res.mean_entropy, entropy / 5.0, 1e-12);
}
