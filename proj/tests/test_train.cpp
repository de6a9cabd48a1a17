#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ssfda/train.hpp"

using namespace ssfda;

namespace {

NetConfig tiny(std::size_t side = 16) {
    NetConfig n;
    n.width = side;
    n.height = side;
    n.channels = {8, 8};
    n.reduction = 4;
    return n;
}

ModelParams scalar_param(double w) {
    ModelParams p;
    p.add("w", Tensor::scalar(w, true));
    return p;
}

std::vector<Scene> scenes(std::size_t n, std::size_t side, std::uint64_t base, std::vector<CorruptionSpec> chain = {}) {
    std::vector<Scene> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(corrupt(generate_scene(derive_seed(base, i), side, side), chain));
    return out;
}

SgdConfig quick_sgd() {
    SgdConfig s;
    s.lr = 1e-3;
    s.batch_size = 2;
    s.epochs = 4;
    return s;
}

// A briefly trained tiny model: predictions move away from 0.5 but stay uncertain.
ModelParams warm_model(const NetConfig& net) {
    auto s = quick_sgd();
    s.epochs = 3;
    return pretrain_supervised(scenes(12, net.width, 77), net, s, 5).params;
}

} // namespace

TEST(Sgd, ZeroGradientIsFixedPoint) {
    TrainState st(scalar_param(0.7), 0);
    SgdConfig c;
    c.weight_decay = 0.0;
    sgd_update(st, {{0.0}}, c);
    EXPECT_EQ(st.params.at("w").item(), 0.7);
    EXPECT_EQ(st.velocity[0][0], 0.0);
}

TEST(Sgd, OneStepArithmetic) {
    TrainState st(scalar_param(1.0), 0);
    SgdConfig c;
    c.lr = 0.1;
    c.momentum = 0.9;
    c.weight_decay = 0.0;
    sgd_update(st, {{1.0}}, c);
    EXPECT_DOUBLE_EQ(st.velocity[0][0], 1.0);
    EXPECT_DOUBLE_EQ(st.params.at("w").item(), 0.9);
}

TEST(Sgd, TwoStepsMatchHandUnroll) {
    const double w0 = 0.8, g = 0.3, mu = 0.9, wd = 0.01, lr = 0.05;
    TrainState st(scalar_param(w0), 0);
    SgdConfig c;
    c.lr = lr;
    c.momentum = mu;
    c.weight_decay = wd;
    sgd_update(st, {{g}}, c);
    sgd_update(st, {{g}}, c);
    const double v1 = g + wd * w0;
    const double w1 = w0 - lr * v1;
    const double v2 = mu * v1 + (g + wd * w1);
    const double w2 = w1 - lr * v2;
    EXPECT_DOUBLE_EQ(st.velocity[0][0], v2);
    EXPECT_DOUBLE_EQ(st.params.at("w").item(), w2);
    EXPECT_EQ(st.step, 2u);
}

TEST(Sgd, ZeroLearningRateLeavesWeights) {
    auto p = init_params(tiny(), 3);
    const auto before = p.detached();
    TrainState st(std::move(p), 0);
    SgdConfig c;
    c.lr = 0.0;
    Gradients g;
    Rng rng(1);
    for (const auto& [n, t] : st.params) {
        g.emplace_back(t.numel());
        for (auto& x : g.back()) x = rng.uniform(-1, 1);
    }
    sgd_update(st, g, c);
    EXPECT_TRUE(bitwise_equal(st.params, before));
}

TEST(Sgd, ShapeMismatchRejected) {
    TrainState st(scalar_param(1.0), 0);
    EXPECT_THROW(sgd_update(st, {{1.0, 2.0}}, SgdConfig{}), Error);
    EXPECT_THROW(sgd_update(st, {{1.0}, {1.0}}, SgdConfig{}), Error);
}

TEST(Sgd, ClippingCapsTheGlobalNorm) {
    Gradients g{{3.0, 0.0}, {4.0}};
    EXPECT_DOUBLE_EQ(global_norm(g), 5.0);
    auto a = g;
    clip_grad_norm(a, 10.0);
    EXPECT_EQ(a, g);
    clip_grad_norm(a, 1.0);
    EXPECT_NEAR(global_norm(a), 1.0, 1e-15);
    EXPECT_NEAR(a[0][0] / a[1][0], 0.75, 1e-15);
    auto b = g;
    clip_grad_norm(b, 0.0);
    EXPECT_EQ(b, g);

    TrainState st(scalar_param(0.0), 0);
    SgdConfig c;
    c.lr = 1.0;
    c.momentum = 0.0;
    c.weight_decay = 0.0;
    c.clip_norm = 2.0;
    sgd_update(st, {{-50.0}}, c);
    EXPECT_DOUBLE_EQ(st.params.at("w").item(), 2.0);
}

TEST(Sgd, ConfigValidation) {
    SgdConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lr = 0;
    EXPECT_THROW(c.validate(), Error);
    c = SgdConfig{};
    c.momentum = 1.0;
    EXPECT_THROW(c.validate(), Error);
    c = SgdConfig{};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), Error);
    c = SgdConfig{};
    c.clip_norm = -1;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Pretrain, LossFallsAndRunsRepeat) {
    const auto net = tiny();
    const auto data = scenes(12, 16, 1);
    const auto a = pretrain_supervised(data, net, quick_sgd(), 9);
    const auto b = pretrain_supervised(data, net, quick_sgd(), 9);
    ASSERT_EQ(a.epoch_losses.size(), 4u);
    EXPECT_LT(a.epoch_losses.back(), a.epoch_losses.front());
    EXPECT_TRUE(bitwise_equal(a.params, b.params));
    EXPECT_EQ(a.epoch_losses, b.epoch_losses);
    EXPECT_FALSE(bitwise_equal(a.params, pretrain_supervised(data, net, quick_sgd(), 10).params));
    EXPECT_THROW(pretrain_supervised({}, net, quick_sgd(), 1), Error);
}

TEST(EntropyLoss, StationaryAtInverseE) {
    auto p = Tensor::full({1, 2, 2}, 1.0 / std::exp(1.0), true);
    backward(entropy_loss(p, EntropyMode::Paper));
    for (double g : p.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(EntropyLoss, PixelMeanEqualsPredictionEntropy) {
    Rng rng(2);
    for (auto mode : {EntropyMode::Paper, EntropyMode::Binary})
        for (int t = 0; t < 10; ++t) {
            std::vector<double> v(64);
            for (auto& x : v) x = rng.uniform(0, 1);
            const Tensor p({1, 8, 8}, v);
            EXPECT_NEAR(entropy_loss(p, mode).item() / 64.0, prediction_entropy(p, mode), 1e-12);
        }
    const auto net = tiny();
    const auto params = init_params(net, 1);
    const auto batch = unlabeled_view(scenes(3, 16, 4));
    double mean = 0.0;
    for (const auto& u : batch) mean += entropy_loss(forward(params.detached(), net, u.image), EntropyMode::Paper).item() / 256.0;
    EXPECT_NEAR(batch_mean_entropy(params, net, batch, EntropyMode::Paper), mean / 3.0, 1e-12);
}

TEST(Step1, LowersBatchEntropyAcrossSeeds) {
    const auto net = tiny();
    const auto start = warm_model(net);
    const auto batch = unlabeled_view(scenes(6, 16, 300, {{CorruptionKind::Fog, 75}}));
    AdaptConfig a;
    SgdConfig s;
    s.batch_size = 2;
    s.clip_norm = 10;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const double before = batch_mean_entropy(start, net, batch, a.entropy_mode);
        const auto res = step1_entropy_min(start, net, batch, a, s, seed);
        EXPECT_LT(batch_mean_entropy(res.params, net, batch, a.entropy_mode), before) << "seed " << seed;
        EXPECT_EQ(res.losses.size(), a.step1_epochs * 3);
    }
    EXPECT_THROW(step1_entropy_min(start, net, {}, a, s, 1), Error);
}

TEST(Step2, ThresholdIsInclusive) {
    const auto m = binarize(Tensor::full({1, 2, 2}, 0.5), 0.5);
    for (auto v : m.data) EXPECT_EQ(v, 1);
    const auto k = binarize(Tensor({1, 1, 3}, {0.9, 0.49, 0.5}), 0.5);
    EXPECT_EQ(k.data, (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(Step2, LabelsFollowTheMovingModel) {
    const auto net = tiny();
    // An untrained model sits near 0.5 everywhere, so its labels flip as soon as it moves.
    const auto start = init_params(net, 2);
    const auto batch = unlabeled_view(scenes(2, 16, 400, {{CorruptionKind::Fog, 50}}));
    AdaptConfig a;
    a.step2_epochs = 10;
    SgdConfig s;
    s.batch_size = 1;
    s.lr = 5e-3;
    std::map<std::size_t, std::vector<Mask>> seen;
    std::vector<std::pair<std::size_t, Mask>> at_step0;
    step2_online_selftrain(start, net, batch, a, s, 3, [&](std::uint64_t step, std::size_t id, const Mask& m) {
        seen[id].push_back(m);
        if (step == 0) at_step0.push_back({id, m});
    });
    ASSERT_EQ(seen.size(), 2u);
    bool moved = false;
    for (const auto& [id, labels] : seen) {
        EXPECT_EQ(labels.size(), a.step2_epochs);
        moved = moved || labels.front().data != labels.back().data;
    }
    EXPECT_TRUE(moved);
    // Before any update the labels are exactly the start model's thresholded prediction.
    ASSERT_EQ(at_step0.size(), 1u);
    const auto expect = binarize(forward(start.detached(), net, batch[at_step0[0].first].image), a.tau);
    EXPECT_EQ(at_step0[0].second.data, expect.data);
    EXPECT_THROW(step2_online_selftrain(start, net, {}, a, s, 1), Error);
}

TEST(Iterative, ZeroInnerStepsLeaveWeights) {
    const auto net = tiny();
    const auto start = init_params(net, 2);
    AdaptConfig a;
    a.iterative_rounds = 1;
    a.iterative_inner_epochs = 0;
    const auto res = iterative_selftrain_baseline(start, net, unlabeled_view(scenes(2, 16, 5)), a, SgdConfig{}, 1);
    EXPECT_TRUE(bitwise_equal(res.params, start));
}

TEST(Iterative, LabelsFrozenWithinRound) {
    const auto net = tiny();
    const auto start = warm_model(net);
    const auto batch = unlabeled_view(scenes(2, 16, 500, {{CorruptionKind::Fog, 50}}));
    AdaptConfig a;
    a.iterative_rounds = 2;
    a.iterative_inner_epochs = 4;
    SgdConfig s;
    s.batch_size = 1;
    s.lr = 5e-3;
    std::map<std::size_t, std::vector<std::pair<std::uint64_t, Mask>>> seen;
    iterative_selftrain_baseline(start, net, batch, a, s, 3,
                                 [&](std::uint64_t step, std::size_t id, const Mask& m) { seen[id].push_back({step, m}); });
    const std::uint64_t per_round = a.iterative_inner_epochs * batch.size();
    for (const auto& [id, labels] : seen) {
        ASSERT_EQ(labels.size(), a.iterative_rounds * a.iterative_inner_epochs);
        for (const auto& [step, m] : labels) {
            const auto& round_first = labels[(step / per_round) * a.iterative_inner_epochs].second;
            EXPECT_EQ(m.data, round_first.data) << "step " << step;
        }
    }
    EXPECT_THROW(iterative_selftrain_baseline(start, net, {}, a, s, 1), Error);
}

TEST(Curriculum, SingleBatchIsStep1ThenStep2) {
    const auto net = tiny();
    const auto start = warm_model(net);
    const auto imgs = unlabeled_view(scenes(4, 16, 600, {{CorruptionKind::Fog, 75}}));
    AdaptConfig a;
    SgdConfig s;
    s.batch_size = 2;
    const CurriculumPlan plan{{{2, 0, 3, 1}}};
    const auto res = run_curriculum(start, net, plan, imgs, a, s, 11);
    std::vector<UnlabeledImage> ordered{imgs[2], imgs[0], imgs[3], imgs[1]};
    const auto seed = derive_seed(11, std::uint64_t{0});
    const auto s1 = step1_entropy_min(start, net, ordered, a, s, seed);
    const auto s2 = step2_online_selftrain(s1.params, net, ordered, a, s, seed);
    EXPECT_TRUE(bitwise_equal(res.params, s2.params));
}

TEST(Curriculum, WeightsCarryOverBetweenBatches) {
    const auto net = tiny();
    const auto start = warm_model(net);
    const auto imgs = unlabeled_view(scenes(6, 16, 700, {{CorruptionKind::Fog, 75}}));
    AdaptConfig a;
    SgdConfig s;
    s.batch_size = 2;
    const CurriculumPlan plan{{{0, 1}, {2, 3}, {4, 5}}};
    const auto res = run_curriculum(start, net, plan, imgs, a, s, 12);
    ASSERT_EQ(res.batches.size(), 3u);
    EXPECT_EQ(res.batches[0].init_fingerprint, start.fingerprint());
    for (std::size_t i = 0; i + 1 < res.batches.size(); ++i) {
        EXPECT_EQ(res.batches[i].final_fingerprint, res.batches[i + 1].init_fingerprint);
        EXPECT_EQ(res.checkpoints[i].fingerprint(), res.batches[i].final_fingerprint);
    }
    EXPECT_EQ(res.params.fingerprint(), res.batches.back().final_fingerprint);
    const auto again = run_curriculum(start, net, plan, imgs, a, s, 12);
    EXPECT_TRUE(bitwise_equal(res.params, again.params));
}

TEST(Curriculum, NeverReadsLabels) {
    const auto net = tiny();
    const auto start = warm_model(net);
    auto clean = scenes(4, 16, 800, {{CorruptionKind::Fog, 60}});
    auto poisoned = clean;
    Rng rng(13);
    for (auto& s : poisoned)
        for (auto& v : s.label.data) v = rng.below(2);
    AdaptConfig a;
    SgdConfig s;
    s.batch_size = 2;
    const CurriculumPlan plan{{{1, 0}, {3, 2}}};
    const auto x = run_curriculum(start, net, plan, unlabeled_view(clean), a, s, 14);
    const auto y = run_curriculum(start, net, plan, unlabeled_view(poisoned), a, s, 14);
    EXPECT_TRUE(bitwise_equal(x.params, y.params));
}

TEST(Curriculum, RejectsEmptyOrUnknown) {
    const auto net = tiny();
    const auto start = init_params(net, 1);
    const auto imgs = unlabeled_view(scenes(2, 16, 900));
    EXPECT_THROW(run_curriculum(start, net, CurriculumPlan{}, imgs, AdaptConfig{}, SgdConfig{}, 1), Error);
    EXPECT_THROW(run_curriculum(start, net, CurriculumPlan{{{0, 5}}}, imgs, AdaptConfig{}, SgdConfig{}, 1), Error);
    AdaptConfig bad;
    bad.tau = 1.0;
    EXPECT_THROW(bad.validate(), Error);
    bad = AdaptConfig{};
    bad.m = 0;
    EXPECT_THROW(bad.validate(), Error);
}
