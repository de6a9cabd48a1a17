#pragma once

// Training loops: supervised pretraining, and the per-mini-batch adaptation
// procedure (entropy minimization, then online pseudo-label self-training)
// driven by a curriculum plan with weight carry-over between batches.
//
// Adaptation entry points only ever see UnlabeledImage, so target labels are
// unreachable from this code path.
//
// Per-image training losses are pixel sums (the BCE of bce_loss and the
// entropy term alike); a mini-batch loss is the mean over its images.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "curriculum.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "segnet.hpp"
#include "synthweather.hpp"
#include "tensor.hpp"

namespace ssfda {

struct SgdConfig {
    double lr = 2.5e-4;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 4;
    std::size_t epochs = 30;
    double clip_norm = 100.0; // global gradient-norm cap; 0 disables

    void validate() const {
        if (!(lr > 0.0)) throw Error("SgdConfig: lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("SgdConfig: momentum must be in [0, 1)");
        if (!(weight_decay >= 0.0)) throw Error("SgdConfig: weight decay must be non-negative");
        if (batch_size == 0) throw Error("SgdConfig: batch size must be positive");
        if (!(clip_norm >= 0.0)) throw Error("SgdConfig: clip_norm must be non-negative");
    }
};

using Gradients = std::vector<std::vector<double>>;

struct TrainState {
    ModelParams params;
    std::vector<std::vector<double>> velocity; // mirrors params, zero-initialized
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<double> loss_history;

    TrainState() = default;
    TrainState(ModelParams p, std::uint64_t s) : params(std::move(p)), seed(s) {
        for (const auto& [name, t] : params) velocity.emplace_back(t.numel(), 0.0);
    }
};

/// Copy of every parameter's grad buffer (zeros where nothing accumulated).
inline Gradients collect_grads(const ModelParams& params) {
    Gradients g;
    for (const auto& [name, t] : params) {
        if (t.has_grad()) g.emplace_back(t.grad().begin(), t.grad().end());
        else g.emplace_back(t.numel(), 0.0);
    }
    return g;
}

inline double global_norm(const Gradients& grads) {
    double n2 = 0.0;
    for (const auto& g : grads)
        for (double x : g) n2 += x * x;
    return std::sqrt(n2);
}

/// Rescale so the global L2 norm is at most max_norm (no-op when max_norm is 0).
inline void clip_grad_norm(Gradients& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    const double n = global_norm(grads);
    if (n <= max_norm) return;
    const double c = max_norm / n;
    for (auto& g : grads)
        for (double& x : g) x *= c;
}

/// g <- clip(g);  v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
/// `extra`, when given, is added after clipping, like weight decay.
inline void sgd_update(TrainState& state, const Gradients& grads, const SgdConfig& cfg,
                       const Gradients* extra = nullptr) {
    if (grads.size() != state.params.size())
        throw Error("sgd_update: " + std::to_string(grads.size()) + " gradients for " +
                    std::to_string(state.params.size()) + " parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& t = state.params[i].second;
        if (grads[i].size() != t.numel() || state.velocity[i].size() != t.numel())
            throw Error("sgd_update: gradient shape mismatch for " + state.params[i].first);
        if (extra && (extra->size() != grads.size() || (*extra)[i].size() != t.numel()))
            throw Error("sgd_update: extra gradient shape mismatch for " + state.params[i].first);
    }
    Gradients clipped;
    const Gradients* use = &grads;
    if (cfg.clip_norm > 0.0 && global_norm(grads) > cfg.clip_norm) {
        clipped = grads;
        clip_grad_norm(clipped, cfg.clip_norm);
        use = &clipped;
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto w = state.params[i].second.mutable_values();
        auto& v = state.velocity[i];
        const auto& g = (*use)[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double e = extra ? (*extra)[i][k] : 0.0;
            v[k] = cfg.momentum * v[k] + (g[k] + e + cfg.weight_decay * w[k]);
            w[k] -= cfg.lr * v[k];
        }
    }
    ++state.step;
}

namespace detail {

/// Zero grads, back-propagate mean over `count` per-item losses, apply one SGD step.
/// Returns the mean loss value.
template <typename LossFn>
double sgd_step(TrainState& state, const SgdConfig& cfg, std::size_t count, LossFn&& loss_of) {
    state.params.zero_grad();
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
        const Tensor loss = loss_of(i);
        total += loss.item();
        backward(scale(loss, inv));
    }
    sgd_update(state, collect_grads(state.params), cfg);
    const double mean_loss = total * inv;
    state.loss_history.push_back(mean_loss);
    return mean_loss;
}

/// Seeded epoch order over [0, n) followed by chunking into SGD mini-batches.
inline std::vector<std::vector<std::size_t>> epoch_batches(Rng& rng, std::size_t n, std::size_t batch_size) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: supervised pretraining

struct PretrainResult {
    ModelParams params;
    std::vector<double> epoch_losses; // mean per-image BCE sum, averaged over each epoch's steps
};

inline PretrainResult pretrain_supervised(std::span<const Scene> scenes, const NetConfig& net, const SgdConfig& sgd,
                                          std::uint64_t seed, const std::function<void(std::size_t, double)>& on_epoch = {}) {
    if (scenes.empty()) throw Error("pretrain_supervised: empty dataset");
    sgd.validate();
    TrainState state(init_params(net, derive_seed(seed, "init")), seed);
    Rng shuffle(derive_seed(seed, "shuffle"));
    PretrainResult result;
    for (std::size_t epoch = 0; epoch < sgd.epochs; ++epoch) {
        double total = 0.0;
        const auto batches = detail::epoch_batches(shuffle, scenes.size(), sgd.batch_size);
        for (const auto& b : batches)
            total += detail::sgd_step(state, sgd, b.size(), [&](std::size_t i) {
                const auto& s = scenes[b[i]];
                return bce_loss(forward(state.params, net, s.image), s.label);
            });
        result.epoch_losses.push_back(total / static_cast<double>(batches.size()));
        if (on_epoch) on_epoch(epoch, result.epoch_losses.back());
    }
    result.params = std::move(state.params);
    return result;
}

// ---------------------------------------------------------------------------
// Stage 2: adaptation

struct AdaptConfig {
    double tau = 0.5;
    std::size_t step1_epochs = 2;
    std::size_t step2_epochs = 3;
    EntropyMode entropy_mode = EntropyMode::Paper;
    std::size_t m = 4;
    bool iterative_baseline = false; // replace Step 2 by frozen-label rounds
    std::size_t iterative_rounds = 1;
    std::size_t iterative_inner_epochs = 3;

    void validate() const {
        if (!(tau > 0.0 && tau < 1.0)) throw Error("AdaptConfig: tau must be in (0, 1)");
        if (m == 0) throw Error("AdaptConfig: m must be at least 1");
    }
};

/// Pixel-summed entropy of a probability map; the training objective of Step 1.
inline Tensor entropy_loss(const Tensor& prob, EntropyMode mode) {
    const auto p = clamp(prob, kProbEps, 1.0 - kProbEps);
    auto term = mul(p, log(p));
    if (mode == EntropyMode::Binary) {
        const auto q = 1.0 - p;
        term = add(term, mul(q, log(q)));
    }
    return -sum(term);
}

/// Mean over images of the per-pixel mean entropy (matches prediction_entropy averaged).
inline double batch_mean_entropy(const ModelParams& params, const NetConfig& net, std::span<const UnlabeledImage> batch,
                                 EntropyMode mode) {
    const auto frozen = params.detached();
    double total = 0.0;
    for (const auto& img : batch) total += prediction_entropy(forward(frozen, net, img.image), mode);
    return total / static_cast<double>(batch.size());
}

struct StepResult {
    ModelParams params;
    std::vector<double> losses; // one per SGD step
};

inline StepResult step1_entropy_min(const ModelParams& params, const NetConfig& net, std::span<const UnlabeledImage> batch,
                                    const AdaptConfig& adapt, const SgdConfig& sgd, std::uint64_t seed) {
    if (batch.empty()) throw Error("step1_entropy_min: empty batch");
    TrainState state(params.clone(true), seed);
    Rng shuffle(derive_seed(seed, "step1"));
    for (std::size_t epoch = 0; epoch < adapt.step1_epochs; ++epoch)
        for (const auto& b : detail::epoch_batches(shuffle, batch.size(), sgd.batch_size))
            detail::sgd_step(state, sgd, b.size(), [&](std::size_t i) {
                return entropy_loss(forward(state.params, net, batch[b[i]].image), adapt.entropy_mode);
            });
    return {std::move(state.params), std::move(state.loss_history)};
}

/// Hook fired whenever pseudo labels are (re)generated: (SGD step, image id, labels).
using PseudoLabelObserver = std::function<void(std::uint64_t, std::size_t, const Mask&)>;

inline StepResult step2_online_selftrain(const ModelParams& params, const NetConfig& net,
                                         std::span<const UnlabeledImage> batch, const AdaptConfig& adapt,
                                         const SgdConfig& sgd, std::uint64_t seed,
                                         const PseudoLabelObserver& observe = {}) {
    if (batch.empty()) throw Error("step2_online_selftrain: empty batch");
    adapt.validate();
    TrainState state(params.clone(true), seed);
    Rng shuffle(derive_seed(seed, "step2"));
    for (std::size_t epoch = 0; epoch < adapt.step2_epochs; ++epoch)
        for (const auto& b : detail::epoch_batches(shuffle, batch.size(), sgd.batch_size))
            detail::sgd_step(state, sgd, b.size(), [&](std::size_t i) {
                const auto& img = batch[b[i]];
                const auto prob = forward(state.params, net, img.image);
                // Labels come from the current weights and are constants for this step.
                const auto pseudo = binarize(prob.detach(), adapt.tau);
                if (observe) observe(state.step, img.id, pseudo);
                return bce_loss(prob, pseudo);
            });
    return {std::move(state.params), std::move(state.loss_history)};
}

/// Comparison baseline: labels are regenerated only at the start of each outer round.
inline StepResult iterative_selftrain_baseline(const ModelParams& params, const NetConfig& net,
                                               std::span<const UnlabeledImage> batch, const AdaptConfig& adapt,
                                               const SgdConfig& sgd, std::uint64_t seed,
                                               const PseudoLabelObserver& observe = {}) {
    if (batch.empty()) throw Error("iterative_selftrain_baseline: empty batch");
    adapt.validate();
    TrainState state(params.clone(true), seed);
    Rng shuffle(derive_seed(seed, "iterative"));
    for (std::size_t round = 0; round < adapt.iterative_rounds; ++round) {
        std::vector<Mask> labels;
        {
            const auto frozen = state.params.detached();
            for (const auto& img : batch) labels.push_back(binarize(forward(frozen, net, img.image), adapt.tau));
        }
        for (std::size_t epoch = 0; epoch < adapt.iterative_inner_epochs; ++epoch)
            for (const auto& b : detail::epoch_batches(shuffle, batch.size(), sgd.batch_size))
                detail::sgd_step(state, sgd, b.size(), [&](std::size_t i) {
                    if (observe) observe(state.step, batch[b[i]].id, labels[b[i]]);
                    return bce_loss(forward(state.params, net, batch[b[i]].image), labels[b[i]]);
                });
    }
    return {std::move(state.params), std::move(state.loss_history)};
}

struct BatchReport {
    std::size_t index = 0;
    std::vector<std::size_t> ids;
    std::uint64_t init_fingerprint = 0;
    std::uint64_t step1_fingerprint = 0;
    std::uint64_t final_fingerprint = 0;
    double entropy_before = 0.0;
    double entropy_after_step1 = 0.0;
    double entropy_after_step2 = 0.0;
    std::vector<double> step1_losses;
    std::vector<double> step2_losses;
    std::optional<MetricReport> after_step1;
    std::optional<MetricReport> after_step2;
};

struct CurriculumResult {
    ModelParams params;
    std::vector<BatchReport> batches;
    std::vector<ModelParams> checkpoints; // params after each batch
};

/// Evaluation hook for per-batch snapshots; supplied by callers that hold held-out labels.
using SnapshotFn = std::function<MetricReport(const ModelParams&)>;

inline CurriculumResult run_curriculum(const ModelParams& pretrained, const NetConfig& net, const CurriculumPlan& plan,
                                       std::span<const UnlabeledImage> images, const AdaptConfig& adapt,
                                       const SgdConfig& sgd, std::uint64_t seed, const SnapshotFn& snapshot = {}) {
    if (plan.batches.empty()) throw Error("run_curriculum: empty plan");
    adapt.validate();
    CurriculumResult result;
    ModelParams current = pretrained.detached();
    for (std::size_t bi = 0; bi < plan.batches.size(); ++bi) {
        std::vector<UnlabeledImage> batch;
        for (auto id : plan.batches[bi]) {
            auto it = std::find_if(images.begin(), images.end(), [id](const UnlabeledImage& u) { return u.id == id; });
            if (it == images.end()) throw Error("run_curriculum: plan references unknown scene " + std::to_string(id));
            batch.push_back(*it);
        }
        BatchReport rep;
        rep.index = bi;
        rep.ids = plan.batches[bi];
        rep.init_fingerprint = current.fingerprint();
        rep.entropy_before = batch_mean_entropy(current, net, batch, adapt.entropy_mode);

        const auto batch_seed = derive_seed(seed, bi);
        auto s1 = step1_entropy_min(current, net, batch, adapt, sgd, batch_seed);
        rep.step1_fingerprint = s1.params.fingerprint();
        rep.step1_losses = std::move(s1.losses);
        rep.entropy_after_step1 = batch_mean_entropy(s1.params, net, batch, adapt.entropy_mode);
        if (snapshot) rep.after_step1 = snapshot(s1.params);

        auto s2 = adapt.iterative_baseline
                      ? iterative_selftrain_baseline(s1.params, net, batch, adapt, sgd, batch_seed)
                      : step2_online_selftrain(s1.params, net, batch, adapt, sgd, batch_seed);
        current = s2.params.detached();
        rep.final_fingerprint = current.fingerprint();
        rep.step2_losses = std::move(s2.losses);
        rep.entropy_after_step2 = batch_mean_entropy(current, net, batch, adapt.entropy_mode);
        if (snapshot) rep.after_step2 = snapshot(current);

        result.checkpoints.push_back(current.detached());
        result.batches.push_back(std::move(rep));
    }
    result.params = std::move(current);
    return result;
}

/// Strip labels: the only view of target scenes adaptation code receives.
inline std::vector<UnlabeledImage> unlabeled_view(std::span<const Scene> scenes, std::size_t first_id = 0) {
    std::vector<UnlabeledImage> out;
    out.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back({first_id + i, scenes[i].image});
    return out;
}

} // namespace ssfda
