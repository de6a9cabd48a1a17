#pragma once

// Few-image fine-tuning with a weight-space distillation regularizer:
//
//   L = mean_i BCE_i + lambda * C(w, w_anchor)
//
// C is the mean squared (or absolute) difference over every parameter
// coordinate. The anchor is a frozen copy; gradients only reach w.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"
#include "segnet.hpp"
#include "synthweather.hpp"
#include "train.hpp"

namespace ssfda {

enum class DistanceKind { Mse, L1 };

inline std::string to_string(DistanceKind k) { return k == DistanceKind::Mse ? "mse" : "l1"; }

inline DistanceKind distance_kind_from_string(const std::string& s) {
    if (s == "mse") return DistanceKind::Mse;
    if (s == "l1") return DistanceKind::L1;
    throw Error("unknown distance kind '" + s + "'");
}

struct DistillConfig {
    double lambda = 1.0;
    DistanceKind distance = DistanceKind::Mse;
    std::size_t k = 10;
    SgdConfig sgd{};

    void validate() const {
        if (!(lambda >= 0.0)) throw Error("DistillConfig: lambda must be non-negative");
        if (k == 0) throw Error("DistillConfig: k must be at least 1");
        sgd.validate();
    }
};

namespace detail {

inline Tensor abs_op(const Tensor& x) {
    auto xi = x.impl();
    return unary(x, "abs", [](double v) { return std::abs(v); }, [xi](const TensorImpl& o) {
        const auto& xv = xi->values;
        accumulate_into(*xi, o.grad.size(), [&](std::size_t i) {
            return xv[i] > 0.0 ? o.grad[i] : (xv[i] < 0.0 ? -o.grad[i] : 0.0);
        });
    });
}

} // namespace detail

/// Mean over all coordinates of (a-b)^2 or |a-b|. Differentiable in `a` only.
inline Tensor model_distance(const ModelParams& a, const ModelParams& b, DistanceKind kind) {
    if (!a.same_layout(b)) throw Error("model_distance: parameter sets are not shape-compatible");
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto diff = sub(a[i].second, b[i].second.detach());
        total = add(total, kind == DistanceKind::Mse ? sum(mul(diff, diff)) : sum(detail::abs_op(diff)));
    }
    return scale(total, 1.0 / static_cast<double>(a.total_numel()));
}

/// k distinct indices drawn uniformly from [0, available), returned in ascending order.
inline std::vector<std::size_t> select_few(std::size_t available, std::size_t k, std::uint64_t seed) {
    if (k > available)
        throw Error("select_few: k = " + std::to_string(k) + " exceeds " + std::to_string(available) + " available scenes");
    std::vector<std::size_t> idx(available);
    for (std::size_t i = 0; i < available; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

struct FinetuneResult {
    ModelParams params;
    std::vector<double> losses;       // total objective per SGD step
    double initial_train_bce = 0.0;   // mean per-image BCE on the k images before training
    double final_train_bce = 0.0;
};

inline double mean_scene_bce(const ModelParams& params, const NetConfig& net, std::span<const Scene> scenes) {
    const auto frozen = params.detached();
    double total = 0.0;
    for (const auto& s : scenes) total += bce_loss(forward(frozen, net, s.image), s.label).item();
    return total / static_cast<double>(scenes.size());
}

/// Start from the anchor, minimize BCE on the labeled scenes plus lambda times the distance to the anchor.
inline FinetuneResult finetune_few(const ModelParams& anchor, const NetConfig& net, std::span<const Scene> labeled,
                                   const DistillConfig& cfg, std::uint64_t seed) {
    if (labeled.empty()) throw Error("finetune_few: empty labeled set");
    cfg.validate();
    if (labeled.size() > cfg.k)
        throw Error("finetune_few: " + std::to_string(labeled.size()) + " labeled scenes exceed k = " + std::to_string(cfg.k));
    const ModelParams frozen_anchor = anchor.detached();
    TrainState state(anchor.clone(true), seed);
    Rng shuffle(derive_seed(seed, "finetune"));
    FinetuneResult result;
    result.initial_train_bce = mean_scene_bce(frozen_anchor, net, labeled);
    for (std::size_t epoch = 0; epoch < cfg.sgd.epochs; ++epoch)
        for (const auto& b : detail::epoch_batches(shuffle, labeled.size(), cfg.sgd.batch_size)) {
            state.params.zero_grad();
            double total = 0.0;
            const double inv = 1.0 / static_cast<double>(b.size());
            for (auto i : b) {
                const auto loss = bce_loss(forward(state.params, net, labeled[i].image), labeled[i].label);
                total += loss.item() * inv;
                backward(scale(loss, inv));
            }
            const auto data_grads = collect_grads(state.params);
            if (cfg.lambda > 0.0) {
                // The anchor term skips clipping; a clipped pull cannot hold a stiff anchor.
                state.params.zero_grad();
                const auto reg = scale(model_distance(state.params, frozen_anchor, cfg.distance), cfg.lambda);
                total += reg.item();
                backward(reg);
                const auto reg_grads = collect_grads(state.params);
                sgd_update(state, data_grads, cfg.sgd, &reg_grads);
            } else {
                sgd_update(state, data_grads, cfg.sgd);
            }
            result.losses.push_back(total);
        }
    result.params = state.params.detached();
    result.final_train_bce = mean_scene_bce(result.params, net, labeled);
    return result;
}

/// ||a - b||_2 / ||b||_2 over all coordinates.
inline double relative_weight_distance(const ModelParams& a, const ModelParams& b) {
    const auto x = a.flatten(), y = b.flatten();
    if (x.size() != y.size()) throw Error("relative_weight_distance: size mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - y[i]) * (x[i] - y[i]);
        den += y[i] * y[i];
    }
    return std::sqrt(num) / std::max(1e-300, std::sqrt(den));
}

} // namespace ssfda
