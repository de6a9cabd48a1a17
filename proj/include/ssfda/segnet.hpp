#pragma once

// Self-attention segmentation autoencoder.
//
//   image 3×h×w
//     -> encoder: [conv3x3 stride 2 + relu] per stage
//     -> residual self-attention at the bottleneck (gate gamma, init 0)
//     -> decoder: [bilinear ×2 upsample + conv3x3 + relu] per stage
//     -> 1×1 conv head + sigmoid, clamped into [kProbEps, 1 - kProbEps]
//
// The output is at input resolution.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mask.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ssfda {

/// Probabilities are kept inside [kProbEps, 1 - kProbEps] before any log.
inline constexpr double kProbEps = 1e-7;
inline constexpr double kInputShift = 0.5;

struct NetConfig {
    std::size_t width = 64;
    std::size_t height = 64;
    std::vector<std::size_t> channels{16, 32}; // one entry per stride-2 encoder stage
    bool attention = true;
    std::size_t reduction = 8;

    std::size_t downsamplings() const { return channels.size(); }
    std::size_t bottleneck_channels() const { return channels.back(); }

    /// Output width of decoder stage j (mirrors the encoder; the last stage halves channels[0]).
    std::size_t decoder_channels(std::size_t j) const {
        const auto n = channels.size();
        if (j + 1 < n) return channels[n - 2 - j];
        return std::max<std::size_t>(1, channels[0] / 2);
    }

    void validate() const {
        if (channels.empty()) throw Error("NetConfig: at least one encoder stage is required");
        for (auto c : channels)
            if (c == 0) throw Error("NetConfig: channel widths must be positive");
        const std::size_t div = std::size_t{1} << channels.size();
        if (width == 0 || height == 0 || width % div || height % div)
            throw Error("NetConfig: input " + std::to_string(width) + "x" + std::to_string(height) +
                        " must be divisible by " + std::to_string(div));
        if (attention && (reduction == 0 || bottleneck_channels() % reduction))
            throw Error("NetConfig: reduction " + std::to_string(reduction) + " must divide bottleneck channels " +
                        std::to_string(bottleneck_channels()));
    }

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Named parameter set, in construction (and serialization) order.
class ModelParams {
public:
    using Entry = std::pair<std::string, Tensor>;

    void add(std::string name, Tensor t) {
        if (contains(name)) throw Error("ModelParams: duplicate parameter " + name);
        entries_.emplace_back(std::move(name), std::move(t));
    }

    bool contains(std::string_view name) const {
        for (const auto& e : entries_)
            if (e.first == name) return true;
        return false;
    }

    const Tensor& at(std::string_view name) const {
        for (const auto& e : entries_)
            if (e.first == name) return e.second;
        throw Error("ModelParams: no parameter named " + std::string(name));
    }
    Tensor& at(std::string_view name) {
        return const_cast<Tensor&>(std::as_const(*this).at(name));
    }

    std::size_t size() const { return entries_.size(); }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    Entry& operator[](std::size_t i) { return entries_[i]; }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    /// Deep copy with fresh leaves.
    ModelParams clone(bool requires_grad) const {
        ModelParams out;
        for (const auto& [name, t] : entries_) out.add(name, t.clone(requires_grad));
        return out;
    }
    ModelParams detached() const { return clone(false); }

    /// Same names, order and shapes.
    bool same_layout(const ModelParams& other) const {
        if (size() != other.size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (entries_[i].first != other.entries_[i].first ||
                entries_[i].second.shape() != other.entries_[i].second.shape())
                return false;
        return true;
    }

    void zero_grad() {
        for (auto& e : entries_) e.second.zero_grad();
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(total_numel());
        for (const auto& e : entries_) out.insert(out.end(), e.second.values().begin(), e.second.values().end());
        return out;
    }

    /// FNV-1a over names, shapes and value bytes; equal iff bitwise-equal for practical purposes.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& [name, t] : entries_) {
            feed(name.data(), name.size());
            for (auto d : t.shape()) {
                const auto d64 = static_cast<std::uint64_t>(d);
                feed(&d64, sizeof d64);
            }
            feed(t.values().data(), t.numel() * sizeof(double));
        }
        return h;
    }

    friend bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
        if (!a.same_layout(b)) return false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto x = a[i].second.values(), y = b[i].second.values();
            if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
        }
        return true;
    }

private:
    std::vector<Entry> entries_;
};

/// Parameter names and shapes implied by a config, in canonical order.
inline std::vector<std::pair<std::string, Shape>> param_layout(const NetConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<std::string, Shape>> layout;
    std::size_t c_prev = 3;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        const auto p = "enc" + std::to_string(i);
        layout.push_back({p + ".weight", {cfg.channels[i], c_prev, 3, 3}});
        layout.push_back({p + ".bias", {cfg.channels[i]}});
        c_prev = cfg.channels[i];
    }
    if (cfg.attention) {
        const auto c = cfg.bottleneck_channels();
        layout.push_back({"attn.query", {c / cfg.reduction, c}});
        layout.push_back({"attn.key", {c / cfg.reduction, c}});
        layout.push_back({"attn.value", {c, c}});
        layout.push_back({"attn.gamma", {1}});
    }
    for (std::size_t j = 0; j < cfg.channels.size(); ++j) {
        const auto p = "dec" + std::to_string(j);
        const auto c_out = cfg.decoder_channels(j);
        layout.push_back({p + ".weight", {c_out, c_prev, 3, 3}});
        layout.push_back({p + ".bias", {c_out}});
        c_prev = c_out;
    }
    layout.push_back({"head.weight", {1, c_prev, 1, 1}});
    layout.push_back({"head.bias", {1}});
    return layout;
}

/// Fan-in scaled uniform init in ±sqrt(6 / fan_in); biases and the attention gate start at 0.
inline ModelParams init_params(const NetConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ModelParams params;
    for (auto& [name, shape] : param_layout(cfg)) {
        const bool is_bias = name.ends_with(".bias") || name == "attn.gamma";
        std::vector<double> v(numel_of(shape), 0.0);
        if (!is_bias) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (auto& x : v) x = rng.uniform(-bound, bound);
        }
        params.add(name, Tensor(shape, std::move(v), true));
    }
    return params;
}

struct AttentionOutput {
    Tensor output;   // C×H×W, same shape as the input
    Tensor affinity; // N×N, row i = distribution of query position i over key positions
};

/// Residual gated self-attention over spatial positions:
/// out = gamma * (value · affinityᵀ) + x, affinity = softmax_rows(queryᵀ key).
inline AttentionOutput self_attention_detailed(const Tensor& features, const ModelParams& params) {
    if (features.rank() != 3) throw Error("self_attention: expected C×H×W, got " + shape_str(features.shape()));
    const auto c = features.dim(0), h = features.dim(1), w = features.dim(2);
    const auto& wq = params.at("attn.query");
    if (wq.dim(1) != c) throw Error("self_attention: projection expects " + std::to_string(wq.dim(1)) +
                                    " channels, features have " + std::to_string(c));
    const auto x = reshape(features, {c, h * w});
    const auto query = matmul(wq, x);
    const auto key = matmul(params.at("attn.key"), x);
    const auto value = matmul(params.at("attn.value"), x);
    auto affinity = softmax(matmul(transpose(query), key), 1);
    const auto attended = matmul(value, transpose(affinity));
    auto out = add(mul(params.at("attn.gamma"), attended), x);
    return {reshape(out, {c, h, w}), std::move(affinity)};
}

inline Tensor self_attention(const Tensor& features, const ModelParams& params) {
    return self_attention_detailed(features, params).output;
}

/// Per-pixel road probability, shape 1×h×w.
/// `relu_inputs`, when given, receives every pre-activation that feeds a ReLU.
inline Tensor forward(const ModelParams& params, const NetConfig& cfg, const Tensor& image,
                      std::vector<Tensor>* relu_inputs = nullptr) {
    if (image.shape() != Shape{3, cfg.height, cfg.width})
        throw Error("forward: image shape " + shape_str(image.shape()) + " does not match config " +
                    shape_str({3, cfg.height, cfg.width}));
    // Images live in [0, 1]; the network sees them centered on zero.
    Tensor x = add_scalar(image, -kInputShift);
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        const auto p = "enc" + std::to_string(i);
        x = conv2d(x, params.at(p + ".weight"), params.at(p + ".bias"), 2, 1);
        if (relu_inputs) relu_inputs->push_back(x);
        x = relu(x);
    }
    if (cfg.attention) x = self_attention(x, params);
    for (std::size_t j = 0; j < cfg.channels.size(); ++j) {
        const auto p = "dec" + std::to_string(j);
        x = bilinear_resize(x, ResizeFactor::Double);
        x = conv2d(x, params.at(p + ".weight"), params.at(p + ".bias"), 1, 1);
        if (relu_inputs) relu_inputs->push_back(x);
        x = relu(x);
    }
    const auto logits = conv2d(x, params.at("head.weight"), params.at("head.bias"), 1, 0);
    return clamp(sigmoid(logits), kProbEps, 1.0 - kProbEps);
}

namespace detail {

inline void check_bce_args(const Tensor& prob, const Tensor& target) {
    if (prob.shape() != target.shape())
        throw Error("bce_loss: shape mismatch " + shape_str(prob.shape()) + " vs " + shape_str(target.shape()));
    for (double y : target.values())
        if (y != 0.0 && y != 1.0) throw Error("bce_loss: target must be binary, found " + std::to_string(y));
}

} // namespace detail

/// -sum over pixels of [Y log P + (1-Y) log(1-P)], with P clamped into [kProbEps, 1-kProbEps].
inline Tensor bce_loss(const Tensor& prob, const Tensor& target) {
    detail::check_bce_args(prob, target);
    const auto p = clamp(prob, kProbEps, 1.0 - kProbEps);
    const auto not_target = 1.0 - target;
    return -sum(add(mul(target, log(p)), mul(not_target, log(1.0 - p))));
}

inline Tensor bce_loss(const Tensor& prob, const Mask& target) {
    if (prob.shape() != Shape{1, target.height, target.width})
        throw Error("bce_loss: shape mismatch " + shape_str(prob.shape()) + " vs mask " + mask_shape_str(target));
    if (!target.is_binary()) throw Error("bce_loss: target mask is not binary");
    return bce_loss(prob, target.to_tensor());
}

/// Per-pixel mean form, for reporting.
inline double bce_loss_mean(const Tensor& prob, const Mask& target) {
    return bce_loss(prob.detach(), target).item() / static_cast<double>(target.size());
}

} // namespace ssfda
