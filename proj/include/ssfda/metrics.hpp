#pragma once

// Binary road-segmentation metrics. Road (1) is the positive class.
// Dataset-level numbers are micro-averaged: sum confusions, then compute once.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mask.hpp"
#include "tensor.hpp"

namespace ssfda {

/// 1 iff P >= threshold.
inline Mask binarize(const Tensor& prob, double threshold = 0.5) {
    if (prob.rank() != 3 || prob.dim(0) != 1)
        throw Error("binarize: expected 1×h×w probabilities, got " + shape_str(prob.shape()));
    Mask m(prob.dim(1), prob.dim(2));
    const auto v = prob.values();
    for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = v[i] >= threshold ? 1 : 0;
    return m;
}

struct Confusion {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }

    Confusion& operator+=(const Confusion& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend Confusion operator+(Confusion a, const Confusion& b) { return a += b; }
    friend bool operator==(const Confusion&, const Confusion&) = default;
};

inline Confusion confusion(const Mask& pred, const Mask& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw Error("confusion: shape mismatch " + mask_shape_str(pred) + " vs " + mask_shape_str(gt));
    if (!pred.is_binary() || !gt.is_binary()) throw Error("confusion: masks must be binary");
    Confusion c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i], g = gt.data[i];
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// Undefined metrics (zero denominator) are empty optionals.
struct MetricReport {
    std::optional<double> road_iou, bg_iou, miou, recall, precision, f1;
};

inline MetricReport report(const Confusion& c) {
    auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    MetricReport r;
    r.road_iou = ratio(c.tp, c.tp + c.fp + c.fn);
    r.bg_iou = ratio(c.tn, c.tn + c.fp + c.fn);
    if (r.road_iou && r.bg_iou) r.miou = (*r.road_iou + *r.bg_iou) / 2.0;
    r.recall = ratio(c.tp, c.tp + c.fn);
    r.precision = ratio(c.tp, c.tp + c.fp);
    if (r.recall && r.precision && (*r.recall + *r.precision) > 0.0)
        r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
    return r;
}

/// Per-image mIoU averaged over images where it is defined (macro average). Reported
/// alongside the micro-averaged number only to document the difference.
inline std::optional<double> macro_miou(std::span<const Confusion> per_image) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& c : per_image)
        if (auto m = report(c).miou) {
            total += *m;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

inline std::string format_metric(const std::optional<double>& v) {
    if (!v) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

} // namespace ssfda
