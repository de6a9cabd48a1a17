#pragma once

#include <span>
#include <vector>

#include "curriculum.hpp"
#include "metrics.hpp"
#include "parallel.hpp"
#include "segnet.hpp"
#include "synthweather.hpp"

namespace ssfda {

struct EvalResult {
    Confusion total;
    std::vector<Confusion> per_image;
    std::vector<double> entropy; // per image, single-term mode unless requested otherwise
    double mean_entropy = 0.0;

    MetricReport metrics() const { return report(total); }
};

/// Predict every scene, binarize at 0.5 and accumulate confusions (micro average).
inline EvalResult evaluate(const ModelParams& params, const NetConfig& cfg, std::span<const Scene> scenes,
                           EntropyMode mode = EntropyMode::Paper) {
    const auto frozen = params.detached();
    EvalResult r;
    r.per_image.resize(scenes.size());
    r.entropy.resize(scenes.size());
    parallel_for(scenes.size(), [&](std::size_t i) {
        const auto prob = forward(frozen, cfg, scenes[i].image);
        r.per_image[i] = confusion(binarize(prob), scenes[i].label);
        r.entropy[i] = prediction_entropy(prob, mode);
    });
    double e = 0.0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        r.total += r.per_image[i];
        e += r.entropy[i];
    }
    r.mean_entropy = scenes.empty() ? 0.0 : e / static_cast<double>(scenes.size());
    return r;
}

inline double miou_or_zero(const EvalResult& r) { return r.metrics().miou.value_or(0.0); }

} // namespace ssfda
