#pragma once

// Entropy scoring of target images and the ordered mini-batch plan built from it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segnet.hpp"
#include "tensor.hpp"

namespace ssfda {

enum class EntropyMode {
    Paper,  // single-term -P log P
    Binary, // -[P log P + (1-P) log(1-P)]
};

inline std::string to_string(EntropyMode m) { return m == EntropyMode::Paper ? "paper" : "binary"; }

inline EntropyMode entropy_mode_from_string(const std::string& s) {
    if (s == "paper") return EntropyMode::Paper;
    if (s == "binary") return EntropyMode::Binary;
    throw Error("unknown entropy mode '" + s + "'");
}

/// Per-pixel mean entropy (nats) of a 1×h×w probability map.
inline double prediction_entropy(const Tensor& prob, EntropyMode mode) {
    const auto v = prob.values();
    double total = 0.0;
    for (double p : v) {
        p = std::clamp(p, kProbEps, 1.0 - kProbEps);
        total -= p * std::log(p);
        if (mode == EntropyMode::Binary) total -= (1.0 - p) * std::log(1.0 - p);
    }
    return total / static_cast<double>(v.size());
}

/// An image exposed to adaptation code without its label.
struct UnlabeledImage {
    std::size_t id = 0;
    Tensor image;
};

struct EntropyScore {
    std::size_t id = 0;
    double score = 0.0;
};

inline std::vector<EntropyScore> score_dataset(const ModelParams& params, const NetConfig& cfg,
                                               std::span<const UnlabeledImage> images, EntropyMode mode) {
    const auto frozen = params.detached();
    std::vector<EntropyScore> scores;
    scores.reserve(images.size());
    for (const auto& img : images) scores.push_back({img.id, prediction_entropy(forward(frozen, cfg, img.image), mode)});
    return scores;
}

struct CurriculumPlan {
    std::vector<std::vector<std::size_t>> batches;

    std::size_t m() const { return batches.size(); }
    std::size_t scene_count() const {
        std::size_t n = 0;
        for (const auto& b : batches) n += b.size();
        return n;
    }
    friend bool operator==(const CurriculumPlan&, const CurriculumPlan&) = default;
};

/// Ascending by score (ties by id), split into m contiguous groups of sizes ceil(n/m) or
/// floor(n/m), larger groups first.
inline CurriculumPlan sort_and_partition(std::vector<EntropyScore> scores, std::size_t m) {
    const auto n = scores.size();
    if (m == 0) throw Error("sort_and_partition: m must be at least 1");
    if (m > n)
        throw Error("sort_and_partition: m = " + std::to_string(m) + " exceeds scene count " + std::to_string(n));
    std::stable_sort(scores.begin(), scores.end(), [](const EntropyScore& a, const EntropyScore& b) {
        if (a.score != b.score) return a.score < b.score;
        return a.id < b.id;
    });
    CurriculumPlan plan;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < m; ++b) {
        const std::size_t size = n / m + (b < n % m ? 1 : 0);
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < size; ++i) ids.push_back(scores[pos++].id);
        plan.batches.push_back(std::move(ids));
    }
    return plan;
}

/// Adopt externally provided severity groups verbatim, in the given order.
inline CurriculumPlan plan_from_severity_labels(std::vector<std::vector<std::size_t>> groups) {
    if (groups.empty()) throw Error("plan_from_severity_labels: no groups given");
    std::set<std::size_t> seen;
    for (const auto& g : groups) {
        if (g.empty()) throw Error("plan_from_severity_labels: empty group");
        for (auto id : g)
            if (!seen.insert(id).second)
                throw Error("plan_from_severity_labels: scene " + std::to_string(id) + " appears in more than one group");
    }
    return CurriculumPlan{std::move(groups)};
}

inline nlohmann::json to_json(const CurriculumPlan& plan) {
    return nlohmann::json{{"m", plan.m()}, {"batches", plan.batches}};
}

inline CurriculumPlan plan_from_json(const nlohmann::json& j) {
    return CurriculumPlan{j.at("batches").get<std::vector<std::vector<std::size_t>>>()};
}

} // namespace ssfda
