#pragma once

// The three pipeline stages plus evaluation, each returning its parameters and a
// JSON report. Reports hold only values reproducible from (config, seed); timing
// is left to callers.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "config.hpp"
#include "curriculum.hpp"
#include "dataset.hpp"
#include "distill.hpp"
#include "evaluation.hpp"
#include "train.hpp"

namespace ssfda {

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline json metric_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const MetricReport& r) {
    return {{"road_iou", metric_json(r.road_iou)}, {"bg_iou", metric_json(r.bg_iou)},
            {"miou", metric_json(r.miou)},         {"recall", metric_json(r.recall)},
            {"precision", metric_json(r.precision)}, {"f1", metric_json(r.f1)}};
}

// ---------------------------------------------------------------------------
// Evaluation tables

struct EvalRow {
    std::string dataset;
    std::string severity; // level name, or "all"
    std::size_t images = 0;
    Confusion confusion;
    MetricReport metrics;
    double mean_entropy = 0.0;
};

/// One row per level of the split (in recipe order), then an "all" row.
inline std::vector<EvalRow> evaluate_split(const ModelParams& params, const NetConfig& net, const Dataset& ds,
                                           const std::string& split) {
    const auto records = ds.split(split);
    std::vector<Scene> scenes;
    for (const auto* r : records) scenes.push_back(r->scene);
    const auto res = evaluate(params, net, scenes);

    std::vector<EvalRow> rows;
    for (const auto& level : ds.levels(split)) {
        EvalRow row{split, level, 0, {}, {}, 0.0};
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i]->level == level) {
                row.confusion += res.per_image[i];
                row.mean_entropy += res.entropy[i];
                ++row.images;
            }
        row.mean_entropy /= static_cast<double>(row.images);
        row.metrics = report(row.confusion);
        rows.push_back(std::move(row));
    }
    rows.push_back({split, "all", records.size(), res.total, res.metrics(), res.mean_entropy});
    return rows;
}

inline const EvalRow& find_row(const std::vector<EvalRow>& rows, const std::string& severity) {
    for (const auto& r : rows)
        if (r.severity == severity) return r;
    throw Error("no evaluation row for severity '" + severity + "'");
}

inline const char* kEvalCsvHeader = "dataset,severity,road_iou,bg_iou,miou,recall,precision,f1,mean_entropy";

inline std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::ostringstream os;
    os << kEvalCsvHeader << '\n';
    for (const auto& r : rows) {
        char ent[32];
        std::snprintf(ent, sizeof ent, "%.6f", r.mean_entropy);
        os << r.dataset << ',' << r.severity << ',' << format_metric(r.metrics.road_iou) << ','
           << format_metric(r.metrics.bg_iou) << ',' << format_metric(r.metrics.miou) << ','
           << format_metric(r.metrics.recall) << ',' << format_metric(r.metrics.precision) << ','
           << format_metric(r.metrics.f1) << ',' << ent << '\n';
    }
    return os.str();
}

inline json to_json(const std::vector<EvalRow>& rows) {
    json out = json::array();
    for (const auto& r : rows) {
        auto j = to_json(r.metrics);
        j["dataset"] = r.dataset;
        j["severity"] = r.severity;
        j["images"] = r.images;
        j["mean_entropy"] = r.mean_entropy;
        j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}, {"tn", r.confusion.tn}};
        out.push_back(std::move(j));
    }
    return out;
}

inline double miou_of(const std::vector<EvalRow>& rows, const std::string& severity) {
    return find_row(rows, severity).metrics.miou.value_or(0.0);
}

// ---------------------------------------------------------------------------
// Stage 1

struct PretrainOutcome {
    ModelParams params;
    std::vector<double> epoch_losses;
    std::vector<EvalRow> source_eval;
    json report;
};

inline PretrainOutcome run_pretrain(const ExperimentConfig& cfg, const Dataset& ds,
                                    const std::function<void(std::size_t, double)>& on_epoch = {}) {
    cfg.validate();
    const auto train = ds.scenes(cfg.roles.pretrain);
    auto res = pretrain_supervised(train, cfg.net, cfg.sgd, derive_seed(cfg.seed, "pretrain"), on_epoch);
    PretrainOutcome out;
    out.params = std::move(res.params);
    out.epoch_losses = std::move(res.epoch_losses);
    out.source_eval = evaluate_split(out.params, cfg.net, ds, cfg.roles.source_eval);
    out.report = {{"stage", "pretrain"},
                  {"config", to_json(cfg)},
                  {"train_scenes", train.size()},
                  {"epoch_losses", out.epoch_losses},
                  {"source_eval", to_json(out.source_eval)},
                  {"fingerprint", hex64(out.params.fingerprint())}};
    return out;
}

// ---------------------------------------------------------------------------
// Stage 2

struct AdaptOptions {
    bool no_curriculum = false;     // one batch holding every target image
    bool iterative_baseline = false;
    bool severity_plan = false;     // group by recipe level instead of entropy ranking
    std::optional<std::size_t> m;   // overrides adapt.m
    bool snapshots = true;          // evaluate after each step of each batch
};

inline json to_json(const AdaptOptions& o) {
    return {{"no_curriculum", o.no_curriculum},
            {"iterative_baseline", o.iterative_baseline},
            {"severity_plan", o.severity_plan},
            {"m", o.m ? json(*o.m) : json(nullptr)},
            {"snapshots", o.snapshots}};
}

/// Labels of the target split are stripped here, before anything else sees the images.
inline std::vector<UnlabeledImage> target_images(const Dataset& ds, const std::string& split) {
    std::vector<UnlabeledImage> out;
    for (const auto* r : ds.split(split)) out.push_back({r->id, r->scene.image});
    return out;
}

inline CurriculumPlan build_plan(const ModelParams& source, const ExperimentConfig& cfg, const Dataset& ds,
                                 std::span<const UnlabeledImage> images, const AdaptOptions& opt,
                                 std::vector<EntropyScore>* scores_out = nullptr) {
    if (opt.severity_plan && !opt.no_curriculum) {
        std::vector<std::vector<std::size_t>> groups;
        for (const auto& level : ds.levels(cfg.roles.adapt)) {
            groups.emplace_back();
            for (const auto* r : ds.split(cfg.roles.adapt))
                if (r->level == level) groups.back().push_back(r->id);
        }
        return plan_from_severity_labels(std::move(groups));
    }
    auto scores = score_dataset(source, cfg.net, images, cfg.adapt.entropy_mode);
    if (scores_out) *scores_out = scores;
    // No curriculum is the m = 1 plan: one batch, same budget per image.
    return sort_and_partition(std::move(scores), opt.no_curriculum ? 1 : opt.m.value_or(cfg.adapt.m));
}

struct AdaptOutcome {
    ModelParams params;
    CurriculumPlan plan;
    CurriculumResult result;
    std::vector<EvalRow> target_before, target_after, source_before, source_after;
    json report;
};

inline AdaptOutcome run_adapt(const ExperimentConfig& cfg, const Dataset& ds, const ModelParams& source,
                              const AdaptOptions& opt = {}) {
    cfg.validate();
    check_layout(source, cfg.net);
    AdaptConfig adapt = cfg.adapt;
    adapt.iterative_baseline = opt.iterative_baseline;

    const auto images = target_images(ds, cfg.roles.adapt);
    std::vector<EntropyScore> scores;
    AdaptOutcome out;
    out.plan = build_plan(source, cfg, ds, images, opt, &scores);

    SnapshotFn snapshot;
    if (opt.snapshots)
        snapshot = [&](const ModelParams& p) { return find_row(evaluate_split(p, cfg.net, ds, cfg.roles.adapt_eval), "all").metrics; };
    out.result = run_curriculum(source, cfg.net, out.plan, images, adapt, cfg.adapt_sgd, derive_seed(cfg.seed, "adapt"),
                                snapshot);
    out.params = out.result.params.detached();

    out.target_before = evaluate_split(source, cfg.net, ds, cfg.roles.adapt_eval);
    out.target_after = evaluate_split(out.params, cfg.net, ds, cfg.roles.adapt_eval);
    out.source_before = evaluate_split(source, cfg.net, ds, cfg.roles.source_eval);
    out.source_after = evaluate_split(out.params, cfg.net, ds, cfg.roles.source_eval);

    json scores_json = json::array();
    for (const auto& s : scores) scores_json.push_back({{"id", s.id}, {"entropy", s.score}});
    json batches = json::array();
    for (const auto& b : out.result.batches) {
        json j = {{"index", b.index},
                  {"ids", b.ids},
                  {"init_fingerprint", hex64(b.init_fingerprint)},
                  {"step1_fingerprint", hex64(b.step1_fingerprint)},
                  {"final_fingerprint", hex64(b.final_fingerprint)},
                  {"entropy_before", b.entropy_before},
                  {"entropy_after_step1", b.entropy_after_step1},
                  {"entropy_after_step2", b.entropy_after_step2},
                  {"step1_losses", b.step1_losses},
                  {"step2_losses", b.step2_losses}};
        if (b.after_step1) j["after_step1"] = to_json(*b.after_step1);
        if (b.after_step2) j["after_step2"] = to_json(*b.after_step2);
        batches.push_back(std::move(j));
    }
    out.report = {{"stage", "adapt"},
                  {"config", to_json(cfg)},
                  {"options", to_json(opt)},
                  {"source_fingerprint", hex64(source.fingerprint())},
                  {"entropy_scores", scores_json},
                  {"plan", to_json(out.plan)},
                  {"batches", batches},
                  {"target_before", to_json(out.target_before)},
                  {"target_after", to_json(out.target_after)},
                  {"source_before", to_json(out.source_before)},
                  {"source_after", to_json(out.source_after)},
                  {"fingerprint", hex64(out.params.fingerprint())}};
    return out;
}

// ---------------------------------------------------------------------------
// Stage 3

struct FinetuneOutcome {
    ModelParams params;
    std::vector<std::size_t> selected; // dataset ids
    FinetuneResult result;
    std::vector<EvalRow> eval_before, eval_after;
    double relative_distance = 0.0;
    json report;
};

inline FinetuneOutcome run_finetune(const ExperimentConfig& cfg, const Dataset& ds, const ModelParams& anchor,
                                    std::optional<std::size_t> k_override = {}, bool no_distill = false,
                                    std::optional<double> lambda_override = {}) {
    cfg.validate();
    check_layout(anchor, cfg.net);
    DistillConfig dc = cfg.distill;
    if (k_override) dc.k = *k_override;
    if (lambda_override) dc.lambda = *lambda_override;
    if (no_distill) dc.lambda = 0.0;
    dc.validate();

    const auto pool = ds.split(cfg.roles.finetune);
    const auto picks = select_few(pool.size(), dc.k, derive_seed(cfg.seed, "k-select"));
    FinetuneOutcome out;
    std::vector<Scene> labeled;
    for (auto i : picks) {
        out.selected.push_back(pool[i]->id);
        labeled.push_back(pool[i]->scene);
    }
    out.result = finetune_few(anchor, cfg.net, labeled, dc, derive_seed(cfg.seed, "finetune"));
    out.params = out.result.params.detached();
    out.eval_before = evaluate_split(anchor, cfg.net, ds, cfg.roles.finetune_eval);
    out.eval_after = evaluate_split(out.params, cfg.net, ds, cfg.roles.finetune_eval);
    out.relative_distance = relative_weight_distance(out.params, anchor);
    out.report = {{"stage", "finetune-few"},
                  {"config", to_json(cfg)},
                  {"k", dc.k},
                  {"lambda", dc.lambda},
                  {"distance", to_string(dc.distance)},
                  {"selected_ids", out.selected},
                  {"anchor_fingerprint", hex64(anchor.fingerprint())},
                  {"losses", out.result.losses},
                  {"initial_train_bce", out.result.initial_train_bce},
                  {"final_train_bce", out.result.final_train_bce},
                  {"relative_weight_distance", out.relative_distance},
                  {"eval_before", to_json(out.eval_before)},
                  {"eval_after", to_json(out.eval_after)},
                  {"fingerprint", hex64(out.params.fingerprint())}};
    return out;
}

} // namespace ssfda
