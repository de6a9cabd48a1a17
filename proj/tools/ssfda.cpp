// ssfda: experiment runner. Every input and output location is an explicit argument.
//
//   ssfda gen-data     --config C --out DATA
//   ssfda pretrain     --config C --data DATA --out RUN
//   ssfda adapt        --config C --data DATA --source RUN/model.ckpt --out RUN2 [--no-curriculum] ...
//   ssfda finetune-few --config C --data DATA --anchor RUN2/model.ckpt --out RUN3 [--k N] [--no-distill]
//   ssfda eval         --config C --data DATA --checkpoint CKPT --out metrics.csv [--split NAME]...
//   ssfda grad-check   [--inject-fault NAME] [--out report.json]
//
// report.json depends only on (config, seed); wall-clock goes to timing.json beside it.
// Dataset directories hold nothing but scenes and the manifest.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "ssfda/experiment.hpp"
#include "ssfda/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace ssfda;

namespace {

using Clock = std::chrono::steady_clock;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "experiment config (JSON); defaults when omitted")->check(CLI::ExistingFile);
        app->add_option("--seed", seed, "override the config seed");
    }

    ExperimentConfig load() const {
        auto cfg = config.empty() ? default_config() : load_config(config);
        if (seed) cfg.seed = *seed;
        cfg.validate();
        return cfg;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_timing(const fs::path& dir, const std::string& stage, Clock::time_point t0) {
    write_json(dir / "timing.json", {{"stage", stage}, {"wall_seconds", seconds_since(t0)}, {"threads", worker_count()}});
}

Dataset load_data(const std::string& dir, const ExperimentConfig& cfg) {
    if (!fs::exists(fs::path(dir) / "manifest.json")) throw Error("no dataset at " + dir + " (manifest.json missing)");
    auto ds = read_dataset(dir);
    if (ds.width != cfg.net.width || ds.height != cfg.net.height)
        throw Error("dataset is " + std::to_string(ds.width) + "x" + std::to_string(ds.height) + ", config expects " +
                    std::to_string(cfg.net.width) + "x" + std::to_string(cfg.net.height));
    return ds;
}

void print_rows(const std::string& tag, const std::vector<EvalRow>& rows) {
    std::cout << tag;
    for (const auto& r : rows) std::cout << "  " << r.severity << "=" << format_metric(r.metrics.miou);
    std::cout << "\n";
}

int cmd_gen_data(const Common& common, const std::string& out) {
    const auto cfg = common.load();
    const auto ds = generate_dataset(cfg.data, cfg.seed);
    write_dataset(ds, out);
    std::cout << "wrote " << ds.records.size() << " scenes to " << out << "\n";
    return 0;
}

int cmd_pretrain(const Common& common, const std::string& data, const std::string& out) {
    const auto t0 = Clock::now();
    auto cfg = common.load();
    const auto ds = load_data(data, cfg);
    prepare_dir(out);
    auto res = run_pretrain(cfg, ds, [&](std::size_t epoch, double loss) {
        std::cout << "epoch " << epoch + 1 << "/" << cfg.sgd.epochs << "  loss " << loss << "\n" << std::flush;
    });
    save_checkpoint(res.params, fs::path(out) / "model.ckpt");
    res.report["dataset_seed"] = ds.seed;
    res.report["checkpoint"] = "model.ckpt";
    write_json(fs::path(out) / "report.json", res.report);
    write_timing(out, "pretrain", t0);
    print_rows("source", res.source_eval);
    return 0;
}

int cmd_adapt(const Common& common, const std::string& data, const std::string& source, const std::string& out,
              AdaptOptions opt) {
    const auto t0 = Clock::now();
    const auto cfg = common.load();
    const auto ds = load_data(data, cfg);
    const auto src = load_checkpoint(source);
    prepare_dir(out);
    prepare_dir(fs::path(out) / "batches");
    auto res = run_adapt(cfg, ds, src, opt);
    json paths = json::array();
    for (std::size_t i = 0; i < res.result.checkpoints.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "batches/batch_%02zu.ckpt", i);
        save_checkpoint(res.result.checkpoints[i], fs::path(out) / name);
        paths.push_back(name);
    }
    save_checkpoint(res.params, fs::path(out) / "model.ckpt");
    write_json(fs::path(out) / "plan.json", to_json(res.plan));
    res.report["dataset_seed"] = ds.seed;
    res.report["checkpoint"] = "model.ckpt";
    res.report["batch_checkpoints"] = paths;
    write_json(fs::path(out) / "report.json", res.report);
    write_timing(out, "adapt", t0);
    for (const auto& b : res.result.batches) {
        std::cout << "batch " << b.index << "  n=" << b.ids.size() << "  H " << b.entropy_before << " -> "
                  << b.entropy_after_step1 << " -> " << b.entropy_after_step2;
        if (b.after_step2) std::cout << "  miou " << format_metric(b.after_step2->miou);
        std::cout << "\n";
    }
    print_rows("target before", res.target_before);
    print_rows("target after ", res.target_after);
    print_rows("source after ", res.source_after);
    return 0;
}

int cmd_finetune(const Common& common, const std::string& data, const std::string& anchor, const std::string& out,
                 std::optional<std::size_t> k, bool no_distill, std::optional<double> lambda) {
    const auto t0 = Clock::now();
    const auto cfg = common.load();
    const auto ds = load_data(data, cfg);
    const auto base = load_checkpoint(anchor);
    prepare_dir(out);
    auto res = run_finetune(cfg, ds, base, k, no_distill, lambda);
    save_checkpoint(res.params, fs::path(out) / "model.ckpt");
    res.report["dataset_seed"] = ds.seed;
    res.report["checkpoint"] = "model.ckpt";
    write_json(fs::path(out) / "report.json", res.report);
    write_timing(out, "finetune-few", t0);
    print_rows("before", res.eval_before);
    print_rows("after ", res.eval_after);
    std::cout << "relative weight distance " << res.relative_distance << "\n";
    return 0;
}

int cmd_eval(const Common& common, const std::string& data, const std::string& ckpt, const std::string& out,
             std::vector<std::string> splits) {
    const auto cfg = common.load();
    const auto ds = load_data(data, cfg);
    const auto params = load_checkpoint(ckpt);
    check_layout(params, cfg.net);
    if (splits.empty())
        for (const auto& r : ds.records)
            if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) splits.push_back(r.split);
    std::vector<EvalRow> rows;
    for (const auto& s : splits) {
        auto part = evaluate_split(params, cfg.net, ds, s);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    const auto csv = eval_csv(rows);
    if (out.empty()) std::cout << csv;
    else write_text(out, csv);
    return 0;
}

int cmd_grad_check(const std::string& fault, std::size_t seeds, const std::string& out) {
    GradCheckOptions opt;
    opt.fault = fault;
    opt.seeds = seeds;
    const auto t0 = Clock::now();
    const auto results = run_grad_suite(opt);
    const double elapsed = seconds_since(t0);
    bool all = true;
    json listing = json::array();
    for (const auto& r : results) {
        std::printf("%-4s %-22s max_rel_err=%.3e\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.max_error);
        listing.push_back({{"name", r.name}, {"max_error", r.max_error}, {"passed", r.passed}});
        all = all && r.passed;
    }
    std::printf("%zu checks, %zu seeds each, tolerance %.0e, %.1f s\n", results.size(), opt.seeds, opt.tolerance, elapsed);
    if (!out.empty())
        write_json(out, {{"seeds", opt.seeds},
                         {"tolerance", opt.tolerance},
                         {"eps", opt.eps},
                         {"fault", fault.empty() ? json(nullptr) : json(fault)},
                         {"passed", all},
                         {"checks", listing}});
    return all ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Tape nodes allocate many mid-sized buffers per step; keep them off mmap.
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    CLI::App app{"Source-free self-supervised domain adaptation for road segmentation"};
    app.require_subcommand(1);

    Common common;
    std::string data, out, source, anchor, ckpt, fault, grad_out;
    std::vector<std::string> splits;
    AdaptOptions adapt_opt;
    std::optional<std::size_t> m, k;
    std::optional<double> lambda;
    bool no_distill = false;
    std::size_t grad_seeds = 20;

    auto* gen = app.add_subcommand("gen-data", "render the synthetic scene dataset");
    common.attach(gen);
    gen->add_option("--out", out, "dataset directory")->required();

    auto* pre = app.add_subcommand("pretrain", "supervised training on the clean source split");
    common.attach(pre);
    pre->add_option("--data", data, "dataset directory")->required();
    pre->add_option("--out", out, "run directory")->required();

    auto* ad = app.add_subcommand("adapt", "curriculum entropy minimization + online self-training");
    common.attach(ad);
    ad->add_option("--data", data, "dataset directory")->required();
    ad->add_option("--source", source, "pretrained checkpoint")->required()->check(CLI::ExistingFile);
    ad->add_option("--out", out, "run directory")->required();
    ad->add_flag("--no-curriculum", adapt_opt.no_curriculum, "single batch holding every target image");
    ad->add_flag("--iterative-baseline", adapt_opt.iterative_baseline, "frozen-label rounds instead of online labels");
    ad->add_flag("--severity-plan", adapt_opt.severity_plan, "one batch per declared severity level, in recipe order");
    ad->add_option("--m", m, "number of curriculum batches")->check(CLI::PositiveNumber);
    ad->add_flag("!--no-snapshots", adapt_opt.snapshots, "skip per-batch evaluation on the held-out target split");

    auto* ft = app.add_subcommand("finetune-few", "few-shot fine-tuning with weight-space distillation");
    common.attach(ft);
    ft->add_option("--data", data, "dataset directory")->required();
    ft->add_option("--anchor", anchor, "adapted checkpoint")->required()->check(CLI::ExistingFile);
    ft->add_option("--out", out, "run directory")->required();
    ft->add_option("--k", k, "labeled scenes to draw")->check(CLI::PositiveNumber);
    ft->add_option("--lambda", lambda, "distillation weight")->check(CLI::NonNegativeNumber);
    ft->add_flag("--no-distill", no_distill, "lambda = 0");

    auto* ev = app.add_subcommand("eval", "per-severity metrics as CSV");
    common.attach(ev);
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--checkpoint", ckpt, "checkpoint to score")->required()->check(CLI::ExistingFile);
    ev->add_option("--out", out, "CSV path; stdout when omitted");
    ev->add_option("--split", splits, "splits to score; all when omitted");

    auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable op");
    gc->add_option("--inject-fault", fault, "sabotage one backward rule")
        ->check(CLI::IsMember(grad_check_names()));
    gc->add_option("--seeds", grad_seeds, "seeds per check")->check(CLI::PositiveNumber);
    gc->add_option("--out", grad_out, "JSON listing");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_data(common, out);
        if (*pre) return cmd_pretrain(common, data, out);
        if (*ad) {
            adapt_opt.m = m;
            return cmd_adapt(common, data, source, out, adapt_opt);
        }
        if (*ft) return cmd_finetune(common, data, anchor, out, k, no_distill, lambda);
        if (*ev) return cmd_eval(common, data, ckpt, out, splits);
        if (*gc) return cmd_grad_check(fault, grad_seeds, grad_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
