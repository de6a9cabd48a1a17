// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Progress and per-seed numbers go to stderr; the verdict lines go to stdout.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

#include "ssfda/experiment.hpp"
#include "ssfda/gradcheck_suite.hpp"

using namespace ssfda;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kEntropyOracleTol = 1e-12;
constexpr double kPretrainMiou = 0.90;
constexpr double kPretrainSeconds = 600.0;
constexpr double kDegradation = 0.15;
constexpr double kRecovery = 0.05;
constexpr double kStep2Slack = 0.005;
constexpr double kPinDistance = 1e-3;
constexpr double kSourceKeep = 0.90;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};
const char* kHeaviest = "fog:30";

int failures = 0;

void verdict(int id, bool pass, const std::string& name, const std::string& detail) {
    std::printf("%s %2d %-22s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct SeedRun {
    std::uint64_t seed = 0;
    ExperimentConfig cfg;
    Dataset ds;
    PretrainOutcome pre;
    double pretrain_seconds = 0.0;
    double frozen_clean = 0.0, frozen_heavy = 0.0;
    AdaptOutcome cur;
    double cur_heavy = 0.0, nocur_heavy = 0.0, cur_all = 0.0, iter_all = 0.0;
    double ft_plain = 0.0, ft_distill = 0.0;
};

SeedRun run_seed(std::uint64_t seed) {
    SeedRun r;
    r.seed = seed;
    r.cfg = default_config();
    r.cfg.seed = seed;
    r.ds = generate_dataset(r.cfg.data, seed);
    auto t0 = Clock::now();
    r.pre = run_pretrain(r.cfg, r.ds, {});
    r.pretrain_seconds = since(t0);
    const auto& roles = r.cfg.roles;
    r.frozen_clean = miou_of(r.pre.source_eval, "all");
    r.frozen_heavy = miou_of(evaluate_split(r.pre.params, r.cfg.net, r.ds, roles.adapt_eval), kHeaviest);

    AdaptOptions cur;
    r.cur = run_adapt(r.cfg, r.ds, r.pre.params, cur);
    r.cur_heavy = miou_of(r.cur.target_after, kHeaviest);
    r.cur_all = miou_of(r.cur.target_after, "all");

    AdaptOptions nocur;
    nocur.no_curriculum = true;
    nocur.snapshots = false;
    r.nocur_heavy = miou_of(run_adapt(r.cfg, r.ds, r.pre.params, nocur).target_after, kHeaviest);

    AdaptOptions iter;
    iter.iterative_baseline = true;
    iter.snapshots = false;
    r.iter_all = miou_of(run_adapt(r.cfg, r.ds, r.pre.params, iter).target_after, "all");

    r.ft_plain = miou_of(run_finetune(r.cfg, r.ds, r.cur.params, 10, true, std::nullopt).eval_after, "all");
    r.ft_distill = miou_of(run_finetune(r.cfg, r.ds, r.cur.params, 10, false, 1.0).eval_after, "all");

    std::fprintf(stderr,
                 "seed %llu: pretrain %.1fs clean %.4f | %s frozen %.4f cur %.4f nocur %.4f | all cur %.4f iter %.4f | "
                 "mixed plain %.4f distill %.4f | clean after %.4f\n",
                 static_cast<unsigned long long>(seed), r.pretrain_seconds, r.frozen_clean, kHeaviest, r.frozen_heavy,
                 r.cur_heavy, r.nocur_heavy, r.cur_all, r.iter_all, r.ft_plain, r.ft_distill,
                 miou_of(r.cur.source_after, "all"));
    return r;
}

// --- independent oracles ---------------------------------------------------

bool entropy_oracle() {
    Rng rng(101);
    for (int t = 0; t < 50; ++t) {
        const std::size_t h = 1 + rng.below(16), w = 1 + rng.below(16);
        std::vector<double> v(h * w);
        for (auto& x : v) x = rng.uniform(1e-6, 1.0 - 1e-6);
        double sum = 0.0;
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) sum -= v[r * w + c] * std::log(v[r * w + c]);
        const double got = prediction_entropy(Tensor({1, h, w}, v), EntropyMode::Paper);
        if (std::abs(got - sum / static_cast<double>(h * w)) > kEntropyOracleTol) return false;
    }
    return true;
}

bool partition_oracle() {
    Rng rng(102);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.below(60), m = 1 + rng.below(n);
        std::vector<EntropyScore> s;
        for (std::size_t i = 0; i < n; ++i) s.push_back({i, t % 4 == 0 ? 0.1 * rng.below(3) : rng.uniform()});
        // Selection sort by (score, id), then fill batches front to back, larger ones first.
        auto sorted = s;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = i;
            for (std::size_t j = i + 1; j < n; ++j)
                if (sorted[j].score < sorted[best].score ||
                    (sorted[j].score == sorted[best].score && sorted[j].id < sorted[best].id))
                    best = j;
            std::swap(sorted[i], sorted[best]);
        }
        CurriculumPlan want;
        std::size_t pos = 0;
        for (std::size_t b = 0; b < m; ++b) {
            const std::size_t size = n / m + (b < n % m ? 1 : 0);
            want.batches.emplace_back();
            for (std::size_t k = 0; k < size; ++k) want.batches.back().push_back(sorted[pos++].id);
        }
        if (!(sort_and_partition(s, m) == want)) return false;
    }
    return true;
}

bool metrics_oracle() {
    Rng rng(103);
    for (int t = 0; t < 50; ++t) {
        const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
        Mask p(h, w), g(h, w);
        std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t i = 0; i < h * w; ++i) {
            p.data[i] = rng.below(2);
            g.data[i] = rng.below(2);
            if (p.data[i] && g.data[i]) ++tp;
            else if (p.data[i]) ++fp;
            else if (g.data[i]) ++fn;
            else ++tn;
        }
        const auto c = confusion(p, g);
        if (!(c == Confusion{tp, fp, fn, tn})) return false;
        const auto r = report(c);
        if (tp + fp + fn > 0 && *r.road_iou != static_cast<double>(tp) / static_cast<double>(tp + fp + fn)) return false;
        if (tn + fp + fn > 0 && *r.bg_iou != static_cast<double>(tn) / static_cast<double>(tn + fp + fn)) return false;
    }
    return true;
}

// --- CLI determinism -------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "timing.json") out[fs::relative(e.path(), dir).string()] = slurp(e.path());
    return out;
}

bool sh(const std::string& args) {
    const std::string cmd = std::string(SSFDA_CLI_PATH) + " " + args + " > /dev/null";
    return std::system(cmd.c_str()) == 0;
}

std::string cli_determinism() {
    const fs::path root = fs::temp_directory_path() / ("ssfda_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    std::vector<std::string> differ;
    bool ran = true;
    for (const char* rep : {"a", "b"}) {
        const auto d = root / rep;
        const std::string data = (d / "data").string();
        ran = ran && sh("gen-data --seed 1 --out " + data) && sh("pretrain --seed 1 --data " + data + " --out " + (d / "pre").string()) &&
              sh("adapt --seed 1 --data " + data + " --source " + (d / "pre/model.ckpt").string() + " --out " +
                 (d / "adapt").string()) &&
              sh("finetune-few --seed 1 --data " + data + " --anchor " + (d / "adapt/model.ckpt").string() + " --out " +
                 (d / "ft").string()) &&
              sh("eval --seed 1 --data " + data + " --checkpoint " + (d / "adapt/model.ckpt").string() + " --out " +
                 (d / "eval.csv").string()) &&
              sh("grad-check --seeds 2 --out " + (d / "grad.json").string());
    }
    if (!ran) {
        fs::remove_all(root);
        return "a subcommand exited non-zero";
    }
    for (const char* part : {"data", "pre", "adapt", "ft"})
        if (tree(root / "a" / part) != tree(root / "b" / part)) differ.push_back(part);
    if (slurp(root / "a/eval.csv") != slurp(root / "b/eval.csv")) differ.push_back("eval");
    if (slurp(root / "a/grad.json") != slurp(root / "b/grad.json")) differ.push_back("grad-check");
    fs::remove_all(root);
    std::string out;
    for (const auto& s : differ) out += (out.empty() ? "" : ",") + s;
    return out;
}

} // namespace

int main() {
    try {
        // 1
        {
            const auto t0 = Clock::now();
            GradCheckOptions opt;
            opt.seeds = 20;
            opt.tolerance = kGradTol;
            const auto res = run_grad_suite(opt);
            const double secs = since(t0);
            double worst = 0.0;
            bool all = true;
            for (const auto& r : res) {
                worst = std::max(worst, r.max_error);
                all = all && r.passed;
            }
            verdict(1, all && secs < kGradSeconds, "gradient-suite",
                    fmt("%zu checks, max rel err %.2e (tol %.0e), %.1fs (limit %.0fs)", res.size(), worst, kGradTol, secs,
                        kGradSeconds));
        }
        // 2
        {
            const bool e = entropy_oracle(), p = partition_oracle(), m = metrics_oracle();
            verdict(2, e && p && m, "oracle-equivalence",
                    fmt("entropy %s, partition %s, metrics %s", e ? "ok" : "MISMATCH", p ? "ok" : "MISMATCH",
                        m ? "ok" : "MISMATCH"));
        }

        std::vector<SeedRun> runs;
        for (auto s : kSeeds) runs.push_back(run_seed(s));
        const SeedRun& first = runs.front();

        // 3
        {
            bool ok = true;
            std::string d;
            for (const auto& r : runs) {
                ok = ok && r.frozen_clean >= kPretrainMiou && r.pretrain_seconds < kPretrainSeconds;
                d += fmt("s%llu %.4f/%.0fs ", static_cast<unsigned long long>(r.seed), r.frozen_clean, r.pretrain_seconds);
            }
            verdict(3, ok, "pretraining", d + fmt("(need >= %.2f, < %.0fs)", kPretrainMiou, kPretrainSeconds));
        }
        // 4
        {
            const double drop = first.frozen_clean - first.frozen_heavy;
            const double gain = first.cur_heavy - first.frozen_heavy;
            bool all_positive = true;
            std::string d;
            for (const auto& r : runs) {
                all_positive = all_positive && r.cur_heavy > r.frozen_heavy;
                d += fmt(" %+.4f", r.cur_heavy - r.frozen_heavy);
            }
            verdict(4, drop >= kDegradation && gain >= kRecovery && all_positive, "degradation-recovery",
                    fmt("drop %.4f (need >= %.2f), gain %+.4f (need >= %.2f), per-seed gains", drop, kDegradation, gain,
                        kRecovery) + d);
        }
        // 5, 6 and the lambda = 1 half of 9: seeded A/B counts
        int distill_wins = 0;
        std::string d9;
        {
            int cur_wins = 0, online_wins = 0;
            std::string d5, d6;
            for (const auto& r : runs) {
                cur_wins += r.cur_heavy >= r.nocur_heavy;
                online_wins += r.cur_all >= r.iter_all;
                distill_wins += r.ft_distill >= r.ft_plain;
                d5 += fmt(" %.4f/%.4f", r.cur_heavy, r.nocur_heavy);
                d6 += fmt(" %.4f/%.4f", r.cur_all, r.iter_all);
                d9 += fmt(" %.4f/%.4f", r.ft_distill, r.ft_plain);
            }
            verdict(5, cur_wins >= 2, "curriculum-benefit", fmt("%d/3 seeds, cur/nocur at %s:", cur_wins, kHeaviest) + d5);
            verdict(6, online_wins >= 2, "online-vs-iterative", fmt("%d/3 seeds, online/iterative all:", online_wins) + d6);
        }
        // 7
        {
            bool step2_ok = true, rising = true;
            std::string d;
            double prev = -1.0;
            for (const auto& b : first.cur.result.batches) {
                const double s1 = b.after_step1->miou.value_or(0.0), s2 = b.after_step2->miou.value_or(0.0);
                step2_ok = step2_ok && s2 >= s1 - kStep2Slack;
                rising = rising && s2 >= prev;
                prev = s2;
                d += fmt(" %.4f>%.4f", s1, s2);
            }
            verdict(7, step2_ok && rising, "two-step-ordering",
                    fmt("step2 >= step1 - %.3f: %s, non-decreasing: %s; per batch", kStep2Slack, step2_ok ? "yes" : "no",
                        rising ? "yes" : "no") + d);
        }
        // 8
        {
            const auto& cfg = first.cfg;
            std::vector<UnlabeledImage> batch;
            for (const auto* r : first.ds.split(cfg.roles.adapt))
                if (r->level == kHeaviest && batch.size() < 4) batch.push_back({r->id, r->scene.image});
            const double before = batch_mean_entropy(first.pre.params, cfg.net, batch, cfg.adapt.entropy_mode);
            int lowered = 0;
            std::string d;
            for (std::uint64_t s = 1; s <= 5; ++s) {
                const auto res = step1_entropy_min(first.pre.params, cfg.net, batch, cfg.adapt, cfg.adapt_sgd, s);
                const double after = batch_mean_entropy(res.params, cfg.net, batch, cfg.adapt.entropy_mode);
                lowered += after < before;
                d += fmt(" %.3e", after);
            }
            verdict(8, lowered == 5, "entropy-minimization", fmt("%d/5 seeds below %.3e:", lowered, before) + d);
        }
        // 9
        {
            const auto pinned = run_finetune(first.cfg, first.ds, first.cur.params, 10, false, 1e6);
            verdict(9, distill_wins >= 2 && pinned.relative_distance <= kPinDistance, "distillation",
                    fmt("%d/3 seeds, lambda 1/0 mixed all:", distill_wins) + d9 +
                        fmt("; lambda 1e6 rel dist %.2e (need <= %.0e)", pinned.relative_distance, kPinDistance));
        }
        // 10
        {
            const double before = miou_of(first.cur.source_before, "all"), after = miou_of(first.cur.source_after, "all");
            verdict(10, after >= kSourceKeep * before, "source-preservation",
                    fmt("clean %.4f -> %.4f, ratio %.4f (need >= %.2f)", before, after, after / before, kSourceKeep));
        }
        // 11
        {
            auto poisoned = first.ds;
            Rng rng(104);
            for (auto& r : poisoned.records)
                if (r.split == first.cfg.roles.adapt)
                    for (auto& v : r.scene.label.data) v = static_cast<std::uint8_t>(rng.below(2));
            AdaptOptions opt;
            opt.snapshots = false;
            const auto a = run_adapt(first.cfg, first.ds, first.pre.params, opt);
            const auto b = run_adapt(first.cfg, poisoned, first.pre.params, opt);
            const bool same = serialize_checkpoint(a.params) == serialize_checkpoint(b.params);
            verdict(11, same, "source-freedom", same ? "poisoned target labels: checkpoints bitwise identical"
                                                     : "poisoned target labels changed the checkpoint");
        }
        // 12
        {
            const auto differ = cli_determinism();
            verdict(12, differ.empty(), "cli-determinism",
                    differ.empty() ? "gen-data, pretrain, adapt, finetune-few, eval, grad-check repeat byte for byte"
                                   : "differs: " + differ);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
        return 2;
    }
    std::printf("%d of 12 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
