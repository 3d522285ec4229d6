// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include "hiermem/harness.hpp"

#include "fixtures.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

using namespace hiermem;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kJacobianRelTol = 1e-6;
constexpr double kLossGradRelTol = 1e-5;
constexpr double kGradRuntimeSec = 10.0;
constexpr double kSimplexTol = 1e-12;
constexpr double kReductionTarget = 0.45;
constexpr double kReductionTol = 0.01;
constexpr double kBlockFraction = 0.55;
constexpr int kShiftWindow = 32;
constexpr double kShiftTau = 0.05;
constexpr int kShiftMinHits = 95;
constexpr double kRectifyTol = 1e-9;
constexpr double kOverfitLoss = 0.1;
constexpr int kOverfitSteps = 500;
constexpr int kOverfitMinSeeds = 4;
constexpr double kChance = 0.25;
constexpr double kChanceTol = 0.05;
constexpr double kSegmentRangeMax = 0.15;
constexpr double kBaselineSlack = 0.01;

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Outcome gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(101);
    double worst_j = 0.0;
    for (int i = 0; i < 100; ++i) {
        const int d = 1 + static_cast<int>(rng() % 8), L = 2 + static_cast<int>(rng() % 4);
        const Vec q = oracle::random_vec(rng, d);
        std::vector<Vec> keys;
        for (int l = 0; l < L; ++l) keys.push_back(oracle::random_vec(rng, d));
        const Mat J = alpha_jacobian(q, keys);
        const Mat F = fd_alpha_jacobian(q, keys, 1e-5);
        worst_j = std::max(worst_j, (J - F).norm() / F.norm());
    }
    double worst_g = 0.0;
    for (int i = 0; i < 50; ++i) {
        const int T = 1 + static_cast<int>(rng() % 5), L = 1 + static_cast<int>(rng() % 5),
                  d = 1 + static_cast<int>(rng() % 8);
        worst_g = std::max(worst_g, fixtures::gradient_check(rng, T, L, d));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst_j <= kJacobianRelTol && worst_g <= kLossGradRelTol && secs < kGradRuntimeSec,
            "jacobian max rel err " + fmt("%.3g", worst_j) + ", loss grad max rel err " + fmt("%.3g", worst_g) +
                ", " + fmt("%.2f", secs) + " s"};
}

Outcome simplex() {
    std::mt19937_64 rng(202);
    std::uniform_real_distribution<double> logscale(-3.0, 2.5);
    int bad = 0;
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const int d = 1 + static_cast<int>(rng() % 16), L = 1 + static_cast<int>(rng() % 8);
        const double sd = std::pow(10.0, logscale(rng));
        const Vec q = oracle::random_vec(rng, d, sd);
        std::vector<Vec> keys;
        for (int l = 0; l < L; ++l) keys.push_back(oracle::random_vec(rng, d, sd));
        const double temp = (rng() % 4 == 0) ? 0.1 + 3.0 * (static_cast<double>(rng() % 1000) / 1000.0) : 1.0;
        const Vec w = layer_weights(q, keys, temp).weights;
        const double err = std::abs(w.sum() - 1.0);
        worst = std::max(worst, err);
        if (err > kSimplexTol || (w.array() < 0.0).any() || !w.allFinite()) ++bad;
    }
    return {bad == 0, std::to_string(bad) + " violations in 10000, max |sum-1| " + fmt("%.3g", worst)};
}

Outcome clustering() {
    std::mt19937_64 rng(303);
    std::uniform_real_distribution<double> th(0.0, 2.0);
    int mismatches = 0;
    for (int i = 0; i < 200; ++i) {
        const int n = 1 + static_cast<int>(rng() % 8);
        const auto xs = fixtures::clustering_instance(rng, n, 1 + static_cast<int>(rng() % 5));
        const double theta = th(rng);
        if (fixtures::partition_of(cluster_tokens(xs, theta)) != oracle::average_linkage(xs, theta)) ++mismatches;
    }
    return {mismatches == 0, std::to_string(200 - mismatches) + "/200 partitions identical"};
}

Outcome op_count() {
    ModelConfig m;  // default model
    BenchConfig b;
    b.lengths = {64, 256, 1024};
    b.repetitions = 1;
    b.block_fraction = kBlockFraction;
    const auto rows = bench_lengths(m, b);
    bool ok = true;
    std::ostringstream os;
    std::map<int, long long> plain, packed;
    for (const auto& r : rows) {
        const auto expect = attention_op_count(r.length, r.variant == "memory" ? std::optional<long long>(r.blocks)
                                                                               : std::nullopt,
                                               m.attn_layers);
        ok &= r.scored_pairs == expect;
        (r.variant == "memory" ? packed : plain)[r.length] = r.scored_pairs;
    }
    for (const auto& [T, p] : plain) {
        const double red = 1.0 - static_cast<double>(packed[T]) / static_cast<double>(p);
        const bool in = std::abs(red - kReductionTarget) <= kReductionTol;
        ok &= in;
        os << "T=" << T << " B=" << static_cast<int>(std::ceil(kBlockFraction * T)) << " reduction "
           << fmt("%.4f", red) << (in ? "" : " (out of band)") << "; ";
    }
    // exactness sweep beyond the bench lengths
    std::mt19937_64 rng(404);
    int sweep_bad = 0;
    for (int layers : {1, 2, 3}) {
        ModelConfig c;
        c.d = 8;
        c.ffn_hidden = 8;
        c.vocab = 48;
        c.attn_layers = layers;
        const ModelParams p = init_params(c);
        for (int T : {1, 5, 17, 48}) {
            std::vector<int> tokens(static_cast<std::size_t>(T));
            for (int i = 0; i < T; ++i) tokens[static_cast<std::size_t>(i)] = i;
            sweep_bad += forward(p, tokens).ops.scored_pairs != attention_op_count(T, std::nullopt, layers);
            for (int B = 1; B <= T; B += std::max(1, T / 4)) {
                std::vector<Vec> xs;
                for (int i = 0; i < T; ++i) xs.push_back(oracle::random_vec(rng, 3));
                const auto mem = cluster_tokens(xs, 2.0, {}, static_cast<std::size_t>(B));
                sweep_bad += forward(p, tokens, &mem).ops.scored_pairs != attention_op_count(T, B, layers);
            }
        }
    }
    ok &= sweep_bad == 0;
    os << "op-count mismatches " << sweep_bad;
    return {ok, os.str()};
}

Outcome shift_detection() {
    int hits = 0, false_alarms = 0;
    std::mt19937_64 rng(505);
    for (int run = 0; run < 100; ++run) {
        const long s = 2 * kShiftWindow + static_cast<long>(rng() % 100);
        const int from = static_cast<int>(rng() % 4);
        const int to = (from + 1 + static_cast<int>(rng() % 3)) % 4;
        const auto stream = fixtures::planted_stream(rng, s + 2 * kShiftWindow, s, 4, from, to);
        const auto ev = fixtures::run_detector(stream, kShiftWindow, kShiftTau);
        if (!ev.empty() && ev.front() > s && ev.front() <= s + kShiftWindow) ++hits;
    }
    for (int run = 0; run < 100; ++run) {
        const int hot = static_cast<int>(rng() % 4);
        std::vector<Vec> stream;
        for (int i = 0; i < 400; ++i) stream.push_back(fixtures::noisy_one_hot(rng, 4, hot).weights);
        false_alarms += !fixtures::run_detector(stream, kShiftWindow, kShiftTau).empty();
    }
    return {hits >= kShiftMinHits && false_alarms == 0,
            "detected " + std::to_string(hits) + "/100 within W, " + std::to_string(false_alarms) +
                "/100 null streams fired"};
}

Outcome rectify_contraction() {
    std::mt19937_64 rng(606);
    double worst = 0.0;
    for (double eta : {0.25, 0.5, 1.0})
        for (int trial = 0; trial < 20; ++trial) {
            const int L = 2 + trial % 4, d = 1 + trial % 6;
            const auto f = fixtures::random_transform(rng, L, d);
            const auto before = fixtures::random_stacks(rng, 5, L, d, 2.0);
            const auto after = rectify(before, f, eta);
            for (std::size_t t = 0; t < before.size(); ++t)
                for (std::size_t g = 0; g + 1 < static_cast<std::size_t>(L); ++g) {
                    const Vec proj = f.apply(g, after[t].layers[g]);
                    const double pre = (before[t].layers[g + 1] - proj).norm();
                    const double post = (after[t].layers[g + 1] - proj).norm();
                    worst = std::max(worst, std::abs(post - (1.0 - eta) * pre));
                }
        }
    return {worst <= kRectifyTol, "max |post - (1-eta) pre| " + fmt("%.3g", worst)};
}

Outcome descent() {
    std::mt19937_64 rng(707);
    int ok = 0;
    double worst_ratio = 0.0;
    for (int i = 0; i < 20; ++i) {
        const int L = 2 + i % 4, d = 2 + i % 5;
        const auto stacks = fixtures::random_stacks(rng, 8, L, d);
        const auto [a, b] = fixtures::transform_descent(stacks, fixtures::random_transform(rng, L, d));
        ok += b <= a;
        worst_ratio = std::max(worst_ratio, b / a);
    }
    return {ok == 20, std::to_string(ok) + "/20 instances non-increasing, worst final/initial " +
                          fmt("%.3f", worst_ratio)};
}

Outcome training_sanity() {
    RunConfig cfg;
    cfg.task = Task::Overfit;
    cfg.training.steps = kOverfitSteps;
    int good = 0;
    std::ostringstream os;
    os << "min task loss per seed:";
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SeedRun r = run_overfit(cfg, seed);
        good += r.min_task_loss < kOverfitLoss;
        os << ' ' << fmt("%.4f", r.min_task_loss);
    }
    ModelConfig m;
    m.seed = 77;
    const Dataset d = gen_memorization_set(10000, 24, m.vocab, 4, 78);
    const double acc = evaluate(init_params(m), d.examples).accuracy;
    const bool chance = std::abs(acc - kChance) <= kChanceTol;
    os << "; " << good << "/5 below " << kOverfitLoss << "; untrained accuracy " << fmt("%.4f", acc);
    return {good >= kOverfitMinSeeds && chance, os.str()};
}

Outcome shift_trend() {
    RunConfig cfg;  // defaults: 10 segments, 5 seeds
    const ShiftEvalSummary s = shift_eval(cfg);
    std::ostringstream os;
    os << "params full " << s.full_params << " baseline " << s.baseline_params << "; per seed (acc, range, base acc):";
    for (const auto& x : s.seeds)
        os << " [" << x.seed << ": " << fmt("%.3f", x.full_accuracy) << ", " << fmt("%.3f", x.full_range) << ", "
           << fmt("%.3f", x.baseline_accuracy) << "]";
    os << "; median range " << fmt("%.4f", s.median_full_range) << ", median acc " << fmt("%.4f", s.median_full_accuracy)
       << " vs baseline " << fmt("%.4f", s.median_baseline_accuracy);
    const bool pass = s.median_full_range <= kSegmentRangeMax &&
                      s.median_full_accuracy >= s.median_baseline_accuracy - kBaselineSlack;
    return {pass, os.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism() {
    RunConfig cfg;
    cfg.task = Task::ShiftClassify;
    cfg.data.segments = 3;
    cfg.data.train_per_segment = 64;
    cfg.data.test_per_segment = 40;
    cfg.training.steps = 30;
    cfg.training.seeds = {11};
    const fs::path a = fs::temp_directory_path() / "hiermem_accept_det_a";
    const fs::path b = fs::temp_directory_path() / "hiermem_accept_det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    RunOverrides oa, ob;
    oa.output_dir = a.string();
    ob.output_dir = b.string();
    const RunManifest m = execute(cfg, oa);
    execute(cfg, ob);
    int compared = 0, differ = 0;
    for (const auto& f : m.files) {
        if (f.size() < 4 || f.substr(f.size() - 4) != ".csv") continue;
        ++compared;
        differ += slurp(a / f) != slurp(b / f);
    }
    fs::remove_all(a);
    fs::remove_all(b);
    return {compared > 0 && differ == 0,
            std::to_string(compared - differ) + "/" + std::to_string(compared) + " CSV files byte-identical"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradients},
        {"simplex invariants", simplex},
        {"clustering oracle equivalence", clustering},
        {"op-count reduction proxy", op_count},
        {"shift detection", shift_detection},
        {"rectify contraction", rectify_contraction},
        {"hierarchy-loss descent", descent},
        {"training sanity", training_sanity},
        {"segment accuracy stability", shift_trend},
        {"determinism", determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %zu %s: %s (%s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
