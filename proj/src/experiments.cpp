#include "hiermem/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace hiermem {

namespace {

ModelConfig seeded(const ModelConfig& m, std::uint64_t seed) {
    ModelConfig out = m;
    out.seed = m.seed + seed;
    return out;
}

std::vector<Example> segment_examples(const Dataset& d, int seg) {
    std::vector<Example> out;
    for (const auto& ex : d.examples)
        if (ex.segment == seg) out.push_back(ex);
    return out;
}

/// Cycles through a shuffled copy of `pool`, reshuffling after each pass.
class BatchCursor {
public:
    BatchCursor(std::vector<Example> pool, std::size_t batch, std::mt19937_64& rng)
        : pool_(std::move(pool)), batch_(std::min(batch, pool_.size())), rng_(rng) {
        std::shuffle(pool_.begin(), pool_.end(), rng_);
    }

    std::vector<Example> next() {
        std::vector<Example> b;
        while (b.size() < batch_) {
            if (pos_ == pool_.size()) {
                std::shuffle(pool_.begin(), pool_.end(), rng_);
                pos_ = 0;
            }
            b.push_back(pool_[pos_++]);
        }
        return b;
    }

private:
    std::vector<Example> pool_;
    std::size_t batch_;
    std::size_t pos_ = 0;
    std::mt19937_64& rng_;
};

std::string event_rows_csv(std::span<const MemoryEventRow> rows) {
    std::ostringstream os;
    os << "step,divergence,action,block_count,reward\n";
    for (const auto& r : rows)
        os << r.step << ',' << format_double(r.divergence) << ',' << to_string(r.action) << ',' << r.block_count
           << ',' << format_double(r.reward) << '\n';
    return os.str();
}

}  // namespace

SeedRun run_shift_classify(const RunConfig& cfg, std::uint64_t seed, const std::string& run_id) {
    SeedRun out;
    out.seed = seed;
    ShiftStreamSpec spec = cfg.data;
    spec.classes = cfg.model.classes;
    spec.vocab = cfg.model.vocab;
    spec.seed = seed;
    const ShiftStream stream = gen_shift_stream(spec);

    out.params = init_params(seeded(cfg.model, seed));
    ModelParams& params = out.params;
    ModelParams velocity = params.zeros_like();
    const TrainOptions opts = cfg.train_options();
    std::optional<MemoryController> ctrl;
    if (cfg.model.use_memory) ctrl.emplace(cfg.memory, static_cast<std::size_t>(cfg.model.layers()), seed);
    auto mem = [&]() -> const MemoryState* { return ctrl ? &ctrl->state() : nullptr; };

    std::mt19937_64 rng(seed * 7919 + 17);
    auto log = [&](long step, const std::string& name, double v, std::optional<int> seg = std::nullopt) {
        out.metrics.add({run_id, seed, step, name, v, seg});
    };
    log(0, "param_count", static_cast<double>(params.size()));

    out.eval.segment_accuracy.assign(static_cast<std::size_t>(spec.segments), 0.0);
    out.eval.segment_counts.assign(static_cast<std::size_t>(spec.segments), 0);
    long step = 0;
    long long scored = 0;
    int hits = 0, seen = 0;
    double val_sum = 0.0;
    for (int seg = 0; seg < spec.segments; ++seg) {
        BatchCursor cursor(segment_examples(stream.train, seg), static_cast<std::size_t>(cfg.training.batch_size),
                           rng);
        double seg_loss = 0.0, window_loss = 0.0;
        int window_n = 0;
        for (int i = 0; i < cfg.training.steps; ++i, ++step) {
            const auto batch = cursor.next();
            if (ctrl) ctrl->before_step(params, batch, step);
            const StepResult r = train_step(params, batch, velocity, opts, mem());
            if (ctrl) ctrl->after_step(params, r, step);
            scored += r.ops.scored_pairs;
            seg_loss += r.task_loss;
            window_loss += r.task_loss;
            if (++window_n == cfg.training.eval_every) {
                log(step + 1, "train_loss", window_loss / window_n, seg);
                window_loss = 0.0;
                window_n = 0;
            }
        }
        const auto test = segment_examples(stream.test, seg);
        const EvalResult ev = evaluate(params, test, spec.segments, mem());
        const double acc = ev.segment_accuracy[static_cast<std::size_t>(seg)];
        out.eval.segment_accuracy[static_cast<std::size_t>(seg)] = acc;
        out.eval.segment_counts[static_cast<std::size_t>(seg)] = ev.segment_counts[static_cast<std::size_t>(seg)];
        hits += static_cast<int>(std::lround(acc * static_cast<double>(test.size())));
        seen += static_cast<int>(test.size());
        val_sum += ev.mean_loss * static_cast<double>(test.size());
        out.curve.push_back({seg + 1, seg_loss / cfg.training.steps, ev.mean_loss});
        log(step, "segment_accuracy", acc, seg);
        log(step, "val_loss", ev.mean_loss, seg);
        if (ctrl) log(step, "block_count", static_cast<double>(ctrl->state().blocks.size()), seg);
    }
    out.eval.accuracy = static_cast<double>(hits) / seen;
    out.eval.mean_loss = val_sum / seen;
    const auto [lo, hi] = std::minmax_element(out.eval.segment_accuracy.begin(), out.eval.segment_accuracy.end());
    log(step, "accuracy", out.eval.accuracy);
    log(step, "segment_range", *hi - *lo);
    log(step, "scored_pairs", static_cast<double>(scored));

    std::vector<double> errors;
    for (double a : out.eval.segment_accuracy) errors.push_back(1.0 - a);
    out.histogram = error_histogram(errors);

    if (params.embed.size() >= 2) {
        out.similarity = layer_similarity_report(params, stream.test.examples);
        for (const auto& s : out.similarity) log(step, "layer_similarity", s.mean_cosine, s.gap);
    }
    if (ctrl) {
        out.events = ctrl->events();
        log(step, "shift_events", static_cast<double>(ctrl->shift_count()));
        log(step, "policy_retain_prob", ctrl->policy().probabilities()[0]);
        const auto& am = ctrl->alignment_max();
        for (std::size_t g = 0; g < am.size(); ++g) log(step, "alignment_max", am[g], static_cast<int>(g));
    }
    return out;
}

SeedRun run_overfit(const RunConfig& cfg, std::uint64_t seed, const std::string& run_id) {
    SeedRun out;
    out.seed = seed;
    const Dataset data = gen_memorization_set(8, cfg.data.seq_len, cfg.model.vocab, cfg.model.classes, seed);
    out.params = init_params(seeded(cfg.model, seed));
    ModelParams& params = out.params;
    ModelParams velocity = params.zeros_like();
    const TrainOptions opts = cfg.train_options();
    std::optional<MemoryController> ctrl;
    if (cfg.model.use_memory) ctrl.emplace(cfg.memory, static_cast<std::size_t>(cfg.model.layers()), seed);
    auto mem = [&]() -> const MemoryState* { return ctrl ? &ctrl->state() : nullptr; };

    out.metrics.add({run_id, seed, 0, "param_count", static_cast<double>(params.size()), std::nullopt});
    out.min_task_loss = std::numeric_limits<double>::infinity();
    for (long step = 0; step < cfg.training.steps; ++step) {
        if (ctrl) ctrl->before_step(params, data.examples, step);
        const StepResult r = train_step(params, data.examples, velocity, opts, mem());
        if (ctrl) ctrl->after_step(params, r, step);
        out.min_task_loss = std::min(out.min_task_loss, r.task_loss);
        if ((step + 1) % cfg.training.eval_every == 0 || step + 1 == cfg.training.steps) {
            const EvalResult ev = evaluate(params, data.examples, 1, mem());
            out.curve.push_back({static_cast<int>(step + 1), r.task_loss, ev.mean_loss});
            out.metrics.add({run_id, seed, step + 1, "task_loss", r.task_loss, std::nullopt});
            out.metrics.add({run_id, seed, step + 1, "val_loss", ev.mean_loss, std::nullopt});
        }
    }
    out.eval = evaluate(params, data.examples, 1, mem());
    out.final_task_loss = out.eval.mean_loss;
    out.min_task_loss = std::min(out.min_task_loss, out.final_task_loss);
    out.metrics.add({run_id, seed, cfg.training.steps, "accuracy", out.eval.accuracy, std::nullopt});
    if (ctrl) {
        out.events = ctrl->events();
        out.metrics.add({run_id, seed, cfg.training.steps, "shift_events", static_cast<double>(ctrl->shift_count()),
                         std::nullopt});
    }
    return out;
}

std::vector<BenchRow> bench_lengths(const ModelConfig& model, const BenchConfig& bench) {
    require(!bench.lengths.empty(), "bench_lengths: no lengths");
    for (std::size_t i = 0; i < bench.lengths.size(); ++i) {
        require(bench.lengths[i] >= 1, "bench_lengths: lengths must be >= 1");
        require(i == 0 || bench.lengths[i] > bench.lengths[i - 1], "bench_lengths: lengths must ascend");
    }
    require(bench.repetitions >= 1, "bench_lengths: repetitions must be >= 1");
    ModelConfig m = model;
    m.vocab = std::max(m.vocab, bench.lengths.back());
    const ModelParams params = init_params(m);

    auto timed = [&](std::span<const int> tokens, const MemoryState* mem, long long& pairs) {
        std::vector<double> ms;
        for (int r = 0; r < bench.repetitions; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            const ForwardPass fp = forward(params, tokens, mem);
            const auto t1 = std::chrono::steady_clock::now();
            pairs = fp.ops.scored_pairs;
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        return median(ms);
    };

    std::vector<BenchRow> rows;
    for (int T : bench.lengths) {
        std::vector<int> tokens(static_cast<std::size_t>(T));
        std::iota(tokens.begin(), tokens.end(), 0);
        BenchRow plain{"no_memory", T, T, 0.0, 0};
        plain.wall_ms = timed(tokens, nullptr, plain.scored_pairs);
        rows.push_back(plain);

        const int B = static_cast<int>(std::ceil(bench.block_fraction * T));
        std::vector<Vec> vectors;
        for (int t : tokens) vectors.push_back(combined_embedding(params.stack_for(t), m.temperature));
        const MemoryState state = cluster_tokens(vectors, 2.0, tokens, static_cast<std::size_t>(B));
        BenchRow packed{"memory", T, static_cast<int>(state.blocks.size()), 0.0, 0};
        packed.wall_ms = timed(tokens, &state, packed.scored_pairs);
        rows.push_back(packed);
    }
    return rows;
}

ShiftEvalSummary shift_eval(const RunConfig& cfg) {
    ShiftEvalSummary s;
    const ModelConfig full = cfg.model;
    const ModelConfig base = baseline_config(full);
    check_parameter_budget(full, base);
    s.full_params = parameter_count(full);
    s.baseline_params = parameter_count(base);
    RunConfig base_cfg = cfg;
    base_cfg.model = base;

    std::vector<double> ranges, full_acc, base_acc;
    for (auto seed : cfg.training.seeds) {
        const SeedRun f = run_shift_classify(cfg, seed, "full");
        const SeedRun b = run_shift_classify(base_cfg, seed, "baseline");
        auto range = [](const std::vector<double>& v) {
            const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
            return *hi - *lo;
        };
        ShiftEvalSeed row{seed, f.eval.accuracy, range(f.eval.segment_accuracy), b.eval.accuracy,
                          range(b.eval.segment_accuracy)};
        s.seeds.push_back(row);
        ranges.push_back(row.full_range);
        full_acc.push_back(row.full_accuracy);
        base_acc.push_back(row.baseline_accuracy);
    }
    s.median_full_range = median(ranges);
    s.median_full_accuracy = median(full_acc);
    s.median_baseline_accuracy = median(base_acc);
    return s;
}

std::string memory_events_csv(std::span<const MemoryEventRow> rows) { return event_rows_csv(rows); }

}  // namespace hiermem
