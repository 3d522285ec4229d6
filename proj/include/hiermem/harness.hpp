#pragma once

#include "hiermem/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace hiermem {

// ---------------------------------------------------------------------------
// Synthetic data

/// A stream of topics. Topic k owns ids [k*topic_vocab, (k+1)*topic_vocab);
/// within a topic the ids are split into one group per class and the label of
/// a sequence is the class whose group is over-represented in it.
struct ShiftStreamSpec {
    int segments = 10;
    int topic_vocab = 16;
    int classes = 4;
    int seq_len = 24;
    int train_per_segment = 256;
    int test_per_segment = 200;
    double signal = 0.5;  ///< probability a position is drawn from the label's group
    int vocab = 160;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ShiftStream {
    Dataset train;
    Dataset test;
};

ShiftStream gen_shift_stream(const ShiftStreamSpec& spec);

/// n random sequences with balanced labels assigned independently of content.
Dataset gen_memorization_set(int n, int seq_len, int vocab, int classes, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Run configuration

struct MemoryConfig {
    int capacity = 32;
    double theta = 0.5;
    double tau = 0.05;
    int window = 32;
    double eta = 0.1;
    int recluster_every = 64;
    double cost_weight = 0.1;
    double policy_lr = 0.1;
    int reward_horizon = 32;  ///< training steps between an action and its reward
};

struct TrainingConfig {
    int steps = 120;  ///< per segment for shift_classify, total for overfit
    double lr = 0.01;
    double momentum = 0.9;
    int batch_size = 16;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    double embed_weight = 0.1;
    double hier_weight = 0.1;
    double lambda = 1e-4;
    int target_window = 2;
    int eval_every = 25;
};

struct BenchConfig {
    std::vector<int> lengths{64, 256, 1024};
    int repetitions = 20;
    double block_fraction = 0.55;
};

enum class Task { ShiftClassify, LengthBench, Overfit };
std::string_view to_string(Task t);

struct RunConfig {
    Task task = Task::ShiftClassify;
    ModelConfig model;
    MemoryConfig memory;
    TrainingConfig training;
    ShiftStreamSpec data;
    BenchConfig bench;
    std::string output_dir = "out";

    TrainOptions train_options() const;
};

/// Invalid configuration, with the 1-based line of the offending text.
class ConfigError : public std::runtime_error {
public:
    ConfigError(int line, const std::string& message)
        : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

/// Strict JSON parsing: unknown keys, wrong types and out-of-range values are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string canonical_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Memory orchestration during training

struct MemoryEventRow {
    long step = 0;
    double divergence = 0.0;
    Action action = Action::Retain;
    int block_count = 0;
    double reward = 0.0;
};

/// Owns the memory state, the shift detector and the reallocation policy for
/// one training run. Memory blocks group vocabulary ids seen recently.
class MemoryController {
public:
    MemoryController(const MemoryConfig& cfg, std::size_t num_layers, std::uint64_t seed);

    /// Registers the batch ids and reclusters on the configured cadence.
    void before_step(ModelParams& params, std::span<const Example> batch, long step);
    /// Feeds layer-weight samples to the detector and reacts to shift events.
    void after_step(ModelParams& params, const StepResult& result, long step);
    void recluster(ModelParams& params, long step);

    const MemoryState& state() const { return state_; }
    const std::vector<MemoryEventRow>& events() const { return events_; }
    const ReallocPolicy& policy() const { return policy_; }
    long shift_count() const { return shifts_; }
    const std::vector<double>& alignment_max() const { return alignment_max_; }

private:
    struct Pending {
        long step;
        double divergence;
        Action action;
        double loss_before;
        int block_count;
    };

    double recent_loss() const;

    MemoryConfig cfg_;
    MemoryState state_;
    ShiftDetectorState detector_;
    ReallocPolicy policy_;
    std::mt19937_64 rng_;
    std::map<int, long> last_seen_;
    std::deque<double> losses_;
    std::optional<Pending> pending_;
    std::vector<MemoryEventRow> events_;
    std::vector<double> alignment_max_;
    long shifts_ = 0;
    bool has_hierarchy_;
};

// ---------------------------------------------------------------------------
// Reports

struct GapSimilarity {
    int gap = 0;  ///< compares layer gap and gap+1 (0-based)
    double mean_cosine = 0.0;
    int excluded = 0;  ///< tokens skipped for a zero-norm layer vector
};

std::vector<GapSimilarity> layer_similarity_report(const ModelParams& params, std::span<const Example> data);

inline constexpr double kHistogramBinWidth = 0.05;
inline constexpr int kHistogramBins = 20;
/// Counts per fixed 0.05-wide bin over [0, 1]; a rate of exactly 1 lands in the last bin.
std::vector<int> error_histogram(std::span<const double> error_rates);

struct LossRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

/// Headered CSV; rows must be in increasing epoch order with finite values.
std::string loss_curve_csv(std::span<const LossRow> log);
std::string error_histogram_csv(std::span<const int> counts);

// ---------------------------------------------------------------------------
// Metrics

/// Closed set of metric names accepted by MetricLog.
const std::vector<std::string>& metric_registry();

struct MetricRecord {
    std::string run_id;
    std::uint64_t seed = 0;
    long step = 0;
    std::string metric;
    double value = 0.0;
    std::optional<int> segment;
};

class MetricLog {
public:
    void add(MetricRecord r);
    const std::vector<MetricRecord>& records() const { return records_; }
    std::string csv() const;

private:
    std::vector<MetricRecord> records_;
};

std::string format_double(double v);

// ---------------------------------------------------------------------------
// Experiments

struct SeedRun {
    std::uint64_t seed = 0;
    EvalResult eval;  ///< shift_classify: per-segment accuracy measured right after each segment
    std::vector<LossRow> curve;
    std::vector<MemoryEventRow> events;
    MetricLog metrics;
    std::vector<GapSimilarity> similarity;
    std::vector<int> histogram;
    double final_task_loss = 0.0;
    double min_task_loss = 0.0;
    ModelParams params;
};

SeedRun run_shift_classify(const RunConfig& cfg, std::uint64_t seed, const std::string& run_id = "run");
SeedRun run_overfit(const RunConfig& cfg, std::uint64_t seed, const std::string& run_id = "run");

struct BenchRow {
    std::string variant;
    int length = 0;
    int blocks = 0;
    double wall_ms = 0.0;
    long long scored_pairs = 0;
};

/// Forward passes at each length with and without memory; the memory variant
/// clusters the sequence into ceil(block_fraction * T) blocks.
std::vector<BenchRow> bench_lengths(const ModelConfig& model, const BenchConfig& bench);
std::string bench_csv(std::span<const BenchRow> rows);
std::string memory_events_csv(std::span<const MemoryEventRow> rows);

struct ShiftEvalSeed {
    std::uint64_t seed = 0;
    double full_accuracy = 0.0;
    double full_range = 0.0;
    double baseline_accuracy = 0.0;
    double baseline_range = 0.0;
};

struct ShiftEvalSummary {
    std::vector<ShiftEvalSeed> seeds;
    double median_full_range = 0.0;
    double median_full_accuracy = 0.0;
    double median_baseline_accuracy = 0.0;
    std::size_t full_params = 0;
    std::size_t baseline_params = 0;
};

/// Trains the configured model and its static baseline on the shift stream for every seed.
ShiftEvalSummary shift_eval(const RunConfig& cfg);
std::string shift_eval_csv(const ShiftEvalSummary& s);

double median(std::vector<double> v);

// ---------------------------------------------------------------------------
// Persistence

struct RunManifest {
    std::string run_id;
    std::string task;
    std::string config_hash;
    std::string version;
    std::string created_at;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> files;
};

struct RunOverrides {
    std::optional<std::string> output_dir;
    std::uint64_t seed_offset = 0;
};

/// Executes cfg.task for every seed and writes the metric files plus
/// manifest.json under the output directory.
RunManifest execute(const RunConfig& cfg, const RunOverrides& overrides = {});
RunManifest run(const std::filesystem::path& config_path, const RunOverrides& overrides = {});

std::string version_string();

}  // namespace hiermem
