#include "hiermem/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace hiermem {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::vector<GapSimilarity> layer_similarity_report(const ModelParams& params, std::span<const Example> data) {
    const auto L = params.embed.size();
    require(L >= 2, "layer_similarity_report: need at least two hierarchy layers");
    require(!data.empty(), "layer_similarity_report: empty dataset");
    std::vector<GapSimilarity> out;
    for (std::size_t g = 0; g + 1 < L; ++g) {
        GapSimilarity s;
        s.gap = static_cast<int>(g);
        double sum = 0.0;
        long used = 0;
        for (const auto& ex : data)
            for (int tok : ex.tokens) {
                const Vec a = params.embed[g].col(tok);
                const Vec b = params.embed[g + 1].col(tok);
                const double na = a.norm(), nb = b.norm();
                if (na == 0.0 || nb == 0.0) {
                    ++s.excluded;
                    continue;
                }
                sum += std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
                ++used;
            }
        s.mean_cosine = used > 0 ? sum / static_cast<double>(used) : 0.0;
        out.push_back(s);
    }
    return out;
}

std::vector<int> error_histogram(std::span<const double> error_rates) {
    std::vector<int> counts(kHistogramBins, 0);
    for (double r : error_rates) {
        require(std::isfinite(r) && r >= 0.0 && r <= 1.0, "error_histogram: rate outside [0, 1]");
        const int bin = std::min(kHistogramBins - 1, static_cast<int>(std::floor(r / kHistogramBinWidth)));
        ++counts[static_cast<std::size_t>(bin)];
    }
    return counts;
}

std::string error_histogram_csv(std::span<const int> counts) {
    std::ostringstream os;
    os << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < counts.size(); ++i)
        os << format_double(static_cast<double>(i) * kHistogramBinWidth) << ','
           << format_double(static_cast<double>(i + 1) * kHistogramBinWidth) << ',' << counts[i] << '\n';
    return os.str();
}

std::string loss_curve_csv(std::span<const LossRow> log) {
    require(!log.empty(), "loss_curve: empty training log");
    std::ostringstream os;
    os << "epoch,train_loss,val_loss\n";
    int prev = std::numeric_limits<int>::min();
    for (const auto& r : log) {
        require(r.epoch > prev, "loss_curve: epochs must strictly increase");
        require(std::isfinite(r.train_loss) && std::isfinite(r.val_loss), "loss_curve: non-finite loss");
        prev = r.epoch;
        os << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_loss) << '\n';
    }
    return os.str();
}

const std::vector<std::string>& metric_registry() {
    static const std::vector<std::string> names{
        "train_loss",   "val_loss",       "task_loss",     "accuracy",    "segment_accuracy",
        "segment_range", "scored_pairs",  "mac_count",     "shift_events", "block_count",
        "alignment_max", "layer_similarity", "param_count", "policy_retain_prob"};
    return names;
}

void MetricLog::add(MetricRecord r) {
    const auto& reg = metric_registry();
    require(std::find(reg.begin(), reg.end(), r.metric) != reg.end(), "unregistered metric '" + r.metric + "'");
    records_.push_back(std::move(r));
}

std::string MetricLog::csv() const {
    std::ostringstream os;
    os << "run_id,seed,step,metric,value,segment\n";
    for (const auto& r : records_) {
        os << r.run_id << ',' << r.seed << ',' << r.step << ',' << r.metric << ',' << format_double(r.value) << ',';
        if (r.segment) os << *r.segment;
        os << '\n';
    }
    return os.str();
}

std::string bench_csv(std::span<const BenchRow> rows) {
    std::ostringstream os;
    os << "variant,length,blocks,wall_ms,scored_pairs\n";
    for (const auto& r : rows)
        os << r.variant << ',' << r.length << ',' << r.blocks << ',' << format_double(r.wall_ms) << ','
           << r.scored_pairs << '\n';
    return os.str();
}

double median(std::vector<double> v) {
    require(!v.empty(), "median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string shift_eval_csv(const ShiftEvalSummary& s) {
    std::ostringstream os;
    os << "seed,full_accuracy,full_range,baseline_accuracy,baseline_range\n";
    for (const auto& r : s.seeds)
        os << r.seed << ',' << format_double(r.full_accuracy) << ',' << format_double(r.full_range) << ','
           << format_double(r.baseline_accuracy) << ',' << format_double(r.baseline_range) << '\n';
    return os.str();
}

}  // namespace hiermem
