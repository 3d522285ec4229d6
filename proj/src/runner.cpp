#include "hiermem/harness.hpp"

#include <json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#ifndef HIERMEM_VERSION
#define HIERMEM_VERSION "0.1.0"
#endif

namespace hiermem {

namespace fs = std::filesystem;

std::string version_string() { return HIERMEM_VERSION; }

namespace {

void write_file(const fs::path& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << body;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
    nlohmann::json j{{"run_id", m.run_id},   {"task", m.task},   {"config_hash", m.config_hash},
                     {"version", m.version}, {"created_at", m.created_at}, {"seeds", m.seeds},
                     {"files", m.files}};
    write_file(dir / "manifest.json", j.dump(2) + "\n");
}

}  // namespace

RunManifest execute(const RunConfig& input, const RunOverrides& overrides) {
    RunConfig cfg = input;
    if (overrides.output_dir) cfg.output_dir = *overrides.output_dir;
    for (auto& s : cfg.training.seeds) s += overrides.seed_offset;

    RunManifest m;
    m.task = std::string(to_string(cfg.task));
    m.config_hash = config_hash(cfg);
    m.run_id = m.task + "-" + m.config_hash.substr(0, 12);
    m.version = version_string();
    m.seeds = cfg.training.seeds;

    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    auto emit = [&](const std::string& name, const std::string& body) {
        write_file(dir / name, body);
        m.files.push_back(name);
    };

    try {
        if (cfg.task == Task::LengthBench) {
            ModelConfig model = cfg.model;
            model.seed += cfg.training.seeds.front();
            emit("bench.csv", bench_csv(bench_lengths(model, cfg.bench)));
        } else {
            for (auto seed : cfg.training.seeds) {
                const std::string tag = "_seed" + std::to_string(seed);
                const SeedRun r = cfg.task == Task::ShiftClassify ? run_shift_classify(cfg, seed, m.run_id)
                                                                   : run_overfit(cfg, seed, m.run_id);
                emit("metrics" + tag + ".csv", r.metrics.csv());
                emit("loss_curve" + tag + ".csv", loss_curve_csv(r.curve));
                if (cfg.model.use_memory) emit("memory_events" + tag + ".csv", memory_events_csv(r.events));
                if (cfg.task == Task::ShiftClassify) {
                    emit("error_histogram" + tag + ".csv", error_histogram_csv(r.histogram));
                    if (!r.similarity.empty()) {
                        std::ostringstream os;
                        os << "gap,layer_a,layer_b,mean_cosine,excluded\n";
                        for (const auto& s : r.similarity)
                            os << s.gap << ',' << s.gap + 1 << ',' << s.gap + 2 << ',' << format_double(s.mean_cosine)
                               << ',' << s.excluded << '\n';
                        emit("layer_similarity" + tag + ".csv", os.str());
                    }
                }
                const std::string ckpt = "checkpoint" + tag + ".json";
                save_checkpoint(dir / ckpt, r.params);
                m.files.push_back(ckpt);
            }
        }
    } catch (const NonFiniteLoss& e) {
        nlohmann::json diag{{"error", "non_finite_loss"}, {"message", e.what()}, {"config_hash", m.config_hash}};
        write_file(dir / "diagnostic.json", diag.dump(2) + "\n");
        throw;
    }

    m.created_at = utc_now();
    write_manifest(dir, m);
    return m;
}

RunManifest run(const fs::path& config_path, const RunOverrides& overrides) {
    return execute(load_run_config(config_path), overrides);
}

}  // namespace hiermem
