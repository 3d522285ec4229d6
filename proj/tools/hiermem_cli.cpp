// Command-line front end: run, bench, shift-eval, report.

#include "hiermem/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace hiermem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNonFinite = 3;

RunConfig config_or_default(const std::string& path, Task task) {
    if (path.empty()) {
        RunConfig c;
        c.task = task;
        return c;
    }
    RunConfig c = load_run_config(path);
    c.task = task;
    return c;
}

void print_manifest(const RunManifest& m, const std::string& dir) {
    std::cout << m.run_id << " (" << m.version << ") wrote " << m.files.size() + 1 << " files to " << dir << "\n";
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

int report(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        std::cerr << "report: no such directory " << dir << "\n";
        return kExitConfig;
    }
    struct Agg {
        std::vector<double> values;
    };
    std::map<std::pair<std::string, std::string>, Agg> table;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().rfind("metrics_", 0) == 0) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::ifstream in(f);
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            const auto cells = split(line);
            if (cells.size() < 6) continue;
            table[{cells[3], cells[5]}].values.push_back(std::stod(cells[4]));
        }
    }
    std::ostringstream os;
    os << "metric,segment,count,mean,min,max\n";
    for (const auto& [key, agg] : table) {
        const auto& v = agg.values;
        double sum = 0.0;
        for (double x : v) sum += x;
        os << key.first << ',' << key.second << ',' << v.size() << ',' << format_double(sum / v.size()) << ','
           << format_double(*std::min_element(v.begin(), v.end())) << ','
           << format_double(*std::max_element(v.begin(), v.end())) << '\n';
    }
    std::cout << "metric files: " << files.size() << "\n" << os.str();
    std::ofstream(dir / "report.csv") << os.str();

    const fs::path bench = dir / "bench.csv";
    if (fs::exists(bench)) {
        std::ifstream in(bench);
        std::string line;
        std::getline(in, line);
        std::map<int, long long> plain, packed;
        while (std::getline(in, line)) {
            const auto c = split(line);
            if (c.size() < 5) continue;
            (c[0] == "memory" ? packed : plain)[std::stoi(c[1])] = std::stoll(c[4]);
        }
        std::cout << "length,scored_pairs_no_memory,scored_pairs_memory,reduction\n";
        for (const auto& [T, p] : plain)
            if (packed.count(T))
                std::cout << T << ',' << p << ',' << packed[T] << ','
                          << format_double(1.0 - static_cast<double>(packed[T]) / static_cast<double>(p)) << '\n';
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical embedding augmentation and structural memory experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed_offset = 0;
    auto add_common = [&](CLI::App* sub, bool need_config) {
        auto* opt = sub->add_option("--config", config_path, "JSON run configuration");
        if (need_config) opt->required();
        sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
        sub->add_option("--seed-offset", seed_offset, "added to every configured seed");
    };

    auto* run_cmd = app.add_subcommand("run", "execute the task named in the config");
    add_common(run_cmd, true);
    auto* bench_cmd = app.add_subcommand("bench", "sequence-length scaling benchmark");
    add_common(bench_cmd, false);
    auto* shift_cmd = app.add_subcommand("shift-eval", "full model vs static baseline across context shifts");
    add_common(shift_cmd, false);
    auto* report_cmd = app.add_subcommand("report", "summarise the metric files of an output directory");
    report_cmd->add_option("--out", out_dir, "output directory to summarise")->required();

    CLI11_PARSE(app, argc, argv);

    RunOverrides ov;
    if (!out_dir.empty()) ov.output_dir = out_dir;
    ov.seed_offset = seed_offset;

    try {
        if (*run_cmd) {
            const RunConfig cfg = load_run_config(config_path);
            const RunManifest m = execute(cfg, ov);
            print_manifest(m, ov.output_dir.value_or(cfg.output_dir));
        } else if (*bench_cmd) {
            const RunConfig cfg = config_or_default(config_path, Task::LengthBench);
            const RunManifest m = execute(cfg, ov);
            const std::string dir = ov.output_dir.value_or(cfg.output_dir);
            print_manifest(m, dir);
            return report(dir);
        } else if (*shift_cmd) {
            RunConfig cfg = config_or_default(config_path, Task::ShiftClassify);
            for (auto& s : cfg.training.seeds) s += seed_offset;
            const ShiftEvalSummary s = shift_eval(cfg);
            const fs::path dir = ov.output_dir.value_or(cfg.output_dir);
            fs::create_directories(dir);
            std::ofstream(dir / "shift_eval.csv") << shift_eval_csv(s);
            std::cout << shift_eval_csv(s) << "params full=" << s.full_params << " baseline=" << s.baseline_params
                      << "\nmedian full segment range=" << format_double(s.median_full_range)
                      << " median full accuracy=" << format_double(s.median_full_accuracy)
                      << " median baseline accuracy=" << format_double(s.median_baseline_accuracy) << "\n";
        } else if (*report_cmd) {
            return report(out_dir);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const InputError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NonFiniteLoss& e) {
        std::cerr << "aborted: " << e.what() << "\n";
        return kExitNonFinite;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}
