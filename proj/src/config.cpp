#include "hiermem/harness.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace hiermem {

using nlohmann::json;

std::string_view to_string(Task t) {
    switch (t) {
        case Task::ShiftClassify: return "shift_classify";
        case Task::LengthBench: return "length_bench";
        case Task::Overfit: return "overfit";
    }
    return "?";
}

TrainOptions RunConfig::train_options() const {
    TrainOptions o;
    o.lr = training.lr;
    o.momentum = training.momentum;
    o.weights = {training.embed_weight, training.hier_weight};
    o.embed = {training.lambda, training.target_window};
    return o;
}

namespace {

int line_at(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(offset), '\n'));
}

class Reader {
public:
    explicit Reader(const std::string& text) : text_(text) {}

    /// Line of the last key in `path`, searching each quoted key after the previous one.
    int line_of(const std::vector<std::string>& path) const {
        std::size_t pos = 0;
        for (const auto& key : path) {
            const auto hit = text_.find('"' + key + '"', pos);
            if (hit == std::string::npos) break;
            pos = hit;
        }
        return line_at(text_, pos);
    }

    [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& msg) const {
        std::string dotted;
        for (const auto& p : path) dotted += (dotted.empty() ? "" : ".") + p;
        throw ConfigError(line_of(path), "'" + dotted + "': " + msg);
    }

    void only(const json& obj, const std::vector<std::string>& where, const std::set<std::string>& allowed) const {
        if (!obj.is_object()) fail(where, "expected an object");
        for (const auto& [key, _] : obj.items()) {
            if (!allowed.count(key)) {
                auto p = where;
                p.push_back(key);
                fail(p, "unknown field");
            }
        }
    }

    template <class T, class Check>
    void get(const json& obj, std::vector<std::string> where, const std::string& key, T& out, Check ok,
             const char* constraint) const {
        if (!obj.contains(key)) return;
        where.push_back(key);
        const json& v = obj.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) fail(where, "expected a boolean");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) fail(where, "expected a string");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) fail(where, "expected an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.get<long long>() < 0 && !v.is_number_unsigned()) fail(where, "expected a non-negative integer");
            }
        } else {
            if (!v.is_number()) fail(where, "expected a number");
        }
        T value = v.get<T>();
        if constexpr (std::is_floating_point_v<T>) {
            if (!std::isfinite(value)) fail(where, "expected a finite number");
        }
        if (!ok(value)) fail(where, std::string("must be ") + constraint);
        out = value;
    }

private:
    const std::string& text_;
};

auto positive = [](auto v) { return v > 0; };
auto nonneg = [](auto v) { return v >= 0; };
auto any = [](auto) { return true; };

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(line_at(text, e.byte > 0 ? e.byte - 1 : 0), std::string("malformed JSON: ") + e.what());
    }
    Reader r(text);
    RunConfig c;
    r.only(root, {}, {"task", "model", "memory", "training", "data", "bench", "output_dir"});
    if (!root.contains("task")) throw ConfigError(1, "missing required field 'task'");

    std::string task;
    r.get(root, {}, "task", task, any, "");
    if (task == "shift_classify") c.task = Task::ShiftClassify;
    else if (task == "length_bench") c.task = Task::LengthBench;
    else if (task == "overfit") c.task = Task::Overfit;
    else r.fail({"task"}, "must be one of shift_classify, length_bench, overfit");
    r.get(root, {}, "output_dir", c.output_dir, [](const std::string& s) { return !s.empty(); }, "non-empty");

    if (root.contains("model")) {
        const json& m = root["model"];
        const std::vector<std::string> at{"model"};
        r.only(m, at, {"d", "L", "heads", "attn_layers", "vocab", "classes", "ffn_hidden", "use_memory",
                       "use_hierarchy", "temperature", "seed"});
        auto& mc = c.model;
        r.get(m, at, "d", mc.d, positive, "positive");
        r.get(m, at, "L", mc.L, positive, "positive");
        r.get(m, at, "heads", mc.heads, [](int h) { return h == 1; }, "1 (single-head attention)");
        r.get(m, at, "attn_layers", mc.attn_layers, positive, "positive");
        r.get(m, at, "vocab", mc.vocab, positive, "positive");
        r.get(m, at, "classes", mc.classes, positive, "positive");
        r.get(m, at, "ffn_hidden", mc.ffn_hidden, positive, "positive");
        r.get(m, at, "use_memory", mc.use_memory, any, "");
        r.get(m, at, "use_hierarchy", mc.use_hierarchy, any, "");
        r.get(m, at, "temperature", mc.temperature, positive, "positive");
        r.get(m, at, "seed", mc.seed, any, "");
    }
    if (root.contains("memory")) {
        const json& m = root["memory"];
        const std::vector<std::string> at{"memory"};
        r.only(m, at, {"capacity", "theta", "tau", "window", "eta", "recluster_every", "cost_weight", "policy_lr",
                       "reward_horizon"});
        auto& mc = c.memory;
        r.get(m, at, "capacity", mc.capacity, positive, "positive");
        r.get(m, at, "theta", mc.theta, [](double t) { return t >= 0.0 && t <= 2.0; }, "in [0, 2]");
        r.get(m, at, "tau", mc.tau, [](double t) { return t > 0.0 && t <= std::log(2.0); }, "in (0, ln 2]");
        r.get(m, at, "window", mc.window, positive, "positive");
        r.get(m, at, "eta", mc.eta, [](double e) { return e > 0.0 && e <= 1.0; }, "in (0, 1]");
        r.get(m, at, "recluster_every", mc.recluster_every, positive, "positive");
        r.get(m, at, "cost_weight", mc.cost_weight, nonneg, "non-negative");
        r.get(m, at, "policy_lr", mc.policy_lr, positive, "positive");
        r.get(m, at, "reward_horizon", mc.reward_horizon, positive, "positive");
    }
    if (root.contains("training")) {
        const json& t = root["training"];
        const std::vector<std::string> at{"training"};
        r.only(t, at, {"steps", "lr", "momentum", "batch_size", "seeds", "embed_weight", "hier_weight", "lambda",
                       "target_window", "eval_every"});
        auto& tc = c.training;
        r.get(t, at, "steps", tc.steps, positive, "positive");
        r.get(t, at, "lr", tc.lr, nonneg, "non-negative");
        r.get(t, at, "momentum", tc.momentum, [](double m) { return m >= 0.0 && m < 1.0; }, "in [0, 1)");
        r.get(t, at, "batch_size", tc.batch_size, positive, "positive");
        r.get(t, at, "embed_weight", tc.embed_weight, nonneg, "non-negative");
        r.get(t, at, "hier_weight", tc.hier_weight, nonneg, "non-negative");
        r.get(t, at, "lambda", tc.lambda, nonneg, "non-negative");
        r.get(t, at, "target_window", tc.target_window, positive, "positive");
        r.get(t, at, "eval_every", tc.eval_every, positive, "positive");
        if (t.contains("seeds")) {
            const json& s = t["seeds"];
            if (!s.is_array() || s.empty()) r.fail({"training", "seeds"}, "expected a non-empty array of integers");
            tc.seeds.clear();
            for (const auto& v : s) {
                if (!v.is_number_integer() || v.get<long long>() < 0)
                    r.fail({"training", "seeds"}, "expected non-negative integers");
                tc.seeds.push_back(v.get<std::uint64_t>());
            }
        }
    }
    if (root.contains("data")) {
        const json& d = root["data"];
        const std::vector<std::string> at{"data"};
        r.only(d, at, {"segments", "topic_vocab", "seq_len", "train_per_segment", "test_per_segment", "signal"});
        auto& dc = c.data;
        r.get(d, at, "segments", dc.segments, positive, "positive");
        r.get(d, at, "topic_vocab", dc.topic_vocab, positive, "positive");
        r.get(d, at, "seq_len", dc.seq_len, positive, "positive");
        r.get(d, at, "train_per_segment", dc.train_per_segment, positive, "positive");
        r.get(d, at, "test_per_segment", dc.test_per_segment, positive, "positive");
        r.get(d, at, "signal", dc.signal, [](double s) { return s >= 0.0 && s <= 1.0; }, "in [0, 1]");
    }
    if (root.contains("bench")) {
        const json& b = root["bench"];
        const std::vector<std::string> at{"bench"};
        r.only(b, at, {"lengths", "repetitions", "block_fraction"});
        r.get(b, at, "repetitions", c.bench.repetitions, [](int n) { return n >= 20; }, ">= 20");
        r.get(b, at, "block_fraction", c.bench.block_fraction, [](double f) { return f > 0.0 && f <= 1.0; },
              "in (0, 1]");
        if (b.contains("lengths")) {
            const json& l = b["lengths"];
            if (!l.is_array() || l.empty()) r.fail({"bench", "lengths"}, "expected a non-empty array");
            c.bench.lengths.clear();
            for (const auto& v : l) {
                if (!v.is_number_integer() || v.get<long long>() < 1)
                    r.fail({"bench", "lengths"}, "expected positive integers");
                if (!c.bench.lengths.empty() && v.get<int>() <= c.bench.lengths.back())
                    r.fail({"bench", "lengths"}, "must be strictly ascending");
                c.bench.lengths.push_back(v.get<int>());
            }
        }
    }

    // cross-field constraints
    c.data.classes = c.model.classes;
    c.data.vocab = c.model.vocab;
    if (c.task == Task::ShiftClassify) {
        if (c.data.topic_vocab < c.data.classes)
            r.fail({"data", "topic_vocab"}, "must be >= model.classes");
        if (static_cast<long>(c.data.segments) * c.data.topic_vocab > c.model.vocab)
            r.fail({"model", "vocab"}, "too small to partition into data.segments * data.topic_vocab ids");
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(0, "cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string canonical_json(const RunConfig& c) {
    json j;
    j["task"] = std::string(to_string(c.task));
    j["output_dir"] = c.output_dir;
    j["model"] = {{"d", c.model.d},
                  {"L", c.model.L},
                  {"heads", c.model.heads},
                  {"attn_layers", c.model.attn_layers},
                  {"vocab", c.model.vocab},
                  {"classes", c.model.classes},
                  {"ffn_hidden", c.model.ffn_hidden},
                  {"use_memory", c.model.use_memory},
                  {"use_hierarchy", c.model.use_hierarchy},
                  {"temperature", c.model.temperature},
                  {"seed", c.model.seed}};
    j["memory"] = {{"capacity", c.memory.capacity},   {"theta", c.memory.theta},
                   {"tau", c.memory.tau},             {"window", c.memory.window},
                   {"eta", c.memory.eta},             {"recluster_every", c.memory.recluster_every},
                   {"cost_weight", c.memory.cost_weight}, {"policy_lr", c.memory.policy_lr},
                   {"reward_horizon", c.memory.reward_horizon}};
    j["training"] = {{"steps", c.training.steps},
                     {"lr", c.training.lr},
                     {"momentum", c.training.momentum},
                     {"batch_size", c.training.batch_size},
                     {"seeds", c.training.seeds},
                     {"embed_weight", c.training.embed_weight},
                     {"hier_weight", c.training.hier_weight},
                     {"lambda", c.training.lambda},
                     {"target_window", c.training.target_window},
                     {"eval_every", c.training.eval_every}};
    j["data"] = {{"segments", c.data.segments},
                 {"topic_vocab", c.data.topic_vocab},
                 {"seq_len", c.data.seq_len},
                 {"train_per_segment", c.data.train_per_segment},
                 {"test_per_segment", c.data.test_per_segment},
                 {"signal", c.data.signal}};
    j["bench"] = {{"lengths", c.bench.lengths},
                  {"repetitions", c.bench.repetitions},
                  {"block_fraction", c.bench.block_fraction}};
    return j.dump();
}

std::string config_hash(const RunConfig& cfg) {
    // FNV-1a, 64 bit; where results land is not part of the experiment
    RunConfig c = cfg;
    c.output_dir = "-";
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical_json(c)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace hiermem
