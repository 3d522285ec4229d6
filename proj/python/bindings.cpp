#include "hiermem/harness.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace hiermem;

namespace {

using Tensor3 = std::vector<std::vector<Vec>>;

// layers[t][l], queries[t], keys[t][l]
std::vector<HierEmbedStack> make_stacks(const Tensor3& layers, const std::vector<Vec>& queries, const Tensor3& keys) {
    require(layers.size() == queries.size() && layers.size() == keys.size(), "stacks: token counts differ");
    std::vector<HierEmbedStack> out(layers.size());
    for (std::size_t t = 0; t < layers.size(); ++t) {
        out[t].token_id = static_cast<int>(t);
        out[t].layers = layers[t];
        out[t].query = queries[t];
        out[t].keys = keys[t];
        out[t].validate();
    }
    return out;
}

LayerTransform make_transform(const std::vector<Mat>& weights, const std::vector<Vec>& biases) {
    require(weights.size() == biases.size(), "transform: weight and bias counts differ");
    return LayerTransform{weights, biases};
}

}  // namespace

PYBIND11_MODULE(_hiermem, m) {
    m.doc() = "Hierarchical embeddings, structural memory and the experiment harness";
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NonFiniteLoss>(m, "NonFiniteLoss", PyExc_ArithmeticError);

    // hierarchical embeddings
    m.def("similarity", &similarity, py::arg("q"), py::arg("k"));
    m.def(
        "layer_weights",
        [](const Vec& q, const std::vector<Vec>& keys, double temperature) {
            return layer_weights(q, keys, temperature).weights;
        },
        py::arg("q"), py::arg("keys"), py::arg("temperature") = 1.0);
    m.def(
        "combine", [](const Vec& alpha, const std::vector<Vec>& layers) { return combine(AlphaWeights{alpha}, layers); },
        py::arg("alpha"), py::arg("layers"));
    m.def(
        "alpha_jacobian",
        [](const Vec& q, const std::vector<Vec>& keys, double temperature) { return alpha_jacobian(q, keys, temperature); },
        py::arg("q"), py::arg("keys"), py::arg("temperature") = 1.0);
    m.def(
        "fd_alpha_jacobian",
        [](const Vec& q, const std::vector<Vec>& keys, double h, double temperature) {
            return fd_alpha_jacobian(q, keys, h, temperature);
        },
        py::arg("q"), py::arg("keys"), py::arg("h") = 1e-5, py::arg("temperature") = 1.0);

    // objectives
    m.def(
        "neighbourhood_targets",
        [](const std::vector<Vec>& combined, int window) { return neighbourhood_targets(combined, window); },
        py::arg("combined"), py::arg("window") = 2);
    m.def(
        "embed_loss",
        [](const std::vector<Vec>& combined, const std::vector<Vec>& targets, const Tensor3& layers, double lambda) {
            return embed_loss(combined, targets, layers, lambda);
        },
        py::arg("combined"), py::arg("targets"), py::arg("layers"), py::arg("lam"));
    m.def(
        "hierarchy_loss",
        [](const Tensor3& layers, const std::vector<Mat>& weights, const std::vector<Vec>& biases) {
            std::vector<HierEmbedStack> stacks;
            for (const auto& ls : layers) {
                HierEmbedStack s;
                s.layers = ls;
                stacks.push_back(std::move(s));
            }
            return hierarchy_loss(stacks, make_transform(weights, biases));
        },
        py::arg("layers"), py::arg("weights"), py::arg("biases"));
    m.def("total_loss",
          [](double task, double embed, double hier, double we, double wh) {
              return total_loss(task, embed, hier, {we, wh});
          },
          py::arg("task_loss"), py::arg("embed"), py::arg("hier"), py::arg("embed_weight") = 0.1,
          py::arg("hier_weight") = 0.1);
    m.def(
        "loss_gradients",
        [](const Tensor3& layers, const std::vector<Vec>& queries, const Tensor3& keys, const std::vector<Mat>& weights,
           const std::vector<Vec>& biases, double lambda, int window, double we, double wh) {
            const auto stacks = make_stacks(layers, queries, keys);
            EmbedLossConfig cfg;
            cfg.lambda = lambda;
            cfg.target_window = window;
            const auto g = loss_gradients(stacks, make_transform(weights, biases), cfg, {we, wh});
            py::dict out;
            out["embed"] = g.embed;
            out["hier"] = g.hier;
            out["total"] = g.total;
            Tensor3 gl, gk;
            std::vector<Vec> gq;
            for (const auto& s : g.stacks) {
                gl.push_back(s.layers);
                gq.push_back(s.query);
                gk.push_back(s.keys);
            }
            out["layers"] = gl;
            out["queries"] = gq;
            out["keys"] = gk;
            out["weights"] = g.transform.weights;
            out["biases"] = g.transform.biases;
            return out;
        },
        py::arg("layers"), py::arg("queries"), py::arg("keys"), py::arg("weights"), py::arg("biases"),
        py::arg("lam") = 1e-4, py::arg("window") = 2, py::arg("embed_weight") = 0.1, py::arg("hier_weight") = 0.1);

    // memory
    py::class_<MemoryBlock>(m, "MemoryBlock")
        .def_readonly("block_id", &MemoryBlock::block_id)
        .def_readonly("centroid", &MemoryBlock::centroid)
        .def_readonly("member_tokens", &MemoryBlock::member_tokens)
        .def_readonly("last_used_step", &MemoryBlock::last_used_step)
        .def_readonly("usage_count", &MemoryBlock::usage_count)
        .def_property_readonly("member_count", &MemoryBlock::member_count);
    py::class_<MemoryState>(m, "MemoryState")
        .def_readonly("blocks", &MemoryState::blocks)
        .def_readonly("capacity", &MemoryState::capacity)
        .def_readonly("step", &MemoryState::step)
        .def("total_members", &MemoryState::total_members)
        .def("find_block", &MemoryState::find_block);
    m.def(
        "cluster_tokens",
        [](const std::vector<Vec>& vectors, double theta, const std::vector<int>& ids, std::size_t min_blocks) {
            return cluster_tokens(vectors, theta, ids, min_blocks);
        },
        py::arg("vectors"), py::arg("theta"), py::arg("token_ids") = std::vector<int>{}, py::arg("min_blocks") = 1);
    m.def("block_summary", [](const std::vector<Vec>& members) { return block_summary(members); });
    m.def("js_divergence", &js_divergence, py::arg("p"), py::arg("q"));

    py::class_<ShiftDetectorState>(m, "ShiftDetector")
        .def(py::init([](std::size_t layers, int window, double threshold) {
                 return ShiftDetectorState::make(layers, window, threshold);
             }),
             py::arg("num_layers"), py::arg("window") = 32, py::arg("threshold") = 0.05)
        .def(
            "update",
            [](ShiftDetectorState& s, const Vec& alpha) -> std::optional<std::pair<long, double>> {
                if (auto e = detect_shift(s, AlphaWeights{alpha})) return std::make_pair(e->sample_index, e->divergence);
                return std::nullopt;
            },
            "Feed one layer-weight sample; returns (sample_index, divergence) when a shift fires.")
        .def_readonly("samples_seen", &ShiftDetectorState::samples_seen)
        .def_readonly("reference_hist", &ShiftDetectorState::reference_hist)
        .def_readonly("current_hist", &ShiftDetectorState::current_hist)
        .def_readonly("last_divergence", &ShiftDetectorState::last_divergence);

    py::enum_<Action>(m, "Action")
        .value("RETAIN", Action::Retain)
        .value("MERGE", Action::Merge)
        .value("EVICT", Action::Evict);
    py::class_<ReallocPolicy>(m, "ReallocPolicy")
        .def(py::init([](double lr) {
                 ReallocPolicy p;
                 p.learning_rate = lr;
                 return p;
             }),
             py::arg("learning_rate") = 0.1)
        .def_readwrite("logits", &ReallocPolicy::logits)
        .def_readwrite("baseline", &ReallocPolicy::baseline)
        .def("probabilities", &ReallocPolicy::probabilities)
        .def("step", [](const ReallocPolicy& p, double reward, Action a) { return policy_step(p, reward, a); })
        .def("sample", [](const ReallocPolicy& p, std::uint64_t seed, int n) {
            std::mt19937_64 rng(seed);
            std::vector<Action> out;
            for (int i = 0; i < n; ++i) out.push_back(sample_action(p, rng));
            return out;
        });
    m.def(
        "apply_action",
        [](const MemoryState& s, Action a) {
            auto o = apply_action(s, a);
            return std::make_pair(o.state, o.degenerate);
        },
        py::arg("state"), py::arg("action"));
    m.def(
        "rectify",
        [](const Tensor3& layers, const std::vector<Mat>& weights, const std::vector<Vec>& biases, double eta) {
            std::vector<HierEmbedStack> stacks;
            for (const auto& ls : layers) {
                HierEmbedStack s;
                s.layers = ls;
                stacks.push_back(std::move(s));
            }
            Tensor3 out;
            for (const auto& s : rectify(stacks, make_transform(weights, biases), eta)) out.push_back(s.layers);
            return out;
        },
        py::arg("layers"), py::arg("weights"), py::arg("biases"), py::arg("eta"));
    m.def(
        "alignment_audit",
        [](const Tensor3& layers, const std::vector<Mat>& weights, const std::vector<Vec>& biases) {
            std::vector<HierEmbedStack> stacks;
            for (const auto& ls : layers) {
                HierEmbedStack s;
                s.layers = ls;
                stacks.push_back(std::move(s));
            }
            const auto r = alignment_audit(stacks, make_transform(weights, biases));
            return std::make_pair(r.max_discrepancy, r.mean_discrepancy);
        },
        py::arg("layers"), py::arg("weights"), py::arg("biases"));

    // model
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("d", &ModelConfig::d)
        .def_readwrite("L", &ModelConfig::L)
        .def_readwrite("attn_layers", &ModelConfig::attn_layers)
        .def_readwrite("vocab", &ModelConfig::vocab)
        .def_readwrite("classes", &ModelConfig::classes)
        .def_readwrite("ffn_hidden", &ModelConfig::ffn_hidden)
        .def_readwrite("use_memory", &ModelConfig::use_memory)
        .def_readwrite("use_hierarchy", &ModelConfig::use_hierarchy)
        .def_readwrite("temperature", &ModelConfig::temperature)
        .def_readwrite("seed", &ModelConfig::seed);
    m.def("parameter_count", &parameter_count);
    m.def("baseline_config", &baseline_config);
    m.def("attention_op_count", &attention_op_count, py::arg("T"), py::arg("B") = std::nullopt,
          py::arg("attn_layers") = 2);

    py::class_<ModelParams>(m, "Model")
        .def(py::init(&init_params), py::arg("config"))
        .def_readonly("config", &ModelParams::config)
        .def("size", &ModelParams::size)
        .def("flat", &ModelParams::flat)
        .def(
            "forward",
            [](const ModelParams& p, const std::vector<int>& tokens, const MemoryState* memory) {
                const auto fp = forward(p, tokens, memory);
                std::vector<Vec> alphas;
                for (const auto& a : fp.alphas) alphas.push_back(a.weights);
                py::dict out;
                out["logits"] = fp.logits;
                out["alphas"] = alphas;
                out["scored_pairs"] = fp.ops.scored_pairs;
                out["mac_count"] = fp.ops.mac_count;
                out["attention"] = fp.attention();
                return out;
            },
            py::arg("tokens"), py::arg("memory") = nullptr)
        .def(
            "train_step",
            [](ModelParams& p, const std::vector<std::pair<std::vector<int>, int>>& batch, ModelParams& velocity,
               double lr, double momentum) {
                std::vector<Example> ex;
                for (const auto& [tokens, label] : batch) ex.push_back({tokens, label, 0});
                TrainOptions opts;
                opts.lr = lr;
                opts.momentum = momentum;
                return train_step(p, ex, velocity, opts).total_loss;
            },
            py::arg("batch"), py::arg("velocity"), py::arg("lr") = 0.01, py::arg("momentum") = 0.9)
        .def("zeros_like", &ModelParams::zeros_like)
        .def("save", [](const ModelParams& p, const std::filesystem::path& path) { save_checkpoint(path, p); })
        .def_static("load", &load_checkpoint);

    // harness
    m.def(
        "run",
        [](const std::filesystem::path& config, std::optional<std::string> out, std::uint64_t seed_offset) {
            RunOverrides ov;
            ov.output_dir = std::move(out);
            ov.seed_offset = seed_offset;
            const RunManifest r = run(config, ov);
            py::dict d;
            d["run_id"] = r.run_id;
            d["task"] = r.task;
            d["config_hash"] = r.config_hash;
            d["version"] = r.version;
            d["seeds"] = r.seeds;
            d["files"] = r.files;
            return d;
        },
        py::arg("config"), py::arg("out") = std::nullopt, py::arg("seed_offset") = 0);
    m.def(
        "error_histogram", [](const std::vector<double>& rates) { return error_histogram(rates); },
        py::arg("error_rates"));
    m.def("version", &version_string);
}
