#pragma once

#include "hiermem/memory.hpp"
#include "hiermem/objectives.hpp"

#include <filesystem>
#include <optional>

namespace hiermem {

struct ModelConfig {
    int d = 32;
    int L = 4;  ///< hierarchy layers requested; the static baseline uses 1
    int heads = 1;
    int attn_layers = 2;
    int vocab = 160;
    int classes = 4;
    int ffn_hidden = 64;
    bool use_memory = true;
    bool use_hierarchy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;

    int layers() const { return use_hierarchy ? L : 1; }
    /// FFN width actually built. The static baseline widens it to absorb the
    /// parameters the hierarchical frontend would have used.
    int effective_ffn_hidden() const;
    void validate() const;
};

std::size_t parameter_count(const ModelConfig& cfg);

/// Static single-layer, no-memory twin of `full` with a matched parameter budget.
ModelConfig baseline_config(const ModelConfig& full);

/// Throws InputError unless the two parameter counts are within `tolerance` (relative).
void check_parameter_budget(const ModelConfig& a, const ModelConfig& b, double tolerance = 0.10);

struct AttnBlock {
    Mat wq, wk, wv, wo;
    Mat w1;
    Vec b1;
    Mat w2;
    Vec b2;
};

struct ModelParams {
    ModelConfig config;
    std::vector<Mat> embed;  ///< per hierarchy layer, d x vocab
    Mat hier_q;              ///< d x d, empty for the static baseline
    Mat hier_k;              ///< d x d
    Mat key_bias;            ///< d x L
    LayerTransform transform;
    std::vector<AttnBlock> blocks;
    Mat head_w;  ///< classes x d
    Vec head_b;

    /// Calls f(name, tensor) for every trainable tensor in a fixed order.
    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t size() const;
    ModelParams zeros_like() const;
    Vec flat() const;
    void set_flat(const Vec& v);

    /// Hierarchical stack (layers, query, keys) for one vocabulary id.
    HierEmbedStack stack_for(int token) const;

private:
    template <class Self, class F>
    static void visit_impl(Self& p, F& f) {
        for (std::size_t l = 0; l < p.embed.size(); ++l) f("embed." + std::to_string(l), p.embed[l]);
        if (p.config.use_hierarchy) {
            f(std::string("hier_q"), p.hier_q);
            f(std::string("hier_k"), p.hier_k);
            f(std::string("key_bias"), p.key_bias);
            for (std::size_t g = 0; g < p.transform.gaps(); ++g) {
                f("align_w." + std::to_string(g), p.transform.weights[g]);
                f("align_b." + std::to_string(g), p.transform.biases[g]);
            }
        }
        for (std::size_t i = 0; i < p.blocks.size(); ++i) {
            auto& b = p.blocks[i];
            const std::string pre = "block" + std::to_string(i) + ".";
            f(pre + "wq", b.wq);
            f(pre + "wk", b.wk);
            f(pre + "wv", b.wv);
            f(pre + "wo", b.wo);
            f(pre + "w1", b.w1);
            f(pre + "b1", b.b1);
            f(pre + "w2", b.w2);
            f(pre + "b2", b.b2);
        }
        f(std::string("head_w"), p.head_w);
        f(std::string("head_b"), p.head_b);
    }
};

ModelParams init_params(const ModelConfig& cfg);

struct OpCounter {
    long long scored_pairs = 0;
    long long mac_count = 0;
};

struct LayerCache {
    Mat x_in, q, k, v, attn, out, x_mid, pre, hidden;
    std::vector<int> group;        ///< position -> key slot, -1 when unrepresented (memory path)
    std::vector<int> group_sizes;  ///< members per key slot
    Mat source;                    ///< per-token states or block summaries feeding K and V
};

struct ForwardPass {
    Vec logits;
    std::vector<AlphaWeights> alphas;  ///< one per token
    OpCounter ops;
    std::vector<HierEmbedStack> stacks;
    Mat embedded;  ///< d x T
    std::vector<LayerCache> layers;
    Vec pooled;
    std::vector<int> tokens;

    /// Attention matrices, one (keys x T) matrix per attention layer; column t sums to 1.
    std::vector<Mat> attention() const;
};

/// Runs the classifier. With `memory`, each attention layer scores every
/// query against one key/value slot per memory block present in the sequence
/// (the mean of that block's positions) instead of against every position.
ForwardPass forward(const ModelParams& params, std::span<const int> tokens, const MemoryState* memory = nullptr);

long long attention_op_count(long long T, std::optional<long long> B, int attn_layers);

struct Example {
    std::vector<int> tokens;
    int label = 0;
    int segment = 0;
};

struct Dataset {
    std::vector<Example> examples;
    int num_segments = 1;
    std::vector<std::size_t> boundaries;  ///< example offsets where a new segment begins
};

struct TrainOptions {
    double lr = 0.01;
    double momentum = 0.9;
    ObjectiveWeights weights;
    EmbedLossConfig embed;
};

struct StepResult {
    double total_loss = 0.0;  ///< pre-step
    double task_loss = 0.0;
    double embed_loss = 0.0;
    double hier_loss = 0.0;
    OpCounter ops;
    std::vector<AlphaWeights> mean_alphas;  ///< per example, token-averaged
};

/// Thrown by train_step when the loss is NaN or infinite; params are left untouched.
class NonFiniteLoss : public std::runtime_error {
public:
    explicit NonFiniteLoss(const std::string& what) : std::runtime_error(what) {}
};

/// Loss value and gradient for a batch without updating anything.
StepResult batch_gradient(const ModelParams& params, std::span<const Example> batch, const TrainOptions& opts,
                          const MemoryState* memory, ModelParams& grad);

StepResult train_step(ModelParams& params, std::span<const Example> batch, ModelParams& velocity,
                      const TrainOptions& opts, const MemoryState* memory = nullptr);

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::vector<double> segment_accuracy;  ///< indexed by segment label, NaN when a segment has no examples
    std::vector<int> segment_counts;
};

EvalResult evaluate(const ModelParams& params, std::span<const Example> data, int num_segments = 1,
                    const MemoryState* memory = nullptr);

inline constexpr int kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace hiermem
