#pragma once

#include "hiermem/hier_embed.hpp"

#include <functional>
#include <optional>

namespace hiermem {

struct EmbedLossConfig {
    double lambda = 1e-4;  ///< weight of the squared-norm regularizer on every layer vector
    int target_window = 2;  ///< neighbours on each side used to build the contextual target

    void validate() const {
        require(lambda >= 0.0, "lambda must be >= 0");
        require(target_window >= 1, "target_window must be >= 1");
    }
};

/// Weights applied to the auxiliary losses when they join the task loss.
struct ObjectiveWeights {
    double embed = 0.1;
    double hier = 0.1;
};

/// One affine map per adjacent layer pair, projecting layer l onto layer l+1.
struct LayerTransform {
    std::vector<Mat> weights;
    std::vector<Vec> biases;

    static LayerTransform identity(std::size_t num_layers, Eigen::Index dim);

    std::size_t gaps() const { return weights.size(); }
    Vec apply(std::size_t gap, const Vec& v) const { return weights[gap] * v + biases[gap]; }
    void validate(Eigen::Index dim) const;
};

/// Contextual target for each token: mean of the combined embeddings of its
/// neighbours within +-window (the token itself excluded, clamped to the
/// sequence). A lone token falls back to its own embedding.
std::vector<Vec> embed_target(std::span<const HierEmbedStack> stacks, int window, double temperature = 1.0);
std::vector<Vec> neighbourhood_targets(std::span<const Vec> combined, int window);

double embed_loss(std::span<const Vec> combined, std::span<const Vec> targets,
                  std::span<const std::vector<Vec>> layers, double lambda);

/// Sum over tokens and layer gaps of ||v_{l+1} - f_l(v_l)||^2. Zero when L == 1.
double hierarchy_loss(std::span<const HierEmbedStack> stacks, const LayerTransform& transform);

double total_loss(double task_loss, double embed, double hier, const ObjectiveWeights& weights);

struct StackGrad {
    std::vector<Vec> layers;
    Vec query;
    std::vector<Vec> keys;
};

struct TransformGrad {
    std::vector<Mat> weights;
    std::vector<Vec> biases;
};

struct LossGradients {
    double embed = 0.0;
    double hier = 0.0;
    double total = 0.0;  ///< weights.embed * embed + weights.hier * hier
    std::vector<StackGrad> stacks;
    TransformGrad transform;
};

/// Analytic gradient of weights.embed * L_embed + weights.hier * L_hier with
/// respect to every layer vector, query, key and transform parameter. The
/// targets are constants; when omitted they are built with embed_target.
LossGradients loss_gradients(std::span<const HierEmbedStack> stacks, const LayerTransform& transform,
                             const EmbedLossConfig& config, const ObjectiveWeights& weights,
                             const std::optional<std::vector<Vec>>& targets = std::nullopt,
                             double temperature = 1.0);

/// Value matching loss_gradients().total for fixed targets.
double objective_value(std::span<const HierEmbedStack> stacks, const LayerTransform& transform,
                       const EmbedLossConfig& config, const ObjectiveWeights& weights,
                       const std::vector<Vec>& targets, double temperature = 1.0);

/// Central finite differences of f at x, one coordinate at a time.
Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h);

/// Flat parameter vector: per token (layers, query, keys), then per gap (weights column-major, bias).
Vec flatten(std::span<const HierEmbedStack> stacks, const LayerTransform& transform);
void unflatten(const Vec& flat, std::vector<HierEmbedStack>& stacks, LayerTransform& transform);
Vec flatten(const LossGradients& grads);

}  // namespace hiermem
