#pragma once

#include "hiermem/common.hpp"

#include <span>

namespace hiermem {

/// Per-token stack of L layer vectors plus the query and per-layer keys that
/// drive the layer-attention weights.
struct HierEmbedStack {
    int token_id = 0;
    std::vector<Vec> layers;
    Vec query;
    std::vector<Vec> keys;

    std::size_t num_layers() const { return layers.size(); }
    Eigen::Index dim() const { return query.size(); }

    /// Throws InputError unless L >= 1, d >= 1, every vector has dimension d
    /// and every component is finite.
    void validate() const;
};

/// Per-token simplex of layer weights.
struct AlphaWeights {
    Vec weights;

    std::size_t size() const { return static_cast<std::size_t>(weights.size()); }
    double operator[](std::size_t l) const { return weights[static_cast<Eigen::Index>(l)]; }
};

/// Plain dot product. Dimension mismatch or non-finite input is rejected.
double similarity(const Vec& q, const Vec& k);

/// Softmax over layers of similarity(q, k_l) / temperature, evaluated with
/// max-subtraction.
AlphaWeights layer_weights(const Vec& q, std::span<const Vec> keys, double temperature = 1.0);

/// Convex combination sum_l alpha_l * v_l.
Vec combine(const AlphaWeights& alpha, std::span<const Vec> layers);

/// Row l holds d alpha_l / d q = alpha_l * (k_l - sum_j alpha_j k_j) / temperature.
Mat alpha_jacobian(const Vec& q, std::span<const Vec> keys, double temperature = 1.0);

/// Central-difference estimate of alpha_jacobian with step h.
Mat fd_alpha_jacobian(const Vec& q, std::span<const Vec> keys, double h, double temperature = 1.0);

/// Gradient of a scalar loss with respect to each key, given the upstream
/// gradient with respect to the weights.
std::vector<Vec> alpha_key_grads(const Vec& q, const AlphaWeights& alpha, const Vec& grad_alpha,
                                 double temperature = 1.0);

/// Convenience: weights and combined embedding for one stack.
inline Vec combined_embedding(const HierEmbedStack& s, double temperature = 1.0) {
    return combine(layer_weights(s.query, s.keys, temperature), s.layers);
}

}  // namespace hiermem
