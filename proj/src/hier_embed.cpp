#include "hiermem/hier_embed.hpp"

#include <cmath>

namespace hiermem {

void HierEmbedStack::validate() const {
    require(!layers.empty(), "stack needs at least one layer");
    require(query.size() >= 1, "embedding dimension must be >= 1");
    require(keys.size() == layers.size(), "one key per layer required");
    require(all_finite(query), "query has non-finite entries");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        require(layers[l].size() == query.size() && keys[l].size() == query.size(),
                "layer/key dimension differs from query dimension");
        require(all_finite(layers[l]) && all_finite(keys[l]), "stack has non-finite entries");
    }
}

double similarity(const Vec& q, const Vec& k) {
    require(q.size() == k.size(), "similarity: dimension mismatch");
    require(all_finite(q) && all_finite(k), "similarity: non-finite input");
    return q.dot(k);
}

AlphaWeights layer_weights(const Vec& q, std::span<const Vec> keys, double temperature) {
    require(!keys.empty(), "layer_weights: need at least one key");
    require(temperature > 0.0 && std::isfinite(temperature), "layer_weights: temperature must be positive");
    const auto L = static_cast<Eigen::Index>(keys.size());
    Vec scores(L);
    for (Eigen::Index l = 0; l < L; ++l) {
        scores[l] = similarity(q, keys[static_cast<std::size_t>(l)]) / temperature;
        require(std::isfinite(scores[l]), "layer_weights: non-finite similarity");
    }
    const double top = scores.maxCoeff();
    Vec w = (scores.array() - top).exp();
    w /= w.sum();
    return AlphaWeights{std::move(w)};
}

Vec combine(const AlphaWeights& alpha, std::span<const Vec> layers) {
    require(!layers.empty(), "combine: no layers");
    require(alpha.size() == layers.size(), "combine: weight count differs from layer count");
    const auto d = layers.front().size();
    Vec out = Vec::Zero(d);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        require(layers[l].size() == d, "combine: layer dimensions disagree");
        out += alpha[l] * layers[l];
    }
    return out;
}

Mat alpha_jacobian(const Vec& q, std::span<const Vec> keys, double temperature) {
    const AlphaWeights alpha = layer_weights(q, keys, temperature);
    const auto L = static_cast<Eigen::Index>(keys.size());
    Vec mean_key = Vec::Zero(q.size());
    for (Eigen::Index l = 0; l < L; ++l) mean_key += alpha.weights[l] * keys[static_cast<std::size_t>(l)];
    Mat J(L, q.size());
    for (Eigen::Index l = 0; l < L; ++l)
        J.row(l) = (alpha.weights[l] / temperature) * (keys[static_cast<std::size_t>(l)] - mean_key).transpose();
    return J;
}

Mat fd_alpha_jacobian(const Vec& q, std::span<const Vec> keys, double h, double temperature) {
    require(h > 0.0 && std::isfinite(h), "fd_alpha_jacobian: step must be positive");
    const auto L = static_cast<Eigen::Index>(keys.size());
    Mat J(L, q.size());
    for (Eigen::Index i = 0; i < q.size(); ++i) {
        Vec plus = q, minus = q;
        plus[i] += h;
        minus[i] -= h;
        require(plus[i] != q[i] && minus[i] != q[i], "fd_alpha_jacobian: step vanishes in working precision");
        const Vec ap = layer_weights(plus, keys, temperature).weights;
        const Vec am = layer_weights(minus, keys, temperature).weights;
        J.col(i) = (ap - am) / (plus[i] - minus[i]);
    }
    return J;
}

std::vector<Vec> alpha_key_grads(const Vec& q, const AlphaWeights& alpha, const Vec& grad_alpha,
                                 double temperature) {
    // d alpha_j / d k_l = alpha_j (delta_jl - alpha_l) q / temperature
    const double centre = alpha.weights.dot(grad_alpha);
    std::vector<Vec> out;
    out.reserve(alpha.size());
    for (Eigen::Index l = 0; l < alpha.weights.size(); ++l)
        out.push_back((alpha.weights[l] * (grad_alpha[l] - centre) / temperature) * q);
    return out;
}

}  // namespace hiermem
