#include "hiermem/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace hiermem {

LayerTransform LayerTransform::identity(std::size_t num_layers, Eigen::Index dim) {
    LayerTransform t;
    const std::size_t gaps = num_layers > 0 ? num_layers - 1 : 0;
    t.weights.assign(gaps, Mat::Identity(dim, dim));
    t.biases.assign(gaps, Vec::Zero(dim));
    return t;
}

void LayerTransform::validate(Eigen::Index dim) const {
    require(weights.size() == biases.size(), "transform: weight/bias count mismatch");
    for (std::size_t g = 0; g < weights.size(); ++g) {
        require(weights[g].rows() == dim && weights[g].cols() == dim, "transform: map must be d x d");
        require(biases[g].size() == dim, "transform: bias must have dimension d");
        require(weights[g].allFinite() && biases[g].allFinite(), "transform: non-finite parameters");
    }
}

std::vector<Vec> neighbourhood_targets(std::span<const Vec> combined, int window) {
    require(!combined.empty(), "embed_target: empty sequence");
    require(window >= 1, "embed_target: window must be >= 1");
    const auto T = static_cast<long>(combined.size());
    std::vector<Vec> out;
    out.reserve(combined.size());
    for (long t = 0; t < T; ++t) {
        const long lo = std::max(0L, t - window);
        const long hi = std::min(T - 1, t + window);
        Vec acc = Vec::Zero(combined[static_cast<std::size_t>(t)].size());
        int n = 0;
        for (long s = lo; s <= hi; ++s) {
            if (s == t) continue;
            acc += combined[static_cast<std::size_t>(s)];
            ++n;
        }
        out.push_back(n > 0 ? Vec(acc / n) : combined[static_cast<std::size_t>(t)]);
    }
    return out;
}

std::vector<Vec> embed_target(std::span<const HierEmbedStack> stacks, int window, double temperature) {
    require(!stacks.empty(), "embed_target: empty sequence");
    std::vector<Vec> combined;
    combined.reserve(stacks.size());
    for (const auto& s : stacks) combined.push_back(combined_embedding(s, temperature));
    return neighbourhood_targets(combined, window);
}

double embed_loss(std::span<const Vec> combined, std::span<const Vec> targets,
                  std::span<const std::vector<Vec>> layers, double lambda) {
    require(!combined.empty(), "embed_loss: empty sequence");
    require(combined.size() == targets.size() && combined.size() == layers.size(),
            "embed_loss: sequence lengths differ");
    double fit = 0.0;
    double reg = 0.0;
    for (std::size_t t = 0; t < combined.size(); ++t) {
        require(combined[t].size() == targets[t].size(), "embed_loss: dimension mismatch");
        fit += (combined[t] - targets[t]).squaredNorm();
        for (const auto& v : layers[t]) reg += v.squaredNorm();
    }
    return fit / static_cast<double>(combined.size()) + lambda * reg;
}

double hierarchy_loss(std::span<const HierEmbedStack> stacks, const LayerTransform& transform) {
    double loss = 0.0;
    for (const auto& s : stacks) {
        if (s.num_layers() < 2) continue;
        require(transform.gaps() + 1 >= s.num_layers(), "hierarchy_loss: transform has too few gaps");
        for (std::size_t g = 0; g + 1 < s.num_layers(); ++g)
            loss += (s.layers[g + 1] - transform.apply(g, s.layers[g])).squaredNorm();
    }
    return loss;
}

double total_loss(double task_loss, double embed, double hier, const ObjectiveWeights& weights) {
    return task_loss + weights.embed * embed + weights.hier * hier;
}

namespace {

std::vector<std::vector<Vec>> layer_lists(std::span<const HierEmbedStack> stacks) {
    std::vector<std::vector<Vec>> out;
    out.reserve(stacks.size());
    for (const auto& s : stacks) out.push_back(s.layers);
    return out;
}

}  // namespace

double objective_value(std::span<const HierEmbedStack> stacks, const LayerTransform& transform,
                       const EmbedLossConfig& config, const ObjectiveWeights& weights,
                       const std::vector<Vec>& targets, double temperature) {
    std::vector<Vec> combined;
    for (const auto& s : stacks) combined.push_back(combined_embedding(s, temperature));
    const auto layers = layer_lists(stacks);
    return weights.embed * embed_loss(combined, targets, layers, config.lambda) +
           weights.hier * hierarchy_loss(stacks, transform);
}

LossGradients loss_gradients(std::span<const HierEmbedStack> stacks, const LayerTransform& transform,
                             const EmbedLossConfig& config, const ObjectiveWeights& weights,
                             const std::optional<std::vector<Vec>>& targets, double temperature) {
    config.validate();
    require(!stacks.empty(), "loss_gradients: empty sequence");
    for (const auto& s : stacks) s.validate();
    const auto d = stacks.front().dim();
    transform.validate(d);

    const std::size_t T = stacks.size();
    std::vector<AlphaWeights> alphas;
    std::vector<Vec> combined;
    alphas.reserve(T);
    combined.reserve(T);
    for (const auto& s : stacks) {
        alphas.push_back(layer_weights(s.query, s.keys, temperature));
        combined.push_back(combine(alphas.back(), s.layers));
    }
    const std::vector<Vec> tgt = targets ? *targets : neighbourhood_targets(combined, config.target_window);
    require(tgt.size() == T, "loss_gradients: target count differs from token count");

    LossGradients out;
    out.embed = embed_loss(combined, tgt, layer_lists(stacks), config.lambda);
    out.hier = hierarchy_loss(stacks, transform);
    out.total = weights.embed * out.embed + weights.hier * out.hier;

    out.transform.weights.assign(transform.gaps(), Mat::Zero(d, d));
    out.transform.biases.assign(transform.gaps(), Vec::Zero(d));
    out.stacks.resize(T);

    for (std::size_t t = 0; t < T; ++t) {
        const auto& s = stacks[t];
        const auto L = s.num_layers();
        auto& g = out.stacks[t];
        g.layers.assign(L, Vec::Zero(d));
        g.keys.assign(L, Vec::Zero(d));
        g.query = Vec::Zero(d);

        // embedding fit term, target held constant
        const Vec grad_e = (weights.embed * 2.0 / static_cast<double>(T)) * (combined[t] - tgt[t]);
        Vec grad_alpha(static_cast<Eigen::Index>(L));
        for (std::size_t l = 0; l < L; ++l) {
            g.layers[l] += alphas[t][l] * grad_e + (weights.embed * 2.0 * config.lambda) * s.layers[l];
            grad_alpha[static_cast<Eigen::Index>(l)] = s.layers[l].dot(grad_e);
        }
        if (L > 1) {
            g.query = alpha_jacobian(s.query, s.keys, temperature).transpose() * grad_alpha;
            g.keys = alpha_key_grads(s.query, alphas[t], grad_alpha, temperature);
        }

        // alignment term
        for (std::size_t gap = 0; gap + 1 < L; ++gap) {
            const Vec r = s.layers[gap + 1] - transform.apply(gap, s.layers[gap]);
            const Vec gr = (weights.hier * 2.0) * r;
            g.layers[gap + 1] += gr;
            g.layers[gap] -= transform.weights[gap].transpose() * gr;
            out.transform.weights[gap] -= gr * s.layers[gap].transpose();
            out.transform.biases[gap] -= gr;
        }
    }
    return out;
}

Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    require(h > 0.0 && std::isfinite(h), "fd_gradient: step must be positive");
    Vec grad(x.size());
    Vec probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double plus = x[i] + h;
        const double minus = x[i] - h;
        require(plus != x[i] && minus != x[i], "fd_gradient: step vanishes in working precision");
        probe[i] = plus;
        const double fp = f(probe);
        probe[i] = minus;
        const double fm = f(probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (plus - minus);
    }
    return grad;
}

namespace {

struct Packer {
    std::vector<double> data;
    void put(const Vec& v) { data.insert(data.end(), v.data(), v.data() + v.size()); }
    void put(const Mat& m) { data.insert(data.end(), m.data(), m.data() + m.size()); }
};

struct Unpacker {
    const Vec& flat;
    Eigen::Index pos = 0;
    void get(Vec& v) {
        require(pos + v.size() <= flat.size(), "unflatten: vector too short");
        v = flat.segment(pos, v.size());
        pos += v.size();
    }
    void get(Mat& m) {
        require(pos + m.size() <= flat.size(), "unflatten: vector too short");
        m = Eigen::Map<const Mat>(flat.data() + pos, m.rows(), m.cols());
        pos += m.size();
    }
};

}  // namespace

Vec flatten(std::span<const HierEmbedStack> stacks, const LayerTransform& transform) {
    Packer p;
    for (const auto& s : stacks) {
        for (const auto& v : s.layers) p.put(v);
        p.put(s.query);
        for (const auto& k : s.keys) p.put(k);
    }
    for (std::size_t g = 0; g < transform.gaps(); ++g) {
        p.put(transform.weights[g]);
        p.put(transform.biases[g]);
    }
    return Eigen::Map<const Vec>(p.data.data(), static_cast<Eigen::Index>(p.data.size()));
}

void unflatten(const Vec& flat, std::vector<HierEmbedStack>& stacks, LayerTransform& transform) {
    Unpacker u{flat};
    for (auto& s : stacks) {
        for (auto& v : s.layers) u.get(v);
        u.get(s.query);
        for (auto& k : s.keys) u.get(k);
    }
    for (std::size_t g = 0; g < transform.gaps(); ++g) {
        u.get(transform.weights[g]);
        u.get(transform.biases[g]);
    }
    require(u.pos == flat.size(), "unflatten: vector too long");
}

Vec flatten(const LossGradients& grads) {
    Packer p;
    for (const auto& s : grads.stacks) {
        for (const auto& v : s.layers) p.put(v);
        p.put(s.query);
        for (const auto& k : s.keys) p.put(k);
    }
    for (std::size_t g = 0; g < grads.transform.weights.size(); ++g) {
        p.put(grads.transform.weights[g]);
        p.put(grads.transform.biases[g]);
    }
    return Eigen::Map<const Vec>(p.data.data(), static_cast<Eigen::Index>(p.data.size()));
}

}  // namespace hiermem
