#pragma once

// Helpers shared by the unit suites and the acceptance binary.

#include "hiermem/memory.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

namespace fixtures {

using hiermem::HierEmbedStack;
using hiermem::LayerTransform;
using hiermem::Mat;
using hiermem::Vec;

inline std::vector<HierEmbedStack> random_stacks(std::mt19937_64& rng, int T, int L, int d, double sd = 1.0) {
    std::vector<HierEmbedStack> out(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        auto& s = out[static_cast<std::size_t>(t)];
        s.token_id = t;
        for (int l = 0; l < L; ++l) {
            s.layers.push_back(oracle::random_vec(rng, d, sd));
            s.keys.push_back(oracle::random_vec(rng, d, sd));
        }
        s.query = oracle::random_vec(rng, d, sd);
    }
    return out;
}

inline LayerTransform random_transform(std::mt19937_64& rng, int L, int d, double sd = 0.5) {
    LayerTransform f = LayerTransform::identity(static_cast<std::size_t>(L), d);
    std::normal_distribution<double> n(0.0, sd);
    for (std::size_t g = 0; g < f.gaps(); ++g) {
        for (Eigen::Index i = 0; i < f.weights[g].size(); ++i) f.weights[g].data()[i] += n(rng);
        for (Eigen::Index i = 0; i < d; ++i) f.biases[g][i] = n(rng);
    }
    return f;
}

/// Largest per-parameter error normalised by max(1, |analytic|).
inline double max_scaled_error(const Vec& analytic, const Vec& numeric) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i])));
    return worst;
}

/// Relative error of loss_gradients against fd_gradient on one random instance.
inline double gradient_check(std::mt19937_64& rng, int T, int L, int d, double temperature = 1.0) {
    auto stacks = random_stacks(rng, T, L, d, 0.7);
    auto transform = random_transform(rng, L, d);
    hiermem::EmbedLossConfig cfg;
    cfg.lambda = 0.05;
    cfg.target_window = 1 + static_cast<int>(rng() % 3);
    const hiermem::ObjectiveWeights w{0.7, 0.4};
    const auto targets = hiermem::embed_target(stacks, cfg.target_window, temperature);
    const auto grads = hiermem::loss_gradients(stacks, transform, cfg, w, targets, temperature);
    const Vec x = hiermem::flatten(stacks, transform);
    auto f = [&](const Vec& p) {
        auto s = stacks;
        auto tr = transform;
        hiermem::unflatten(p, s, tr);
        return hiermem::objective_value(s, tr, cfg, w, targets, temperature);
    };
    return max_scaled_error(hiermem::flatten(grads), hiermem::fd_gradient(f, x, 1e-5));
}

/// Gradient descent on the transform alone; the step halves whenever the
/// loss would rise (the rising step is rejected). Returns (initial, final).
inline std::pair<double, double> transform_descent(const std::vector<HierEmbedStack>& stacks, LayerTransform f,
                                                   int steps = 200, double step = 0.05) {
    hiermem::EmbedLossConfig cfg;
    const hiermem::ObjectiveWeights only_hier{0.0, 1.0};
    const double initial = hiermem::hierarchy_loss(stacks, f);
    double current = initial;
    for (int k = 0; k < steps; ++k) {
        const auto g = hiermem::loss_gradients(stacks, f, cfg, only_hier);
        LayerTransform trial = f;
        for (std::size_t i = 0; i < f.gaps(); ++i) {
            trial.weights[i] -= step * g.transform.weights[i];
            trial.biases[i] -= step * g.transform.biases[i];
        }
        const double next = hiermem::hierarchy_loss(stacks, trial);
        if (next > current) {
            step *= 0.5;
            continue;
        }
        f = std::move(trial);
        current = next;
    }
    return {initial, current};
}

/// Near-one-hot layer weights with a little Dirichlet-like jitter.
inline hiermem::AlphaWeights noisy_one_hot(std::mt19937_64& rng, int L, int hot, double mass = 0.9) {
    std::uniform_real_distribution<double> u(0.5, 1.5);
    Vec w(L);
    double rest = 0.0;
    for (int l = 0; l < L; ++l)
        if (l != hot) rest += (w[l] = u(rng));
    for (int l = 0; l < L; ++l)
        if (l != hot) w[l] *= (1.0 - mass) / rest;
    w[hot] = mass;
    return {w};
}

/// Stream of `n` samples whose dominant layer moves from `from` to `to` after
/// sample `change` (1-based: samples 1..change use `from`).
inline std::vector<Vec> planted_stream(std::mt19937_64& rng, long n, long change, int L, int from, int to) {
    std::vector<Vec> out;
    for (long i = 1; i <= n; ++i) out.push_back(noisy_one_hot(rng, L, i <= change ? from : to).weights);
    return out;
}

/// Feeds a stream to the library detector and returns the event sample indices.
inline std::vector<long> run_detector(const std::vector<Vec>& stream, int W, double tau) {
    auto st = hiermem::ShiftDetectorState::make(static_cast<std::size_t>(stream.front().size()), W, tau);
    std::vector<long> events;
    for (const auto& a : stream)
        if (auto e = hiermem::detect_shift(st, hiermem::AlphaWeights{a})) events.push_back(e->sample_index);
    return events;
}

/// Partition of a memory state as sorted member lists.
inline std::vector<std::vector<int>> partition_of(const hiermem::MemoryState& s) {
    std::vector<std::vector<int>> out;
    for (const auto& b : s.blocks) out.push_back(b.member_tokens);
    std::sort(out.begin(), out.end());
    return out;
}

/// Random clustering instance: a few directions with jitter, sometimes a zero
/// vector or an exact duplicate.
inline std::vector<Vec> clustering_instance(std::mt19937_64& rng, int n, int d) {
    std::vector<Vec> centres;
    const int k = 1 + static_cast<int>(rng() % 3);
    for (int c = 0; c < k; ++c) centres.push_back(oracle::random_vec(rng, d));
    std::vector<Vec> xs;
    for (int i = 0; i < n; ++i) {
        const auto roll = rng() % 10;
        if (roll == 0) xs.push_back(Vec::Zero(d));
        else if (roll == 1 && !xs.empty()) xs.push_back(xs[rng() % xs.size()]);
        else xs.push_back(centres[rng() % centres.size()] + oracle::random_vec(rng, d, 0.3));
    }
    return xs;
}

}  // namespace fixtures
