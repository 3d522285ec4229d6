#include "hiermem/memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace hiermem {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

int MemoryState::total_members() const {
    int n = 0;
    for (const auto& b : blocks) n += b.member_count();
    return n;
}

int MemoryState::find_block(int token) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& m = blocks[i].member_tokens;
        if (std::binary_search(m.begin(), m.end(), token)) return static_cast<int>(i);
    }
    return -1;
}

void MemoryState::validate() const {
    require(static_cast<int>(blocks.size()) <= capacity, "memory: block count exceeds capacity");
    std::vector<int> ids;
    std::vector<int> tokens;
    for (const auto& b : blocks) {
        require(b.member_count() >= 1, "memory: empty block");
        require(std::is_sorted(b.member_tokens.begin(), b.member_tokens.end()), "memory: unsorted members");
        require(all_finite(b.centroid), "memory: non-finite centroid");
        ids.push_back(b.block_id);
        tokens.insert(tokens.end(), b.member_tokens.begin(), b.member_tokens.end());
    }
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "memory: duplicate block id");
    std::sort(tokens.begin(), tokens.end());
    require(std::adjacent_find(tokens.begin(), tokens.end()) == tokens.end(), "memory: token in two blocks");
}

std::optional<double> cosine_distance(const Vec& a, const Vec& b) {
    require(a.size() == b.size(), "cosine_distance: dimension mismatch");
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    double d = 1.0 - a.dot(b) / (na * nb);
    d = std::clamp(d, 0.0, 2.0);
    if (d < 1e-12) d = 0.0;
    return d;
}

Vec block_summary(std::span<const Vec> members) {
    require(!members.empty(), "block_summary: no members");
    Vec acc = Vec::Zero(members.front().size());
    for (const auto& m : members) {
        require(m.size() == acc.size(), "block_summary: dimension mismatch");
        acc += m;
    }
    return acc / static_cast<double>(members.size());
}

MemoryState cluster_tokens(std::span<const Vec> vectors, double theta, std::span<const int> token_ids,
                           std::size_t min_blocks) {
    require(!vectors.empty(), "cluster_tokens: no vectors");
    require(theta >= 0.0 && theta <= 2.0, "cluster_tokens: theta must lie in [0, 2]");
    require(token_ids.empty() || token_ids.size() == vectors.size(), "cluster_tokens: id count mismatch");
    const std::size_t n = vectors.size();
    min_blocks = std::max<std::size_t>(min_blocks, 1);

    std::vector<bool> mergeable(n);
    for (std::size_t i = 0; i < n; ++i) mergeable[i] = vectors[i].norm() > 0.0;

    // pairwise distance sums between clusters; a cluster is keyed by its smallest member
    Mat sums = Mat::Constant(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n), kInf);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (mergeable[i] && mergeable[j]) {
                const double d = *cosine_distance(vectors[i], vectors[j]);
                sums(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
                sums(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
            }

    std::vector<std::vector<int>> members(n);
    for (std::size_t i = 0; i < n; ++i) members[i] = {static_cast<int>(i)};
    std::vector<bool> active(n, true);
    std::size_t active_count = n;

    auto avg = [&](std::size_t a, std::size_t b) {
        return sums(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) /
               static_cast<double>(members[a].size() * members[b].size());
    };

    // best partner with a larger key, ties to the smaller partner key
    std::vector<double> best_d(n, kInf);
    std::vector<long> best_k(n, -1);
    auto refresh = [&](std::size_t a) {
        best_d[a] = kInf;
        best_k[a] = -1;
        if (!mergeable[a]) return;
        for (std::size_t b = a + 1; b < n; ++b) {
            if (!active[b] || !mergeable[b]) continue;
            const double d = avg(a, b);
            if (d < best_d[a]) {
                best_d[a] = d;
                best_k[a] = static_cast<long>(b);
            }
        }
    };
    for (std::size_t i = 0; i < n; ++i) refresh(i);

    while (active_count > min_blocks) {
        long pick = -1;
        for (std::size_t i = 0; i < n; ++i) {
            if (!active[i] || best_k[i] < 0) continue;
            if (pick < 0 || best_d[i] < best_d[static_cast<std::size_t>(pick)]) pick = static_cast<long>(i);
        }
        if (pick < 0 || best_d[static_cast<std::size_t>(pick)] > theta) break;

        const auto a = static_cast<std::size_t>(pick);
        const auto b = static_cast<std::size_t>(best_k[a]);
        for (std::size_t k = 0; k < n; ++k) {
            if (!active[k] || k == a || k == b) continue;
            const auto ka = static_cast<Eigen::Index>(k);
            sums(static_cast<Eigen::Index>(a), ka) += sums(static_cast<Eigen::Index>(b), ka);
            sums(ka, static_cast<Eigen::Index>(a)) = sums(static_cast<Eigen::Index>(a), ka);
        }
        members[a].insert(members[a].end(), members[b].begin(), members[b].end());
        members[b].clear();
        active[b] = false;
        --active_count;

        refresh(a);
        for (std::size_t k = 0; k < b; ++k) {
            if (!active[k] || k == a || !mergeable[k]) continue;
            if (best_k[k] == static_cast<long>(a) || best_k[k] == static_cast<long>(b)) {
                refresh(k);
            } else if (k < a) {
                const double d = avg(k, a);
                if (d < best_d[k] || (d == best_d[k] && static_cast<long>(a) < best_k[k])) {
                    best_d[k] = d;
                    best_k[k] = static_cast<long>(a);
                }
            }
        }
    }

    MemoryState state;
    state.capacity = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!active[i]) continue;
        MemoryBlock block;
        block.block_id = state.next_block_id++;
        std::vector<Vec> vs;
        for (int m : members[i]) {
            vs.push_back(vectors[static_cast<std::size_t>(m)]);
            block.member_tokens.push_back(token_ids.empty() ? m : token_ids[static_cast<std::size_t>(m)]);
        }
        std::sort(block.member_tokens.begin(), block.member_tokens.end());
        block.centroid = block_summary(vs);
        state.blocks.push_back(std::move(block));
    }
    return state;
}

namespace {

MemoryBlock fuse(const MemoryBlock& x, const MemoryBlock& y) {
    MemoryBlock m;
    m.block_id = x.block_id;
    const double nx = x.member_count();
    const double ny = y.member_count();
    m.centroid = (nx * x.centroid + ny * y.centroid) / (nx + ny);
    std::merge(x.member_tokens.begin(), x.member_tokens.end(), y.member_tokens.begin(), y.member_tokens.end(),
               std::back_inserter(m.member_tokens));
    m.last_used_step = std::max(x.last_used_step, y.last_used_step);
    m.usage_count = x.usage_count + y.usage_count;
    return m;
}

void merge_closest(MemoryState& s) {
    std::size_t bi = 0, bj = 1;
    double best = kInf;
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
        for (std::size_t j = i + 1; j < s.blocks.size(); ++j) {
            const double d = cosine_distance(s.blocks[i].centroid, s.blocks[j].centroid).value_or(kInf);
            if (d < best) {
                best = d;
                bi = i;
                bj = j;
            }
        }
    s.blocks[bi] = fuse(s.blocks[bi], s.blocks[bj]);
    s.blocks.erase(s.blocks.begin() + static_cast<long>(bj));
}

}  // namespace

void enforce_capacity(MemoryState& state, int capacity) {
    require(capacity >= 1, "enforce_capacity: capacity must be >= 1");
    while (static_cast<int>(state.blocks.size()) > capacity) merge_closest(state);
    state.capacity = capacity;
}

void touch(MemoryState& state, std::span<const int> tokens) {
    std::vector<bool> hit(state.blocks.size(), false);
    for (int t : tokens) {
        const int b = state.find_block(t);
        if (b >= 0) hit[static_cast<std::size_t>(b)] = true;
    }
    for (std::size_t i = 0; i < hit.size(); ++i)
        if (hit[i]) {
            state.blocks[i].last_used_step = state.step;
            ++state.blocks[i].usage_count;
        }
}

double js_divergence(const Vec& p, const Vec& q) {
    require(p.size() == q.size() && p.size() >= 1, "js_divergence: length mismatch");
    auto check = [](const Vec& v) {
        require(v.allFinite() && (v.array() >= 0.0).all(), "js_divergence: negative or non-finite mass");
        require(std::abs(v.sum() - 1.0) <= 1e-9, "js_divergence: mass does not sum to 1");
    };
    check(p);
    check(q);
    double js = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        const double a = p[i] > 0.0 ? 0.5 * p[i] * std::log(p[i] / m) : 0.0;
        const double b = q[i] > 0.0 ? 0.5 * q[i] * std::log(q[i] / m) : 0.0;
        js += a + b;
    }
    return std::clamp(js, 0.0, std::numbers::ln2);
}

ShiftDetectorState ShiftDetectorState::make(std::size_t num_layers, int window, double threshold) {
    require(num_layers >= 1, "detector: need at least one layer");
    require(window >= 1, "detector: window must be >= 1");
    require(threshold > 0.0 && threshold <= std::numbers::ln2, "detector: threshold must lie in (0, ln 2]");
    ShiftDetectorState s;
    s.window = window;
    s.threshold = threshold;
    const auto L = static_cast<Eigen::Index>(num_layers);
    s.reference_hist = Vec::Constant(L, 1.0 / static_cast<double>(L));
    s.current_hist = s.reference_hist;
    return s;
}

std::optional<ShiftEvent> detect_shift(ShiftDetectorState& state, const AlphaWeights& alpha_sample) {
    require(alpha_sample.weights.size() == state.reference_hist.size(), "detect_shift: layer count mismatch");
    state.recent.push_back(alpha_sample.weights);
    if (static_cast<int>(state.recent.size()) > state.window) state.recent.pop_front();
    ++state.samples_seen;

    Vec acc = Vec::Zero(state.reference_hist.size());
    for (const auto& v : state.recent) acc += v;
    state.current_hist = acc / static_cast<double>(state.recent.size());

    const long W = state.window;
    if (state.samples_seen <= W) {
        state.reference_hist = state.current_hist;
        return std::nullopt;
    }
    if (state.samples_seen < 2 * W) return std::nullopt;

    state.last_divergence = js_divergence(state.reference_hist, state.current_hist);
    if (state.last_divergence > state.threshold && state.samples_seen > state.quiet_until) {
        state.reference_hist = state.current_hist;
        state.quiet_until = state.samples_seen + W;
        return ShiftEvent{state.samples_seen, state.last_divergence};
    }
    return std::nullopt;
}

std::string_view to_string(Action a) {
    switch (a) {
        case Action::Retain: return "RETAIN";
        case Action::Merge: return "MERGE";
        case Action::Evict: return "EVICT";
    }
    return "?";
}

std::array<double, 3> ReallocPolicy::probabilities() const {
    const double top = *std::max_element(logits.begin(), logits.end());
    std::array<double, 3> p{};
    double z = 0.0;
    for (std::size_t i = 0; i < 3; ++i) z += (p[i] = std::exp(logits[i] - top));
    for (auto& v : p) v /= z;
    return p;
}

ReallocPolicy policy_step(const ReallocPolicy& policy, double reward, Action taken) {
    require(std::isfinite(reward), "policy_step: non-finite reward");
    ReallocPolicy next = policy;
    const double advantage = reward - policy.baseline;
    const auto probs = policy.probabilities();
    const auto a = static_cast<std::size_t>(taken);
    for (std::size_t i = 0; i < 3; ++i) {
        const double score = (i == a ? 1.0 : 0.0) - probs[i];
        next.logits[i] += policy.learning_rate * advantage * score;
    }
    next.baseline = policy.baseline_decay * policy.baseline + (1.0 - policy.baseline_decay) * reward;
    return next;
}

Action sample_action(const ReallocPolicy& policy, std::mt19937_64& rng) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const auto probs = policy.probabilities();
    double cum = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        cum += probs[i];
        if (u < cum) return kAllActions[i];
    }
    return Action::Evict;
}

ActionOutcome apply_action(const MemoryState& state, Action action, std::optional<ShiftEvent> event) {
    ActionOutcome out{state, false, event};
    auto& s = out.state;
    switch (action) {
        case Action::Retain:
            break;
        case Action::Merge:
            if (s.blocks.size() < 2) {
                out.degenerate = true;
                return out;
            }
            merge_closest(s);
            break;
        case Action::Evict: {
            if (s.blocks.empty()) {
                out.degenerate = true;
                return out;
            }
            auto lru = std::min_element(s.blocks.begin(), s.blocks.end(), [](const auto& x, const auto& y) {
                return x.last_used_step < y.last_used_step;
            });
            s.blocks.erase(lru);
            break;
        }
    }
    ++s.step;
    return out;
}

AlignmentReport alignment_audit(std::span<const HierEmbedStack> stacks, const LayerTransform& transform) {
    require(!stacks.empty(), "alignment_audit: no tokens");
    const std::size_t L = stacks.front().num_layers();
    require(L >= 2, "alignment_audit: need at least two layers");
    require(transform.gaps() + 1 >= L, "alignment_audit: transform has too few gaps");
    AlignmentReport r;
    r.max_discrepancy.assign(L - 1, 0.0);
    r.mean_discrepancy.assign(L - 1, 0.0);
    for (const auto& s : stacks) {
        require(s.num_layers() == L, "alignment_audit: ragged layer counts");
        for (std::size_t g = 0; g + 1 < L; ++g) {
            const double e = (s.layers[g + 1] - transform.apply(g, s.layers[g])).norm();
            r.max_discrepancy[g] = std::max(r.max_discrepancy[g], e);
            r.mean_discrepancy[g] += e;
        }
    }
    for (auto& m : r.mean_discrepancy) m /= static_cast<double>(stacks.size());
    return r;
}

std::vector<HierEmbedStack> rectify(std::span<const HierEmbedStack> stacks, const LayerTransform& transform,
                                    double eta) {
    require(eta > 0.0 && eta <= 1.0, "rectify: eta must lie in (0, 1]");
    std::vector<HierEmbedStack> out(stacks.begin(), stacks.end());
    for (auto& s : out) {
        require(transform.gaps() + 1 >= s.num_layers(), "rectify: transform has too few gaps");
        for (std::size_t g = 0; g + 1 < s.num_layers(); ++g)
            s.layers[g + 1] = (1.0 - eta) * s.layers[g + 1] + eta * transform.apply(g, s.layers[g]);
    }
    return out;
}

}  // namespace hiermem
