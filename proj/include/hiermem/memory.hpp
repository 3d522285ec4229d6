#pragma once

#include "hiermem/objectives.hpp"

#include <array>
#include <deque>
#include <optional>
#include <random>
#include <string_view>

namespace hiermem {

// ---------------------------------------------------------------------------
// Shared memory blocks

struct MemoryBlock {
    int block_id = 0;
    Vec centroid;
    std::vector<int> member_tokens;  ///< sorted ascending
    long last_used_step = 0;
    long usage_count = 0;

    int member_count() const { return static_cast<int>(member_tokens.size()); }
};

struct MemoryState {
    std::vector<MemoryBlock> blocks;
    int capacity = 0;
    long step = 0;
    int next_block_id = 0;

    int total_members() const;
    /// Index into `blocks` of the block holding `token`, or -1.
    int find_block(int token) const;
    /// Throws InputError when any MemoryState invariant is broken.
    void validate() const;
};

/// 1 - cos(a, b) clamped to [0, 2], with values below 1e-12 snapped to 0.
/// Empty when either vector is zero.
std::optional<double> cosine_distance(const Vec& a, const Vec& b);

/// Arithmetic mean of the members.
Vec block_summary(std::span<const Vec> members);

/// Average-linkage agglomerative clustering under cosine distance. Merges the
/// closest pair while its distance is <= theta and more than `min_blocks`
/// clusters remain. Ties go to the pair whose smallest member index is lowest,
/// then whose second cluster's smallest index is lowest. Zero vectors stay
/// singletons. Block member ids are `token_ids[i]` when given, otherwise i.
MemoryState cluster_tokens(std::span<const Vec> vectors, double theta, std::span<const int> token_ids = {},
                           std::size_t min_blocks = 1);

/// Merges closest blocks until at most `capacity` remain, then records it.
void enforce_capacity(MemoryState& state, int capacity);

/// Marks every block holding one of `tokens` as used at the current step.
void touch(MemoryState& state, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// Contextual-shift detection

/// Jensen-Shannon divergence in nats.
double js_divergence(const Vec& p, const Vec& q);

struct ShiftEvent {
    long sample_index = 0;  ///< 1-based index of the sample that triggered the event
    double divergence = 0.0;
};

struct ShiftDetectorState {
    int window = 32;
    double threshold = 0.05;
    Vec reference_hist;
    Vec current_hist;
    long samples_seen = 0;
    double last_divergence = 0.0;
    long quiet_until = 0;  ///< no event fires at or before this sample index
    std::deque<Vec> recent;

    static ShiftDetectorState make(std::size_t num_layers, int window = 32, double threshold = 0.05);
};

/// Feeds one layer-weight sample. current_hist is the mean of the last W
/// samples; the reference is the first full window. From sample 2W on, an
/// event fires when JS(reference, current) > threshold; the reference then
/// becomes the current window and the detector stays quiet for W samples.
std::optional<ShiftEvent> detect_shift(ShiftDetectorState& state, const AlphaWeights& alpha_sample);

// ---------------------------------------------------------------------------
// Reallocation policy

enum class Action : int { Retain = 0, Merge = 1, Evict = 2 };
inline constexpr std::array<Action, 3> kAllActions{Action::Retain, Action::Merge, Action::Evict};
std::string_view to_string(Action a);

struct ReallocPolicy {
    std::array<double, 3> logits{0.0, 0.0, 0.0};
    double baseline = 0.0;
    double learning_rate = 0.1;
    double baseline_decay = 0.9;

    std::array<double, 3> probabilities() const;
};

/// REINFORCE with an exponential-moving-average baseline.
ReallocPolicy policy_step(const ReallocPolicy& policy, double reward, Action taken);

/// Draws from softmax(logits) with a 53-bit uniform taken from `rng`.
Action sample_action(const ReallocPolicy& policy, std::mt19937_64& rng);

struct ActionOutcome {
    MemoryState state;
    bool degenerate = false;
    std::optional<ShiftEvent> event;
};

/// RETAIN ticks the clock; MERGE fuses the two closest blocks; EVICT drops the
/// least recently used block. MERGE on < 2 blocks and EVICT on 0 blocks are
/// recorded as degenerate no-ops.
ActionOutcome apply_action(const MemoryState& state, Action action, std::optional<ShiftEvent> event = std::nullopt);

// ---------------------------------------------------------------------------
// Cross-layer alignment

struct AlignmentReport {
    std::vector<double> max_discrepancy;   ///< per gap
    std::vector<double> mean_discrepancy;  ///< per gap
};

AlignmentReport alignment_audit(std::span<const HierEmbedStack> stacks, const LayerTransform& transform);

/// v_{l+1} <- (1 - eta) v_{l+1} + eta f_l(v_l), gap by gap in ascending order.
std::vector<HierEmbedStack> rectify(std::span<const HierEmbedStack> stacks, const LayerTransform& transform,
                                    double eta);

}  // namespace hiermem
