#include "hiermem/harness.hpp"

#include <numeric>

namespace hiermem {

namespace {
constexpr std::size_t kLossWindow = 8;
}

MemoryController::MemoryController(const MemoryConfig& cfg, std::size_t num_layers, std::uint64_t seed)
    : cfg_(cfg),
      detector_(ShiftDetectorState::make(num_layers, cfg.window, cfg.tau)),
      rng_(seed ^ 0x9e3779b97f4a7c15ULL),
      has_hierarchy_(num_layers > 1) {
    require(cfg.capacity >= 1, "memory: capacity must be >= 1");
    require(cfg.recluster_every >= 1, "memory: recluster_every must be >= 1");
    require(cfg.reward_horizon >= 1, "memory: reward_horizon must be >= 1");
    state_.capacity = cfg.capacity;
    policy_.learning_rate = cfg.policy_lr;
}

double MemoryController::recent_loss() const {
    if (losses_.empty()) return 0.0;
    return std::accumulate(losses_.begin(), losses_.end(), 0.0) / static_cast<double>(losses_.size());
}

void MemoryController::recluster(ModelParams& params, long step) {
    std::vector<int> ids;
    for (const auto& [id, seen] : last_seen_)
        if (seen > step - cfg_.recluster_every) ids.push_back(id);
    if (ids.empty()) return;

    // pull each recent token's upper layers toward the projection of the layer below
    if (has_hierarchy_ && params.config.use_hierarchy && params.embed.size() >= 2) {
        std::vector<HierEmbedStack> stacks;
        for (int id : ids) stacks.push_back(params.stack_for(id));
        alignment_max_ = alignment_audit(stacks, params.transform).max_discrepancy;
        const auto fixed = rectify(stacks, params.transform, cfg_.eta);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t l = 0; l < params.embed.size(); ++l) params.embed[l].col(ids[i]) = fixed[i].layers[l];
    }

    std::vector<Vec> vectors;
    for (int id : ids) vectors.push_back(combined_embedding(params.stack_for(id), params.config.temperature));
    MemoryState fresh = cluster_tokens(vectors, cfg_.theta, ids);
    enforce_capacity(fresh, cfg_.capacity);
    fresh.step = step;
    for (auto& b : fresh.blocks) b.last_used_step = step;
    state_ = std::move(fresh);
}

void MemoryController::before_step(ModelParams& params, std::span<const Example> batch, long step) {
    for (const auto& ex : batch)
        for (int t : ex.tokens) last_seen_[t] = step;
    if (step % cfg_.recluster_every == 0) recluster(params, step);
    state_.step = step;
    std::vector<int> ids;
    for (const auto& ex : batch) ids.insert(ids.end(), ex.tokens.begin(), ex.tokens.end());
    touch(state_, ids);
}

void MemoryController::after_step(ModelParams& params, const StepResult& result, long step) {
    losses_.push_back(result.task_loss);
    if (losses_.size() > kLossWindow) losses_.pop_front();

    if (pending_ && step - pending_->step >= cfg_.reward_horizon) {
        const double reward = (pending_->loss_before - recent_loss()) -
                              cfg_.cost_weight * static_cast<double>(state_.blocks.size()) / cfg_.capacity;
        policy_ = policy_step(policy_, reward, pending_->action);
        events_.push_back({pending_->step, pending_->divergence, pending_->action, pending_->block_count, reward});
        pending_.reset();
    }

    if (!has_hierarchy_) return;
    std::optional<ShiftEvent> event;
    for (const auto& a : result.mean_alphas)
        if (auto e = detect_shift(detector_, a)) event = e;
    if (!event) return;

    ++shifts_;
    recluster(params, step);
    if (pending_) return;  // one outstanding decision at a time
    const Action action = sample_action(policy_, rng_);
    ActionOutcome outcome = apply_action(state_, action, event);
    state_ = std::move(outcome.state);
    pending_ = Pending{step, event->divergence, action, recent_loss(), static_cast<int>(state_.blocks.size())};
}

}  // namespace hiermem
