#pragma once

// Step-level reward shaping for group-relative policy optimisation. Reasoning
// scores enter as a clipped potential Phi(s) = -clip(score); shaped rewards are
// r + gamma * Phi(s') - Phi(s) with a zero terminal potential.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "reasonlens/steps.hpp"

namespace reasonlens {

enum class ClipVariant {
  clip_to_zero,  // alpha * score if score <= tau, else 0
  min_clip,      // min(score, tau)
};
std::string_view to_string(ClipVariant v);
std::optional<ClipVariant> parse_clip_variant(std::string_view text);

struct ShapingConfig {
  double alpha = 0.1;
  double tau = 4.0;  // scaled score units
  double gamma = 1.0;
  ClipVariant variant = ClipVariant::clip_to_zero;

  void validate() const;
};

struct TrajectoryStep {
  double score = 0.0;   // scaled reasoning score of the state
  double reward = 0.0;  // raw reward; only the last step may be non-zero
  TokenSpan tokens;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
};

double clipped_score(double score, const ShapingConfig& cfg);

// Phi per step; the last state's potential is fixed at 0.
std::vector<double> potentials(const Trajectory& traj, const ShapingConfig& cfg);

std::vector<double> shape_rewards(const Trajectory& traj, const ShapingConfig& cfg);

struct Standardized {
  std::vector<double> values;
  bool degenerate = false;  // zero spread: values are all zero
};

// (x - mean) / std over the pooled rewards, population std.
Standardized standardize_group(std::span<const double> pooled);

// Advantage of each token = sum of standardized rewards of its step and all later steps.
// Spans must tile [0, n) in order.
std::vector<double> token_advantages(const Trajectory& traj, std::span<const double> step_rewards);

struct TokenRatios {
  std::vector<double> policy_ratio;  // pi_theta / pi_theta_old
  std::vector<double> ref_ratio;     // pi_ref / pi_theta
};

struct GroupBatch {
  std::vector<TokenRatios> outputs;
  double clip_epsilon = 0.2;
  double kl_beta = 0.0;
};

// k(r) = r - ln r - 1, the non-negative per-token KL estimate.
double kl_estimate(double ref_ratio);

// Mean over outputs of the token mean of
// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A) - beta * k(ref_ratio).
double grpo_objective(const GroupBatch& batch, std::span<const std::vector<double>> advantages);

struct GroupShaping {
  std::vector<std::vector<double>> shaped;        // per trajectory, per step
  std::vector<std::vector<double>> standardized;  // per trajectory, per step
  std::vector<std::vector<double>> advantages;    // per trajectory, per token
  bool degenerate = false;
};

// shape_rewards for every trajectory, pooled standardization, then advantages.
GroupShaping shape_group(std::span<const Trajectory> group, const ShapingConfig& cfg);

// Finite-horizon tabular MDP. Steps t = 0 .. horizon-1; after the last step the
// episode ends with potential 0.
struct TabularMdp {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::size_t horizon = 0;
  // transition[(s * A + a) * S + s2]
  std::vector<double> transition;
  // reward[(t * S + s) * A + a], expected raw reward of taking a in s at step t
  std::vector<double> reward;
  // state_score[t * S + s], scaled reasoning score of state s at step t
  std::vector<double> state_score;

  void validate() const;
  double p(std::size_t s, std::size_t a, std::size_t s2) const { return transition[(s * num_actions + a) * num_states + s2]; }
  double r(std::size_t t, std::size_t s, std::size_t a) const { return reward[(t * num_states + s) * num_actions + a]; }
};

// Random MDP with sparse final-step rewards plus dense noise.
TabularMdp random_mdp(std::uint64_t seed, std::size_t max_states = 20, std::size_t max_actions = 4,
                      std::size_t max_horizon = 10);

// policy[(t * S + s) * A + a]
using TabularPolicy = std::vector<double>;
TabularPolicy random_policy(const TabularMdp& mdp, std::uint64_t seed);

struct ValueTable {
  std::vector<double> v;  // v[t * S + s]
  std::vector<double> q;  // q[(t * S + s) * A + a]
};

// Potential of state s at step t (0-based).
double state_potential(const TabularMdp& mdp, std::size_t t, std::size_t s, const ShapingConfig& cfg);

// Backward induction; `shaped` uses r + gamma * Phi(s') - Phi(s).
ValueTable optimal_values(const TabularMdp& mdp, const ShapingConfig& cfg, bool shaped);
ValueTable evaluate_policy(const TabularMdp& mdp, const TabularPolicy& policy, const ShapingConfig& cfg, bool shaped);

struct InvarianceReport {
  bool optimal_actions_identical = true;
  std::size_t mismatched_decisions = 0;  // (t, s) pairs whose argmax sets differ
  double max_optimal_value_gap = 0.0;    // max |V*'(s) - (V*(s) - Phi(s))|
  double max_policy_value_gap = 0.0;     // same identity for the supplied policies
};

// Argmax sets use a relative tolerance of 1e-9 on Q values.
InvarianceReport verify_policy_invariance(const TabularMdp& mdp, const ShapingConfig& cfg,
                                          std::span<const TabularPolicy> policies);

}  // namespace reasonlens
