#include "reasonlens/grpo_shaping.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace reasonlens {

std::string_view to_string(ClipVariant v) {
  return v == ClipVariant::min_clip ? "min_clip" : "clip_to_zero";
}

std::optional<ClipVariant> parse_clip_variant(std::string_view text) {
  if (text == "clip_to_zero") return ClipVariant::clip_to_zero;
  if (text == "min_clip") return ClipVariant::min_clip;
  return std::nullopt;
}

void ShapingConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be positive");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("tau must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
}

double clipped_score(double score, const ShapingConfig& cfg) {
  if (cfg.variant == ClipVariant::min_clip) return std::min(score, cfg.tau);
  return score <= cfg.tau ? cfg.alpha * score : 0.0;
}

std::vector<double> potentials(const Trajectory& traj, const ShapingConfig& cfg) {
  std::vector<double> phi(traj.steps.size(), 0.0);
  for (std::size_t t = 0; t + 1 < traj.steps.size(); ++t) phi[t] = -clipped_score(traj.steps[t].score, cfg);
  return phi;
}

std::vector<double> shape_rewards(const Trajectory& traj, const ShapingConfig& cfg) {
  cfg.validate();
  if (traj.steps.empty()) throw std::invalid_argument("trajectory has no steps");
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    if (!std::isfinite(traj.steps[t].score) || !std::isfinite(traj.steps[t].reward)) {
      throw std::invalid_argument("step " + std::to_string(t + 1) + " has a non-finite score or reward");
    }
    if (t + 1 < traj.steps.size() && traj.steps[t].reward != 0.0) {
      throw std::invalid_argument("only the last step may carry a raw reward (step " + std::to_string(t + 1) + ")");
    }
  }
  const std::vector<double> phi = potentials(traj, cfg);
  std::vector<double> shaped(phi.size());
  for (std::size_t t = 0; t < phi.size(); ++t) {
    const double next = t + 1 < phi.size() ? phi[t + 1] : 0.0;
    shaped[t] = traj.steps[t].reward + cfg.gamma * next - phi[t];
  }
  return shaped;
}

Standardized standardize_group(std::span<const double> pooled) {
  if (pooled.size() < 2) throw std::invalid_argument("standardization needs at least two rewards");
  const double n = static_cast<double>(pooled.size());
  const double mean = std::accumulate(pooled.begin(), pooled.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : pooled) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / n);
  Standardized out;
  out.values.assign(pooled.size(), 0.0);
  if (!(sd > 0.0)) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < pooled.size(); ++i) out.values[i] = (pooled[i] - mean) / sd;
  return out;
}

std::vector<double> token_advantages(const Trajectory& traj, std::span<const double> step_rewards) {
  if (step_rewards.size() != traj.steps.size()) throw std::invalid_argument("one standardized reward per step required");
  std::size_t expected = 0;
  for (std::size_t k = 0; k < traj.steps.size(); ++k) {
    const TokenSpan& s = traj.steps[k].tokens;
    if (s.start != expected || s.end <= s.start) {
      throw std::invalid_argument("step spans must tile the output without gaps or overlaps (step " +
                                  std::to_string(k + 1) + ")");
    }
    expected = s.end;
  }
  std::vector<double> adv(expected, 0.0);
  double suffix = 0.0;
  for (std::size_t k = traj.steps.size(); k-- > 0;) {
    suffix += step_rewards[k];
    const TokenSpan& s = traj.steps[k].tokens;
    std::fill(adv.begin() + static_cast<std::ptrdiff_t>(s.start), adv.begin() + static_cast<std::ptrdiff_t>(s.end),
              suffix);
  }
  return adv;
}

double kl_estimate(double ref_ratio) {
  if (!(ref_ratio > 0.0)) throw std::invalid_argument("reference ratio must be positive");
  return ref_ratio - std::log(ref_ratio) - 1.0;
}

double grpo_objective(const GroupBatch& batch, std::span<const std::vector<double>> advantages) {
  if (batch.outputs.size() < 2) throw std::invalid_argument("a group needs at least two outputs");
  if (advantages.size() != batch.outputs.size()) throw std::invalid_argument("one advantage vector per output required");
  if (!(batch.clip_epsilon >= 0.0)) throw std::invalid_argument("clip epsilon must be non-negative");
  double total = 0.0;
  for (std::size_t i = 0; i < batch.outputs.size(); ++i) {
    const TokenRatios& o = batch.outputs[i];
    const auto& a = advantages[i];
    if (o.policy_ratio.empty()) throw std::invalid_argument("output " + std::to_string(i) + " has no tokens");
    if (o.policy_ratio.size() != a.size() || o.ref_ratio.size() != a.size()) {
      throw std::invalid_argument("output " + std::to_string(i) + ": ratio and advantage lengths differ");
    }
    double sum = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
      const double ratio = o.policy_ratio[t];
      if (!(ratio > 0.0)) throw std::invalid_argument("policy ratio must be positive");
      const double clipped = std::clamp(ratio, 1.0 - batch.clip_epsilon, 1.0 + batch.clip_epsilon);
      sum += std::min(ratio * a[t], clipped * a[t]) - batch.kl_beta * kl_estimate(o.ref_ratio[t]);
    }
    total += sum / static_cast<double>(a.size());
  }
  return total / static_cast<double>(batch.outputs.size());
}

GroupShaping shape_group(std::span<const Trajectory> group, const ShapingConfig& cfg) {
  GroupShaping out;
  std::vector<double> pooled;
  for (const Trajectory& traj : group) {
    out.shaped.push_back(shape_rewards(traj, cfg));
    pooled.insert(pooled.end(), out.shaped.back().begin(), out.shaped.back().end());
  }
  const Standardized z = standardize_group(pooled);
  out.degenerate = z.degenerate;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const std::size_t n = out.shaped[i].size();
    out.standardized.emplace_back(z.values.begin() + static_cast<std::ptrdiff_t>(offset),
                                  z.values.begin() + static_cast<std::ptrdiff_t>(offset + n));
    offset += n;
    out.advantages.push_back(token_advantages(group[i], out.standardized.back()));
  }
  return out;
}

void TabularMdp::validate() const {
  if (num_states == 0 || num_actions == 0 || horizon == 0) throw std::invalid_argument("MDP dimensions must be positive");
  const std::size_t S = num_states, A = num_actions, T = horizon;
  if (transition.size() != S * A * S) throw std::invalid_argument("transition table has the wrong size");
  if (reward.size() != T * S * A) throw std::invalid_argument("reward table has the wrong size");
  if (state_score.size() != T * S) throw std::invalid_argument("state score table has the wrong size");
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      double mass = 0.0;
      for (std::size_t s2 = 0; s2 < S; ++s2) {
        const double pr = p(s, a, s2);
        if (!(pr >= 0.0)) throw std::invalid_argument("negative transition probability");
        mass += pr;
      }
      if (std::abs(mass - 1.0) > 1e-9) {
        throw std::invalid_argument("transition row (" + std::to_string(s) + ", " + std::to_string(a) +
                                    ") does not sum to 1");
      }
    }
  }
  for (double x : reward) {
    if (!std::isfinite(x)) throw std::invalid_argument("non-finite reward");
  }
  for (double x : state_score) {
    if (!std::isfinite(x)) throw std::invalid_argument("non-finite state score");
  }
}

TabularMdp random_mdp(std::uint64_t seed, std::size_t max_states, std::size_t max_actions, std::size_t max_horizon) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TabularMdp m;
  m.num_states = pick(2, std::max<std::size_t>(2, max_states));
  m.num_actions = pick(2, std::max<std::size_t>(2, max_actions));
  m.horizon = pick(1, std::max<std::size_t>(1, max_horizon));
  const std::size_t S = m.num_states, A = m.num_actions, T = m.horizon;

  m.transition.assign(S * A * S, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      // sparse support keeps argmax ties possible
      const std::size_t support = pick(1, std::min<std::size_t>(S, 3));
      double mass = 0.0;
      for (std::size_t k = 0; k < support; ++k) {
        const double w = unit(rng) + 0.05;
        m.transition[(s * A + a) * S + pick(0, S - 1)] += w;
        mass += w;
      }
      for (std::size_t s2 = 0; s2 < S; ++s2) m.transition[(s * A + a) * S + s2] /= mass;
    }
  }
  m.reward.assign(T * S * A, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t a = 0; a < A; ++a) {
        double r = t + 1 == T ? static_cast<double>(pick(0, 1)) : 0.0;
        if (unit(rng) < 0.3) r += unit(rng) - 0.5;
        m.reward[(t * S + s) * A + a] = r;
      }
    }
  }
  m.state_score.resize(T * S);
  for (double& x : m.state_score) x = 8.0 * unit(rng);
  return m;
}

TabularPolicy random_policy(const TabularMdp& mdp, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t A = mdp.num_actions;
  TabularPolicy pi(mdp.horizon * mdp.num_states * A);
  for (std::size_t base = 0; base < pi.size(); base += A) {
    double mass = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      pi[base + a] = unit(rng);
      mass += pi[base + a];
    }
    for (std::size_t a = 0; a < A; ++a) pi[base + a] /= mass;
  }
  return pi;
}

double state_potential(const TabularMdp& mdp, std::size_t t, std::size_t s, const ShapingConfig& cfg) {
  if (t >= mdp.horizon) return 0.0;
  return -clipped_score(mdp.state_score[t * mdp.num_states + s], cfg);
}

namespace {

// Expected one-step return of (t, s, a) followed by `next` values at t + 1.
double q_value(const TabularMdp& mdp, const ShapingConfig& cfg, bool shaped, std::size_t t, std::size_t s,
               std::size_t a, const std::vector<double>& next) {
  const std::size_t S = mdp.num_states;
  double q = mdp.r(t, s, a);
  if (shaped) q -= state_potential(mdp, t, s, cfg);
  for (std::size_t s2 = 0; s2 < S; ++s2) {
    const double pr = mdp.p(s, a, s2);
    if (pr == 0.0) continue;
    double cont = t + 1 < mdp.horizon ? next[s2] : 0.0;
    if (shaped) cont += state_potential(mdp, t + 1, s2, cfg);
    q += pr * cfg.gamma * cont;
  }
  return q;
}

}  // namespace

ValueTable optimal_values(const TabularMdp& mdp, const ShapingConfig& cfg, bool shaped) {
  mdp.validate();
  const std::size_t S = mdp.num_states, A = mdp.num_actions, T = mdp.horizon;
  ValueTable out;
  out.v.assign(T * S, 0.0);
  out.q.assign(T * S * A, 0.0);
  std::vector<double> next(S, 0.0);
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double best = -INFINITY;
      for (std::size_t a = 0; a < A; ++a) {
        const double q = q_value(mdp, cfg, shaped, t, s, a, next);
        out.q[(t * S + s) * A + a] = q;
        best = std::max(best, q);
      }
      out.v[t * S + s] = best;
    }
    std::copy(out.v.begin() + static_cast<std::ptrdiff_t>(t * S), out.v.begin() + static_cast<std::ptrdiff_t>((t + 1) * S),
              next.begin());
  }
  return out;
}

ValueTable evaluate_policy(const TabularMdp& mdp, const TabularPolicy& policy, const ShapingConfig& cfg, bool shaped) {
  mdp.validate();
  const std::size_t S = mdp.num_states, A = mdp.num_actions, T = mdp.horizon;
  if (policy.size() != T * S * A) throw std::invalid_argument("policy table has the wrong size");
  ValueTable out;
  out.v.assign(T * S, 0.0);
  out.q.assign(T * S * A, 0.0);
  std::vector<double> next(S, 0.0);
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double v = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        const double q = q_value(mdp, cfg, shaped, t, s, a, next);
        out.q[(t * S + s) * A + a] = q;
        v += policy[(t * S + s) * A + a] * q;
      }
      out.v[t * S + s] = v;
    }
    std::copy(out.v.begin() + static_cast<std::ptrdiff_t>(t * S), out.v.begin() + static_cast<std::ptrdiff_t>((t + 1) * S),
              next.begin());
  }
  return out;
}

namespace {

std::vector<std::size_t> argmax_set(std::span<const double> q) {
  const double best = *std::max_element(q.begin(), q.end());
  const double tol = 1e-9 * std::max(1.0, std::abs(best));
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < q.size(); ++a) {
    if (q[a] >= best - tol) out.push_back(a);
  }
  return out;
}

double identity_gap(const TabularMdp& mdp, const ShapingConfig& cfg, const ValueTable& raw, const ValueTable& shaped) {
  double gap = 0.0;
  for (std::size_t t = 0; t < mdp.horizon; ++t) {
    for (std::size_t s = 0; s < mdp.num_states; ++s) {
      const std::size_t i = t * mdp.num_states + s;
      gap = std::max(gap, std::abs(shaped.v[i] - (raw.v[i] - state_potential(mdp, t, s, cfg))));
    }
  }
  return gap;
}

}  // namespace

InvarianceReport verify_policy_invariance(const TabularMdp& mdp, const ShapingConfig& cfg,
                                          std::span<const TabularPolicy> policies) {
  cfg.validate();
  const ValueTable raw = optimal_values(mdp, cfg, false);
  const ValueTable shaped = optimal_values(mdp, cfg, true);
  const std::size_t S = mdp.num_states, A = mdp.num_actions;
  InvarianceReport report;
  for (std::size_t t = 0; t < mdp.horizon; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t base = (t * S + s) * A;
      const auto a = argmax_set(std::span(raw.q).subspan(base, A));
      const auto b = argmax_set(std::span(shaped.q).subspan(base, A));
      if (a != b) ++report.mismatched_decisions;
    }
  }
  report.optimal_actions_identical = report.mismatched_decisions == 0;
  report.max_optimal_value_gap = identity_gap(mdp, cfg, raw, shaped);
  for (const TabularPolicy& pi : policies) {
    const ValueTable pr = evaluate_policy(mdp, pi, cfg, false);
    const ValueTable ps = evaluate_policy(mdp, pi, cfg, true);
    report.max_policy_value_gap = std::max(report.max_policy_value_gap, identity_gap(mdp, cfg, pr, ps));
  }
  return report;
}

}  // namespace reasonlens
