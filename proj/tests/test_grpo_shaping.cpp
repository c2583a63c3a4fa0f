#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "reasonlens/grpo_shaping.hpp"

using namespace reasonlens;

namespace {

Trajectory make_traj(const std::vector<double>& scores, double final_reward, std::size_t tokens_per_step = 2) {
  Trajectory t;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    t.steps.push_back({scores[k], k + 1 == scores.size() ? final_reward : 0.0,
                       {k * tokens_per_step, (k + 1) * tokens_per_step}});
  }
  return t;
}

// Path-enumeration value of a policy: recursion over (t, s) with the shaped
// reward of each transition written out explicitly.
double enumerate_value(const TabularMdp& m, const TabularPolicy& pi, const ShapingConfig& cfg, bool shaped,
                       std::size_t t, std::size_t s) {
  if (t == m.horizon) return 0.0;
  auto phi = [&](std::size_t tt, std::size_t ss) {
    if (tt >= m.horizon) return 0.0;
    const double x = m.state_score[tt * m.num_states + ss];
    if (cfg.variant == ClipVariant::min_clip) return -std::min(x, cfg.tau);
    return -(x <= cfg.tau ? cfg.alpha * x : 0.0);
  };
  double v = 0.0;
  for (std::size_t a = 0; a < m.num_actions; ++a) {
    const double w = pi[(t * m.num_states + s) * m.num_actions + a];
    if (w == 0.0) continue;
    for (std::size_t s2 = 0; s2 < m.num_states; ++s2) {
      const double pr = m.p(s, a, s2);
      if (pr == 0.0) continue;
      double r = m.r(t, s, a);
      if (shaped) r += cfg.gamma * phi(t + 1, s2) - phi(t, s);
      v += w * pr * (r + cfg.gamma * enumerate_value(m, pi, cfg, shaped, t + 1, s2));
    }
  }
  return v;
}

// Two states, two actions, horizon 2; action a moves to state a; the final
// step pays 1 for action 1.
TabularMdp chain() {
  TabularMdp m;
  m.num_states = 2;
  m.num_actions = 2;
  m.horizon = 2;
  m.transition = {1, 0, 0, 1, 1, 0, 0, 1};
  m.reward = {0, 0, 0, 0, 0, 1, 0, 1};
  m.state_score = {2, 6, 1, 3};
  return m;
}

}  // namespace

TEST_CASE("clipping variants") {
  ShapingConfig cfg;
  cfg.alpha = 0.5;
  cfg.tau = 4.0;
  CHECK(clipped_score(2.0, cfg) == 1.0);
  CHECK(clipped_score(4.0, cfg) == 2.0);
  CHECK(clipped_score(5.0, cfg) == 0.0);
  cfg.variant = ClipVariant::min_clip;
  CHECK(clipped_score(5.0, cfg) == 4.0);
  CHECK(clipped_score(2.0, cfg) == 2.0);
  CHECK(parse_clip_variant(to_string(ClipVariant::min_clip)) == ClipVariant::min_clip);
  CHECK(parse_clip_variant("clip_to_zero") == ClipVariant::clip_to_zero);
  CHECK_FALSE(parse_clip_variant("soft").has_value());
}

TEST_CASE("shaped rewards on the three-step worked example") {
  // alpha 1, tau 4: potentials (-1, -2, 0)
  ShapingConfig cfg;
  cfg.alpha = 1.0;
  const Trajectory t = make_traj({1.0, 2.0, 3.5}, 1.0);
  CHECK(potentials(t, cfg) == std::vector<double>{-1.0, -2.0, 0.0});
  CHECK(shape_rewards(t, cfg) == std::vector<double>{-1.0, 2.0, 1.0});
}

TEST_CASE("constant potentials cancel on interior steps") {
  ShapingConfig cfg;
  const Trajectory t = make_traj({3.0, 3.0, 3.0, 3.0, 3.0}, 0.7);
  const auto r = shape_rewards(t, cfg);
  for (std::size_t k = 0; k + 2 < r.size(); ++k) CHECK(r[k] == 0.0);
  // the last interior step meets the fixed zero terminal potential
  CHECK(r[3] == doctest::Approx(0.3).epsilon(1e-14));
  CHECK(r[4] == 0.7);
}

TEST_CASE("shaped return telescopes to raw return minus the first potential") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 8.0);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> s(1 + i % 12);
    for (auto& x : s) x = u(rng);
    ShapingConfig cfg;
    cfg.variant = i % 2 ? ClipVariant::min_clip : ClipVariant::clip_to_zero;
    const Trajectory t = make_traj(s, u(rng) - 4.0);
    const auto r = shape_rewards(t, cfg);
    const double shaped = std::accumulate(r.begin(), r.end(), 0.0);
    CHECK(std::fabs(shaped - (t.steps.back().reward - potentials(t, cfg)[0])) < 1e-12);
  }
}

TEST_CASE("non-final raw rewards are rejected") {
  Trajectory t = make_traj({1, 2}, 1.0);
  t.steps[0].reward = 0.5;
  CHECK_THROWS_AS(shape_rewards(t, {}), std::invalid_argument);
  CHECK_THROWS_AS(shape_rewards(Trajectory{}, {}), std::invalid_argument);
}

TEST_CASE("group standardization") {
  const Standardized a = standardize_group(std::vector<double>{1.0, -1.0});
  CHECK(a.values == std::vector<double>{1.0, -1.0});
  CHECK_FALSE(a.degenerate);
  const Standardized flat = standardize_group(std::vector<double>{2.0, 2.0, 2.0});
  CHECK(flat.degenerate);
  CHECK(flat.values == std::vector<double>{0.0, 0.0, 0.0});
  CHECK_THROWS_AS(standardize_group(std::vector<double>{1.0}), std::invalid_argument);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(3.0, 7.0);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(2 + i);
    for (auto& v : x) v = n(rng);
    const auto z = standardize_group(x).values;
    const double mean = std::accumulate(z.begin(), z.end(), 0.0) / z.size();
    double var = 0.0;
    for (double v : z) var += (v - mean) * (v - mean);
    CHECK(std::fabs(mean) < 1e-12);
    CHECK(var / z.size() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("token advantages are step suffix sums") {
  const Trajectory t = make_traj({0, 0}, 0.0);
  CHECK(token_advantages(t, std::vector<double>{0.5, -0.5}) == std::vector<double>{0.0, 0.0, -0.5, -0.5});
  const Trajectory one = make_traj({0}, 0.0, 3);
  CHECK(token_advantages(one, std::vector<double>{0.25}) == std::vector<double>{0.25, 0.25, 0.25});

  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(1, 5);
  for (int i = 0; i < 300; ++i) {
    Trajectory tr;
    std::size_t at = 0;
    std::vector<double> r(1 + i % 9);
    for (auto& x : r) {
      x = n(rng);
      const std::size_t l = len(rng);
      tr.steps.push_back({0.0, 0.0, {at, at + l}});
      at += l;
    }
    const auto adv = token_advantages(tr, r);
    REQUIRE(adv.size() == at);
    for (std::size_t k = 0; k < r.size(); ++k) {
      const auto& span = tr.steps[k].tokens;
      for (std::size_t j = span.start; j < span.end; ++j) CHECK(adv[j] == adv[span.start]);
      const double next = k + 1 < r.size() ? adv[tr.steps[k + 1].tokens.start] : 0.0;
      // suffix difference identity
      CHECK(adv[span.start] - next == doctest::Approx(r[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("token advantages require spans that tile the output") {
  Trajectory gap = make_traj({0, 0}, 0.0);
  gap.steps[1].tokens = {3, 5};
  CHECK_THROWS_AS(token_advantages(gap, std::vector<double>{1, 1}), std::invalid_argument);
  Trajectory overlap = make_traj({0, 0}, 0.0);
  overlap.steps[1].tokens = {1, 4};
  CHECK_THROWS_AS(token_advantages(overlap, std::vector<double>{1, 1}), std::invalid_argument);
}

TEST_CASE("clipped surrogate objective") {
  GroupBatch b;
  b.outputs = {{{1.0, 1.0}, {1.0, 1.0}}, {{1.0}, {1.0}}};
  const std::vector<std::vector<double>> adv{{0.5, 1.5}, {-2.0}};
  CHECK(grpo_objective(b, adv) == doctest::Approx((1.0 + -2.0) / 2.0));

  GroupBatch clip;
  clip.outputs = {{{1.5}, {1.0}}, {{0.5}, {1.0}}};
  // min(1.5, 1.2) * 1 = 1.2 ; min(0.5 * -1, 0.8 * -1) = -0.8
  CHECK(grpo_objective(clip, std::vector<std::vector<double>>{{1.0}, {-1.0}}) == doctest::Approx((1.2 - 0.8) / 2.0));

  CHECK(kl_estimate(1.0) == 0.0);
  CHECK(kl_estimate(2.0) == doctest::Approx(1.0 - std::log(2.0)));
  GroupBatch kl;
  kl.kl_beta = 0.5;
  kl.outputs = {{{1.0}, {2.0}}, {{1.0}, {1.0}}};
  CHECK(grpo_objective(kl, std::vector<std::vector<double>>{{0.0}, {0.0}}) ==
        doctest::Approx(-0.5 * (1.0 - std::log(2.0)) / 2.0));

  GroupBatch single;
  single.outputs = {{{1.0}, {1.0}}};
  CHECK_THROWS_AS(grpo_objective(single, std::vector<std::vector<double>>{{1.0}}), std::invalid_argument);
  GroupBatch bad;
  bad.outputs = {{{0.0}, {1.0}}, {{1.0}, {1.0}}};
  CHECK_THROWS_AS(grpo_objective(bad, std::vector<std::vector<double>>{{1.0}, {1.0}}), std::invalid_argument);
}

TEST_CASE("group shaping pools every step before standardizing") {
  const std::vector<Trajectory> g{make_traj({1.0, 2.0}, 1.0), make_traj({5.0, 3.0, 0.5}, 0.0)};
  const GroupShaping out = shape_group(g, {});
  std::vector<double> pooled;
  for (const auto& s : out.shaped) pooled.insert(pooled.end(), s.begin(), s.end());
  const auto z = standardize_group(pooled).values;
  CHECK(out.standardized[0] == std::vector<double>(z.begin(), z.begin() + 2));
  CHECK(out.standardized[1] == std::vector<double>(z.begin() + 2, z.end()));
  CHECK(out.advantages[1].size() == 6);
  CHECK_FALSE(out.degenerate);
}

TEST_CASE("hand chain MDP values") {
  ShapingConfig cfg;
  cfg.alpha = 0.5;
  const TabularMdp m = chain();
  // potentials: t0 (-1, 0 since 6 > tau), t1 (-0.5, -1.5)
  const ValueTable raw = optimal_values(m, cfg, false);
  const ValueTable sh = optimal_values(m, cfg, true);
  CHECK(raw.v == std::vector<double>{1.0, 1.0, 1.0, 1.0});
  CHECK(sh.v[0] == doctest::Approx(2.0));
  CHECK(sh.v[1] == doctest::Approx(1.0));
  CHECK(sh.v[2] == doctest::Approx(1.5));
  CHECK(sh.v[3] == doctest::Approx(2.5));
  const InvarianceReport rep = verify_policy_invariance(m, cfg, {});
  CHECK(rep.optimal_actions_identical);
  CHECK(rep.max_optimal_value_gap < 1e-12);
}

TEST_CASE("zero potential leaves values untouched") {
  TabularMdp m = random_mdp(3);
  std::fill(m.state_score.begin(), m.state_score.end(), 0.0);
  const ShapingConfig cfg;
  CHECK(optimal_values(m, cfg, false).v == optimal_values(m, cfg, true).v);
}

TEST_CASE("policy evaluation matches path enumeration on small random MDPs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TabularMdp m = random_mdp(seed, 4, 3, 4);
    const TabularPolicy pi = random_policy(m, seed + 100);
    for (const ClipVariant v : {ClipVariant::clip_to_zero, ClipVariant::min_clip}) {
      ShapingConfig cfg;
      cfg.variant = v;
      cfg.gamma = seed % 2 ? 1.0 : 0.9;
      for (const bool shaped : {false, true}) {
        const ValueTable table = evaluate_policy(m, pi, cfg, shaped);
        for (std::size_t s = 0; s < m.num_states; ++s) {
          CHECK(table.v[s] == doctest::Approx(enumerate_value(m, pi, cfg, shaped, 0, s)).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("shaping preserves optimal actions and the value identity on random MDPs") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const TabularMdp m = random_mdp(seed);
    std::vector<TabularPolicy> policies;
    for (std::uint64_t p = 0; p < 5; ++p) policies.push_back(random_policy(m, seed * 10 + p));
    ShapingConfig cfg;
    cfg.gamma = seed % 3 == 0 ? 0.95 : 1.0;
    const InvarianceReport rep = verify_policy_invariance(m, cfg, policies);
    CHECK(rep.optimal_actions_identical);
    CHECK(rep.max_optimal_value_gap <= 1e-9);
    CHECK(rep.max_policy_value_gap <= 1e-9);
  }
}

TEST_CASE("random MDPs respect their size limits and validate") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const TabularMdp m = random_mdp(seed);
    CHECK(m.num_states <= 20);
    CHECK(m.num_actions <= 4);
    CHECK(m.horizon <= 10);
    CHECK_NOTHROW(m.validate());
  }
  TabularMdp broken = chain();
  broken.transition[0] = 0.5;
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
}

TEST_CASE("shaping config validation") {
  ShapingConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.gamma = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.tau = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
