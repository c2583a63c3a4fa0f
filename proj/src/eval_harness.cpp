#include "reasonlens/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "reasonlens/pattern_metrics.hpp"

namespace reasonlens {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // midranks over tie blocks
  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t m = i; m < j; ++m) {
      if (labels[order[m]] != 0) {
        positive_rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw std::invalid_argument("auc: both classes must be present");
  const double np = static_cast<double>(positives);
  const double nn = static_cast<double>(negatives);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double pcc_metric(std::span<const double> scores, std::span<const int> labels) {
  std::vector<double> y(labels.size());
  std::transform(labels.begin(), labels.end(), y.begin(), [](int l) { return l != 0 ? 1.0 : 0.0; });
  return pcc(scores, y);
}

bool has_both_labels(const QuestionGroup& group) {
  const bool any_h = std::any_of(group.labels.begin(), group.labels.end(), [](int l) { return l != 0; });
  const bool any_t = std::any_of(group.labels.begin(), group.labels.end(), [](int l) { return l == 0; });
  return any_h && any_t;
}

McMetrics mc_metrics(std::span<const QuestionGroup> groups, Mc2Normalization norm) {
  if (groups.empty()) throw std::invalid_argument("mc_metrics: no groups");
  McMetrics out;
  for (const QuestionGroup& g : groups) {
    if (g.scores.size() != g.labels.size()) throw std::invalid_argument("mc_metrics: group " + g.question_id + " is ragged");
    if (!has_both_labels(g)) {
      throw std::invalid_argument("mc_metrics: group " + g.question_id + " lacks a hallucinated or truthful trace");
    }
    double best_h = -INFINITY;
    double best_t = -INFINITY;
    for (std::size_t i = 0; i < g.scores.size(); ++i) {
      double& best = g.labels[i] != 0 ? best_h : best_t;
      best = std::max(best, g.scores[i]);
    }
    std::size_t n_h = 0;
    std::size_t above = 0;
    for (std::size_t i = 0; i < g.scores.size(); ++i) {
      if (g.labels[i] == 0) continue;
      ++n_h;
      if (g.scores[i] > best_t) ++above;
    }
    out.mc1 += best_h > best_t ? 1.0 : 0.0;
    out.mc3 += static_cast<double>(above) / static_cast<double>(n_h);

    std::vector<double> weight(g.scores.size());
    if (norm == Mc2Normalization::softmax) {
      const double peak = *std::max_element(g.scores.begin(), g.scores.end());
      std::transform(g.scores.begin(), g.scores.end(), weight.begin(), [&](double s) { return std::exp(s - peak); });
    } else {
      const double low = *std::min_element(g.scores.begin(), g.scores.end());
      std::transform(g.scores.begin(), g.scores.end(), weight.begin(), [&](double s) { return s - low; });
    }
    double total = std::accumulate(weight.begin(), weight.end(), 0.0);
    if (total <= 0.0) {
      // all scores equal under min-shift: fall back to uniform mass
      std::fill(weight.begin(), weight.end(), 1.0);
      total = static_cast<double>(weight.size());
    }
    double mass_h = 0.0;
    for (std::size_t i = 0; i < g.scores.size(); ++i) {
      if (g.labels[i] != 0) mass_h += weight[i];
    }
    out.mc2 += mass_h / total;
  }
  const double n = static_cast<double>(groups.size());
  out.mc1 /= n;
  out.mc2 /= n;
  out.mc3 /= n;
  return out;
}

LocateResult locate_hallucination_step(std::size_t num_steps, const RolloutOracle& oracle, double fail_threshold,
                                       std::size_t rollouts) {
  LocateResult result;
  auto probe = [&](std::size_t k) {
    const double value = oracle(k, rollouts);
    ++result.oracle_calls;
    if (!(value >= 0.0 && value <= 1.0)) {
      throw std::invalid_argument("rollout oracle returned " + std::to_string(value) + " for k=" + std::to_string(k));
    }
    for (const auto& [seen_k, seen_v] : result.observations) {
      if ((seen_k < k && seen_v > value) || (seen_k > k && seen_v < value)) {
        throw MonotonicityError("oracle failure fraction decreases between k=" + std::to_string(std::min(seen_k, k)) +
                                " and k=" + std::to_string(std::max(seen_k, k)));
      }
    }
    result.observations.emplace_back(k, value);
    return value >= fail_threshold;
  };

  // invariant: answer lies in [lo, hi]; hi == num_steps + 1 means "none"
  std::size_t lo = 1;
  std::size_t hi = num_steps + 1;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (probe(mid)) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  if (lo <= num_steps) result.step = lo;
  return result;
}

}  // namespace reasonlens
