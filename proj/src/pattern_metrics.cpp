#include "reasonlens/pattern_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace reasonlens {
namespace {

// ceil(x) that ignores representation noise just above an integer (e.g. 0.75 * 4).
std::size_t ceil_count(double x) { return static_cast<std::size_t>(std::ceil(x - 1e-9)); }

}  // namespace

void PatternConfig::validate() const {
  if (!(r > 1.0)) throw std::invalid_argument("pattern config: r must be > 1");
  if (!(eta > 0.0 && eta < 1.0)) throw std::invalid_argument("pattern config: eta must lie in (0, 1)");
  if (k_att < 1) throw std::invalid_argument("pattern config: k_att must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument("pattern config: tau must be > 0");
}

double cv_score(std::span<const double> scores, double r) {
  if (scores.empty()) throw std::invalid_argument("cv_score: empty score list");
  if (!(r > 1.0)) throw std::invalid_argument("cv_score: r must be > 1");
  const std::size_t window = std::clamp<std::size_t>(ceil_count(static_cast<double>(scores.size()) / r), 1, scores.size());
  const auto early = scores.first(window);
  const double mu = std::accumulate(early.begin(), early.end(), 0.0) / static_cast<double>(window);
  if (mu < 1e-12) return 0.0;
  double var = 0.0;
  for (double s : early) var += (s - mu) * (s - mu);
  var /= static_cast<double>(window);
  return std::sqrt(var) / mu;
}

StepAttentionMatrix step_attention(const std::map<int, Matrix>& token_attention, const StepBoundaries& boundaries,
                                   std::span<const int> layers) {
  std::vector<const Matrix*> chosen;
  if (layers.empty()) {
    for (const auto& [layer, m] : token_attention) chosen.push_back(&m);
  } else {
    for (int l : layers) {
      auto it = token_attention.find(l);
      if (it == token_attention.end()) {
        throw BundleError(BundleError::Kind::missing_blob, "attn_" + std::to_string(l),
                          "no attention recorded for layer " + std::to_string(l));
      }
      chosen.push_back(&it->second);
    }
  }
  if (chosen.empty()) throw std::invalid_argument("step_attention: no attention layers");
  const std::size_t T = chosen.front()->rows;
  for (const Matrix* m : chosen) {
    if (m->rows != T || m->cols != T) throw std::invalid_argument("step_attention: attention maps differ in size");
  }
  validate_boundaries(boundaries, T);

  const std::size_t S = boundaries.size();
  StepAttentionMatrix out(S, S, 0.0f);
  const double layer_count = static_cast<double>(chosen.size());
  for (std::size_t k = 0; k < S; ++k) {
    const TokenSpan& ck = boundaries[k];
    for (std::size_t j = 0; j < k; ++j) {
      const TokenSpan& cj = boundaries[j];
      double total = 0.0;
      for (const Matrix* m : chosen) {
        double layer_total = 0.0;
        for (std::size_t t = ck.start; t < ck.end; ++t) {
          for (std::size_t s = cj.start; s < cj.end; ++s) layer_total += (*m)(t, s);
        }
        total += layer_total;
      }
      out(k, j) = static_cast<float>(total / (layer_count * static_cast<double>(ck.size() * cj.size())));
    }
  }
  return out;
}

StepAttentionMatrix step_attention(const TraceBundle& bundle, const StepBoundaries& boundaries,
                                   std::span<const int> layers) {
  if (!bundle.token_attention.empty()) return step_attention(bundle.token_attention, boundaries, layers);
  if (bundle.step_attention) {
    if (!bundle.manifest.boundaries || !(*bundle.manifest.boundaries == boundaries)) {
      throw std::invalid_argument("stored step attention was aggregated over different step boundaries");
    }
    return *bundle.step_attention;
  }
  throw BundleError(BundleError::Kind::missing_blob, "step_attn", "bundle carries no attention data");
}

double quantile(std::span<const double> values, double prob) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

double attention_score(const StepAttentionMatrix& attention, std::span<const double> scaled_scores,
                       const PatternConfig& cfg) {
  cfg.validate();
  const std::size_t S = scaled_scores.size();
  if (attention.rows != S || attention.cols != S) throw std::invalid_argument("attention_score: matrix/score size mismatch");
  if (S < 2) return 0.0;

  const double q1 = quantile(scaled_scores, 0.25);
  auto flagged = [&](std::size_t j) { return scaled_scores[j] <= q1 || scaled_scores[j] >= cfg.tau; };

  const std::size_t first_late = std::max<std::size_t>(1, ceil_count(cfg.eta * static_cast<double>(S)));
  double total = 0.0;
  std::vector<std::size_t> preds;
  for (std::size_t k1 = first_late; k1 <= S; ++k1) {
    const std::size_t k = k1 - 1;
    preds.resize(k);
    std::iota(preds.begin(), preds.end(), std::size_t{0});
    const std::size_t top = std::min(cfg.k_att, preds.size());
    std::partial_sort(preds.begin(), preds.begin() + static_cast<std::ptrdiff_t>(top), preds.end(),
                      [&](std::size_t a, std::size_t b) {
                        const float wa = attention(k, a);
                        const float wb = attention(k, b);
                        return wa != wb ? wa > wb : a < b;
                      });
    std::size_t hits = 0;
    for (std::size_t i = 0; i < top; ++i) hits += flagged(preds[i]) ? 1 : 0;
    const double denom = cfg.normalize_by_found ? static_cast<double>(top) : static_cast<double>(cfg.k_att);
    if (denom > 0.0) total += static_cast<double>(hits) / denom;
  }
  return total / static_cast<double>(S - first_late + 1);
}

std::vector<double> step_ppl(const std::vector<TokenRecord>& tokens, const StepBoundaries& boundaries) {
  validate_boundaries(boundaries, tokens.size());
  std::vector<double> out;
  out.reserve(boundaries.size());
  for (const TokenSpan& span : boundaries.steps) {
    double sum = 0.0;
    for (std::size_t t = span.start; t < span.end; ++t) sum += tokens[t].logprob;
    out.push_back(std::exp(-sum / static_cast<double>(span.size())));
  }
  return out;
}

double pcc(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pcc: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("pcc: need at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::string_view to_string(TripleKind kind) {
  switch (kind) {
    case TripleKind::stable: return "Stable";
    case TripleKind::rising1: return "Rising1";
    case TripleKind::rising2: return "Rising2";
    case TripleKind::none: break;
  }
  return "None";
}

std::vector<TripleClass> classify_triples(std::span<const double> s, TraceLabel label, const PatternConfig& cfg) {
  std::vector<TripleClass> out;
  if (s.size() < 3) return out;
  const bool allow_stable = label != TraceLabel::hallucinated;
  const bool allow_rising = label != TraceLabel::truthful;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) {
    const double a = s[i], b = s[i + 1], c = s[i + 2];
    TripleKind kind = TripleKind::none;
    if (std::abs(b - a) < cfg.stable_diff && std::abs(c - b) < cfg.stable_diff) {
      if (allow_stable) kind = TripleKind::stable;
    } else if (c - b > cfg.rising_gap && allow_rising) {
      if (c < cfg.rising_split) {
        kind = TripleKind::rising1;
      } else if (c > cfg.rising_split) {
        kind = TripleKind::rising2;
      }
    }
    out.push_back({i, kind});
  }
  return out;
}

}  // namespace reasonlens
