#include "reasonlens/reasoning_score.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "reasonlens/parallel.hpp"

namespace reasonlens {

std::vector<int> default_reasoning_layers() { return {14, 16, 18, 20, 22, 24, 26}; }

std::vector<double> logit_lens(std::span<const float> hidden, const LensParams& lens) {
  const std::size_t dim = hidden.size();
  if (lens.ln_gamma.size() != dim || lens.ln_beta.size() != dim || lens.unembed.rows != dim) {
    throw std::invalid_argument("logit_lens: hidden size " + std::to_string(dim) +
                                " does not match the normalization/unembedding parameters");
  }

  double mean = 0.0;
  for (float h : hidden) mean += h;
  mean /= static_cast<double>(dim);
  double var = 0.0;
  for (float h : hidden) var += (h - mean) * (h - mean);
  var /= static_cast<double>(dim);
  const double denom = std::sqrt(var + static_cast<double>(lens.ln_epsilon));

  std::vector<double> normed(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    // zero variance with zero epsilon: the centred input is all zeros
    const double centred = denom > 0.0 ? (hidden[i] - mean) / denom : 0.0;
    normed[i] = centred * lens.ln_gamma[i] + lens.ln_beta[i];
  }

  std::vector<double> logits(lens.unembed.cols, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    const auto w = lens.unembed.row(i);
    const double x = normed[i];
    for (std::size_t v = 0; v < logits.size(); ++v) logits[v] += x * w[v];
  }
  return logits;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("jsd: distributions differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i];
    const double b = q[i];
    if (!std::isfinite(a) || !std::isfinite(b)) throw std::invalid_argument("jsd: non-finite probability");
    const double m = 0.5 * (a + b);
    const double ta = a > 0.0 ? a * std::log(a / m) : 0.0;
    const double tb = b > 0.0 ? b * std::log(b / m) : 0.0;
    acc += ta + tb;
  }
  return std::clamp(0.5 * acc, 0.0, std::numbers::ln2);
}

std::map<int, std::vector<double>> token_jsds(const TraceBundle& bundle, std::span<const int> layers) {
  const std::size_t T = bundle.manifest.num_tokens;
  std::map<int, std::vector<double>> out;
  for (int l : layers) out.emplace(l, std::vector<double>(T, 0.0));

  if (bundle.manifest.mode == BundleMode::compact) {
    for (auto& [layer, values] : out) {
      auto it = bundle.jsd.find(layer);
      if (it == bundle.jsd.end()) {
        const std::string name = "jsd_" + std::to_string(layer);
        throw BundleError(BundleError::Kind::missing_blob, name, "no precomputed scores for layer " + std::to_string(layer));
      }
      for (std::size_t i = 1; i < T; ++i) values[i] = it->second[i];
    }
    return out;
  }

  auto hidden_of = [&](int layer) -> const Matrix& {
    auto it = bundle.hidden.find(layer);
    if (it == bundle.hidden.end()) {
      const std::string name = "hidden_" + std::to_string(layer);
      throw BundleError(BundleError::Kind::missing_blob, name, "no activations for layer " + std::to_string(layer));
    }
    return it->second;
  };
  const Matrix& final_states = hidden_of(bundle.manifest.final_layer);
  std::vector<std::pair<std::vector<double>*, const Matrix*>> work;
  for (auto& [layer, values] : out) work.emplace_back(&values, &hidden_of(layer));

  parallel_for(T > 0 ? T - 1 : 0, [&](std::size_t pos) {
    const auto anchor = softmax(logit_lens(final_states.row(pos), bundle.lens));
    for (auto& [values, states] : work) {
      const auto q = softmax(logit_lens(states->row(pos), bundle.lens));
      (*values)[pos + 1] = jsd(anchor, q);
    }
  });
  return out;
}

std::vector<double> reduce_step_scores(const std::map<int, std::vector<double>>& per_token,
                                       const StepBoundaries& boundaries) {
  if (per_token.empty()) throw std::invalid_argument("step scores need at least one reasoning layer");
  const double layer_count = static_cast<double>(per_token.size());
  std::vector<double> scores;
  scores.reserve(boundaries.size());
  for (std::size_t k = 0; k < boundaries.size(); ++k) {
    const TokenSpan& span = boundaries[k];
    const std::size_t first = std::max<std::size_t>(span.start, 1);
    if (first >= span.end) {
      throw std::invalid_argument("step " + std::to_string(k) + " has no scorable token after skipping the first token");
    }
    double total = 0.0;
    for (std::size_t t = first; t < span.end; ++t) {
      double layer_sum = 0.0;
      for (const auto& [layer, values] : per_token) layer_sum += values.at(t);
      total += layer_sum / layer_count;
    }
    scores.push_back(total / static_cast<double>(span.end - first));
  }
  return scores;
}

std::vector<double> StepScores::scaled() const {
  std::vector<double> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(), [this](double s) { return s * scale; });
  return out;
}

StepScores step_scores(const TraceBundle& bundle, const StepBoundaries& boundaries, std::span<const int> layers,
                       double scale) {
  validate_boundaries(boundaries, bundle.manifest.num_tokens);
  const std::span<const int> chosen = layers.empty() ? std::span<const int>(bundle.manifest.reasoning_layers) : layers;
  StepScores result;
  result.trace_id = bundle.manifest.trace_id;
  result.boundaries = boundaries;
  result.scale = scale;
  result.scores = reduce_step_scores(token_jsds(bundle, chosen), boundaries);
  return result;
}

}  // namespace reasonlens
