#include "reasonlens/rhd_detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "reasonlens/parallel.hpp"
#include "reasonlens/segmentation.hpp"

namespace reasonlens {

StepBoundaries bundle_boundaries(const TraceBundle& bundle) {
  if (bundle.manifest.boundaries) return *bundle.manifest.boundaries;
  return segment(bundle.tokens);
}

TraceAnalysis analyze_trace(const TraceBundle& bundle, const StepBoundaries& boundaries, const FeatureOptions& opts) {
  opts.pattern.validate();
  TraceAnalysis out;
  out.scores = step_scores(bundle, boundaries, opts.reasoning_layers, opts.scale);
  if (out.scores.scores.empty()) throw std::invalid_argument("trace '" + bundle.manifest.trace_id + "' has no steps");
  const std::vector<double> scaled = out.scores.scaled();
  out.ppl = step_ppl(bundle.tokens, boundaries);

  FeatureVector& f = out.features;
  f.trace_id = bundle.manifest.trace_id;
  f.question_id = bundle.manifest.question_id;
  f.label = bundle.manifest.label;
  f.avg_score = std::accumulate(scaled.begin(), scaled.end(), 0.0) / static_cast<double>(scaled.size());
  f.cv = cv_score(scaled, opts.pattern.r);
  const auto attention = step_attention(bundle, boundaries, opts.attention_layers);
  f.attn_score = attention_score(attention, scaled, opts.pattern);
  f.pcc = scaled.size() >= 2 ? pcc(scaled, out.ppl) : 0.0;
  return out;
}

FeatureVector extract_features(const TraceBundle& bundle, const StepBoundaries& boundaries,
                               const FeatureOptions& opts) {
  return analyze_trace(bundle, boundaries, opts).features;
}

double hallucination_score(const FeatureVector& f, const RhdWeights& w) {
  const auto x = f.values();
  return w.alpha[0] * x[0] + w.alpha[1] * x[1] + w.alpha[2] * x[2] + w.alpha[3] * x[3];
}

std::string_view to_string(FitMetric metric) {
  switch (metric) {
    case FitMetric::auc: return "auc";
    case FitMetric::pcc: return "pcc";
    case FitMetric::mc1: return "mc1";
    case FitMetric::mc2: return "mc2";
    case FitMetric::mc3: return "mc3";
  }
  return "auc";
}

std::optional<FitMetric> parse_fit_metric(std::string_view text) {
  for (FitMetric m : {FitMetric::auc, FitMetric::pcc, FitMetric::mc1, FitMetric::mc2, FitMetric::mc3}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

namespace {

int label_value(const FeatureVector& f) {
  if (f.label == TraceLabel::unlabeled) throw std::invalid_argument("trace '" + f.trace_id + "' is unlabeled");
  return f.label == TraceLabel::hallucinated ? 1 : 0;
}

std::vector<QuestionGroup> eligible_groups(std::span<const FeatureVector> features, std::span<const double> scores) {
  std::map<std::string, QuestionGroup> by_question;
  for (std::size_t i = 0; i < features.size(); ++i) {
    QuestionGroup& g = by_question[features[i].question_id];
    g.question_id = features[i].question_id;
    g.scores.push_back(scores[i]);
    g.labels.push_back(label_value(features[i]));
  }
  std::vector<QuestionGroup> out;
  for (auto& [id, g] : by_question) {
    if (has_both_labels(g)) out.push_back(std::move(g));
  }
  return out;
}

void require_metric_defined(FitMetric metric, std::span<const FeatureVector> features, const std::string& what) {
  bool any_h = false;
  bool any_t = false;
  for (const auto& f : features) {
    (label_value(f) ? any_h : any_t) = true;
  }
  if (!any_h || !any_t) throw std::invalid_argument(what + " contains a single label class; metric undefined");
  if (metric == FitMetric::mc1 || metric == FitMetric::mc2 || metric == FitMetric::mc3) {
    const std::vector<double> zeros(features.size(), 0.0);
    if (eligible_groups(features, zeros).empty()) {
      throw std::invalid_argument(what + " has no question with both hallucinated and truthful traces");
    }
  }
}

}  // namespace

double evaluate_metric(FitMetric metric, std::span<const FeatureVector> features, std::span<const double> scores) {
  if (features.size() != scores.size()) throw std::invalid_argument("evaluate_metric: size mismatch");
  switch (metric) {
    case FitMetric::auc:
    case FitMetric::pcc: {
      std::vector<int> labels(features.size());
      std::transform(features.begin(), features.end(), labels.begin(), label_value);
      return metric == FitMetric::auc ? auc(scores, labels) : pcc_metric(scores, labels);
    }
    case FitMetric::mc1:
    case FitMetric::mc2:
    case FitMetric::mc3: {
      const auto groups = eligible_groups(features, scores);
      const McMetrics mc = mc_metrics(groups);
      return metric == FitMetric::mc1 ? mc.mc1 : metric == FitMetric::mc2 ? mc.mc2 : mc.mc3;
    }
  }
  return 0.0;
}

std::array<std::vector<std::string>, 2> split_questions(std::span<const FeatureVector> dataset, std::uint64_t seed) {
  std::set<std::string> distinct;
  for (const auto& f : dataset) distinct.insert(f.question_id);
  std::vector<std::string> ids(distinct.begin(), distinct.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(ids[i - 1], ids[j]);
  }
  const std::size_t half = (ids.size() + 1) / 2;
  std::array<std::vector<std::string>, 2> folds;
  folds[0].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(half));
  folds[1].assign(ids.begin() + static_cast<std::ptrdiff_t>(half), ids.end());
  std::sort(folds[0].begin(), folds[0].end());
  std::sort(folds[1].begin(), folds[1].end());
  return folds;
}

FitResult fit_weights(std::span<const FeatureVector> dataset, const FitOptions& opts) {
  if (!(opts.grid_step > 0.0 && opts.grid_step <= 1.0)) throw std::invalid_argument("grid step must lie in (0, 1]");
  const double inverse = 1.0 / opts.grid_step;
  const auto divisions = static_cast<std::size_t>(std::llround(inverse));
  if (std::abs(inverse - static_cast<double>(divisions)) > 1e-6) {
    throw std::invalid_argument("grid step must divide 1 evenly");
  }
  require_metric_defined(opts.metric, dataset, "dataset");

  const auto fold_ids = split_questions(dataset, opts.seed);
  std::array<std::vector<FeatureVector>, 2> folds;
  for (std::size_t f = 0; f < 2; ++f) {
    if (fold_ids[f].size() < 2) throw std::invalid_argument("two-fold fitting needs at least 2 questions per fold");
    const std::set<std::string> members(fold_ids[f].begin(), fold_ids[f].end());
    for (const auto& fv : dataset) {
      if (members.contains(fv.question_id)) folds[f].push_back(fv);
    }
    require_metric_defined(opts.metric, folds[f], "fold " + std::to_string(f));
  }

  const std::size_t per_axis = divisions + 1;
  const std::size_t combos = per_axis * per_axis * per_axis * per_axis;
  auto digits_of = [&](std::size_t c) {
    std::array<std::size_t, 4> d{};
    for (int i = 3; i >= 0; --i) {
      d[static_cast<std::size_t>(i)] = c % per_axis;
      c /= per_axis;
    }
    return d;
  };
  auto weights_of = [&](std::size_t c) {
    RhdWeights w;
    const auto d = digits_of(c);
    for (std::size_t i = 0; i < 4; ++i) w.alpha[i] = static_cast<double>(d[i]) / static_cast<double>(divisions);
    return w;
  };
  auto l1_of = [&](std::size_t c) {
    const auto d = digits_of(c);
    return d[0] + d[1] + d[2] + d[3];
  };

  std::array<std::vector<double>, 2> metric;
  for (std::size_t f = 0; f < 2; ++f) {
    metric[f].resize(combos);
    const auto& fold = folds[f];
    parallel_for(combos, [&](std::size_t c) {
      const RhdWeights w = weights_of(c);
      std::vector<double> scores(fold.size());
      for (std::size_t i = 0; i < fold.size(); ++i) scores[i] = hallucination_score(fold[i], w);
      metric[f][c] = evaluate_metric(opts.metric, fold, scores);
    });
  }

  auto select = [&](auto&& value_of) {
    std::size_t best = 0;
    double best_value = value_of(0);
    for (std::size_t c = 1; c < combos; ++c) {
      const double v = value_of(c);
      if (v > best_value || (v == best_value && l1_of(c) < l1_of(best))) {
        best = c;
        best_value = v;
      }
    }
    return best;
  };

  FitResult result;
  result.combinations = combos;
  const std::size_t chosen = select([&](std::size_t c) { return 0.5 * (metric[0][c] + metric[1][c]); });
  result.weights = weights_of(chosen);
  result.fold_metric = {metric[0][chosen], metric[1][chosen]};
  result.mean_fold_metric = 0.5 * (metric[0][chosen] + metric[1][chosen]);

  for (std::size_t f = 0; f < 2; ++f) {
    const std::size_t other = 1 - f;
    const std::size_t trained = select([&](std::size_t c) { return metric[other][c]; });
    FoldReport& report = result.folds[f];
    report.question_ids = fold_ids[f];
    report.traces = folds[f].size();
    report.train_best = weights_of(trained);
    report.train_metric = metric[other][trained];
    report.heldout_metric = metric[f][trained];
  }
  result.mean_heldout_metric = 0.5 * (result.folds[0].heldout_metric + result.folds[1].heldout_metric);
  return result;
}

}  // namespace reasonlens
