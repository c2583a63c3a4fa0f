#pragma once

// Composite reasoning-hallucination score: a non-negative weighted sum of the
// mean scaled step score, early CV, late-step attention score and the
// score/perplexity correlation, plus grid-search weight fitting.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reasonlens/eval_harness.hpp"
#include "reasonlens/pattern_metrics.hpp"
#include "reasonlens/reasoning_score.hpp"
#include "reasonlens/trace_store.hpp"

namespace reasonlens {

struct FeatureVector {
  std::string trace_id;
  std::string question_id;
  double avg_score = 0.0;  // scaled units
  double cv = 0.0;
  double attn_score = 0.0;
  double pcc = 0.0;
  TraceLabel label = TraceLabel::unlabeled;

  std::array<double, 4> values() const { return {avg_score, cv, attn_score, pcc}; }
  bool operator==(const FeatureVector&) const = default;
};

struct RhdWeights {
  std::array<double, 4> alpha{};  // avg, cv, attn, pcc; all >= 0
  bool operator==(const RhdWeights&) const = default;
};

struct FeatureOptions {
  PatternConfig pattern;
  std::vector<int> reasoning_layers;  // empty: bundle's own
  std::vector<int> attention_layers;  // empty: bundle's own
  double scale = kDefaultScoreScale;
};

// Per-trace intermediate results, kept for plotting and reports.
struct TraceAnalysis {
  FeatureVector features;
  StepScores scores;
  std::vector<double> ppl;
};

TraceAnalysis analyze_trace(const TraceBundle& bundle, const StepBoundaries& boundaries, const FeatureOptions& opts = {});

FeatureVector extract_features(const TraceBundle& bundle, const StepBoundaries& boundaries,
                               const FeatureOptions& opts = {});

// Boundaries recorded in the bundle, else the default segmentation of its tokens.
StepBoundaries bundle_boundaries(const TraceBundle& bundle);

double hallucination_score(const FeatureVector& f, const RhdWeights& w);

enum class FitMetric { auc, pcc, mc1, mc2, mc3 };
std::string_view to_string(FitMetric metric);
std::optional<FitMetric> parse_fit_metric(std::string_view text);

// Metric of `scores` against the features' labels. MC metrics group by
// question_id and skip groups without both labels.
double evaluate_metric(FitMetric metric, std::span<const FeatureVector> features, std::span<const double> scores);

struct FitOptions {
  double grid_step = 0.1;
  FitMetric metric = FitMetric::auc;
  std::uint64_t seed = 7;
};

struct FoldReport {
  std::vector<std::string> question_ids;
  std::size_t traces = 0;
  RhdWeights train_best;       // best weights on the other fold
  double train_metric = 0.0;   // their metric on the other fold
  double heldout_metric = 0.0; // their metric on this fold
};

struct FitResult {
  RhdWeights weights;                 // maximises the mean metric over the two folds
  double mean_fold_metric = 0.0;
  std::array<double, 2> fold_metric{};  // metric of `weights` on each fold
  std::array<FoldReport, 2> folds;
  double mean_heldout_metric = 0.0;   // cross-fitted estimate
  std::size_t combinations = 0;
};

// Exhaustive grid over [0, 1]^4. Folds split questions by a seeded shuffle.
// Ties: smaller L1 norm, then lexicographic weights.
FitResult fit_weights(std::span<const FeatureVector> dataset, const FitOptions& opts = {});

// Seeded Fisher-Yates split of the sorted distinct question ids into two halves.
std::array<std::vector<std::string>, 2> split_questions(std::span<const FeatureVector> dataset, std::uint64_t seed);

}  // namespace reasonlens
