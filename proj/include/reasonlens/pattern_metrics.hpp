#pragma once

// Trace-level hallucination pattern features: early-window coefficient of
// variation, attention paid by late steps to shallow/overthinking steps, step
// perplexity and its correlation with step scores, and step-triple labels.

#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "reasonlens/matrix.hpp"
#include "reasonlens/steps.hpp"
#include "reasonlens/trace_store.hpp"

namespace reasonlens {

struct PatternConfig {
  double r = 2.0;             // early window is the first ceil(S / r) steps
  double eta = 0.75;          // late steps are ceil(eta * S) .. S (1-based)
  std::size_t k_att = 5;      // top-K attended predecessors
  double tau = 4.0;           // overthinking threshold, scaled units
  double stable_diff = 0.1;   // triple thresholds, scaled units
  double rising_gap = 1.0;
  double rising_split = 4.0;
  // Divide by the number of attended predecessors found instead of k_att.
  bool normalize_by_found = false;

  void validate() const;
};

// Step-pair mean attention; entry (k, j) is non-zero only for j < k.
using StepAttentionMatrix = Matrix;

// sigma / mu over the first ceil(S / r) scores (population sigma); 0 when mu < 1e-12.
double cv_score(std::span<const double> scores, double r);

// Mean over the selected layers and over token pairs (t in step k, s in step j) of
// head-averaged token attention. `layers` empty means all layers present.
StepAttentionMatrix step_attention(const std::map<int, Matrix>& token_attention, const StepBoundaries& boundaries,
                                   std::span<const int> layers = {});

// Token-level aggregation when available, else the stored step-level matrix.
StepAttentionMatrix step_attention(const TraceBundle& bundle, const StepBoundaries& boundaries,
                                   std::span<const int> layers = {});

// Linear-interpolation (type 7) quantile.
double quantile(std::span<const double> values, double prob);

// Average over late steps of the fraction of each step's top-K attended
// predecessors whose scaled score is <= Q1 of all scores or >= tau.
double attention_score(const StepAttentionMatrix& attention, std::span<const double> scaled_scores,
                       const PatternConfig& cfg);

// exp(-mean logprob) per step, over every token of the step.
std::vector<double> step_ppl(const std::vector<TokenRecord>& tokens, const StepBoundaries& boundaries);

// Pearson correlation clamped to [-1, 1]; 0 if either side has zero variance.
double pcc(std::span<const double> xs, std::span<const double> ys);

enum class TripleKind { none, stable, rising1, rising2 };
std::string_view to_string(TripleKind kind);

struct TripleClass {
  std::size_t first = 0;  // 0-based index of c1; the triple is (first, first+1, first+2)
  TripleKind kind = TripleKind::none;
  bool operator==(const TripleClass&) const = default;
};

// Labels every consecutive triple of scaled scores. With a known label, stable
// triples come only from truthful traces and rising ones only from hallucinated traces.
std::vector<TripleClass> classify_triples(std::span<const double> scaled_scores, TraceLabel label,
                                          const PatternConfig& cfg);

}  // namespace reasonlens
