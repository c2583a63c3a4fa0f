#pragma once

// Logit-lens projection, Jensen-Shannon divergence and per-step reasoning
// scores: the mean, over a step's tokens and the selected late layers, of
// JSD(final-layer distribution, layer distribution).

#include <map>
#include <span>
#include <string>
#include <vector>

#include "reasonlens/steps.hpp"
#include "reasonlens/trace_store.hpp"

namespace reasonlens {

inline constexpr double kDefaultScoreScale = 1e5;

// Default late layers for a 28-block model.
std::vector<int> default_reasoning_layers();

// LayerNorm(hidden; gamma, beta, eps) projected through the unembedding.
// Inputs are fp32; normalization and the matrix product accumulate in double.
std::vector<double> logit_lens(std::span<const float> hidden, const LensParams& lens);

// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> logits);

// Natural-log Jensen-Shannon divergence; 0 log 0 = 0; result clamped to [0, ln 2].
// Throws std::invalid_argument on length mismatch or non-finite input.
double jsd(std::span<const double> p, std::span<const double> q);

// Per-token JSDs for each requested layer. Entry i uses the hidden state at
// position i - 1 (the distribution that predicted token i); entry 0 is 0.
// Full mode computes them from activations, compact mode reads them back.
std::map<int, std::vector<double>> token_jsds(const TraceBundle& bundle, std::span<const int> layers);

struct StepScores {
  std::string trace_id;
  StepBoundaries boundaries;
  std::vector<double> scores;  // raw, natural-log JSD units
  double scale = kDefaultScoreScale;

  std::vector<double> scaled() const;
};

// Scores every step. The trace-initial token has no predecessor and is skipped.
// `layers` empty means the bundle's own reasoning layers.
StepScores step_scores(const TraceBundle& bundle, const StepBoundaries& boundaries, std::span<const int> layers = {},
                       double scale = kDefaultScoreScale);

// Same reduction from precomputed per-token JSDs.
std::vector<double> reduce_step_scores(const std::map<int, std::vector<double>>& per_token,
                                       const StepBoundaries& boundaries);

}  // namespace reasonlens
