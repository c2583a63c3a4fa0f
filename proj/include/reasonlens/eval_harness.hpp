#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace reasonlens {

// Rank AUC (Mann-Whitney, ties count one half); label 1 = hallucinated = positive.
double auc(std::span<const double> scores, std::span<const int> labels);

// Pearson correlation between scores and the 0/1 label vector.
double pcc_metric(std::span<const double> scores, std::span<const int> labels);

struct QuestionGroup {
  std::string question_id;
  std::vector<double> scores;
  std::vector<int> labels;  // 1 hallucinated, 0 truthful
};

enum class Mc2Normalization { softmax, min_shift };

struct McMetrics {
  double mc1 = 0.0;
  double mc2 = 0.0;
  double mc3 = 0.0;
};

// Multi-trace ranking metrics, macro-averaged over groups. Dominance is strict.
// Throws std::invalid_argument if a group lacks either label.
McMetrics mc_metrics(std::span<const QuestionGroup> groups, Mc2Normalization norm = Mc2Normalization::softmax);

// True when the group has at least one trace of each label.
bool has_both_labels(const QuestionGroup& group);

// Failure fraction in [0, 1] after rolling out `rollouts` continuations of the
// first `prefix_steps` steps.
using RolloutOracle = std::function<double(std::size_t prefix_steps, std::size_t rollouts)>;

class MonotonicityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LocateResult {
  std::optional<std::size_t> step;  // 1-based prefix length, none if no prefix fails
  std::size_t oracle_calls = 0;
  std::vector<std::pair<std::size_t, double>> observations;  // (k, failure fraction) in call order
};

// Binary search for the smallest k in [1, num_steps] with oracle(k) >= threshold.
// Throws MonotonicityError when two observations decrease with k.
LocateResult locate_hallucination_step(std::size_t num_steps, const RolloutOracle& oracle,
                                       double fail_threshold = 0.9, std::size_t rollouts = 16);

}  // namespace reasonlens
