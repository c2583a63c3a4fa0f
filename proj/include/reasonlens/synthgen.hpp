#pragma once

// Synthetic trace bundles. Compact traces carry planted hallucination patterns
// with known ground truth; full-mode bundles are tiny random models used for
// format and pipeline tests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reasonlens/trace_store.hpp"

namespace reasonlens {

struct ShallowPlant {
  std::size_t step = 0;  // 1-based
  double score = 0.0;    // scaled target, below the base level
};

struct OverthinkPlant {
  std::size_t step = 0;  // 1-based
  double score = 0.0;    // scaled target, above tau
  double ppl = 0.0;      // perplexity target
};

struct PatternSpec {
  std::string trace_id = "synthetic";
  std::string question_id = "q0";
  std::size_t num_steps = 10;
  std::size_t tokens_per_step = 6;
  double base_score = 2.5;             // scaled units
  double score_noise = 0.06;           // relative sd of normal step scores
  std::vector<ShallowPlant> shallow;
  std::vector<OverthinkPlant> overthink;
  double backtrack_mass = 0.0;         // share of each late step's attention on planted bad steps
  double predecessor_mass = 0.8;       // total attention a step pays to earlier steps
  double attention_noise = 0.0;        // relative sd of attention weights
  double fluctuation = 0.0;            // alternating early-window offset, relative to base
  double base_ppl = 3.0;
  double ppl_coupling = 0.3;           // log-ppl change per unit of standardized score
  int ppl_sign = -1;                   // +1 ties perplexity to score, -1 opposes it
  double ppl_noise = 0.03;             // sd of log-ppl noise
  double eta = 0.75;                   // late-step window used for backtracking
  TraceLabel label = TraceLabel::truthful;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GroundTruth {
  std::vector<double> step_scores;                 // planted scaled step means
  std::vector<double> step_ppl;                    // planted perplexities
  std::vector<std::vector<double>> attention_mass; // [k][j] share of step k's attention on step j < k
  std::vector<std::size_t> shallow_steps;          // 1-based
  std::vector<std::size_t> overthink_steps;        // 1-based
  std::vector<std::size_t> bad_steps;              // union, sorted, 1-based
};

struct SyntheticTrace {
  TraceBundle bundle;
  GroundTruth truth;
};

// Compact bundle whose per-step mean JSD, step attention and perplexity
// realise the pattern. Deterministic given the PatternSpec.
SyntheticTrace gen_compact_trace(const PatternSpec& spec);

// Canonical hallucinated plant: shallow steps 1 and 3, an overthinking step 4.
PatternSpec hallucinated_spec(std::uint64_t seed, double difficulty = 0.0);
PatternSpec truthful_spec(std::uint64_t seed, double difficulty = 0.0);

struct FullDims {
  std::size_t tokens = 12;
  std::size_t hidden = 8;
  std::size_t vocab = 13;
  std::size_t layers = 6;            // num_layers_total; the last one is final
  std::size_t reasoning_layers = 3;  // the layers right before the final one
  std::size_t attention_layers = 2;
};

struct FullBundle {
  TraceBundle bundle;
  std::vector<std::size_t> token_ids;  // token i is the argmax of the lens at position i - 1
};

// Random tiny model activations in full mode. Hidden states and attention are
// exactly representable in fp16. With zero_jsd, every reasoning layer copies
// the final layer.
FullBundle gen_full_bundle(const FullDims& dims, std::uint64_t seed, bool zero_jsd = false);

struct DatasetEntry {
  std::string trace_id;
  std::string question_id;
  TraceLabel label = TraceLabel::unlabeled;
  std::string path;  // bundle directory relative to the dataset root
};

struct Dataset {
  std::vector<DatasetEntry> entries;
  std::vector<SyntheticTrace> traces;
};

// n_questions groups of traces_per_question traces; each trace is hallucinated
// with probability hallucination_rate. Difficulty in [0, 1] weakens the plants
// and raises the noise.
Dataset gen_dataset(std::size_t n_questions, std::size_t traces_per_question, double hallucination_rate,
                    double difficulty, std::uint64_t seed);

// Writes every bundle under root/<trace_id>/ and the index root/dataset.json.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);

// Reads root/dataset.json.
std::vector<DatasetEntry> read_dataset_index(const std::filesystem::path& root);

// Mixes a base seed with stream indices.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace reasonlens
