#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "reasonlens/parallel.hpp"
#include "reasonlens/pattern_metrics.hpp"
#include "reasonlens/reasoning_score.hpp"
#include "reasonlens/rhd_detector.hpp"
#include "reasonlens/segmentation.hpp"
#include "reasonlens/synthgen.hpp"
#include "test_support.hpp"

using namespace reasonlens;

TEST_CASE("planted step scores, perplexities and attention masses are recoverable") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const double d = 0.1 * static_cast<double>(seed % 10);
    const SyntheticTrace t = gen_compact_trace(seed % 2 ? hallucinated_spec(seed, d) : truthful_spec(seed, d));
    CHECK_NOTHROW(validate(t.bundle));
    const StepBoundaries sb = *t.bundle.manifest.boundaries;
    const auto scaled = step_scores(t.bundle, sb).scaled();
    REQUIRE(scaled.size() == t.truth.step_scores.size());
    for (std::size_t k = 0; k < scaled.size(); ++k) {
      CHECK(std::fabs(scaled[k] - t.truth.step_scores[k]) <= 0.01 * t.truth.step_scores[k]);
    }
    const auto ppl = step_ppl(t.bundle.tokens, sb);
    for (std::size_t k = 0; k < ppl.size(); ++k) CHECK(ppl[k] == doctest::Approx(t.truth.step_ppl[k]).epsilon(1e-5));

    const Matrix& a = *t.bundle.step_attention;
    const double n = static_cast<double>(sb[0].size());
    for (std::size_t k = 0; k < sb.size(); ++k) {
      for (std::size_t j = 0; j < sb.size(); ++j) {
        CHECK(std::fabs(a(k, j) * n - t.truth.attention_mass[k][j]) < 1e-6);
      }
    }
  }
}

TEST_CASE("generated bundles segment back to their recorded boundaries") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticTrace t = gen_compact_trace(seed % 2 ? hallucinated_spec(seed) : truthful_spec(seed));
    CHECK(segment(t.bundle.tokens) == *t.bundle.manifest.boundaries);
  }
}

TEST_CASE("the canonical hallucinated plant yields a Rising-2 triple ending at the overthinking step") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticTrace t = gen_compact_trace(hallucinated_spec(seed));
    CHECK(t.truth.shallow_steps == std::vector<std::size_t>{1, 3});
    CHECK(t.truth.overthink_steps == std::vector<std::size_t>{4});
    const auto scaled = step_scores(t.bundle, *t.bundle.manifest.boundaries).scaled();
    const auto triples = classify_triples(scaled, TraceLabel::hallucinated, PatternConfig{});
    REQUIRE(triples.size() >= 2);
    CHECK(triples[1] == TripleClass{1, TripleKind::rising2});
  }
}

TEST_CASE("truthful traces without fluctuation have low cv and attention score") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticTrace t = gen_compact_trace(truthful_spec(seed));
    const FeatureVector f = extract_features(t.bundle, *t.bundle.manifest.boundaries);
    CHECK(f.cv < 0.1);
    CHECK(f.attn_score <= 0.4);
    CHECK(f.label == TraceLabel::truthful);
  }
}

TEST_CASE("hallucinated backtracking puts the planted mass on bad steps") {
  const SyntheticTrace t = gen_compact_trace(hallucinated_spec(5));
  const std::size_t S = t.truth.step_scores.size();
  const std::size_t late = static_cast<std::size_t>(std::ceil(0.75 * static_cast<double>(S) - 1e-9));
  for (std::size_t k1 = late; k1 <= S; ++k1) {
    double mass = 0.0;
    for (std::size_t b : t.truth.bad_steps) mass += t.truth.attention_mass[k1 - 1][b - 1];
    CHECK(mass == doctest::Approx(0.5).epsilon(1e-9));
  }
}

TEST_CASE("infeasible specs are rejected") {
  PatternSpec s;
  s.backtrack_mass = 0.9;
  s.predecessor_mass = 0.8;
  s.label = TraceLabel::hallucinated;
  s.shallow = {{1, 1.0}};
  CHECK_THROWS_AS(gen_compact_trace(s), std::invalid_argument);
  PatternSpec t;
  t.shallow = {{2, 1.0}};
  CHECK_THROWS_AS(gen_compact_trace(t), std::invalid_argument);
  PatternSpec u;
  u.label = TraceLabel::hallucinated;
  u.overthink = {{11, 9.0, 5.0}};
  CHECK_THROWS_AS(gen_compact_trace(u), std::invalid_argument);
  CHECK_THROWS_AS(hallucinated_spec(1, 1.5), std::invalid_argument);
}

TEST_CASE("generation is byte-identical for equal seeds") {
  oracle::TempDir tmp;
  write_bundle(gen_compact_trace(hallucinated_spec(42, 0.3)).bundle, tmp / "a");
  write_bundle(gen_compact_trace(hallucinated_spec(42, 0.3)).bundle, tmp / "b");
  for (const auto& e : std::filesystem::directory_iterator(tmp / "a")) {
    CHECK(oracle::slurp(e.path()) == oracle::slurp(tmp / "b" / e.path().filename().string()));
  }
  CHECK(gen_full_bundle({}, 9).bundle == gen_full_bundle({}, 9).bundle);
  CHECK_FALSE(gen_full_bundle({}, 9).bundle == gen_full_bundle({}, 10).bundle);
}

TEST_CASE("full bundles are fp16-exact and score strictly inside (0, ln 2)") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TraceBundle b = gen_full_bundle({}, seed).bundle;
    for (const auto& [l, m] : b.hidden)
      for (float x : m.data) CHECK(oracle::hw_half_to_float(oracle::hw_float_to_half(x)) == x);
    for (const auto& [l, m] : b.token_attention)
      for (float x : m.data) CHECK(oracle::hw_half_to_float(oracle::hw_float_to_half(x)) == x);
    const auto s = step_scores(b, {{{0, 4}, {4, 8}, {8, 12}}}).scores;
    for (double v : s) {
      CHECK(v > 0.0);
      CHECK(v < std::log(2.0));
    }
  }
}

TEST_CASE("dataset labels follow the requested rate") {
  const Dataset none = gen_dataset(10, 5, 0.0, 0.2, 1);
  for (const auto& e : none.entries) CHECK(e.label == TraceLabel::truthful);
  const Dataset all = gen_dataset(4, 5, 1.0, 0.2, 1);
  for (const auto& e : all.entries) CHECK(e.label == TraceLabel::hallucinated);

  const Dataset half = gen_dataset(20, 5, 0.5, 0.2, 7);
  std::size_t h = 0;
  for (const auto& e : half.entries) h += e.label == TraceLabel::hallucinated;
  // binomial(100, 0.5): three standard deviations is 15
  CHECK(h >= 35);
  CHECK(h <= 65);
  MESSAGE("hallucinated traces at seed 7: " << h);
  CHECK(half.entries.front().trace_id == "q0000-t00");
  CHECK(half.entries.back().trace_id == "q0019-t04");
  CHECK(half.entries.back().question_id == "q0019");
}

TEST_CASE("datasets do not depend on the thread count") {
  set_thread_count(1);
  const Dataset a = gen_dataset(6, 4, 0.5, 0.4, 3);
  set_thread_count(4);
  const Dataset b = gen_dataset(6, 4, 0.5, 0.4, 3);
  set_thread_count(1);
  REQUIRE(a.traces.size() == b.traces.size());
  for (std::size_t i = 0; i < a.traces.size(); ++i) CHECK(a.traces[i].bundle == b.traces[i].bundle);
}

TEST_CASE("dataset index round trips") {
  oracle::TempDir tmp;
  const Dataset ds = gen_dataset(3, 2, 0.5, 0.0, 11);
  write_dataset(ds, tmp / "ds");
  const auto idx = read_dataset_index(tmp / "ds");
  REQUIRE(idx.size() == ds.entries.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    CHECK(idx[i].trace_id == ds.entries[i].trace_id);
    CHECK(idx[i].label == ds.entries[i].label);
    CHECK(open_bundle(tmp / "ds" / idx[i].path) == ds.traces[i].bundle);
  }
}

TEST_CASE("derived seeds separate streams") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0, 1) != derive_seed(1, 1, 0));
  CHECK(derive_seed(5, 2, 3) == derive_seed(5, 2, 3));
}
