#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "reasonlens/rhd_detector.hpp"
#include "reasonlens/synthgen.hpp"

using namespace reasonlens;

namespace {

FeatureVector fv(std::string q, TraceLabel label, double avg, double cv, double attn, double p) {
  FeatureVector f;
  f.trace_id = q + "-" + std::to_string(static_cast<int>(label)) + "-" + std::to_string(avg);
  f.question_id = std::move(q);
  f.label = label;
  f.avg_score = avg;
  f.cv = cv;
  f.attn_score = attn;
  f.pcc = p;
  return f;
}

// cv alone separates the classes; every other feature is anti-informative noise.
std::vector<FeatureVector> cv_separable(std::uint64_t seed, std::size_t questions = 12) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<FeatureVector> out;
  for (std::size_t q = 0; q < questions; ++q) {
    const std::string id = "q" + std::to_string(100 + q);
    for (int i = 0; i < 4; ++i) {
      const bool bad = i % 2 == 0;
      out.push_back(fv(id, bad ? TraceLabel::hallucinated : TraceLabel::truthful, 5.0 * u(rng) + (bad ? 0.0 : 1.0),
                       bad ? 0.6 + 0.3 * u(rng) : 0.1 + 0.3 * u(rng), u(rng), 2.0 * u(rng) - 1.0));
    }
  }
  return out;
}

bool on_grid(double a, double step) {
  const double k = a / step;
  return std::fabs(k - std::round(k)) < 1e-9 && a >= 0.0 && a <= 1.0 + 1e-12;
}

}  // namespace

TEST_CASE("composite score is the weighted sum") {
  const FeatureVector f = fv("q", TraceLabel::unlabeled, 1.2, 0.5, 0.4, 0.3);
  CHECK(hallucination_score(f, {{0.0, 0.4, 0.0, 0.3}}) == doctest::Approx(0.29).epsilon(1e-14));
  CHECK(hallucination_score(f, {}) == 0.0);
}

TEST_CASE("composite score is linear in the weights") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::uniform_real_distribution<double> w(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const FeatureVector f = fv("q", TraceLabel::unlabeled, u(rng), u(rng), u(rng), u(rng));
    const RhdWeights a{{w(rng), w(rng), w(rng), w(rng)}};
    const RhdWeights b{{w(rng), w(rng), w(rng), w(rng)}};
    RhdWeights sum;
    for (std::size_t i = 0; i < 4; ++i) sum.alpha[i] = a.alpha[i] + b.alpha[i];
    CHECK(hallucination_score(f, sum) ==
          doctest::Approx(hallucination_score(f, a) + hallucination_score(f, b)).epsilon(1e-12));
  }
}

TEST_CASE("ranking by the composite score survives an increasing transform") {
  const auto data = cv_separable(3);
  const RhdWeights w{{0.2, 0.7, 0.1, 0.3}};
  std::vector<double> s(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) s[i] = hallucination_score(data[i], w);
  std::vector<std::size_t> a(s.size()), b(s.size());
  std::iota(a.begin(), a.end(), std::size_t{0});
  std::iota(b.begin(), b.end(), std::size_t{0});
  std::stable_sort(a.begin(), a.end(), [&](auto x, auto y) { return s[x] < s[y]; });
  std::stable_sort(b.begin(), b.end(), [&](auto x, auto y) { return std::atan(s[x]) * 3 + 1 < std::atan(s[y]) * 3 + 1; });
  CHECK(a == b);
}

TEST_CASE("grid search over step 0.1 visits 11^4 combinations") {
  const auto data = cv_separable(4);
  CHECK(fit_weights(data).combinations == 14641);
  FitOptions coarse;
  coarse.grid_step = 0.5;
  CHECK(fit_weights(data, coarse).combinations == 81);
  coarse.grid_step = 0.3;
  CHECK_THROWS_AS(fit_weights(data, coarse), std::invalid_argument);
}

TEST_CASE("a cv-separable dataset is fitted with positive cv weight and perfect validation AUC") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto data = cv_separable(seed);
    const FitResult r = fit_weights(data);
    CHECK(r.weights.alpha[1] > 0.0);
    CHECK(r.mean_fold_metric == 1.0);
    CHECK(r.fold_metric[0] == 1.0);
    CHECK(r.fold_metric[1] == 1.0);
    CHECK(r.mean_heldout_metric == 1.0);
    for (double a : r.weights.alpha) CHECK(on_grid(a, 0.1));
  }
}

TEST_CASE("ties break toward the smallest L1 norm") {
  // any positive cv weight with zero elsewhere is perfect; the sparsest is (0, 0.1, 0, 0)
  const auto data = cv_separable(9);
  const FitResult r = fit_weights(data);
  CHECK(r.weights == RhdWeights{{0.0, 0.1, 0.0, 0.0}});
}

TEST_CASE("fitting is deterministic and the fold split depends only on the seed") {
  const auto data = cv_separable(5);
  const FitResult a = fit_weights(data);
  const FitResult b = fit_weights(data);
  CHECK(a.weights == b.weights);
  CHECK(a.folds[0].question_ids == b.folds[0].question_ids);
  auto shuffled = data;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(split_questions(shuffled, 7) == split_questions(data, 7));
  const auto folds = split_questions(data, 7);
  CHECK(folds[0].size() == 6);
  CHECK(folds[1].size() == 6);
  for (const auto& id : folds[0]) CHECK(std::find(folds[1].begin(), folds[1].end(), id) == folds[1].end());
}

TEST_CASE("the selected weights beat the all-zero weights on every metric") {
  const auto data = cv_separable(6);
  for (FitMetric m : {FitMetric::auc, FitMetric::pcc, FitMetric::mc1, FitMetric::mc2, FitMetric::mc3}) {
    FitOptions opts;
    opts.metric = m;
    opts.grid_step = 0.25;
    const FitResult r = fit_weights(data, opts);
    const auto folds = split_questions(data, opts.seed);
    double zero_mean = 0.0;
    for (const auto& ids : folds) {
      std::vector<FeatureVector> part;
      for (const auto& f : data)
        if (std::find(ids.begin(), ids.end(), f.question_id) != ids.end()) part.push_back(f);
      zero_mean += 0.5 * evaluate_metric(m, part, std::vector<double>(part.size(), 0.0));
    }
    CHECK_MESSAGE(r.mean_fold_metric >= zero_mean, to_string(m));
    for (double a : r.weights.alpha) CHECK(on_grid(a, 0.25));
  }
}

TEST_CASE("fitting needs both labels and two questions per fold") {
  auto one_class = cv_separable(1);
  for (auto& f : one_class) f.label = TraceLabel::truthful;
  CHECK_THROWS_AS(fit_weights(one_class), std::invalid_argument);
  const auto tiny = cv_separable(1, 3);
  CHECK_THROWS_AS(fit_weights(tiny), std::invalid_argument);
}

TEST_CASE("MC metrics inside evaluation skip questions lacking a label") {
  std::vector<FeatureVector> d{fv("a", TraceLabel::hallucinated, 0, 0, 0, 0), fv("a", TraceLabel::truthful, 0, 0, 0, 0),
                               fv("b", TraceLabel::truthful, 0, 0, 0, 0)};
  const std::vector<double> s{1.0, 0.0, 5.0};
  CHECK(evaluate_metric(FitMetric::mc1, d, s) == 1.0);
  CHECK(evaluate_metric(FitMetric::auc, d, s) == 0.5);
}

TEST_CASE("metric names round trip") {
  for (FitMetric m : {FitMetric::auc, FitMetric::pcc, FitMetric::mc1, FitMetric::mc2, FitMetric::mc3})
    CHECK(parse_fit_metric(to_string(m)) == m);
  CHECK_FALSE(parse_fit_metric("f1").has_value());
}

TEST_CASE("constant scores and perplexity give zero cv and pcc") {
  SyntheticTrace t = gen_compact_trace(truthful_spec(1));
  for (auto& [layer, v] : t.bundle.jsd)
    for (std::size_t i = 1; i < v.size(); ++i) v[i] = 2e-5f;
  for (auto& tok : t.bundle.tokens) tok.logprob = -1.0f;
  seal(t.bundle);
  const FeatureVector f = extract_features(t.bundle, bundle_boundaries(t.bundle));
  CHECK(f.cv == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(f.pcc == 0.0);
  CHECK(f.avg_score == doctest::Approx(2e-5f * 1e5).epsilon(1e-9));
}

TEST_CASE("planted fluctuation lifts cv above the truthful floor") {
  PatternSpec spec = truthful_spec(4);
  const double floor = extract_features(gen_compact_trace(spec).bundle, bundle_boundaries(gen_compact_trace(spec).bundle)).cv;
  const SyntheticTrace h = gen_compact_trace(hallucinated_spec(4));
  const FeatureVector f = extract_features(h.bundle, bundle_boundaries(h.bundle));
  CHECK(f.cv > floor + 0.1);
  CHECK(f.label == TraceLabel::hallucinated);
}

TEST_CASE("compact and full bundles give the same features") {
  FullDims d;
  d.tokens = 24;
  d.attention_layers = 2;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const TraceBundle full = gen_full_bundle(d, seed).bundle;
    const StepBoundaries sb{{{0, 5}, {5, 9}, {9, 16}, {16, 20}, {20, 24}}};
    const TraceBundle small = compact(full, sb);
    const FeatureVector a = extract_features(full, sb);
    const FeatureVector b = extract_features(small, sb);
    // avg_score is in scaled units; compare on the raw JSD scale
    CHECK(std::fabs(a.avg_score - b.avg_score) / kDefaultScoreScale < 1e-6);
    CHECK(std::fabs(a.cv - b.cv) < 1e-6);
    CHECK(std::fabs(a.attn_score - b.attn_score) < 1e-6);
    CHECK(std::fabs(a.pcc - b.pcc) < 1e-6);
  }
}
