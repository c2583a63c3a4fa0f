#include "reasonlens/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "reasonlens/half.hpp"
#include "reasonlens/parallel.hpp"
#include "reasonlens/reasoning_score.hpp"

namespace reasonlens {

namespace {

constexpr std::size_t kSynthLayersTotal = 29;
constexpr int kSynthFinalLayer = 28;

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {" the", " value", " is", " so", " we", " get",
                                                 " 3", " x", " check", " sum", " then", " of"};
  return words;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::size_t late_start(std::size_t num_steps, double eta) {
  return static_cast<std::size_t>(std::ceil(eta * static_cast<double>(num_steps) - 1e-9));
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0xD1B54A32D192ED03ULL));
}

void PatternSpec::validate() const {
  auto fail = [&](const std::string& why) { throw std::invalid_argument("pattern spec '" + trace_id + "': " + why); };
  if (num_steps < 1) fail("num_steps must be >= 1");
  if (tokens_per_step < 2) fail("tokens_per_step must be >= 2");
  if (!(base_score > 0.0)) fail("base_score must be positive");
  if (!(score_noise >= 0.0) || !(attention_noise >= 0.0) || !(ppl_noise >= 0.0)) fail("noise levels must be >= 0");
  if (!(predecessor_mass > 0.0 && predecessor_mass <= 1.0)) fail("predecessor_mass must lie in (0, 1]");
  if (!(backtrack_mass >= 0.0 && backtrack_mass <= predecessor_mass)) {
    fail("backtrack_mass must lie in [0, predecessor_mass]");
  }
  if (!(base_ppl >= 1.0)) fail("base_ppl must be >= 1");
  if (ppl_sign != 1 && ppl_sign != -1) fail("ppl_sign must be +1 or -1");
  if (!(eta > 0.0 && eta <= 1.0)) fail("eta must lie in (0, 1]");
  if (label == TraceLabel::truthful && (!shallow.empty() || !overthink.empty() || backtrack_mass > 0.0)) {
    fail("a truthful trace cannot carry planted bad steps");
  }
  std::set<std::size_t> seen;
  for (const auto& p : shallow) {
    if (p.step < 1 || p.step > num_steps) fail("shallow step out of range");
    if (!(p.score > 0.0 && p.score < base_score)) fail("shallow target must lie in (0, base_score)");
    if (!seen.insert(p.step).second) fail("step planted twice");
  }
  for (const auto& p : overthink) {
    if (p.step < 1 || p.step > num_steps) fail("overthink step out of range");
    if (!(p.score > base_score)) fail("overthink target must exceed base_score");
    if (!(p.ppl >= 1.0)) fail("overthink perplexity must be >= 1");
    if (!seen.insert(p.step).second) fail("step planted twice");
  }
  if (backtrack_mass > 0.0 && seen.empty()) fail("backtrack mass needs planted bad steps");
}

SyntheticTrace gen_compact_trace(const PatternSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t S = spec.num_steps;
  const std::size_t n = spec.tokens_per_step;
  const std::size_t T = S * n;
  const std::size_t early = (S + 1) / 2;

  SyntheticTrace out;
  GroundTruth& truth = out.truth;

  // step score targets
  std::vector<double> target(S);
  for (std::size_t k = 0; k < S; ++k) {
    const double trend = S > 1 ? 0.9 + 0.2 * static_cast<double>(k) / static_cast<double>(S - 1) : 1.0;
    double v = spec.base_score * trend * (1.0 + spec.score_noise * normal(rng));
    if (k < early) v += (k % 2 == 0 ? 1.0 : -1.0) * spec.fluctuation * spec.base_score;
    target[k] = std::max(v, 0.05 * spec.base_score);
  }
  for (const auto& p : spec.shallow) {
    target[p.step - 1] = p.score;
    truth.shallow_steps.push_back(p.step);
  }
  for (const auto& p : spec.overthink) {
    target[p.step - 1] = p.score;
    truth.overthink_steps.push_back(p.step);
  }
  std::sort(truth.shallow_steps.begin(), truth.shallow_steps.end());
  std::sort(truth.overthink_steps.begin(), truth.overthink_steps.end());
  std::set_union(truth.shallow_steps.begin(), truth.shallow_steps.end(), truth.overthink_steps.begin(),
                 truth.overthink_steps.end(), std::back_inserter(truth.bad_steps));
  truth.step_scores = target;

  // per-token, per-layer JSDs rescaled so each step mean hits its target
  const std::vector<int> layers = default_reasoning_layers();
  TraceBundle& b = out.bundle;
  for (int l : layers) b.jsd[l].assign(T, 0.0f);
  for (std::size_t k = 0; k < S; ++k) {
    const std::size_t first = k == 0 ? 1 : k * n;
    const std::size_t last = (k + 1) * n;
    const double raw = target[k] / kDefaultScoreScale;
    std::vector<double> draw((last - first) * layers.size());
    for (double& x : draw) x = raw * (0.5 + unit(rng));
    const double mean = std::accumulate(draw.begin(), draw.end(), 0.0) / static_cast<double>(draw.size());
    const double factor = raw / mean;
    for (std::size_t t = first; t < last; ++t) {
      for (std::size_t li = 0; li < layers.size(); ++li) {
        const double v = draw[(t - first) * layers.size() + li] * factor;
        b.jsd[layers[li]][t] = static_cast<float>(std::min(v, 0.69));
      }
    }
  }

  // perplexity: log ppl follows the standardized score with the requested sign
  const double mu = std::accumulate(target.begin(), target.end(), 0.0) / static_cast<double>(S);
  double ss = 0.0;
  for (double v : target) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / static_cast<double>(S));
  std::vector<double> ppl(S);
  for (std::size_t k = 0; k < S; ++k) {
    const double z = sd > 0.0 ? (target[k] - mu) / sd : 0.0;
    const double log_ppl = std::log(spec.base_ppl) + spec.ppl_sign * spec.ppl_coupling * z + spec.ppl_noise * normal(rng);
    ppl[k] = std::max(1.0, std::exp(log_ppl));
  }
  for (const auto& p : spec.overthink) ppl[p.step - 1] = p.ppl;
  truth.step_ppl = ppl;

  const auto& words = filler_words();
  const std::set<std::size_t> overthinking(truth.overthink_steps.begin(), truth.overthink_steps.end());
  b.tokens.resize(T);
  for (std::size_t k = 0; k < S; ++k) {
    const double mean_lp = -std::log(ppl[k]);
    std::vector<double> lp(n);
    for (double& x : lp) x = mean_lp * (0.7 + 0.6 * unit(rng));
    const double got = std::accumulate(lp.begin(), lp.end(), 0.0) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = k * n + i;
      TokenRecord& tok = b.tokens[t];
      tok.index = t;
      tok.logprob = got != 0.0 ? static_cast<float>(lp[i] * (mean_lp / got)) : 0.0f;
      if (i == 0) {
        tok.surface_text = k == 0 ? "Step" : overthinking.contains(k + 1) ? "\n\nWait" : "\n\nStep";
      } else {
        tok.surface_text = words[static_cast<std::size_t>(unit(rng) * static_cast<double>(words.size())) % words.size()];
      }
    }
  }

  // attention masses between steps
  const std::size_t late = late_start(S, spec.eta);
  const std::set<std::size_t> bad(truth.bad_steps.begin(), truth.bad_steps.end());
  auto jitter = [&]() { return std::exp(spec.attention_noise * normal(rng)); };
  truth.attention_mass.assign(S, std::vector<double>(S, 0.0));
  for (std::size_t k = 1; k < S; ++k) {
    auto& row = truth.attention_mass[k];
    std::vector<std::size_t> bad_before;
    for (std::size_t j = 0; j < k; ++j) {
      if (bad.contains(j + 1)) bad_before.push_back(j);
    }
    const bool backtrack = k + 1 >= late && spec.backtrack_mass > 0.0 && !bad_before.empty();
    double local_mass = spec.predecessor_mass;
    if (backtrack) {
      std::vector<double> w(bad_before.size());
      for (double& x : w) x = jitter();
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      for (std::size_t i = 0; i < bad_before.size(); ++i) row[bad_before[i]] = spec.backtrack_mass * w[i] / total;
      local_mass -= spec.backtrack_mass;
    }
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < k; ++j) {
      if (!backtrack || !bad.contains(j + 1)) others.push_back(j);
    }
    if (others.empty()) {
      for (std::size_t j : bad_before) row[j] += local_mass / static_cast<double>(bad_before.size());
      continue;
    }
    std::vector<double> w(others.size());
    for (std::size_t i = 0; i < others.size(); ++i) {
      w[i] = std::exp(-static_cast<double>(k - 1 - others[i]) / 1.5) * jitter();
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < others.size(); ++i) row[others[i]] = local_mass * w[i] / total;
  }

  Matrix step_attn(S, S);
  for (std::size_t k = 0; k < S; ++k) {
    for (std::size_t j = 0; j < k; ++j) step_attn(k, j) = static_cast<float>(truth.attention_mass[k][j] / static_cast<double>(n));
  }
  b.step_attention = std::move(step_attn);

  BundleManifest& m = b.manifest;
  m.trace_id = spec.trace_id;
  m.model_id = "synthgen";
  m.question_id = spec.question_id;
  m.question_text = "synthetic question " + spec.question_id;
  m.label = spec.label;
  m.num_tokens = T;
  m.num_layers_total = kSynthLayersTotal;
  m.reasoning_layers = layers;
  m.final_layer = kSynthFinalLayer;
  m.num_heads = 1;
  m.mode = BundleMode::compact;
  StepBoundaries bounds;
  for (std::size_t k = 0; k < S; ++k) bounds.steps.push_back({k * n, (k + 1) * n});
  m.boundaries = std::move(bounds);
  seal(b);
  validate(b);
  return out;
}

namespace {

struct Layout {
  std::size_t num_steps;
  std::size_t tokens_per_step;
  double base;
};

Layout random_layout(std::mt19937_64& rng) {
  Layout l{};
  l.num_steps = std::uniform_int_distribution<std::size_t>(8, 14)(rng);
  l.tokens_per_step = std::uniform_int_distribution<std::size_t>(4, 8)(rng);
  l.base = std::uniform_real_distribution<double>(1.5, 3.0)(rng);
  return l;
}

PatternSpec common_spec(const Layout& l, std::uint64_t seed, double difficulty) {
  PatternSpec s;
  s.seed = seed;
  s.num_steps = l.num_steps;
  s.tokens_per_step = l.tokens_per_step;
  s.base_score = l.base;
  s.score_noise = 0.05 + 0.25 * difficulty;
  s.attention_noise = 0.1 + 0.9 * difficulty;
  s.ppl_noise = 0.05 + 0.6 * difficulty;
  return s;
}

void check_difficulty(double d) {
  if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("difficulty must lie in [0, 1]");
}

}  // namespace

PatternSpec hallucinated_spec(std::uint64_t seed, double difficulty) {
  check_difficulty(difficulty);
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  const Layout l = random_layout(rng);
  const double strength = 1.0 - difficulty;
  PatternSpec s = common_spec(l, seed, difficulty);
  s.label = TraceLabel::hallucinated;
  const double noise = s.score_noise;
  auto shallow_target = [&] {
    return std::clamp(l.base * (1.0 - 0.7 * strength) * std::exp(noise * normal(rng)), 0.05 * l.base, 0.97 * l.base);
  };
  s.shallow = {{1, shallow_target()}, {3, shallow_target()}};
  const double over = std::max(l.base * 1.05, (l.base + 4.0 * strength) * std::exp(noise * normal(rng)));
  s.overthink = {{4, over, s.base_ppl * std::exp(0.8 * strength + s.ppl_noise * normal(rng))}};
  for (auto& o : s.overthink) o.ppl = std::max(1.0, o.ppl);
  s.backtrack_mass = 0.5 * strength;
  s.fluctuation = 0.2 * strength;
  s.ppl_sign = 1;
  s.ppl_coupling = 0.3 * strength;
  return s;
}

PatternSpec truthful_spec(std::uint64_t seed, double difficulty) {
  check_difficulty(difficulty);
  std::mt19937_64 rng(derive_seed(seed, 1));
  const Layout l = random_layout(rng);
  PatternSpec s = common_spec(l, seed, difficulty);
  s.label = TraceLabel::truthful;
  s.ppl_sign = -1;
  s.ppl_coupling = 0.3 * (1.0 - difficulty);
  return s;
}

FullBundle gen_full_bundle(const FullDims& dims, std::uint64_t seed, bool zero_jsd) {
  if (dims.tokens < 1 || dims.hidden < 2 || dims.vocab < 2) throw std::invalid_argument("full bundle dims too small");
  if (dims.layers < 2 || dims.reasoning_layers < 1 || dims.reasoning_layers >= dims.layers) {
    throw std::invalid_argument("need at least one reasoning layer below the final layer");
  }
  if (dims.attention_layers > dims.layers) throw std::invalid_argument("too many attention layers");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t T = dims.tokens, H = dims.hidden, V = dims.vocab;

  FullBundle out;
  TraceBundle& b = out.bundle;
  BundleManifest& m = b.manifest;
  m.trace_id = "full-" + std::to_string(seed);
  m.model_id = "synthgen-tiny";
  m.question_id = "q0";
  m.question_text = "tiny random model";
  m.num_tokens = T;
  m.hidden_dim = H;
  m.vocab_size = V;
  m.num_layers_total = dims.layers;
  m.final_layer = static_cast<int>(dims.layers) - 1;
  for (std::size_t i = 0; i < dims.reasoning_layers; ++i) {
    m.reasoning_layers.push_back(m.final_layer - static_cast<int>(dims.reasoning_layers - i));
  }
  for (std::size_t i = 0; i < dims.attention_layers; ++i) m.attention_layers.push_back(static_cast<int>(i));
  m.num_heads = 1;
  m.mode = BundleMode::full;

  b.lens.ln_gamma.resize(H);
  b.lens.ln_beta.resize(H);
  for (std::size_t i = 0; i < H; ++i) {
    b.lens.ln_gamma[i] = static_cast<float>(1.0 + 0.2 * normal(rng));
    b.lens.ln_beta[i] = static_cast<float>(0.1 * normal(rng));
  }
  b.lens.unembed = Matrix(H, V);
  for (float& x : b.lens.unembed.data) x = static_cast<float>(1.5 * normal(rng));

  auto random_hidden = [&] {
    Matrix h(T, H);
    for (float& x : h.data) x = round_to_half(static_cast<float>(2.0 * normal(rng)));
    return h;
  };
  b.hidden[m.final_layer] = random_hidden();
  for (int l : m.reasoning_layers) b.hidden[l] = zero_jsd ? b.hidden[m.final_layer] : random_hidden();

  for (int l : m.attention_layers) {
    Matrix a(T, T);
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> w(t + 1);
      for (double& x : w) x = unit(rng) + 0.01;
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      for (std::size_t s = 0; s <= t; ++s) a(t, s) = round_to_half(static_cast<float>(w[s] / total));
    }
    b.token_attention[l] = std::move(a);
  }

  auto surface = [](std::size_t id) -> std::string {
    if (id == 0) return "\n\nStep";
    if (id == 1) return " Wait";
    return " w" + std::to_string(id);
  };
  out.token_ids.resize(T);
  b.tokens.resize(T);
  out.token_ids[0] = static_cast<std::size_t>(unit(rng) * static_cast<double>(V)) % V;
  b.tokens[0] = {0, surface(out.token_ids[0]), static_cast<float>(-std::log(static_cast<double>(V)))};
  const Matrix& final_h = b.hidden[m.final_layer];
  for (std::size_t i = 1; i < T; ++i) {
    const auto probs = softmax(logit_lens(final_h.row(i - 1), b.lens));
    const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    out.token_ids[i] = best;
    const float lp = std::min(0.0f, static_cast<float>(std::log(probs[best])));
    b.tokens[i] = {i, surface(best), lp};
  }
  seal(b);
  validate(b);
  return out;
}

Dataset gen_dataset(std::size_t n_questions, std::size_t traces_per_question, double hallucination_rate,
                    double difficulty, std::uint64_t seed) {
  if (!(hallucination_rate >= 0.0 && hallucination_rate <= 1.0)) {
    throw std::invalid_argument("hallucination rate must lie in [0, 1]");
  }
  check_difficulty(difficulty);
  if (n_questions == 0 || traces_per_question == 0) throw std::invalid_argument("dataset must be non-empty");
  const std::size_t total = n_questions * traces_per_question;
  Dataset ds;
  ds.entries.resize(total);
  ds.traces.resize(total);
  parallel_for(total, [&](std::size_t idx) {
    const std::size_t q = idx / traces_per_question;
    const std::size_t i = idx % traces_per_question;
    std::mt19937_64 rng(derive_seed(seed, q, i));
    const bool hallucinated = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < hallucination_rate;
    const std::uint64_t trace_seed = rng();
    PatternSpec spec = hallucinated ? hallucinated_spec(trace_seed, difficulty) : truthful_spec(trace_seed, difficulty);
    char qid[32];
    char tid[48];
    std::snprintf(qid, sizeof qid, "q%04zu", q);
    std::snprintf(tid, sizeof tid, "q%04zu-t%02zu", q, i);
    spec.question_id = qid;
    spec.trace_id = tid;
    ds.traces[idx] = gen_compact_trace(spec);
    ds.entries[idx] = {tid, qid, spec.label, tid};
  });
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  nlohmann::json index;
  index["format_version"] = 1;
  index["traces"] = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.entries.size(); ++i) {
    const DatasetEntry& e = dataset.entries[i];
    write_bundle(dataset.traces[i].bundle, root / e.path);
    index["traces"].push_back(
        {{"trace_id", e.trace_id}, {"question_id", e.question_id}, {"label", to_string(e.label)}, {"path", e.path}});
  }
  const auto tmp = root / ".dataset.json.tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << index.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, root / "dataset.json");
}

std::vector<DatasetEntry> read_dataset_index(const std::filesystem::path& root) {
  std::ifstream f(root / "dataset.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + (root / "dataset.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset.json: " + std::string(e.what()));
  }
  std::vector<DatasetEntry> out;
  for (const auto& t : j.at("traces")) {
    DatasetEntry e;
    e.trace_id = t.at("trace_id").get<std::string>();
    e.question_id = t.at("question_id").get<std::string>();
    const auto label = parse_label(t.at("label").get<std::string>());
    if (!label) throw std::runtime_error("dataset.json: unknown label for " + e.trace_id);
    e.label = *label;
    e.path = t.at("path").get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace reasonlens
