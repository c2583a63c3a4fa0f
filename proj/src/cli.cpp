#include "reasonlens/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"
#include "reasonlens/eval_harness.hpp"
#include "reasonlens/grpo_shaping.hpp"
#include "reasonlens/parallel.hpp"
#include "reasonlens/pattern_metrics.hpp"
#include "reasonlens/reasoning_score.hpp"
#include "reasonlens/rhd_detector.hpp"
#include "reasonlens/segmentation.hpp"
#include "reasonlens/synthgen.hpp"
#include "reasonlens/trace_store.hpp"

namespace reasonlens::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

// Shared per-subcommand options.
struct Common {
  std::string json_path;
  std::string config_path;
  std::size_t threads = 0;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--json", c.json_path, "Write the JSON report to this file instead of stdout");
  sub->add_option("--config", c.config_path, "JSON file with flat keys mirroring the flags; flags take precedence");
  sub->add_option("--threads", c.threads, "Worker threads (default: $REASONLENS_THREADS or 1)");
}

void emit(const json& report, const Common& c, std::ostream& out) {
  const std::string text = report.dump(2) + "\n";
  if (c.json_path.empty()) {
    out << text;
  } else {
    write_text_file(c.json_path, text);
  }
}

struct FeatureFlags {
  std::vector<int> layers;
  std::vector<int> attn_layers;
  double scale = kDefaultScoreScale;
  PatternConfig pattern;
};

void add_feature_flags(CLI::App* sub, FeatureFlags& f) {
  sub->add_option("--layers", f.layers, "Reasoning layers (default: the bundle's own)")->delimiter(',');
  sub->add_option("--attn-layers", f.attn_layers, "Attention layers (default: all stored)")->delimiter(',');
  sub->add_option("--scale", f.scale, "Display scale for step scores")->capture_default_str();
  sub->add_option("--r", f.pattern.r, "Early window is the first ceil(S/r) steps")->capture_default_str();
  sub->add_option("--eta", f.pattern.eta, "Late steps start at ceil(eta*S)")->capture_default_str();
  sub->add_option("--k-att", f.pattern.k_att, "Top-K attended predecessors")->capture_default_str();
  sub->add_option("--tau", f.pattern.tau, "Overthinking threshold (scaled)")->capture_default_str();
  sub->add_flag("--normalize-by-found", f.pattern.normalize_by_found,
                "Divide the attention indicator count by the predecessors found instead of K");
}

FeatureOptions feature_options(const FeatureFlags& f) {
  FeatureOptions o;
  o.pattern = f.pattern;
  o.reasoning_layers = f.layers;
  o.attention_layers = f.attn_layers;
  o.scale = f.scale;
  return o;
}

json features_json(const FeatureVector& f) {
  return {{"trace_id", f.trace_id},   {"question_id", f.question_id}, {"label", to_string(f.label)},
          {"avg_score", f.avg_score}, {"cv", f.cv},                   {"attn_score", f.attn_score},
          {"pcc", f.pcc}};
}

FeatureVector features_from_json(const json& j) {
  FeatureVector f;
  f.trace_id = j.at("trace_id").get<std::string>();
  f.question_id = j.value("question_id", std::string{});
  const auto label = parse_label(j.value("label", std::string{"unlabeled"}));
  if (!label) throw std::runtime_error("unknown label for trace " + f.trace_id);
  f.label = *label;
  f.avg_score = j.at("avg_score").get<double>();
  f.cv = j.at("cv").get<double>();
  f.attn_score = j.at("attn_score").get<double>();
  f.pcc = j.at("pcc").get<double>();
  return f;
}

std::vector<FeatureVector> read_features(const fs::path& path) {
  const json j = read_json_file(path);
  std::vector<FeatureVector> out;
  const json& list = j.contains("features") && j["features"].is_array() ? j["features"] : j;
  if (!list.is_array()) throw std::runtime_error(path.string() + ": expected a feature list");
  for (const auto& item : list) out.push_back(features_from_json(item));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.trace_id < b.trace_id; });
  return out;
}

RhdWeights read_weights(const fs::path& path) {
  const json j = read_json_file(path);
  const json& a = j.contains("alpha") ? j["alpha"] : j.at("weights").at("alpha");
  if (!a.is_array() || a.size() != 4) throw std::runtime_error(path.string() + ": alpha must hold 4 weights");
  RhdWeights w;
  for (std::size_t i = 0; i < 4; ++i) {
    w.alpha[i] = a[i].get<double>();
    if (!(w.alpha[i] >= 0.0)) throw std::runtime_error(path.string() + ": weights must be non-negative");
  }
  return w;
}

std::string features_csv(std::span<const FeatureVector> fs) {
  std::string s = "trace_id,question_id,label,avg_score,cv,attn_score,pcc\n";
  for (const auto& f : fs) {
    s += f.trace_id + "," + f.question_id + "," + std::string(to_string(f.label)) + "," + format_double(f.avg_score) +
         "," + format_double(f.cv) + "," + format_double(f.attn_score) + "," + format_double(f.pcc) + "\n";
  }
  return s;
}

StepBoundaries read_boundaries(const fs::path& path) {
  const json j = read_json_file(path);
  const json& list = j.is_object() ? j.at("steps") : j;
  StepBoundaries b;
  for (const auto& s : list) {
    if (!s.is_array() || s.size() != 2) throw std::invalid_argument(path.string() + ": steps must be [start, end) pairs");
    b.steps.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>()});
  }
  return b;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

json spans_json(const StepBoundaries& b) {
  json a = json::array();
  for (const auto& s : b.steps) a.push_back({s.start, s.end});
  return a;
}

// Opens every bundle listed in a dataset index and extracts features in parallel.
std::vector<FeatureVector> dataset_features(const fs::path& root, const FeatureOptions& opts) {
  auto entries = read_dataset_index(root);
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.trace_id < b.trace_id; });
  std::vector<FeatureVector> out(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const TraceBundle b = open_bundle(root / entries[i].path);
    out[i] = extract_features(b, bundle_boundaries(b), opts);
  });
  return out;
}

// --- subcommand handlers ----------------------------------------------------

json inspect_report(const fs::path& dir) {
  const TraceBundle b = open_bundle(dir);
  const BundleManifest& m = b.manifest;
  json blobs = json::object();
  for (const auto& [name, info] : m.blobs) {
    blobs[name] = {{"shape", info.shape}, {"dtype", to_string(info.dtype)}, {"crc32", info.crc32}};
  }
  const StepBoundaries steps = bundle_boundaries(b);
  return {{"trace_id", m.trace_id},
          {"model_id", m.model_id},
          {"question_id", m.question_id},
          {"label", to_string(m.label)},
          {"mode", to_string(m.mode)},
          {"num_tokens", m.num_tokens},
          {"hidden_dim", m.hidden_dim},
          {"vocab_size", m.vocab_size},
          {"num_layers_total", m.num_layers_total},
          {"reasoning_layers", m.reasoning_layers},
          {"final_layer", m.final_layer},
          {"attention_layers", m.attention_layers},
          {"num_heads", m.num_heads},
          {"num_steps", steps.size()},
          {"boundaries_source", m.boundaries ? "manifest" : "segmentation"},
          {"blobs", blobs},
          {"valid", true}};
}

PatternSpec spec_from_json(const json& j) {
  PatternSpec s;
  s.trace_id = j.value("trace_id", s.trace_id);
  s.question_id = j.value("question_id", s.question_id);
  s.num_steps = j.value("num_steps", s.num_steps);
  s.tokens_per_step = j.value("tokens_per_step", s.tokens_per_step);
  s.base_score = j.value("base_score", s.base_score);
  s.score_noise = j.value("score_noise", s.score_noise);
  s.backtrack_mass = j.value("backtrack_mass", s.backtrack_mass);
  s.predecessor_mass = j.value("predecessor_mass", s.predecessor_mass);
  s.attention_noise = j.value("attention_noise", s.attention_noise);
  s.fluctuation = j.value("fluctuation", s.fluctuation);
  s.base_ppl = j.value("base_ppl", s.base_ppl);
  s.ppl_coupling = j.value("ppl_coupling", s.ppl_coupling);
  s.ppl_sign = j.value("ppl_sign", s.ppl_sign);
  s.ppl_noise = j.value("ppl_noise", s.ppl_noise);
  s.eta = j.value("eta", s.eta);
  s.seed = j.value("seed", s.seed);
  const auto label = parse_label(j.value("label", std::string(to_string(s.label))));
  if (!label || *label == TraceLabel::unlabeled) throw std::invalid_argument("spec label must be hallucinated or truthful");
  s.label = *label;
  for (const auto& p : j.value("shallow", json::array())) s.shallow.push_back({p.at("step"), p.at("score")});
  for (const auto& p : j.value("overthink", json::array())) {
    s.overthink.push_back({p.at("step"), p.at("score"), p.at("ppl")});
  }
  return s;
}

json truth_json(const GroundTruth& t) {
  return {{"step_scores", t.step_scores},     {"step_ppl", t.step_ppl},
          {"shallow_steps", t.shallow_steps}, {"overthink_steps", t.overthink_steps},
          {"bad_steps", t.bad_steps},         {"attention_mass", t.attention_mass}};
}

Trajectory trajectory_from_json(const json& j) {
  Trajectory traj;
  for (const auto& s : j.at("steps")) {
    TrajectoryStep step;
    step.score = s.at("score").get<double>();
    step.reward = s.value("reward", 0.0);
    const auto& tok = s.at("tokens");
    if (!tok.is_array() || tok.size() != 2) throw std::invalid_argument("step tokens must be [start, end)");
    step.tokens = {tok[0].get<std::size_t>(), tok[1].get<std::size_t>()};
    traj.steps.push_back(step);
  }
  return traj;
}

double read_oracle(const std::string& command, std::size_t k, std::size_t rollouts) {
  const std::string full = command + " " + std::to_string(k) + " " + std::to_string(rollouts);
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(full.c_str(), "r"), pclose);
  if (!pipe) throw std::runtime_error("cannot start oracle: " + command);
  std::string output;
  char buf[256];
  while (std::fgets(buf, sizeof buf, pipe.get())) output += buf;
  const int status = pclose(pipe.release());
  if (status != 0) throw std::runtime_error("oracle exited with status " + std::to_string(status) + " for k=" + std::to_string(k));
  try {
    std::size_t used = 0;
    const double v = std::stod(output, &used);
    if (output.find_first_not_of(" \t\r\n", used) != std::string::npos) throw std::invalid_argument("trailing text");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("oracle output is not a number: '" + output + "'");
  }
}

// Appends flags from a --config JSON file that the command line does not set.
std::vector<std::string> apply_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    }
  }
  if (path.empty()) return args;
  const json cfg = read_json_file(path);
  if (!cfg.is_object()) throw UsageError("config file must hold a JSON object");
  auto present = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> out = args;
  for (const auto& [key, value] : cfg.items()) {
    if (key == "config") continue;
    const std::string flag = "--" + key;
    if (present(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
      continue;
    }
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_array()) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (i) text += ",";
        text += value[i].is_string() ? value[i].get<std::string>() : value[i].dump();
      }
    } else {
      text = value.dump();
    }
    out.push_back(flag);
    out.push_back(text);
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"reasonlens: step-level reasoning scores, hallucination patterns and reward shaping"};
  app.require_subcommand(1);
  app.name("reasonlens");

  // inspect
  Common inspect_c;
  std::string inspect_bundle;
  auto* inspect = app.add_subcommand("inspect", "Validate a bundle and summarise its manifest");
  inspect->add_option("--bundle", inspect_bundle, "Bundle directory")->required();
  add_common(inspect, inspect_c);

  // segment
  Common segment_c;
  std::string segment_bundle, segment_tokens, segment_markers_file;
  std::vector<std::string> segment_markers;
  std::string segment_delim = "\n\n";
  auto* segment_cmd = app.add_subcommand("segment", "Split a trace into reasoning steps");
  segment_cmd->add_option("--bundle", segment_bundle, "Bundle directory");
  segment_cmd->add_option("--tokens", segment_tokens, "JSON array of token surface strings");
  segment_cmd->add_option("--markers", segment_markers, "Step markers (comma separated)")->delimiter(',');
  segment_cmd->add_option("--markers-file", segment_markers_file, "Step markers, one per line");
  segment_cmd->add_option("--delimiter", segment_delim, "Formatting delimiter");
  add_common(segment_cmd, segment_c);

  // score
  Common score_c;
  FeatureFlags score_f;
  std::string score_bundle, score_csv, score_bounds;
  bool score_token_jsd = false;
  auto* score = app.add_subcommand("score", "Per-step reasoning scores");
  score->add_option("--bundle", score_bundle, "Bundle directory")->required();
  score->add_option("--boundaries", score_bounds, "Step boundaries JSON (default: manifest, else segmentation)");
  score->add_option("--csv", score_csv, "Also write step,start,end,score,scaled as CSV");
  score->add_flag("--token-jsd", score_token_jsd, "Include per-token, per-layer JSDs");
  add_feature_flags(score, score_f);
  add_common(score, score_c);

  // features
  Common feat_c;
  FeatureFlags feat_f;
  std::string feat_bundle, feat_dataset, feat_csv;
  auto* features = app.add_subcommand("features", "Detector features for one bundle or a dataset");
  auto* fb = features->add_option("--bundle", feat_bundle, "Bundle directory");
  auto* fd = features->add_option("--dataset", feat_dataset, "Dataset directory holding dataset.json");
  fb->excludes(fd);
  features->add_option("--csv", feat_csv, "CSV output: per-step series for a bundle, feature table for a dataset");
  add_feature_flags(features, feat_f);
  add_common(features, feat_c);

  // detect
  Common detect_c;
  FeatureFlags detect_f;
  std::string detect_bundle, detect_dataset, detect_features, detect_weights;
  std::optional<double> detect_threshold;
  auto* detect = app.add_subcommand("detect", "Composite hallucination score with given weights");
  auto* db = detect->add_option("--bundle", detect_bundle, "Bundle directory");
  auto* dd = detect->add_option("--dataset", detect_dataset, "Dataset directory");
  auto* dfe = detect->add_option("--features", detect_features, "Features JSON from `features`");
  db->excludes(dd)->excludes(dfe);
  dd->excludes(dfe);
  detect->add_option("--weights", detect_weights, "Weights JSON (alpha) from `fit`")->required();
  detect->add_option("--threshold", detect_threshold, "Flag traces whose score is >= this value");
  add_feature_flags(detect, detect_f);
  add_common(detect, detect_c);

  // fit
  Common fit_c;
  std::string fit_features;
  FitOptions fit_opts;
  std::string fit_metric = "auc";
  auto* fit = app.add_subcommand("fit", "Grid-search detector weights with two-fold validation");
  fit->add_option("--features", fit_features, "Features JSON from `features`")->required();
  fit->add_option("--grid-step", fit_opts.grid_step, "Grid step over [0, 1]")->capture_default_str();
  fit->add_option("--metric", fit_metric, "auc | pcc | mc1 | mc2 | mc3")->capture_default_str();
  fit->add_option("--seed", fit_opts.seed, "Fold split seed")->capture_default_str();
  add_common(fit, fit_c);

  // eval
  Common eval_c;
  std::string eval_features, eval_weights, eval_scores, eval_labels, eval_norm = "softmax";
  bool eval_grouped = false;
  auto* eval = app.add_subcommand("eval", "AUC, PCC and MC1/MC2/MC3 of hallucination scores");
  auto* ef = eval->add_option("--features", eval_features, "Features JSON (with --weights)");
  auto* ew = eval->add_option("--weights", eval_weights, "Weights JSON");
  auto* es = eval->add_option("--scores", eval_scores, "Scored traces JSON from `detect`");
  eval->add_option("--labels", eval_labels, "JSON object trace_id -> label, overriding embedded labels");
  eval->add_flag("--grouped", eval_grouped, "Require question groups for MC1/MC2/MC3");
  ef->needs(ew);
  ew->needs(ef);
  es->excludes(ef);
  eval->add_option("--mc2-norm", eval_norm, "softmax | min_shift")->capture_default_str();
  add_common(eval, eval_c);

  // shape
  Common shape_c;
  ShapingConfig shape_cfg;
  std::string shape_variant = "clip_to_zero";
  std::string shape_traj;
  auto* shape = app.add_subcommand("shape", "Shaped step rewards, standardization and token advantages");
  shape->add_option("--trajectories", shape_traj, "Trajectory group JSON")->required();
  auto add_shaping = [](CLI::App* sub, ShapingConfig& cfg, std::string& variant) {
    sub->add_option("--alpha", cfg.alpha, "Weighting strength")->capture_default_str();
    sub->add_option("--tau", cfg.tau, "Overthinking threshold (scaled)")->capture_default_str();
    sub->add_option("--gamma", cfg.gamma, "Discount")->capture_default_str();
    sub->add_option("--variant", variant, "clip_to_zero | min_clip")->capture_default_str();
  };
  add_shaping(shape, shape_cfg, shape_variant);
  add_common(shape, shape_c);

  // verify-shaping
  Common verify_c;
  ShapingConfig verify_cfg;
  std::string verify_variant = "clip_to_zero";
  std::uint64_t verify_seed = 7;
  std::size_t verify_mdps = 50, verify_policies = 10, verify_states = 20, verify_actions = 4, verify_horizon = 10;
  auto* verify = app.add_subcommand("verify-shaping", "Check optimal-policy invariance on random tabular MDPs");
  verify->add_option("--seed", verify_seed, "Base seed")->capture_default_str();
  verify->add_option("--num-mdps", verify_mdps, "Number of MDPs")->capture_default_str();
  verify->add_option("--policies", verify_policies, "Random fixed policies per MDP")->capture_default_str();
  verify->add_option("--max-states", verify_states)->capture_default_str();
  verify->add_option("--max-actions", verify_actions)->capture_default_str();
  verify->add_option("--max-horizon", verify_horizon)->capture_default_str();
  add_shaping(verify, verify_cfg, verify_variant);
  add_common(verify, verify_c);

  // synth
  Common synth_c;
  std::string synth_spec, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate synthetic bundles");
  synth->add_option("--spec", synth_spec, "Pattern spec JSON");
  synth->add_option("--out", synth_out, "Output bundle directory");
  add_common(synth, synth_c);
  synth->require_subcommand(0, 1);

  Common ds_c;
  std::size_t ds_n = 200, ds_per_q = 5;
  double ds_rate = 0.5, ds_difficulty = 0.2;
  std::uint64_t ds_seed = 7;
  std::string ds_out;
  auto* ds = synth->add_subcommand("dataset", "Labelled dataset of compact bundles grouped by question");
  ds->add_option("--n", ds_n, "Total number of traces")->capture_default_str();
  ds->add_option("--per-q", ds_per_q, "Traces per question")->capture_default_str();
  ds->add_option("--rate", ds_rate, "Hallucination rate")->capture_default_str();
  ds->add_option("--difficulty", ds_difficulty, "0 = separable, 1 = noise only")->capture_default_str();
  ds->add_option("--seed", ds_seed, "Seed")->capture_default_str();
  ds->add_option("--out", ds_out, "Output directory")->required();
  add_common(ds, ds_c);

  Common full_c;
  FullDims full_dims;
  std::uint64_t full_seed = 7;
  bool full_zero = false;
  std::string full_out;
  auto* full = synth->add_subcommand("full", "Tiny random full-mode bundle");
  full->add_option("--tokens", full_dims.tokens)->capture_default_str();
  full->add_option("--hidden", full_dims.hidden)->capture_default_str();
  full->add_option("--vocab", full_dims.vocab)->capture_default_str();
  full->add_option("--layers", full_dims.layers)->capture_default_str();
  full->add_option("--reasoning-layers", full_dims.reasoning_layers)->capture_default_str();
  full->add_option("--attention-layers", full_dims.attention_layers)->capture_default_str();
  full->add_option("--seed", full_seed)->capture_default_str();
  full->add_flag("--zero-jsd", full_zero, "Copy the final layer into every reasoning layer");
  full->add_option("--out", full_out, "Output bundle directory")->required();
  add_common(full, full_c);

  // locate
  Common locate_c;
  std::size_t locate_steps = 0, locate_rollouts = 16;
  double locate_threshold = 0.9;
  std::string locate_oracle;
  auto* locate = app.add_subcommand("locate", "Binary-search the first failing prefix with a rollout oracle");
  locate->add_option("--steps", locate_steps, "Number of steps in the trace")->required();
  locate->add_option("--oracle,--oracle-cmd", locate_oracle,
                     "Command run as `<cmd> <k> <rollouts>`; prints the failure fraction for the first k steps")
      ->required();
  locate->add_option("--threshold", locate_threshold, "Failure fraction that marks a prefix as failing")
      ->capture_default_str();
  locate->add_option("--rollouts", locate_rollouts)->capture_default_str();
  add_common(locate, locate_c);

  // compact
  Common compact_c;
  std::string compact_bundle, compact_out;
  auto* compact_cmd = app.add_subcommand("compact", "Convert a full-mode bundle to compact mode");
  compact_cmd->add_option("--bundle", compact_bundle, "Full-mode bundle")->required();
  compact_cmd->add_option("--out", compact_out, "Output bundle directory")->required();
  add_common(compact_cmd, compact_c);

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();
  for (auto* sub : synth->get_subcommands({})) sub->fallthrough();

  std::vector<std::string> args;
  try {
    args = apply_config(raw_args);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  std::vector<std::string> argv_store;
  argv_store.push_back("reasonlens");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return kExitUsage;
  }

  try {
    for (const Common* c : {&inspect_c, &segment_c, &score_c, &feat_c, &detect_c, &fit_c, &eval_c, &shape_c, &verify_c,
                            &synth_c, &ds_c, &full_c, &locate_c, &compact_c}) {
      if (c->threads > 0) set_thread_count(c->threads);
    }

    if (*inspect) {
      emit(inspect_report(inspect_bundle), inspect_c, out);
      return kExitOk;
    }

    if (*segment_cmd) {
      if (segment_bundle.empty() == segment_tokens.empty()) throw UsageError("segment needs exactly one of --bundle or --tokens");
      std::vector<TokenRecord> tokens;
      if (!segment_bundle.empty()) {
        tokens = open_bundle(segment_bundle).tokens;
      } else {
        const json j = read_json_file(segment_tokens);
        if (!j.is_array()) throw std::invalid_argument("--tokens must hold a JSON array of strings");
        for (std::size_t i = 0; i < j.size(); ++i) tokens.push_back({i, j[i].get<std::string>(), 0.0f});
      }
      SegmentationRule rule;
      if (!segment_markers.empty()) rule.markers = segment_markers;
      if (!segment_markers_file.empty()) rule.markers = read_lines(segment_markers_file);
      rule.delimiter = segment_delim;
      const StepBoundaries b = segment(tokens, rule);
      emit({{"num_tokens", tokens.size()}, {"num_steps", b.size()}, {"steps", spans_json(b)}}, segment_c, out);
      return kExitOk;
    }

    if (*score) {
      score_f.pattern.validate();
      const TraceBundle b = open_bundle(score_bundle);
      const StepBoundaries bounds = score_bounds.empty() ? bundle_boundaries(b) : read_boundaries(score_bounds);
      const StepScores s = step_scores(b, bounds, score_f.layers, score_f.scale);
      const auto scaled = s.scaled();
      json steps = json::array();
      std::string csv = "step,start,end,score,scaled\n";
      for (std::size_t k = 0; k < s.scores.size(); ++k) {
        steps.push_back({{"step", k + 1},
                         {"start", bounds[k].start},
                         {"end", bounds[k].end},
                         {"score", s.scores[k]},
                         {"scaled", scaled[k]}});
        csv += std::to_string(k + 1) + "," + std::to_string(bounds[k].start) + "," + std::to_string(bounds[k].end) + "," +
               format_double(s.scores[k]) + "," + format_double(scaled[k]) + "\n";
      }
      const std::vector<int> layers = score_f.layers.empty() ? b.manifest.reasoning_layers : score_f.layers;
      json report = {{"trace_id", s.trace_id}, {"scale", s.scale}, {"layers", layers}, {"steps", steps}};
      if (score_token_jsd) {
        json per_layer = json::object();
        for (const auto& [layer, values] : token_jsds(b, layers)) per_layer[std::to_string(layer)] = values;
        report["token_jsd"] = per_layer;
      }
      emit(report, score_c, out);
      if (!score_csv.empty()) write_text_file(score_csv, csv);
      return kExitOk;
    }

    if (*features) {
      const FeatureOptions opts = feature_options(feat_f);
      if (feat_bundle.empty() == feat_dataset.empty()) throw UsageError("features needs --bundle or --dataset");
      if (!feat_bundle.empty()) {
        const TraceBundle b = open_bundle(feat_bundle);
        const StepBoundaries bounds = bundle_boundaries(b);
        const TraceAnalysis a = analyze_trace(b, bounds, opts);
        const auto scaled = a.scores.scaled();
        json steps = json::array();
        std::string csv = "step,score,ppl\n";
        for (std::size_t k = 0; k < scaled.size(); ++k) {
          steps.push_back({{"step", k + 1}, {"score", scaled[k]}, {"ppl", a.ppl[k]}});
          csv += std::to_string(k + 1) + "," + format_double(scaled[k]) + "," + format_double(a.ppl[k]) + "\n";
        }
        json triples = json::array();
        for (const auto& t : classify_triples(scaled, b.manifest.label, opts.pattern)) {
          if (t.kind != TripleKind::none) triples.push_back({{"first_step", t.first + 1}, {"kind", to_string(t.kind)}});
        }
        emit({{"features", features_json(a.features)}, {"steps", steps}, {"triples", triples}}, feat_c, out);
        if (!feat_csv.empty()) write_text_file(feat_csv, csv);
      } else {
        const auto fv = dataset_features(feat_dataset, opts);
        json list = json::array();
        for (const auto& f : fv) list.push_back(features_json(f));
        emit({{"format_version", 1}, {"features", list}}, feat_c, out);
        if (!feat_csv.empty()) write_text_file(feat_csv, features_csv(fv));
      }
      return kExitOk;
    }

    if (*detect) {
      const RhdWeights w = read_weights(detect_weights);
      const FeatureOptions opts = feature_options(detect_f);
      std::vector<FeatureVector> fv;
      if (!detect_bundle.empty()) {
        const TraceBundle b = open_bundle(detect_bundle);
        fv.push_back(extract_features(b, bundle_boundaries(b), opts));
      } else if (!detect_dataset.empty()) {
        fv = dataset_features(detect_dataset, opts);
      } else if (!detect_features.empty()) {
        fv = read_features(detect_features);
      } else {
        throw UsageError("detect needs --bundle, --dataset or --features");
      }
      json list = json::array();
      for (const auto& f : fv) {
        json j = features_json(f);
        j["score"] = hallucination_score(f, w);
        if (detect_threshold) j["flagged"] = j["score"].get<double>() >= *detect_threshold;
        list.push_back(j);
      }
      json report = {{"alpha", w.alpha}, {"traces", list}};
      if (detect_threshold) report["threshold"] = *detect_threshold;
      emit(report, detect_c, out);
      return kExitOk;
    }

    if (*fit) {
      const auto metric = parse_fit_metric(fit_metric);
      if (!metric) throw UsageError("unknown metric '" + fit_metric + "'");
      fit_opts.metric = *metric;
      const auto fv = read_features(fit_features);
      const FitResult r = fit_weights(fv, fit_opts);
      json folds = json::array();
      for (const auto& f : r.folds) {
        folds.push_back({{"question_ids", f.question_ids},
                         {"traces", f.traces},
                         {"train_best", f.train_best.alpha},
                         {"train_metric", f.train_metric},
                         {"heldout_metric", f.heldout_metric}});
      }
      emit({{"alpha", r.weights.alpha},
            {"metric", to_string(fit_opts.metric)},
            {"grid_step", fit_opts.grid_step},
            {"seed", fit_opts.seed},
            {"combinations", r.combinations},
            {"mean_fold_metric", r.mean_fold_metric},
            {"fold_metric", r.fold_metric},
            {"mean_heldout_metric", r.mean_heldout_metric},
            {"folds", folds}},
           fit_c, out);
      return kExitOk;
    }

    if (*eval) {
      Mc2Normalization norm;
      if (eval_norm == "softmax") {
        norm = Mc2Normalization::softmax;
      } else if (eval_norm == "min_shift") {
        norm = Mc2Normalization::min_shift;
      } else {
        throw UsageError("unknown --mc2-norm '" + eval_norm + "'");
      }
      if (eval_scores.empty() && eval_features.empty()) throw UsageError("eval needs --features/--weights or --scores");
      std::vector<FeatureVector> fv;
      std::vector<double> given;
      json alpha = nullptr;
      if (!eval_features.empty()) {
        fv = read_features(eval_features);
        const RhdWeights w = read_weights(eval_weights);
        alpha = w.alpha;
        for (const auto& f : fv) given.push_back(hallucination_score(f, w));
      } else {
        const json j = read_json_file(eval_scores);
        const json& list = j.contains("traces") ? j["traces"] : j;
        std::vector<std::pair<FeatureVector, double>> rows;
        for (const auto& t : list) {
          FeatureVector f;
          f.trace_id = t.at("trace_id").get<std::string>();
          f.question_id = t.value("question_id", std::string{});
          f.label = parse_label(t.value("label", std::string{"unlabeled"})).value_or(TraceLabel::unlabeled);
          rows.emplace_back(f, t.at("score").get<double>());
        }
        std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first.trace_id < b.first.trace_id; });
        for (auto& [f, s] : rows) {
          fv.push_back(f);
          given.push_back(s);
        }
      }
      if (!eval_labels.empty()) {
        const json lj = read_json_file(eval_labels);
        for (auto& f : fv) {
          if (!lj.contains(f.trace_id)) continue;
          const auto l = parse_label(lj[f.trace_id].get<std::string>());
          if (!l) throw std::invalid_argument("unknown label for trace '" + f.trace_id + "'");
          f.label = *l;
        }
      }
      std::vector<double> scores;
      std::vector<int> labels;
      std::map<std::string, QuestionGroup> groups;
      for (std::size_t i = 0; i < fv.size(); ++i) {
        const FeatureVector& f = fv[i];
        if (f.label == TraceLabel::unlabeled) throw std::invalid_argument("trace '" + f.trace_id + "' is unlabeled");
        const double s = given[i];
        const int l = f.label == TraceLabel::hallucinated ? 1 : 0;
        scores.push_back(s);
        labels.push_back(l);
        QuestionGroup& g = groups[f.question_id];
        g.question_id = f.question_id;
        g.scores.push_back(s);
        g.labels.push_back(l);
      }
      std::vector<QuestionGroup> eligible;
      for (auto& [id, g] : groups) {
        if (has_both_labels(g)) eligible.push_back(g);
      }
      const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
      if (eval_grouped && eligible.empty()) {
        throw std::invalid_argument("no question group holds both hallucinated and truthful traces");
      }
      json report = {{"alpha", alpha},
                     {"num_traces", fv.size()},
                     {"num_groups", groups.size()},
                     {"num_mc_groups", eligible.size()},
                     {"mc2_normalization", eval_norm}};
      report["auc"] = both ? json(auc(scores, labels)) : json(nullptr);
      report["pcc"] = both ? json(pcc_metric(scores, labels)) : json(nullptr);
      if (!eligible.empty()) {
        const McMetrics mc = mc_metrics(eligible, norm);
        report["mc1"] = mc.mc1;
        report["mc2"] = mc.mc2;
        report["mc3"] = mc.mc3;
      } else {
        report["mc1"] = report["mc2"] = report["mc3"] = nullptr;
      }
      emit(report, eval_c, out);
      return kExitOk;
    }

    auto parse_variant = [](const std::string& text) {
      const auto v = parse_clip_variant(text);
      if (!v) throw UsageError("unknown --variant '" + text + "'");
      return *v;
    };

    if (*shape) {
      shape_cfg.variant = parse_variant(shape_variant);
      shape_cfg.validate();
      const json j = read_json_file(shape_traj);
      const json& list = j.contains("trajectories") ? j["trajectories"] : j;
      if (!list.is_array()) throw std::invalid_argument("trajectories must be a JSON array");
      std::vector<Trajectory> group;
      for (const auto& t : list) group.push_back(trajectory_from_json(t));
      const GroupShaping g = shape_group(group, shape_cfg);
      if (g.degenerate) err << "warning: shaped rewards have zero spread; standardized rewards set to 0\n";
      json trajs = json::array();
      for (std::size_t i = 0; i < group.size(); ++i) {
        trajs.push_back({{"potentials", potentials(group[i], shape_cfg)},
                         {"shaped", g.shaped[i]},
                         {"standardized", g.standardized[i]},
                         {"advantages", g.advantages[i]}});
      }
      emit({{"alpha", shape_cfg.alpha},
            {"tau", shape_cfg.tau},
            {"gamma", shape_cfg.gamma},
            {"variant", to_string(shape_cfg.variant)},
            {"degenerate", g.degenerate},
            {"trajectories", trajs}},
           shape_c, out);
      return kExitOk;
    }

    if (*verify) {
      verify_cfg.variant = parse_variant(verify_variant);
      verify_cfg.validate();
      std::vector<json> rows(verify_mdps);
      std::vector<InvarianceReport> reports(verify_mdps);
      parallel_for(verify_mdps, [&](std::size_t i) {
        const std::uint64_t seed = derive_seed(verify_seed, i);
        const TabularMdp mdp = random_mdp(seed, verify_states, verify_actions, verify_horizon);
        std::vector<TabularPolicy> policies;
        for (std::size_t p = 0; p < verify_policies; ++p) policies.push_back(random_policy(mdp, derive_seed(seed, p, 1)));
        reports[i] = verify_policy_invariance(mdp, verify_cfg, policies);
        rows[i] = {{"index", i},
                   {"seed", seed},
                   {"states", mdp.num_states},
                   {"actions", mdp.num_actions},
                   {"horizon", mdp.horizon},
                   {"optimal_actions_identical", reports[i].optimal_actions_identical},
                   {"mismatched_decisions", reports[i].mismatched_decisions},
                   {"max_optimal_value_gap", reports[i].max_optimal_value_gap},
                   {"max_policy_value_gap", reports[i].max_policy_value_gap}};
      });
      bool identical = true;
      double opt_gap = 0.0, pol_gap = 0.0;
      for (const auto& r : reports) {
        identical = identical && r.optimal_actions_identical;
        opt_gap = std::max(opt_gap, r.max_optimal_value_gap);
        pol_gap = std::max(pol_gap, r.max_policy_value_gap);
      }
      const bool pass = identical && opt_gap <= 1e-9 && pol_gap <= 1e-9;
      emit({{"num_mdps", verify_mdps},
            {"policies_per_mdp", verify_policies},
            {"variant", to_string(verify_cfg.variant)},
            {"all_optimal_actions_identical", identical},
            {"max_optimal_value_gap", opt_gap},
            {"max_policy_value_gap", pol_gap},
            {"pass", pass},
            {"mdps", rows}},
           verify_c, out);
      return pass ? kExitOk : kExitValidation;
    }

    if (*ds) {
      if (ds_per_q == 0 || ds_n == 0 || ds_n % ds_per_q != 0) throw UsageError("--n must be a positive multiple of --per-q");
      const Dataset d = gen_dataset(ds_n / ds_per_q, ds_per_q, ds_rate, ds_difficulty, ds_seed);
      write_dataset(d, ds_out);
      std::size_t hallucinated = 0;
      for (const auto& e : d.entries) hallucinated += e.label == TraceLabel::hallucinated ? 1 : 0;
      emit({{"out", ds_out},
            {"num_traces", d.entries.size()},
            {"num_questions", ds_n / ds_per_q},
            {"hallucinated", hallucinated},
            {"truthful", d.entries.size() - hallucinated},
            {"difficulty", ds_difficulty},
            {"rate", ds_rate},
            {"seed", ds_seed}},
           ds_c, out);
      return kExitOk;
    }

    if (*full) {
      const FullBundle fb_out = gen_full_bundle(full_dims, full_seed, full_zero);
      write_bundle(fb_out.bundle, full_out);
      emit({{"out", full_out}, {"trace_id", fb_out.bundle.manifest.trace_id}, {"token_ids", fb_out.token_ids}}, full_c, out);
      return kExitOk;
    }

    if (*synth) {
      if (synth_spec.empty() || synth_out.empty()) throw UsageError("synth needs --spec and --out, or a subcommand");
      const SyntheticTrace t = gen_compact_trace(spec_from_json(read_json_file(synth_spec)));
      write_bundle(t.bundle, synth_out);
      emit({{"out", synth_out}, {"trace_id", t.bundle.manifest.trace_id}, {"truth", truth_json(t.truth)}}, synth_c, out);
      return kExitOk;
    }

    if (*locate) {
      if (locate_steps == 0) throw UsageError("--steps must be positive");
      const LocateResult r = locate_hallucination_step(
          locate_steps, [&](std::size_t k, std::size_t n) { return read_oracle(locate_oracle, k, n); }, locate_threshold,
          locate_rollouts);
      json obs = json::array();
      for (const auto& [k, v] : r.observations) obs.push_back({{"k", k}, {"failure", v}});
      emit({{"step", r.step ? json(*r.step) : json(nullptr)}, {"oracle_calls", r.oracle_calls}, {"observations", obs}},
           locate_c, out);
      return kExitOk;
    }

    if (*compact_cmd) {
      const TraceBundle b = open_bundle(compact_bundle);
      const StepBoundaries bounds = bundle_boundaries(b);
      const TraceBundle c = compact(b, bounds);
      write_bundle(c, compact_out);
      emit({{"out", compact_out}, {"trace_id", c.manifest.trace_id}, {"num_steps", bounds.size()}}, compact_c, out);
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const MonotonicityError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  err << app.help();
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace reasonlens::cli
