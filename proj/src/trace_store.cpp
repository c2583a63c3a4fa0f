#include "reasonlens/trace_store.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

#include <unistd.h>

#include "json.hpp"
#include "reasonlens/half.hpp"

namespace reasonlens {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kFormatVersion = 1;

struct EncodedBlob {
  std::string name;
  BlobInfo info;
  std::string bytes;
};

std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xffu));
  out.push_back(static_cast<char>((v >> 8) & 0xffu));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::string encode(std::span<const float> values, DType dtype) {
  std::string out;
  out.reserve(values.size() * dtype_size(dtype));
  for (float v : values) {
    if (dtype == DType::fp16) {
      put_u16(out, float_to_half(v));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
  }
  return out;
}

std::vector<float> decode(const std::string& bytes, DType dtype) {
  const std::size_t width = dtype_size(dtype);
  std::vector<float> out(bytes.size() / width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.size(); ++i, p += width) {
    if (dtype == DType::fp16) {
      out[i] = half_to_float(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
    } else {
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
      out[i] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

EncodedBlob make_blob(std::string name, std::vector<std::size_t> shape, DType dtype,
                      std::span<const float> values) {
  EncodedBlob blob;
  blob.name = std::move(name);
  blob.info.shape = std::move(shape);
  blob.info.dtype = dtype;
  blob.info.file = blob.name + ".bin";
  blob.bytes = encode(values, dtype);
  blob.info.crc32 = crc32_of(blob.bytes);
  return blob;
}

std::vector<EncodedBlob> encode_blobs(const TraceBundle& b) {
  std::vector<EncodedBlob> blobs;
  for (const auto& [layer, m] : b.hidden) {
    blobs.push_back(make_blob("hidden_" + std::to_string(layer), {m.rows, m.cols}, DType::fp16, m.data));
  }
  if (b.manifest.mode == BundleMode::full) {
    const Matrix& u = b.lens.unembed;
    blobs.push_back(make_blob("unembed", {u.rows, u.cols}, DType::fp32, u.data));
    blobs.push_back(make_blob("ln_gamma", {b.lens.ln_gamma.size()}, DType::fp32, b.lens.ln_gamma));
    blobs.push_back(make_blob("ln_beta", {b.lens.ln_beta.size()}, DType::fp32, b.lens.ln_beta));
  }
  for (const auto& [layer, m] : b.token_attention) {
    blobs.push_back(make_blob("attn_" + std::to_string(layer), {m.rows, m.cols}, DType::fp16, m.data));
  }
  if (b.step_attention) {
    const Matrix& m = *b.step_attention;
    blobs.push_back(make_blob("step_attn", {m.rows, m.cols}, DType::fp32, m.data));
  }
  std::vector<float> logprobs;
  logprobs.reserve(b.tokens.size());
  for (const auto& t : b.tokens) logprobs.push_back(t.logprob);
  blobs.push_back(make_blob("logprobs", {logprobs.size()}, DType::fp32, logprobs));
  for (const auto& [layer, v] : b.jsd) {
    blobs.push_back(make_blob("jsd_" + std::to_string(layer), {v.size()}, DType::fp32, v));
  }
  return blobs;
}

json boundaries_to_json(const StepBoundaries& sb) {
  json arr = json::array();
  for (const auto& s : sb.steps) arr.push_back({s.start, s.end});
  return arr;
}

json manifest_to_json(const TraceBundle& b) {
  const BundleManifest& m = b.manifest;
  json j;
  j["format_version"] = kFormatVersion;
  j["trace_id"] = m.trace_id;
  j["model_id"] = m.model_id;
  j["question_id"] = m.question_id;
  j["question_text"] = m.question_text;
  j["label"] = to_string(m.label);
  j["num_tokens"] = m.num_tokens;
  j["hidden_dim"] = m.hidden_dim;
  j["vocab_size"] = m.vocab_size;
  j["num_layers_total"] = m.num_layers_total;
  j["reasoning_layers"] = m.reasoning_layers;
  j["final_layer"] = m.final_layer;
  j["attention_layers"] = m.attention_layers;
  j["num_heads"] = m.num_heads;
  j["mode"] = to_string(m.mode);
  if (m.mode == BundleMode::full) j["ln_epsilon"] = b.lens.ln_epsilon;
  if (m.boundaries) j["step_boundaries"] = boundaries_to_json(*m.boundaries);
  json blobs = json::object();
  for (const auto& [name, info] : m.blobs) {
    blobs[name] = {{"shape", info.shape},
                   {"dtype", to_string(info.dtype)},
                   {"file", info.file},
                   {"crc32", info.crc32}};
  }
  j["blobs"] = std::move(blobs);
  return j;
}

std::string read_file(const fs::path& path, const std::string& blob) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BundleError(BundleError::Kind::missing_blob, blob, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw BundleError(BundleError::Kind::io, "", "failed writing " + path.string());
}

template <typename T>
T require(const json& j, const char* key) {
  if (!j.contains(key)) throw BundleError(BundleError::Kind::manifest, "", std::string("manifest lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw BundleError(BundleError::Kind::manifest, "", std::string("manifest field '") + key + "': " + e.what());
  }
}

// Expected shape for a blob name given the manifest dimensions, or nullopt if the name is unknown.
std::optional<std::vector<std::size_t>> expected_shape(const std::string& name, const BundleManifest& m) {
  auto layer_of = [&](std::string_view prefix) -> std::optional<int> {
    if (!name.starts_with(prefix)) return std::nullopt;
    try {
      std::size_t used = 0;
      const std::string rest = name.substr(prefix.size());
      const int layer = std::stoi(rest, &used);
      if (used != rest.size()) return std::nullopt;
      return layer;
    } catch (...) {
      return std::nullopt;
    }
  };
  const std::size_t steps = m.boundaries ? m.boundaries->size() : 0;
  if (layer_of("hidden_")) return std::vector{m.num_tokens, m.hidden_dim};
  if (layer_of("attn_")) return std::vector{m.num_tokens, m.num_tokens};
  if (layer_of("jsd_")) return std::vector{m.num_tokens};
  if (name == "unembed") return std::vector{m.hidden_dim, m.vocab_size};
  if (name == "ln_gamma" || name == "ln_beta") return std::vector{m.hidden_dim};
  if (name == "logprobs") return std::vector{m.num_tokens};
  if (name == "step_attn") return std::vector{steps, steps};
  return std::nullopt;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void check_finite(std::span<const float> values, const std::string& blob) {
  for (float v : values) {
    if (!std::isfinite(v)) throw BundleError(BundleError::Kind::invalid_value, blob, "non-finite value in " + blob);
  }
}

void require_blob(const TraceBundle& b, bool present, const std::string& name) {
  (void)b;
  if (!present) throw BundleError(BundleError::Kind::missing_blob, name, "required blob '" + name + "' is missing");
}

void check_shape(const std::string& name, std::size_t rows, std::size_t cols, std::size_t want_rows,
                 std::size_t want_cols) {
  if (rows != want_rows || cols != want_cols) {
    throw BundleError(BundleError::Kind::shape_mismatch, name,
                      "blob '" + name + "' has shape " + shape_string({rows, cols}) + ", expected " +
                          shape_string({want_rows, want_cols}));
  }
}

}  // namespace

BundleError::BundleError(Kind kind, std::string blob, const std::string& message)
    : std::runtime_error(message), kind_(kind), blob_(std::move(blob)) {}

std::string_view to_string(BundleMode mode) { return mode == BundleMode::full ? "full" : "compact"; }
std::string_view to_string(DType dtype) { return dtype == DType::fp16 ? "fp16" : "fp32"; }
std::string_view to_string(TraceLabel label) {
  switch (label) {
    case TraceLabel::hallucinated: return "hallucinated";
    case TraceLabel::truthful: return "truthful";
    case TraceLabel::unlabeled: break;
  }
  return "unlabeled";
}

std::optional<BundleMode> parse_mode(std::string_view text) {
  if (text == "full") return BundleMode::full;
  if (text == "compact") return BundleMode::compact;
  return std::nullopt;
}

std::optional<DType> parse_dtype(std::string_view text) {
  if (text == "fp16") return DType::fp16;
  if (text == "fp32") return DType::fp32;
  return std::nullopt;
}

std::optional<TraceLabel> parse_label(std::string_view text) {
  if (text == "hallucinated") return TraceLabel::hallucinated;
  if (text == "truthful") return TraceLabel::truthful;
  if (text == "unlabeled") return TraceLabel::unlabeled;
  return std::nullopt;
}

std::size_t dtype_size(DType dtype) { return dtype == DType::fp16 ? 2 : 4; }

std::size_t BlobInfo::element_count() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string trace_text(const TraceBundle& bundle) {
  std::string text;
  for (const auto& t : bundle.tokens) text += t.surface_text;
  return text;
}

void seal(TraceBundle& bundle) {
  bundle.manifest.blobs.clear();
  for (auto& blob : encode_blobs(bundle)) bundle.manifest.blobs.emplace(blob.name, std::move(blob.info));
}

void validate(const TraceBundle& b) {
  const BundleManifest& m = b.manifest;
  const std::size_t T = m.num_tokens;
  using Kind = BundleError::Kind;

  if (T == 0) throw BundleError(Kind::manifest, "", "bundle has no tokens");
  if (b.tokens.size() != T) {
    throw BundleError(Kind::shape_mismatch, "tokens", "tokens.json has " + std::to_string(b.tokens.size()) +
                                                          " entries, manifest declares " + std::to_string(T));
  }
  auto in_range = [&](int layer) { return layer >= 0 && static_cast<std::size_t>(layer) < m.num_layers_total; };
  if (!in_range(m.final_layer)) throw BundleError(Kind::manifest, "", "final_layer outside [0, num_layers_total)");
  if (m.reasoning_layers.empty()) throw BundleError(Kind::manifest, "", "reasoning_layers is empty");
  for (int l : m.reasoning_layers) {
    if (!in_range(l)) throw BundleError(Kind::manifest, "", "reasoning layer " + std::to_string(l) + " out of range");
  }
  for (int l : m.attention_layers) {
    if (!in_range(l)) throw BundleError(Kind::manifest, "", "attention layer " + std::to_string(l) + " out of range");
  }
  if (m.boundaries) {
    try {
      validate_boundaries(*m.boundaries, T);
    } catch (const std::invalid_argument& e) {
      throw BundleError(Kind::manifest, "", std::string("step_boundaries: ") + e.what());
    }
  }

  for (const auto& t : b.tokens) {
    if (!std::isfinite(t.logprob) || t.logprob > 0.0f) {
      throw BundleError(Kind::invalid_value, "logprobs", "logprob of token " + std::to_string(t.index) + " is not <= 0");
    }
  }

  if (m.mode == BundleMode::full) {
    std::set<int> needed(m.reasoning_layers.begin(), m.reasoning_layers.end());
    needed.insert(m.final_layer);
    for (int l : needed) {
      const std::string name = "hidden_" + std::to_string(l);
      auto it = b.hidden.find(l);
      require_blob(b, it != b.hidden.end(), name);
      check_shape(name, it->second.rows, it->second.cols, T, m.hidden_dim);
      check_finite(it->second.data, name);
    }
    check_shape("unembed", b.lens.unembed.rows, b.lens.unembed.cols, m.hidden_dim, m.vocab_size);
    check_finite(b.lens.unembed.data, "unembed");
    check_shape("ln_gamma", b.lens.ln_gamma.size(), 1, m.hidden_dim, 1);
    check_shape("ln_beta", b.lens.ln_beta.size(), 1, m.hidden_dim, 1);
    check_finite(b.lens.ln_gamma, "ln_gamma");
    check_finite(b.lens.ln_beta, "ln_beta");
    if (!std::isfinite(b.lens.ln_epsilon) || b.lens.ln_epsilon < 0.0f) {
      throw BundleError(Kind::invalid_value, "", "ln_epsilon must be finite and >= 0");
    }
  } else {
    for (int l : m.reasoning_layers) {
      const std::string name = "jsd_" + std::to_string(l);
      auto it = b.jsd.find(l);
      require_blob(b, it != b.jsd.end(), name);
      check_shape(name, it->second.size(), 1, T, 1);
      for (float v : it->second) {
        if (!(v >= 0.0f && static_cast<double>(v) <= std::numbers::ln2)) {
          throw BundleError(Kind::invalid_value, name, "JSD value outside [0, ln 2] in " + name);
        }
      }
    }
    require_blob(b, b.step_attention.has_value(), "step_attn");
  }

  for (const auto& [layer, a] : b.token_attention) {
    const std::string name = "attn_" + std::to_string(layer);
    if (std::find(m.attention_layers.begin(), m.attention_layers.end(), layer) == m.attention_layers.end()) {
      throw BundleError(Kind::manifest, name, name + " is not listed in attention_layers");
    }
    check_shape(name, a.rows, a.cols, T, T);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t s = 0; s < T; ++s) {
        const float v = a(t, s);
        if (!std::isfinite(v) || v < 0.0f || (s > t && v != 0.0f)) {
          throw BundleError(Kind::invalid_value, name,
                            name + " violates causal non-negative attention at (" + std::to_string(t) + "," +
                                std::to_string(s) + ")");
        }
      }
    }
  }
  if (!b.token_attention.empty()) {
    for (int l : m.attention_layers) require_blob(b, b.token_attention.contains(l), "attn_" + std::to_string(l));
  }
  if (b.step_attention) {
    if (!m.boundaries) throw BundleError(Kind::manifest, "step_attn", "step_attn requires step_boundaries");
    const std::size_t S = m.boundaries->size();
    check_shape("step_attn", b.step_attention->rows, b.step_attention->cols, S, S);
    for (std::size_t k = 0; k < S; ++k) {
      for (std::size_t j = 0; j < S; ++j) {
        const float v = (*b.step_attention)(k, j);
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f || (j >= k && v != 0.0f)) {
          throw BundleError(Kind::invalid_value, "step_attn", "step_attn entry (" + std::to_string(k) + "," +
                                                                  std::to_string(j) + ") is invalid");
        }
      }
    }
  }
}

void write_bundle(const TraceBundle& bundle, const fs::path& dir) {
  validate(bundle);

  TraceBundle sealed = bundle;
  const auto blobs = encode_blobs(sealed);
  sealed.manifest.blobs.clear();
  for (const auto& blob : blobs) sealed.manifest.blobs.emplace(blob.name, blob.info);

  const fs::path target = fs::absolute(dir).lexically_normal();
  const fs::path parent = target.parent_path();
  std::error_code ec;
  fs::create_directories(parent, ec);
  const fs::path tmp = parent / ("." + target.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp, ec);
  if (!fs::create_directory(tmp, ec) || ec) {
    throw BundleError(BundleError::Kind::io, "", "cannot create " + tmp.string());
  }

  try {
    for (const auto& blob : blobs) write_file(tmp / blob.info.file, blob.bytes);
    json tokens = json::array();
    for (const auto& t : sealed.tokens) tokens.push_back(t.surface_text);
    write_file(tmp / "tokens.json", tokens.dump() + "\n");
    write_file(tmp / "manifest.json", manifest_to_json(sealed).dump(2) + "\n");

    if (fs::exists(target)) fs::remove_all(target);
    fs::rename(tmp, target);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp, ec);
    throw BundleError(BundleError::Kind::io, "", e.what());
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

TraceBundle open_bundle(const fs::path& dir) {
  using Kind = BundleError::Kind;
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw BundleError(Kind::io, "", "no manifest.json in " + dir.string());

  json j;
  try {
    j = json::parse(read_file(manifest_path, "manifest.json"));
  } catch (const json::exception& e) {
    throw BundleError(Kind::manifest, "", std::string("manifest.json: ") + e.what());
  }

  TraceBundle b;
  BundleManifest& m = b.manifest;
  const auto mode_text = require<std::string>(j, "mode");
  const auto mode = parse_mode(mode_text);
  if (!mode) throw BundleError(Kind::unknown_mode, "", "unknown bundle mode '" + mode_text + "'");
  m.mode = *mode;
  if (j.value("format_version", kFormatVersion) != kFormatVersion) {
    throw BundleError(Kind::manifest, "", "unsupported format_version");
  }
  m.trace_id = require<std::string>(j, "trace_id");
  m.model_id = j.value("model_id", std::string());
  m.question_id = j.value("question_id", std::string());
  m.question_text = j.value("question_text", std::string());
  const auto label = parse_label(j.value("label", std::string("unlabeled")));
  if (!label) throw BundleError(Kind::manifest, "", "unknown label");
  m.label = *label;
  m.num_tokens = require<std::size_t>(j, "num_tokens");
  m.hidden_dim = require<std::size_t>(j, "hidden_dim");
  m.vocab_size = require<std::size_t>(j, "vocab_size");
  m.num_layers_total = require<std::size_t>(j, "num_layers_total");
  m.reasoning_layers = require<std::vector<int>>(j, "reasoning_layers");
  m.final_layer = require<int>(j, "final_layer");
  m.attention_layers = j.value("attention_layers", std::vector<int>{});
  m.num_heads = j.value("num_heads", std::size_t{0});
  if (m.mode == BundleMode::full) b.lens.ln_epsilon = require<float>(j, "ln_epsilon");
  if (j.contains("step_boundaries")) {
    StepBoundaries sb;
    for (const auto& pair : j.at("step_boundaries")) {
      sb.steps.push_back({pair.at(0).get<std::size_t>(), pair.at(1).get<std::size_t>()});
    }
    m.boundaries = std::move(sb);
  }

  if (!j.contains("blobs") || !j.at("blobs").is_object()) throw BundleError(Kind::manifest, "", "manifest lacks blob table");
  for (const auto& [name, entry] : j.at("blobs").items()) {
    BlobInfo info;
    try {
      info.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto dtype = parse_dtype(entry.at("dtype").get<std::string>());
      if (!dtype) throw BundleError(Kind::manifest, name, "blob '" + name + "' has unknown dtype");
      info.dtype = *dtype;
      info.file = entry.at("file").get<std::string>();
      info.crc32 = entry.at("crc32").get<std::uint32_t>();
    } catch (const json::exception& e) {
      throw BundleError(Kind::manifest, name, "blob '" + name + "': " + e.what());
    }
    if (info.file.find('/') != std::string::npos || info.file.find("..") != std::string::npos) {
      throw BundleError(Kind::manifest, name, "blob '" + name + "' file must be a plain file name");
    }

    const auto want = expected_shape(name, m);
    if (!want) throw BundleError(Kind::manifest, name, "unknown blob '" + name + "'");
    if (info.shape != *want) {
      throw BundleError(Kind::shape_mismatch, name, "blob '" + name + "' declares shape " + shape_string(info.shape) +
                                                        " but the manifest implies " + shape_string(*want));
    }
    const fs::path path = dir / info.file;
    if (!fs::exists(path)) throw BundleError(Kind::missing_blob, name, "blob '" + name + "' file " + info.file + " is missing");
    const std::string bytes = read_file(path, name);
    if (bytes.size() != info.element_count() * dtype_size(info.dtype)) {
      throw BundleError(Kind::shape_mismatch, name, "blob '" + name + "' has " + std::to_string(bytes.size()) +
                                                        " bytes, shape " + shape_string(info.shape) + " needs " +
                                                        std::to_string(info.element_count() * dtype_size(info.dtype)));
    }
    if (crc32_of(bytes) != info.crc32) throw BundleError(Kind::checksum, name, "checksum mismatch in blob '" + name + "'");

    std::vector<float> values = decode(bytes, info.dtype);
    auto as_matrix = [&] {
      Matrix mat;
      mat.rows = info.shape.at(0);
      mat.cols = info.shape.at(1);
      mat.data = std::move(values);
      return mat;
    };
    if (name.starts_with("hidden_")) {
      b.hidden.emplace(std::stoi(name.substr(7)), as_matrix());
    } else if (name.starts_with("attn_")) {
      b.token_attention.emplace(std::stoi(name.substr(5)), as_matrix());
    } else if (name.starts_with("jsd_")) {
      b.jsd.emplace(std::stoi(name.substr(4)), std::move(values));
    } else if (name == "unembed") {
      b.lens.unembed = as_matrix();
    } else if (name == "ln_gamma") {
      b.lens.ln_gamma = std::move(values);
    } else if (name == "ln_beta") {
      b.lens.ln_beta = std::move(values);
    } else if (name == "step_attn") {
      b.step_attention = as_matrix();
    } else if (name == "logprobs") {
      b.tokens.resize(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) b.tokens[i].logprob = values[i];
    }
    m.blobs.emplace(name, std::move(info));
  }

  if (m.mode == BundleMode::full) {
    for (const char* name : {"unembed", "ln_gamma", "ln_beta"}) require_blob(b, m.blobs.contains(name), name);
  }
  require_blob(b, m.blobs.contains("logprobs"), "logprobs");

  json tokens;
  try {
    tokens = json::parse(read_file(dir / "tokens.json", "tokens.json"));
  } catch (const json::exception& e) {
    throw BundleError(Kind::manifest, "tokens.json", std::string("tokens.json: ") + e.what());
  }
  if (!tokens.is_array() || tokens.size() != b.tokens.size()) {
    throw BundleError(Kind::shape_mismatch, "tokens.json", "tokens.json length does not match logprobs");
  }
  for (std::size_t i = 0; i < b.tokens.size(); ++i) {
    b.tokens[i].index = i;
    b.tokens[i].surface_text = tokens[i].get<std::string>();
  }

  validate(b);
  return b;
}

}  // namespace reasonlens
