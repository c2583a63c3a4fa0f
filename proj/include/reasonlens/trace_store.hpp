#pragma once

// On-disk trace bundles: a directory holding manifest.json, tokens.json and
// headerless little-endian row-major binary blobs described by the manifest.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "reasonlens/matrix.hpp"
#include "reasonlens/steps.hpp"

namespace reasonlens {

enum class BundleMode { full, compact };
enum class DType { fp16, fp32 };
enum class TraceLabel { unlabeled, hallucinated, truthful };

std::string_view to_string(BundleMode mode);
std::string_view to_string(DType dtype);
std::string_view to_string(TraceLabel label);
std::optional<BundleMode> parse_mode(std::string_view text);
std::optional<DType> parse_dtype(std::string_view text);
std::optional<TraceLabel> parse_label(std::string_view text);

std::size_t dtype_size(DType dtype);

struct BlobInfo {
  std::vector<std::size_t> shape;
  DType dtype = DType::fp32;
  std::string file;
  std::uint32_t crc32 = 0;

  std::size_t element_count() const;
  bool operator==(const BlobInfo&) const = default;
};

struct BundleManifest {
  std::string trace_id;
  std::string model_id;
  std::string question_id;
  std::string question_text;
  TraceLabel label = TraceLabel::unlabeled;

  std::size_t num_tokens = 0;
  std::size_t hidden_dim = 0;
  std::size_t vocab_size = 0;
  std::size_t num_layers_total = 0;
  std::vector<int> reasoning_layers;
  int final_layer = 0;
  std::vector<int> attention_layers;
  std::size_t num_heads = 0;
  BundleMode mode = BundleMode::full;

  // Recorded whenever step-level attention or compact scores are stored.
  std::optional<StepBoundaries> boundaries;

  // Filled by seal()/open_bundle(); keyed by blob name (file stem).
  std::map<std::string, BlobInfo> blobs;

  bool operator==(const BundleManifest&) const = default;
};

struct TokenRecord {
  std::size_t index = 0;
  std::string surface_text;
  float logprob = 0.0f;  // natural log, <= 0

  bool operator==(const TokenRecord&) const = default;
};

// Normalization + unembedding used to project hidden states to vocabulary logits.
struct LensParams {
  std::vector<float> ln_gamma;
  std::vector<float> ln_beta;
  float ln_epsilon = 1e-5f;
  Matrix unembed;  // [hidden_dim x vocab_size]

  bool operator==(const LensParams&) const = default;
};

struct TraceBundle {
  BundleManifest manifest;
  std::vector<TokenRecord> tokens;

  // full mode: layer -> [num_tokens x hidden_dim], for reasoning layers and the final layer
  std::map<int, Matrix> hidden;
  LensParams lens;

  // head-averaged token attention, layer -> [num_tokens x num_tokens], causal
  std::map<int, Matrix> token_attention;
  // step-pair mean attention [S x S]; requires manifest.boundaries
  std::optional<Matrix> step_attention;

  // compact mode: layer -> per-token JSD(q_final, q_layer); entry 0 is unused (0)
  std::map<int, std::vector<float>> jsd;

  bool operator==(const TraceBundle&) const = default;
};

class BundleError : public std::runtime_error {
 public:
  enum class Kind { io, manifest, missing_blob, shape_mismatch, checksum, unknown_mode, invalid_value };

  BundleError(Kind kind, std::string blob, const std::string& message);

  Kind kind() const { return kind_; }
  const std::string& blob() const { return blob_; }

 private:
  Kind kind_;
  std::string blob_;
};

// Loads and fully validates a bundle directory.
TraceBundle open_bundle(const std::filesystem::path& dir);

// Writes the bundle atomically: a sibling temp directory is filled and renamed
// over `dir`. Output bytes depend only on the bundle contents.
void write_bundle(const TraceBundle& bundle, const std::filesystem::path& dir);

// Recomputes manifest.blobs (shapes, dtypes, file names, CRC32) from the data.
void seal(TraceBundle& bundle);

// Checks in-memory invariants (dimensions, finiteness, ranges, causality).
void validate(const TraceBundle& bundle);

// Concatenated surface text of all tokens.
std::string trace_text(const TraceBundle& bundle);

// Full-mode to compact-mode conversion: per-token JSDs for every reasoning
// layer and step-pair attention. A compact input is returned unchanged with a
// warning on stderr.
TraceBundle compact(const TraceBundle& bundle, const StepBoundaries& boundaries);

}  // namespace reasonlens
