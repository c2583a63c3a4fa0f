#include <cstring>
#include <functional>
#include <limits>

#include "doctest.h"
#include "json.hpp"
#include "reasonlens/synthgen.hpp"
#include "reasonlens/trace_store.hpp"
#include "test_support.hpp"

using namespace reasonlens;
namespace fs = std::filesystem;

namespace {

TraceBundle small_full(std::uint64_t seed = 5) {
  FullDims d;
  d.tokens = 6;
  d.hidden = 8;
  d.vocab = 13;
  d.layers = 5;
  d.reasoning_layers = 2;
  d.attention_layers = 2;
  return gen_full_bundle(d, seed).bundle;
}

BundleError::Kind open_error_kind(const fs::path& dir, std::string* blob = nullptr) {
  try {
    open_bundle(dir);
  } catch (const BundleError& e) {
    if (blob) *blob = e.blob();
    return e.kind();
  }
  FAIL("bundle opened although it was corrupted");
  return BundleError::Kind::io;
}

void rewrite_manifest(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit) {
  auto j = nlohmann::json::parse(oracle::slurp(dir / "manifest.json"));
  edit(j);
  std::ofstream(dir / "manifest.json", std::ios::binary | std::ios::trunc) << j.dump(2);
}

}  // namespace

TEST_CASE("full bundle round trips field for field") {
  oracle::TempDir tmp;
  const TraceBundle b = small_full();
  write_bundle(b, tmp / "b");
  const TraceBundle back = open_bundle(tmp / "b");
  CHECK(back == b);
}

TEST_CASE("compact bundle round trips field for field") {
  oracle::TempDir tmp;
  const TraceBundle b = gen_compact_trace(hallucinated_spec(3)).bundle;
  write_bundle(b, tmp / "c");
  CHECK(open_bundle(tmp / "c") == b);
}

TEST_CASE("independent re-reader agrees with the on-disk layout") {
  oracle::TempDir tmp;
  const TraceBundle b = small_full(9);
  write_bundle(b, tmp / "b");
  const auto manifest = nlohmann::json::parse(oracle::slurp(tmp / "b" / "manifest.json"));
  CHECK(manifest["format_version"] == 1);
  CHECK(manifest["num_tokens"] == 6);
  CHECK(manifest["hidden_dim"] == 8);
  CHECK(manifest["vocab_size"] == 13);
  CHECK(manifest["mode"] == "full");

  for (const auto& [name, entry] : manifest["blobs"].items()) {
    const std::string bytes = oracle::slurp(tmp / "b" / entry["file"].get<std::string>());
    std::size_t count = 1;
    for (auto d : entry["shape"]) count *= d.get<std::size_t>();
    const std::size_t width = entry["dtype"] == "fp16" ? 2 : 4;
    CHECK_MESSAGE(bytes.size() == count * width, name);
    CHECK_MESSAGE(oracle::crc32_bitwise(bytes) == entry["crc32"].get<std::uint32_t>(), name);
  }

  // hidden states: fp16 little-endian, row-major
  const int final_layer = manifest["final_layer"];
  const std::string raw = oracle::slurp(tmp / "b" / ("hidden_" + std::to_string(final_layer) + ".bin"));
  const Matrix& h = b.hidden.at(final_layer);
  for (std::size_t r = 0; r < h.rows; ++r) {
    for (std::size_t c = 0; c < h.cols; ++c) {
      const std::size_t at = 2 * (r * h.cols + c);
      const auto bits = static_cast<std::uint16_t>(static_cast<unsigned char>(raw[at]) |
                                                   (static_cast<unsigned char>(raw[at + 1]) << 8));
      CHECK(oracle::hw_half_to_float(bits) == h(r, c));
      CHECK(oracle::hw_float_to_half(h(r, c)) == bits);
    }
  }

  // unembedding: fp32 little-endian
  const std::string ue = oracle::slurp(tmp / "b" / "unembed.bin");
  for (std::size_t i = 0; i < b.lens.unembed.data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 3; k >= 0; --k) bits = (bits << 8) | static_cast<unsigned char>(ue[4 * i + static_cast<std::size_t>(k)]);
    float v;
    std::memcpy(&v, &bits, 4);
    CHECK(v == b.lens.unembed.data[i]);
  }

  const auto tokens = nlohmann::json::parse(oracle::slurp(tmp / "b" / "tokens.json"));
  REQUIRE(tokens.size() == b.tokens.size());
  std::string text;
  for (const auto& t : tokens) text += t.get<std::string>();
  CHECK(text == trace_text(b));
}

TEST_CASE("two writes of the same bundle are byte identical") {
  oracle::TempDir tmp;
  const TraceBundle b = small_full(4);
  write_bundle(b, tmp / "x");
  write_bundle(b, tmp / "y");
  for (const auto& entry : fs::directory_iterator(tmp / "x")) {
    const auto name = entry.path().filename();
    CHECK_MESSAGE(oracle::slurp(entry.path()) == oracle::slurp(tmp / "y" / name), name.string());
  }
}

TEST_CASE("writing over an existing bundle replaces it and leaves no temp directory") {
  oracle::TempDir tmp;
  write_bundle(small_full(1), tmp / "b");
  std::ofstream(tmp / "b" / "stray.txt") << "old";
  const TraceBundle second = small_full(2);
  write_bundle(second, tmp / "b");
  CHECK_FALSE(fs::exists(tmp / "b" / "stray.txt"));
  CHECK(open_bundle(tmp / "b") == second);
  std::size_t entries = 0;
  for (const auto& e : fs::directory_iterator(tmp.path())) {
    ++entries;
    CHECK(e.path().filename() == "b");
  }
  CHECK(entries == 1);
}

TEST_CASE("declared hidden_dim disagreeing with the blob is a shape mismatch naming the blob") {
  oracle::TempDir tmp;
  const TraceBundle b = small_full();
  write_bundle(b, tmp / "b");
  const std::string name = "hidden_" + std::to_string(b.manifest.final_layer);
  rewrite_manifest(tmp / "b", [&](nlohmann::json& j) { j["blobs"][name]["shape"] = {6, 7}; });
  std::string blob;
  CHECK(open_error_kind(tmp / "b", &blob) == BundleError::Kind::shape_mismatch);
  CHECK(blob == name);
}

TEST_CASE("manifest hidden_dim 16 over 8-column data is rejected as a shape mismatch") {
  oracle::TempDir tmp;
  write_bundle(small_full(), tmp / "b");
  rewrite_manifest(tmp / "b", [](nlohmann::json& j) { j["hidden_dim"] = 16; });
  std::string blob;
  CHECK(open_error_kind(tmp / "b", &blob) == BundleError::Kind::shape_mismatch);
  CHECK(blob.rfind("hidden_", 0) == 0);
}

TEST_CASE("truncated blob is a shape mismatch naming the blob") {
  oracle::TempDir tmp;
  write_bundle(small_full(), tmp / "b");
  const std::string bytes = oracle::slurp(tmp / "b" / "unembed.bin");
  std::ofstream(tmp / "b" / "unembed.bin", std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 4);
  std::string blob;
  CHECK(open_error_kind(tmp / "b", &blob) == BundleError::Kind::shape_mismatch);
  CHECK(blob == "unembed");
}

TEST_CASE("flipped byte is a checksum failure naming the blob") {
  oracle::TempDir tmp;
  write_bundle(small_full(), tmp / "b");
  std::string bytes = oracle::slurp(tmp / "b" / "logprobs.bin");
  bytes[1] = static_cast<char>(bytes[1] ^ 0x40);
  std::ofstream(tmp / "b" / "logprobs.bin", std::ios::binary | std::ios::trunc) << bytes;
  std::string blob;
  CHECK(open_error_kind(tmp / "b", &blob) == BundleError::Kind::checksum);
  CHECK(blob == "logprobs");
}

TEST_CASE("missing blob file is reported by name") {
  oracle::TempDir tmp;
  write_bundle(small_full(), tmp / "b");
  fs::remove(tmp / "b" / "ln_beta.bin");
  std::string blob;
  CHECK(open_error_kind(tmp / "b", &blob) == BundleError::Kind::missing_blob);
  CHECK(blob == "ln_beta");
}

TEST_CASE("blob absent from the table is reported as missing") {
  oracle::TempDir tmp;
  write_bundle(small_full(), tmp / "b");
  rewrite_manifest(tmp / "b", [](nlohmann::json& j) { j["blobs"].erase("unembed"); });
  std::string blob;
  CHECK(open_error_kind(tmp / "b", &blob) == BundleError::Kind::missing_blob);
  CHECK(blob == "unembed");
}

TEST_CASE("unknown mode and absent manifest are distinct errors") {
  oracle::TempDir tmp;
  write_bundle(small_full(), tmp / "b");
  rewrite_manifest(tmp / "b", [](nlohmann::json& j) { j["mode"] = "sparse"; });
  CHECK(open_error_kind(tmp / "b") == BundleError::Kind::unknown_mode);
  CHECK(open_error_kind(tmp / "nowhere") == BundleError::Kind::io);
}

TEST_CASE("validation rejects positive logprobs, non-causal attention and out-of-range JSD") {
  TraceBundle b = small_full();
  b.tokens[2].logprob = 0.5f;
  CHECK_THROWS_AS(validate(b), BundleError);

  b = small_full();
  b.token_attention.begin()->second(1, 3) = 0.25f;
  CHECK_THROWS_AS(validate(b), BundleError);

  TraceBundle c = gen_compact_trace(truthful_spec(2)).bundle;
  c.jsd.begin()->second[3] = 0.7f;
  CHECK_THROWS_AS(validate(c), BundleError);

  c = gen_compact_trace(truthful_spec(2)).bundle;
  (*c.step_attention)(0, 1) = 0.1f;
  CHECK_THROWS_AS(validate(c), BundleError);

  b = small_full();
  b.hidden.begin()->second.data[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(validate(b), BundleError);
}

TEST_CASE("layer indices must lie inside the model") {
  TraceBundle b = small_full();
  b.manifest.reasoning_layers.push_back(static_cast<int>(b.manifest.num_layers_total));
  CHECK_THROWS_AS(validate(b), BundleError);
}
