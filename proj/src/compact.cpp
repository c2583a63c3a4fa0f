#include <cmath>
#include <iostream>
#include <numbers>

#include "reasonlens/pattern_metrics.hpp"
#include "reasonlens/reasoning_score.hpp"
#include "reasonlens/trace_store.hpp"

namespace reasonlens {
namespace {

// Largest float not above ln 2, so stored values stay inside the JSD range.
const float kMaxStoredJsd = [] {
  float v = static_cast<float>(std::numbers::ln2);
  while (static_cast<double>(v) > std::numbers::ln2) v = std::nextafter(v, 0.0f);
  return v;
}();

}  // namespace

TraceBundle compact(const TraceBundle& bundle, const StepBoundaries& boundaries) {
  if (bundle.manifest.mode == BundleMode::compact) {
    std::cerr << "warning: bundle '" << bundle.manifest.trace_id << "' is already compact; nothing to do\n";
    return bundle;
  }
  validate_boundaries(boundaries, bundle.manifest.num_tokens);

  TraceBundle out;
  out.manifest = bundle.manifest;
  out.manifest.mode = BundleMode::compact;
  out.manifest.boundaries = boundaries;
  out.tokens = bundle.tokens;

  for (const auto& [layer, values] : token_jsds(bundle, bundle.manifest.reasoning_layers)) {
    std::vector<float> stored(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) stored[i] = std::min(static_cast<float>(values[i]), kMaxStoredJsd);
    out.jsd.emplace(layer, std::move(stored));
  }

  if (!bundle.token_attention.empty()) {
    out.step_attention = step_attention(bundle.token_attention, boundaries, bundle.manifest.attention_layers);
  } else if (bundle.step_attention && bundle.manifest.boundaries && *bundle.manifest.boundaries == boundaries) {
    out.step_attention = bundle.step_attention;
  } else {
    throw BundleError(BundleError::Kind::missing_blob, "step_attn",
                      "cannot build step attention: no token-level attention for these boundaries");
  }

  seal(out);
  return out;
}

}  // namespace reasonlens
