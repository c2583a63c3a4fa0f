#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "reasonlens/steps.hpp"
#include "reasonlens/trace_store.hpp"

namespace reasonlens {

struct SegmentationRule {
  // Cognitive pivot words; a new step starts at each whole-word, case-sensitive occurrence.
  std::vector<std::string> markers = default_markers();
  // Formatting delimiter; dropped from the text, the next step starts after it.
  std::string delimiter = "\n\n";

  static std::vector<std::string> default_markers();
};

// Character range [begin, end) of one step in the detokenized text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const CharSpan&) const = default;
};

// Character-level two-stage split: markers first, then the delimiter.
// Whitespace-only fragments are dropped.
std::vector<CharSpan> segment_text(std::string_view text, const SegmentationRule& rule = {});

// Token-level segmentation. Step boundaries found in the text are snapped to
// the token that contains them; a fragment that shares its only token with the
// previous step is folded into that step.
StepBoundaries segment(const std::vector<TokenRecord>& tokens, const SegmentationRule& rule = {});

}  // namespace reasonlens
