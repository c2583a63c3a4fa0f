#include "reasonlens/segmentation.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace reasonlens {
namespace {

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) != 0 || c == '_' || u >= 0x80;
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; });
}

// A cut removes text[begin, end) (empty for markers) and starts a new fragment at `end`.
struct Cut {
  std::size_t begin;
  std::size_t end;
  bool operator<(const Cut& o) const { return begin != o.begin ? begin < o.begin : end < o.end; }
};

bool whole_word_at(std::string_view text, std::size_t pos, std::string_view marker) {
  if (is_word_char(marker.front()) && pos > 0 && is_word_char(text[pos - 1])) return false;
  const std::size_t after = pos + marker.size();
  if (is_word_char(marker.back()) && after < text.size() && is_word_char(text[after])) return false;
  return true;
}

}  // namespace

std::vector<std::string> SegmentationRule::default_markers() {
  return {"</think>", "Wait", "But", "However", "Hmm", "Alternatively"};
}

void validate_boundaries(const StepBoundaries& boundaries, std::size_t num_tokens) {
  std::size_t prev_end = 0;
  for (std::size_t k = 0; k < boundaries.size(); ++k) {
    const TokenSpan& s = boundaries[k];
    if (s.start >= s.end) throw std::invalid_argument("step " + std::to_string(k) + " is empty");
    if (s.end > num_tokens) throw std::invalid_argument("step " + std::to_string(k) + " ends past the last token");
    if (s.start < prev_end) throw std::invalid_argument("step " + std::to_string(k) + " overlaps or precedes step " + std::to_string(k - 1));
    prev_end = s.end;
  }
}

std::vector<CharSpan> segment_text(std::string_view text, const SegmentationRule& rule) {
  std::vector<Cut> cuts;

  for (const std::string& marker : rule.markers) {
    if (marker.empty()) continue;
    for (std::size_t pos = text.find(marker); pos != std::string_view::npos; pos = text.find(marker, pos + 1)) {
      if (pos > 0 && whole_word_at(text, pos, marker)) cuts.push_back({pos, pos});
    }
  }
  if (!rule.delimiter.empty()) {
    const std::size_t len = rule.delimiter.size();
    for (std::size_t pos = text.find(rule.delimiter); pos != std::string_view::npos;
         pos = text.find(rule.delimiter, pos + len)) {
      cuts.push_back({pos, pos + len});
    }
  }
  std::sort(cuts.begin(), cuts.end());

  std::vector<CharSpan> out;
  auto emit = [&](std::size_t b, std::size_t e) {
    if (e > b && !is_blank(text.substr(b, e - b))) out.push_back({b, e});
  };
  std::size_t start = 0;
  for (const Cut& cut : cuts) {
    if (cut.begin < start) continue;  // marker inside an already removed delimiter
    emit(start, cut.begin);
    start = cut.end;
  }
  emit(start, text.size());
  return out;
}

StepBoundaries segment(const std::vector<TokenRecord>& tokens, const SegmentationRule& rule) {
  StepBoundaries result;
  if (tokens.empty()) return result;

  std::string text;
  std::vector<std::size_t> token_start;
  token_start.reserve(tokens.size());
  for (const auto& t : tokens) {
    token_start.push_back(text.size());
    text += t.surface_text;
  }
  auto token_of = [&](std::size_t char_pos) {
    const auto it = std::upper_bound(token_start.begin(), token_start.end(), char_pos);
    return static_cast<std::size_t>(std::distance(token_start.begin(), it)) - 1;
  };

  for (const CharSpan& frag : segment_text(text, rule)) {
    const std::size_t first = token_of(frag.begin);
    const std::size_t last = token_of(frag.end - 1) + 1;
    auto& steps = result.steps;
    if (!steps.empty() && first <= steps.back().start) {
      // fragment shares its first token with the previous step
      steps.back().end = std::max(steps.back().end, last);
      continue;
    }
    if (!steps.empty()) steps.back().end = std::min(steps.back().end, first);
    steps.push_back({first, last});
  }
  return result;
}

}  // namespace reasonlens
