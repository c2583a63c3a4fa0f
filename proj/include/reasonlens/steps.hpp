#pragma once

#include <cstddef>
#include <vector>

namespace reasonlens {

// Half-open token range [start, end) covered by one reasoning step.
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool contains(std::size_t token) const { return token >= start && token < end; }
  bool operator==(const TokenSpan&) const = default;
};

// Ordered, disjoint, non-empty step ranges inside [0, num_tokens).
struct StepBoundaries {
  std::vector<TokenSpan> steps;

  std::size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }
  const TokenSpan& operator[](std::size_t k) const { return steps[k]; }
  bool operator==(const StepBoundaries&) const = default;
};

// Throws std::invalid_argument describing the first violated invariant.
void validate_boundaries(const StepBoundaries& boundaries, std::size_t num_tokens);

}  // namespace reasonlens
