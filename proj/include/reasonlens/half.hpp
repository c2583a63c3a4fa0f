#pragma once

#include <cstdint>

namespace reasonlens {

// IEEE 754 binary16 conversions. Encoding rounds to nearest, ties to even.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

// Value of `value` after a round trip through binary16.
inline float round_to_half(float value) { return half_to_float(float_to_half(value)); }

}  // namespace reasonlens
