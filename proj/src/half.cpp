#include "reasonlens/half.hpp"

#include <bit>
#include <cstring>

namespace reasonlens {

std::uint16_t float_to_half(float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t exponent = (bits >> 23) & 0xffu;
  std::uint32_t mantissa = bits & 0x7fffffu;

  if (exponent == 0xffu) {
    // inf / nan; keep nan quiet and non-zero
    if (mantissa == 0) return static_cast<std::uint16_t>(sign | 0x7c00u);
    return static_cast<std::uint16_t>(sign | 0x7e00u | (mantissa >> 13));
  }

  const int unbiased = static_cast<int>(exponent) - 127;
  if (unbiased > 15) return static_cast<std::uint16_t>(sign | 0x7c00u);

  if (unbiased >= -14) {
    // normal half
    std::uint32_t half_exp = static_cast<std::uint32_t>(unbiased + 15);
    std::uint32_t half_mant = mantissa >> 13;
    const std::uint32_t rest = mantissa & 0x1fffu;
    if (rest > 0x1000u || (rest == 0x1000u && (half_mant & 1u))) {
      ++half_mant;
      if (half_mant == 0x400u) {
        half_mant = 0;
        ++half_exp;
        if (half_exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
      }
    }
    return static_cast<std::uint16_t>(sign | (half_exp << 10) | half_mant);
  }

  // subnormal half or zero
  if (unbiased < -25) return sign;
  mantissa |= 0x800000u;
  const int shift = -unbiased - 14 + 13;  // 14..24
  std::uint32_t half_mant = mantissa >> shift;
  const std::uint32_t rest = mantissa & ((1u << shift) - 1u);
  const std::uint32_t halfway = 1u << (shift - 1);
  if (rest > halfway || (rest == halfway && (half_mant & 1u))) ++half_mant;
  return static_cast<std::uint16_t>(sign | half_mant);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exponent = (h >> 10) & 0x1fu;
  std::uint32_t mantissa = h & 0x3ffu;

  std::uint32_t bits = 0;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mantissa <<= 1;
      } while ((mantissa & 0x400u) == 0);
      mantissa &= 0x3ffu;
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | (mantissa << 13);
    }
  } else if (exponent == 31) {
    bits = sign | 0x7f800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace reasonlens
