#pragma once

// IEEE binary16 and bfloat16 <-> double conversions on raw bit patterns.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>

namespace nullfuse {

inline double f16_bits_to_double(std::uint16_t bits) {
  const bool negative = (bits & 0x8000u) != 0;
  const int exponent = (bits >> 10) & 0x1f;
  const int mantissa = bits & 0x3ff;
  double value;
  if (exponent == 0) {
    value = std::ldexp(static_cast<double>(mantissa), -24);
  } else if (exponent == 0x1f) {
    value = mantissa == 0 ? std::numeric_limits<double>::infinity()
                          : std::numeric_limits<double>::quiet_NaN();
  } else {
    value = std::ldexp(static_cast<double>(mantissa | 0x400), exponent - 25);
  }
  return negative ? -value : value;
}

inline double bf16_bits_to_double(std::uint16_t bits) {
  return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16));
}

/// Round-to-nearest-even conversion straight from double (no float detour, so
/// no double rounding). Returns nullopt for non-finite input or overflow.
inline std::optional<std::uint16_t> double_to_f16_bits(double value) {
  if (!std::isfinite(value)) return std::nullopt;
  const std::uint16_t sign = std::signbit(value) ? 0x8000u : 0u;
  const double mag = std::abs(value);
  if (mag == 0.0) return sign;

  int exp2 = 0;
  std::frexp(mag, &exp2);  // mag = f * 2^exp2, f in [0.5, 1)
  const int unbiased = exp2 - 1;

  if (unbiased < -14) {
    // Subnormal: units of 2^-24. A result of 1024 is the smallest normal,
    // which has exactly that bit pattern.
    const double units = std::nearbyint(std::ldexp(mag, 24));
    return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(units));
  }

  double significand = std::nearbyint(std::ldexp(mag, 10 - unbiased));  // [1024, 2048]
  int biased = unbiased + 15;
  if (significand == 2048.0) {
    significand = 1024.0;
    ++biased;
  }
  if (biased >= 0x1f) return std::nullopt;
  const auto frac = static_cast<std::uint16_t>(static_cast<unsigned>(significand) - 1024u);
  return static_cast<std::uint16_t>(sign | (biased << 10) | frac);
}

/// Round-to-nearest-even to binary32. nullopt for non-finite input or overflow.
inline std::optional<float> double_to_f32(double value) {
  if (!std::isfinite(value)) return std::nullopt;
  const auto f = static_cast<float>(value);
  if (!std::isfinite(f)) return std::nullopt;
  return f;
}

}  // namespace nullfuse
