/**
 * Copyright 2026 The bertopt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "bertopt/half.hpp"

#include <bit>
#include <cmath>

namespace bertopt {

Binary16 f32_to_f16(float x) {
  const uint32_t u = std::bit_cast<uint32_t>(x);
  const uint16_t sign = static_cast<uint16_t>((u >> 16) & 0x8000u);
  const uint32_t abs = u & 0x7FFFFFFFu;

  if (abs >= 0x7F800000u) {
    // inf stays inf; NaN narrows to a quiet NaN with the sign kept.
    if (abs > 0x7F800000u) return Binary16{static_cast<uint16_t>(sign | 0x7E00u)};
    return Binary16{static_cast<uint16_t>(sign | 0x7C00u)};
  }

  const int e = static_cast<int>(abs >> 23) - 127;

  if (e >= 16) return Binary16{static_cast<uint16_t>(sign | 0x7C00u)};

  if (e >= -14) {
    // Normal target: keep the top 10 mantissa bits, round-to-nearest-even
    // on the 13 dropped bits. A mantissa carry rolls into the exponent and,
    // at the top of the range, correctly lands on infinity (65520 -> inf).
    const uint32_t mant = abs & 0x7FFFFFu;
    uint32_t m = mant >> 13;
    const uint32_t rem = mant & 0x1FFFu;
    uint16_t h = static_cast<uint16_t>(((e + 15) << 10) | m);
    if (rem > 0x1000u || (rem == 0x1000u && (m & 1u))) ++h;
    return Binary16{static_cast<uint16_t>(sign | h)};
  }

  // Subnormal target: value = sig * 2^(e-23), result = round(sig * 2^(e+1))
  // in units of 2^-24. Everything below 2^-25 rounds to zero (the exact
  // halfway point 2^-25 ties to even, which is zero).
  const int shift = -e - 1;  // 15..inf
  if (shift > 24) return Binary16{sign};
  const uint32_t sig = (abs & 0x7FFFFFu) | 0x800000u;
  uint32_t m = sig >> shift;
  const uint32_t rem = sig & ((1u << shift) - 1u);
  const uint32_t halfway = 1u << (shift - 1);
  if (rem > halfway || (rem == halfway && (m & 1u))) ++m;
  return Binary16{static_cast<uint16_t>(sign | m)};
}

float f16_to_f32(Binary16 h) {
  const uint32_t sign = static_cast<uint32_t>(h.bits & 0x8000u) << 16;
  const uint32_t exp = (h.bits >> 10) & 0x1Fu;
  const uint32_t man = h.bits & 0x3FFu;

  if (exp == 0) {
    // +-0 or subnormal; man * 2^-24 is exact in binary32.
    const float v = static_cast<float>(man) * 0x1p-24f;
    return std::bit_cast<float>(sign | std::bit_cast<uint32_t>(v));
  }
  if (exp == 31) {
    return std::bit_cast<float>(sign | 0x7F800000u | (man << 13));
  }
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (man << 13));
}

float f16_round(float x) { return f16_to_f32(f32_to_f16(x)); }

namespace {

bool is_positive_power_of_two(float s) {
  if (!(s > 0.0f) || !std::isfinite(s)) return false;
  int exp = 0;
  const float frac = std::frexp(s, &exp);
  return frac == 0.5f;
}

}  // namespace

LossScaler::LossScaler() : scale_(kDefaultLossScale), enabled_(true) {}

LossScaler::LossScaler(float scale, bool enabled) : scale_(scale), enabled_(enabled) {
  if (!is_positive_power_of_two(scale_)) {
    throw InvalidConfig("loss scale must be a positive power of two, got " +
                        std::to_string(scale));
  }
}

float scale_loss(float loss, const LossScaler& s) {
  return s.enabled() ? loss * s.scale() : loss;
}

void unscale_gradients(std::span<float> grads, const LossScaler& s) {
  for (float g : grads) {
    if (!std::isfinite(g)) {
      throw OverflowDetected("non-finite gradient before unscale; loss scale " +
                             std::to_string(s.scale()) + " is too large");
    }
  }
  if (!s.enabled()) return;
  const float inv = 1.0f / s.scale();  // exact: S is a power of two
  for (float& g : grads) g *= inv;
}

}  // namespace bertopt
