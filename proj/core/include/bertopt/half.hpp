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
#ifndef BERTOPT_HALF_HPP_
#define BERTOPT_HALF_HPP_

#include <cstdint>
#include <span>

#include "bertopt/errors.hpp"

namespace bertopt {

// Software IEEE 754 binary16. Unique type so a bit pattern is never
// confused with an integer. Normal exponent range [-14, 15], smallest
// positive subnormal 2^-24, largest finite 65504.
struct Binary16 {
  uint16_t bits = 0;

  friend bool operator==(Binary16 a, Binary16 b) { return a.bits == b.bits; }

  bool is_nan() const { return (bits & 0x7C00u) == 0x7C00u && (bits & 0x03FFu) != 0; }
  bool is_inf() const { return (bits & 0x7FFFu) == 0x7C00u; }
};

// Nearest binary16 under round-to-nearest-even. Total: overflow goes to
// +-inf, values below half the smallest subnormal go to +-0, NaN stays NaN.
Binary16 f32_to_f16(float x);

// Exact widening (binary16 is a subset of binary32).
float f16_to_f32(Binary16 h);

// f16_to_f32(f32_to_f16(x)), the storage round-trip applied to every
// value written into an emulated-binary16 buffer.
float f16_round(float x);

inline constexpr float kMaxFiniteF16 = 65504.0f;
inline constexpr float kMinSubnormalF16 = 5.9604644775390625e-08f;  // 2^-24

// Static loss scale: a positive power-of-two constant S, fixed for the
// lifetime of a run so scaling and unscaling are exact in binary float.
class LossScaler {
 public:
  LossScaler();  // enabled, S = kDefaultLossScale
  explicit LossScaler(float scale, bool enabled = true);

  static LossScaler off() { return LossScaler(1.0f, false); }

  float scale() const { return scale_; }
  bool enabled() const { return enabled_; }

 private:
  float scale_;
  bool enabled_;
};

// 2^12 re-centers typical small-gradient exponents into binary16 normals.
inline constexpr float kDefaultLossScale = 4096.0f;

// loss * S (identity if disabled).
float scale_loss(float loss, const LossScaler& s);

// Divides every gradient by S in place. Throws OverflowDetected if any
// entry is inf/NaN, the signal that S is too large for this step.
void unscale_gradients(std::span<float> grads, const LossScaler& s);

}  // namespace bertopt

#endif  // BERTOPT_HALF_HPP_
