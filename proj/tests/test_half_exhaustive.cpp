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

// Exhaustive sweep of all 2^32 float bit patterns through f32_to_f16,
// checked against an independent double-arithmetic reference. Kept out of
// the main unit binary because it runs for a couple of minutes.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>

#include "bertopt/half.hpp"
#include "f16_reference.hpp"

int main() {
  uint64_t mismatches = 0;
  uint32_t first_bad = 0;
  uint32_t b = 0;
  do {
    const float x = std::bit_cast<float>(b);
    const uint16_t got = bertopt::f32_to_f16(x).bits;
    uint16_t want;
    if (std::isnan(x)) {
      // Any NaN encoding is acceptable as long as it stays a NaN.
      want = got;
      if (!bertopt::Binary16{got}.is_nan()) want = static_cast<uint16_t>(~got);
    } else {
      want = f16ref::f32_to_f16_bits(x);
    }
    if (got != want) {
      if (mismatches == 0) first_bad = b;
      ++mismatches;
    }
    ++b;
  } while (b != 0);

  if (mismatches != 0) {
    std::printf("FAIL: %llu mismatches, first at bits 0x%08X\n",
                static_cast<unsigned long long>(mismatches), first_bad);
    return 1;
  }
  std::printf("OK: all 4294967296 float patterns narrow correctly\n");
  return 0;
}
