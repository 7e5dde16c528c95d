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
#ifndef BERTOPT_LAMB_HPP_
#define BERTOPT_LAMB_HPP_

#include <cstdint>
#include <vector>

#include "bertopt/tensor.hpp"

namespace bertopt {

// Layer-wise adaptive moments: Adam-style biased-corrected moments with a
// per-tensor trust ratio r = clip(||w|| / ||u||, [0, 10]), r = 1 when either
// norm vanishes. Standard-form defaults; the trust-ratio clip bound is an
// external-reference default.
struct LambConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-6f;
  float weight_decay = 0.01f;
  float trust_clip = 10.0f;
};

struct LambState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;
};

// One update over the whole parameter list. Throws NonFiniteGradient on any
// non-finite gradient entry, ShapeMismatch on layout disagreement.
void lamb_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               LambState& state, const LambConfig& cfg);

}  // namespace bertopt

#endif  // BERTOPT_LAMB_HPP_
