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
#include "bertopt/lamb.hpp"

#include <algorithm>
#include <cmath>

namespace bertopt {

void lamb_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               LambState& state, const LambConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ShapeMismatch("lamb_step: " + std::to_string(grads.size()) +
                        " gradients for " + std::to_string(params.size()) +
                        " parameters");
  }
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.push_back(Tensor::zeros(p.shape));
      state.v.push_back(Tensor::zeros(p.shape));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeMismatch("lamb_step: optimizer state layout mismatch");
  }

  state.step++;
  const double bc1 =
      1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 =
      1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));

  std::vector<float> u;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i];
    const Tensor& g = grads[i];
    if (g.shape != w.shape) {
      throw ShapeMismatch("lamb_step: gradient shape mismatch at tensor " +
                          std::to_string(i));
    }
    Tensor& mo = state.m[i];
    Tensor& vo = state.v[i];
    const size_t n = w.data.size();
    u.resize(n);

    double w_norm2 = 0.0, u_norm2 = 0.0;
    for (size_t j = 0; j < n; ++j) {
      const float gj = g.data[j];
      if (!std::isfinite(gj)) {
        throw NonFiniteGradient("non-finite gradient in tensor " +
                                std::to_string(i));
      }
      mo.data[j] = cfg.beta1 * mo.data[j] + (1.0f - cfg.beta1) * gj;
      vo.data[j] = cfg.beta2 * vo.data[j] + (1.0f - cfg.beta2) * gj * gj;
      const float mh = static_cast<float>(mo.data[j] / bc1);
      const float vh = static_cast<float>(vo.data[j] / bc2);
      u[j] = mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * w.data[j];
      w_norm2 += static_cast<double>(w.data[j]) * w.data[j];
      u_norm2 += static_cast<double>(u[j]) * u[j];
    }

    float r = 1.0f;
    if (w_norm2 > 0.0 && u_norm2 > 0.0) {
      r = static_cast<float>(std::sqrt(w_norm2) / std::sqrt(u_norm2));
      r = std::clamp(r, 0.0f, cfg.trust_clip);
    }
    const float step_scale = cfg.lr * r;
    for (size_t j = 0; j < n; ++j) w.data[j] -= step_scale * u[j];
    quantize_inplace(w);
  }
}

}  // namespace bertopt
