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
#include "bertopt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace bertopt {

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

float Tensor::scalar() const {
  if (numel() != 1) {
    throw ShapeMismatch("scalar() on tensor of shape " + shape_str(shape));
  }
  return data[0];
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dt) {
  Tensor t;
  t.shape = std::move(shape);
  t.dtype = dt;
  t.data.assign(static_cast<size_t>(t.numel()), 0.0f);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, float v, Dtype dt) {
  Tensor t;
  t.shape = std::move(shape);
  t.dtype = dt;
  t.data.assign(static_cast<size_t>(t.numel()), v);
  quantize_inplace(t);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<float> v, Dtype dt) {
  Tensor t;
  t.shape = std::move(shape);
  t.dtype = dt;
  t.data = std::move(v);
  if (static_cast<int64_t>(t.data.size()) != t.numel()) {
    throw ShapeMismatch("from(): " + std::to_string(t.data.size()) +
                        " values for shape " + shape_str(t.shape));
  }
  quantize_inplace(t);
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, uint64_t seed, float stddev) {
  Tensor t = zeros(std::move(shape));
  std::mt19937_64 rng(seed);
  // Hand-rolled Box-Muller: std::normal_distribution is not bit-stable
  // across library versions.
  const double two_pi = 6.283185307179586476925286766559;
  size_t i = 0;
  while (i < t.data.size()) {
    double u1 = 0.0;
    do {
      u1 = (rng() >> 11) * 0x1.0p-53;
    } while (u1 <= 0.0);
    const double u2 = (rng() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    t.data[i++] = static_cast<float>(r * std::cos(two_pi * u2) * stddev);
    if (i < t.data.size()) {
      t.data[i++] = static_cast<float>(r * std::sin(two_pi * u2) * stddev);
    }
  }
  return t;
}

void quantize_inplace(Tensor& t) {
  if (t.dtype != Dtype::kF16) return;
  for (float& v : t.data) v = f16_round(v);
}

int Tape::record(const Tensor& out, std::vector<int> ins,
                 std::function<void(const Tensor&, std::vector<Tensor>&)> back) {
  std::vector<int> live;
  for (int i : ins) {
    if (i >= 0) live.push_back(i);
  }
  nodes_.push_back(Node{out.shape, std::move(live), std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::watch(Tensor& t) {
  t.node = record(t, {}, nullptr);
  return t.node;
}

std::vector<int> Tape::first_consumers() const {
  std::vector<int> first(nodes_.size(), std::numeric_limits<int>::max());
  for (size_t i = 0; i < nodes_.size(); ++i) {
    for (int in : nodes_[i].ins) {
      first[static_cast<size_t>(in)] =
          std::min(first[static_cast<size_t>(in)], static_cast<int>(i));
    }
  }
  return first;
}

void accumulate_grad(std::vector<Tensor>& acc, int node,
                     const std::vector<int64_t>& shape, const Tensor& delta) {
  Tensor& slot = acc[static_cast<size_t>(node)];
  if (slot.data.empty()) slot = Tensor::zeros(shape);
  for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += delta.data[i];
}

std::vector<Tensor> Tape::backward(const Tensor& loss) {
  return backward(loss, nullptr);
}

std::vector<Tensor> Tape::backward(
    const Tensor& loss,
    const std::function<void(int, const std::vector<Tensor>&)>& progress) {
  if (loss.node < 0) {
    throw ShapeMismatch("backward() on a tensor that is not on the tape");
  }
  if (loss.numel() != 1) {
    throw ShapeMismatch("backward() requires a scalar loss, got shape " +
                        shape_str(loss.shape));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<size_t>(loss.node)] = Tensor::full(loss.shape, 1.0f);
  for (int i = loss.node; i >= 0; --i) {
    const Node& n = nodes_[static_cast<size_t>(i)];
    Tensor& g = grads[static_cast<size_t>(i)];
    if (!g.data.empty() && n.back) n.back(g, grads);
    if (progress) progress(i, grads);
  }
  return grads;
}

Tensor Tape::grad(const std::vector<Tensor>& grads, const Tensor& t) const {
  if (t.node < 0 || t.node >= static_cast<int>(grads.size())) {
    throw ShapeMismatch("grad() for a tensor that is not on this tape");
  }
  const Tensor& g = grads[static_cast<size_t>(t.node)];
  if (g.data.empty()) return Tensor::zeros(t.shape);
  return g;
}

Tensor reduce_to(const Tensor& g, const std::vector<int64_t>& target) {
  if (g.shape == target) return g;
  int64_t tn = 1;
  for (int64_t e : target) tn *= e;
  Tensor out = Tensor::zeros(target);
  const int64_t inner = tn;
  const int64_t repeat = g.numel() / inner;
  for (int64_t r = 0; r < repeat; ++r) {
    const float* src = g.data.data() + r * inner;
    for (int64_t i = 0; i < inner; ++i) out.data[static_cast<size_t>(i)] += src[i];
  }
  return out;
}

}  // namespace bertopt
