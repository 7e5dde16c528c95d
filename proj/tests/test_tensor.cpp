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
#include <cmath>
#include <random>
#include <vector>

#include "bertopt/tensor.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using bertopt::Dtype;
using bertopt::Tape;
using bertopt::Tensor;

namespace {

Tensor randu(std::vector<int64_t> shape, uint64_t seed, float lo, float hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::mt19937_64 rng(seed);
  for (float& v : t.data) {
    v = lo + (hi - lo) * static_cast<float>((rng() >> 11) * 0x1.0p-53);
  }
  return t;
}

}  // namespace

TEST_CASE("matmul by the identity leaves the operand unchanged") {
  Tape tape;
  const Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor a = Tensor::from({2, 2}, {3.5f, -1.25f, 0.75f, 9.0f});
  const Tensor out = tape.matmul(i2, a);
  for (size_t i = 0; i < 4; ++i) CHECK(out.data[i] == a.data[i]);
}

TEST_CASE("layer_norm of a constant vector is zero pre-affine") {
  Tape tape;
  const Tensor c = Tensor::full({4, 8}, 2.75f);
  const Tensor out = tape.layer_norm(c);
  for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("gelu(0) == 0 and gelu matches the closed form") {
  Tape tape;
  const Tensor z = Tensor::from({1}, {0.0f});
  CHECK(tape.gelu(z).data[0] == 0.0f);
  const Tensor one = Tensor::from({1}, {1.0f});
  const double k = std::sqrt(2.0 / 3.14159265358979323846);
  const double want = 0.5 * (1.0 + std::tanh(k * 1.044715));
  CHECK(tape.gelu(one).data[0] == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("backward of sum is all-ones; sum of squares matches analytics") {
  Tape tape;
  Tensor w = Tensor::from({3}, {1, 2, 3});
  tape.watch(w);
  const Tensor loss = tape.sum(w);
  const auto grads = tape.backward(loss);
  const Tensor g = tape.grad(grads, w);
  for (float v : g.data) CHECK(v == 1.0f);

  Tape t2;
  Tensor w2 = Tensor::from({3}, {1, 2, 3});
  t2.watch(w2);
  const Tensor loss2 = t2.sum(t2.mul(w2, w2));
  const auto g2 = t2.grad(t2.backward(loss2), w2);
  CHECK(g2.data[0] == 2.0f);
  CHECK(g2.data[1] == 4.0f);
  CHECK(g2.data[2] == 6.0f);
}

TEST_CASE("disconnected parameter gets an explicit zero gradient") {
  Tape tape;
  Tensor used = Tensor::from({2}, {1, 2});
  Tensor unused = Tensor::from({2}, {5, 6});
  tape.watch(used);
  tape.watch(unused);
  const Tensor loss = tape.sum(used);
  const auto grads = tape.backward(loss);
  const Tensor g = tape.grad(grads, unused);
  CHECK(g.shape == unused.shape);
  for (float v : g.data) CHECK(v == 0.0f);
}

TEST_CASE("finite differences validate every primitive op") {
  auto fd = [](auto build, const std::vector<Tensor>& init) {
    const auto res = gradcheck::run(build, init, 1e-3f, 1e-3f, 1e-5f);
    INFO(res.where);
    CHECK(res.ok);
  };

  const Tensor x = randu({3, 5}, 101, -2.0f, 2.0f);
  const Tensor y = randu({3, 5}, 102, -2.0f, 2.0f);
  const Tensor pos = randu({4, 6}, 103, 0.2f, 3.0f);

  fd([](auto& c, auto& p) { return c.sum(c.add(p[0], p[1])); }, {x, y});
  fd([](auto& c, auto& p) { return c.sum(c.mul(p[0], p[1])); }, {x, y});
  fd([](auto& c, auto& p) {
       return c.sum(c.mul(c.scalar_mul(p[0], -1.7f), p[0]));
     },
     {x});
  fd([](auto& c, auto& p) { return c.sum(c.pow(p[0], 3.0f)); }, {x});
  fd([](auto& c, auto& p) { return c.sum(c.pow(p[0], 1.5f)); }, {pos});
  fd([](auto& c, auto& p) { return c.sum(c.tanh(p[0])); }, {x});
  fd([](auto& c, auto& p) { return c.sum(c.exp(p[0])); }, {x});
  fd([](auto& c, auto& p) { return c.sum(c.log(p[0])); }, {pos});
  fd([](auto& c, auto& p) { return c.sum(c.gelu(p[0])); }, {x});
  fd([](auto& c, auto& p) { return c.sum(c.mul(c.softmax(p[0]), p[1])); },
     {x, y});
  fd([](auto& c, auto& p) { return c.sum(c.mul(c.layer_norm(p[0]), p[1])); },
     {x, y});
  fd([](auto& c, auto& p) { return c.sum(c.dropout(p[0], 0.5f, 42)); }, {x});
  fd([](auto& c, auto& p) { return c.sum(c.matmul(p[0], p[1])); },
     {randu({4, 3}, 104, -1, 1), randu({3, 5}, 105, -1, 1)});
  fd([](auto& c, auto& p) { return c.sum(c.matmul(p[0], p[1])); },
     {randu({2, 2, 3}, 106, -1, 1), randu({3, 4}, 107, -1, 1)});
  fd([](auto& c, auto& p) { return c.cross_entropy(p[0], {1, 0, 3}); },
     {randu({3, 4}, 108, -2, 2)});
  fd([](auto& c, auto& p) {
       return c.sum(c.mul(c.reshape(p[0], {5, 3}), p[1]));
     },
     {x, randu({5, 3}, 109, -1, 1)});
  fd([](auto& c, auto& p) {
       return c.sum(c.mul(c.transpose(p[0], {1, 0}), p[1]));
     },
     {x, randu({5, 3}, 110, -1, 1)});
  fd([](auto& c, auto& p) { return c.sum(c.gather_rows(p[0], {2, 0, 2})); },
     {x});
  // Reused-operand graph: x appears three times, exercising gradient
  // accumulation across fan-out.
  fd([](auto& c, auto& p) {
       return c.sum(c.mul(c.add(p[0], c.tanh(p[0])), p[0]));
     },
     {x});
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
  const Tensor in32 = randu({4, 6}, 200, -1.0f, 1.0f);
  const std::vector<Tensor> init = {
      in32, randu({6, 8}, 201, -0.5f, 0.5f), randu({8}, 202, -0.1f, 0.1f),
      randu({8, 3}, 203, -0.5f, 0.5f), randu({3}, 204, -0.1f, 0.1f)};
  auto build = [](auto& c, auto& p) {
    auto h = c.gelu(c.add(c.matmul(p[0], p[1]), p[2]));
    auto logits = c.add(c.matmul(h, p[3]), p[4]);
    return c.cross_entropy(logits, {0, 2, 1, 2});
  };
  const auto res = gradcheck::run(build, init, 1e-3f, 1e-3f, 1e-5f);
  INFO(res.where);
  CHECK(res.ok);
}

TEST_CASE("mixing dtypes without a cast throws DtypeMismatch") {
  Tape tape;
  const Tensor a = Tensor::from({2}, {1, 2}, Dtype::kF32);
  const Tensor b = Tensor::from({2}, {3, 4}, Dtype::kF16);
  CHECK_THROWS_AS(tape.add(a, b), bertopt::DtypeMismatch);
  CHECK_THROWS_AS(tape.mul(a, b), bertopt::DtypeMismatch);
  const Tensor a2 = Tensor::from({2, 2}, {1, 2, 3, 4}, Dtype::kF32);
  const Tensor b2 = Tensor::from({2, 2}, {1, 2, 3, 4}, Dtype::kF16);
  CHECK_THROWS_AS(tape.matmul(a2, b2), bertopt::DtypeMismatch);
}

TEST_CASE("shape errors are reported") {
  Tape tape;
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(tape.add(a, b), bertopt::ShapeMismatch);
  CHECK_THROWS_AS(tape.matmul(a, b), bertopt::ShapeMismatch);
  CHECK_THROWS_AS(tape.reshape(a, {4, 2}), bertopt::ShapeMismatch);
  CHECK_THROWS_AS(tape.backward(a), bertopt::ShapeMismatch);
}

TEST_CASE("cast semantics: f16 underflow and exact round-trips") {
  Tape tape;
  const Tensor a = Tensor::from({2}, {1.0f, 0x1p-25f});
  const Tensor h = tape.cast(a, Dtype::kF16);
  CHECK(h.data[0] == 1.0f);
  CHECK(h.data[1] == 0.0f);

  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const float v = bertopt::f16_round(
        static_cast<float>((rng() >> 11) * 0x1.0p-53) * 100.0f - 50.0f);
    const Tensor t16 = Tensor::from({1}, {v}, Dtype::kF16);
    const Tensor back =
        tape.cast(tape.cast(t16, Dtype::kF32), Dtype::kF16);
    CHECK(back.data[0] == v);
    CHECK(back.dtype == Dtype::kF16);
  }

  const Tensor s = Tensor::from({}, {3.140625f});
  CHECK(tape.cast(s, Dtype::kF16).data[0] == 3.140625f);
}

TEST_CASE("f16 emulated tensors only hold representable values") {
  const Tensor t = Tensor::from({3}, {0.1f, 1.00001f, 70000.0f}, Dtype::kF16);
  for (float v : t.data) {
    CHECK(bertopt::f16_round(v) == v);
  }
  CHECK(std::isinf(t.data[2]));
}

TEST_CASE("f16 forward with FP32 accumulation tracks the FP32 result") {
  // Per-element relative error from operand rounding stays within 2^-10
  // times the reduction length safety margin for inner dims <= 64.
  std::mt19937_64 rng(31);
  auto fill = [&rng](Tensor& t) {
    for (float& v : t.data) {
      v = static_cast<float>((rng() >> 11) * 0x1.0p-53) * 2.0f - 1.0f;
    }
  };
  Tensor a32 = Tensor::zeros({16, 64});
  Tensor b32 = Tensor::zeros({64, 16});
  fill(a32);
  fill(b32);
  Tensor a16 = a32, b16 = b32;
  a16.dtype = Dtype::kF16;
  b16.dtype = Dtype::kF16;
  bertopt::quantize_inplace(a16);
  bertopt::quantize_inplace(b16);

  Tape tape;
  const Tensor c32 = tape.matmul(a32, b32);
  const Tensor c16 = tape.matmul(a16, b16);
  for (size_t i = 0; i < c32.data.size(); ++i) {
    float row_abs = 0.0f;
    for (int64_t k = 0; k < 64; ++k) {
      row_abs += std::fabs(a32.data[(i / 16) * 64 + static_cast<size_t>(k)]);
    }
    const float bound = 0x1p-10f * row_abs + 0x1p-10f * std::fabs(c32.data[i]);
    CHECK(std::fabs(c16.data[i] - c32.data[i]) <= bound + 1e-6f);
  }
}

TEST_CASE("identical seeds give bit-identical outputs and gradients") {
  auto run = [] {
    Tape tape;
    Tensor w = Tensor::randn({6, 6}, 99, 0.3f);
    tape.watch(w);
    const Tensor in = Tensor::randn({2, 6}, 77);
    Tensor h = tape.dropout(tape.gelu(tape.matmul(in, w)), 0.3f, 5);
    const Tensor loss = tape.sum(h);
    const auto grads = tape.backward(loss);
    std::vector<float> out = tape.grad(grads, w).data;
    out.push_back(loss.data[0]);
    return out;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(std::bit_cast<uint32_t>(a[i]) == std::bit_cast<uint32_t>(b[i]));
  }
}
