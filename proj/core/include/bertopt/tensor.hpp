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
#ifndef BERTOPT_TENSOR_HPP_
#define BERTOPT_TENSOR_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bertopt/errors.hpp"
#include "bertopt/half.hpp"

namespace bertopt {

enum class Dtype { kF32, kF16 };

inline size_t dtype_size(Dtype d) { return d == Dtype::kF32 ? 4 : 2; }
inline const char* dtype_name(Dtype d) { return d == Dtype::kF32 ? "f32" : "f16"; }

// Dense row-major tensor. F16 tensors are emulated: the buffer stays float,
// but every stored value is exactly representable in binary16 (each write
// passes through the narrowing round-trip).
struct Tensor {
  std::vector<int64_t> shape;
  Dtype dtype = Dtype::kF32;
  std::vector<float> data;
  int node = -1;  // producing tape node, -1 when off-tape

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
  }
  float scalar() const;

  static Tensor zeros(std::vector<int64_t> shape, Dtype dt = Dtype::kF32);
  static Tensor full(std::vector<int64_t> shape, float v, Dtype dt = Dtype::kF32);
  static Tensor from(std::vector<int64_t> shape, std::vector<float> v,
                     Dtype dt = Dtype::kF32);
  // Deterministic Box-Muller normals; identical bits for identical seeds.
  static Tensor randn(std::vector<int64_t> shape, uint64_t seed,
                      float stddev = 1.0f);
};

// Rounds every element through binary16 when the tensor is F16.
void quantize_inplace(Tensor& t);

// Reverse-mode tape. Ops record a node when any input is on the tape;
// backward replays nodes in exact reverse execution order, which fixes the
// gradient accumulation order and makes runs bit-reproducible.
class Tape {
 public:
  // Registers a leaf (parameter or input) and returns its node id.
  int watch(Tensor& t);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scalar_mul(const Tensor& a, float c);
  Tensor pow(const Tensor& a, float p);
  Tensor tanh(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor softmax(const Tensor& a);
  Tensor layer_norm(const Tensor& a, float eps = 1e-12f);
  Tensor gelu(const Tensor& a);
  Tensor dropout(const Tensor& a, float rate, uint64_t seed);
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);
  Tensor sum(const Tensor& a);
  Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
  Tensor transpose(const Tensor& a, std::vector<int> perm);
  Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx);
  Tensor cast(const Tensor& a, Dtype dt);

  // Gradients indexed by node id; nodes unreachable from the loss keep an
  // empty tensor. Use grad() to read a leaf's gradient (explicit zeros for
  // disconnected leaves). Gradients are always FP32.
  std::vector<Tensor> backward(const Tensor& loss);

  // Same sweep with a progress hook: progress(i, acc) fires after node i is
  // finalized, descending from loss.node to 0. Node k's gradient can no
  // longer change once i <= first_consumers()[k]; the collective engine
  // launches bucket all-reduces on that boundary.
  std::vector<Tensor> backward(
      const Tensor& loss,
      const std::function<void(int node, const std::vector<Tensor>& acc)>&
          progress);

  Tensor grad(const std::vector<Tensor>& grads, const Tensor& t) const;

  // Lowest op id consuming each node, INT_MAX for unconsumed nodes.
  std::vector<int> first_consumers() const;

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  friend struct TapeOps;
  struct Node {
    std::vector<int64_t> shape;
    std::vector<int> ins;
    std::function<void(const Tensor& g, std::vector<Tensor>& acc)> back;
  };
  std::vector<Node> nodes_;

  int record(const Tensor& out, std::vector<int> ins,
             std::function<void(const Tensor&, std::vector<Tensor>&)> back);
};

// Adds delta into acc[node], allocating zeros on first touch. Exposed for
// the collective engine's bucket bookkeeping tests.
void accumulate_grad(std::vector<Tensor>& acc, int node,
                     const std::vector<int64_t>& shape, const Tensor& delta);

// Sums g over leading axes until its shape equals target (the adjoint of
// leading-dim broadcast).
Tensor reduce_to(const Tensor& g, const std::vector<int64_t>& target);

std::string shape_str(const std::vector<int64_t>& s);

}  // namespace bertopt

#endif  // BERTOPT_TENSOR_HPP_
