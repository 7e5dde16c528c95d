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
#ifndef BERTOPT_MODEL_HPP_
#define BERTOPT_MODEL_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bertopt/data.hpp"
#include "bertopt/tensor.hpp"

namespace bertopt {

struct ModelConfig {
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int vocab = 1000;
  int max_seq = 512;
  float dropout = 0.0f;

  int intermediate() const { return 4 * hidden; }
  int head_dim() const { return hidden / heads; }
  void validate() const;
};

// Named FP32 parameter set. Order is fixed at construction and shared by
// gradients, optimizer state, and the collective engine's flat layout.
struct Model {
  ModelConfig cfg;
  std::vector<std::string> names;
  std::vector<Tensor> params;
  std::map<std::string, int> index;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  int64_t param_count() const;
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

// Dense batch assembled from fixed-length examples.
struct Batch {
  int64_t B = 0;
  int64_t S = 0;
  std::vector<int64_t> ids;            // B*S
  std::vector<int64_t> segments;       // B*S
  std::vector<int64_t> mask_flat;      // flat index b*S+p per prediction
  std::vector<int64_t> mask_labels;    // parallel to mask_flat
  std::vector<int64_t> is_next;        // B
};

Batch make_batch(const std::vector<TrainingExample>& examples);

struct ForwardResult {
  Tensor loss;        // scalar: mean masked-LM CE + NSP CE
  Tensor mlm_logits;  // (masked_count, V)
  Tensor nsp_logits;  // (B, 2)
  int64_t masked_count = 0;
};

// Numeric execution choices for one forward pass. amp runs matmuls, bias
// adds, activations, and attention score arithmetic in emulated binary16
// against FP32 master weights, while layer norm, softmax, residual sums,
// and both losses stay FP32. fused_gelu picks the closed-form GELU node;
// off, GELU is built from its tanh composition (the cube stays FP32, since
// pow is range-unsafe in binary16).
struct ForwardOptions {
  uint64_t dropout_seed = 0;
  bool amp = false;
  bool fused_gelu = true;
};

// Builds the forward graph on the tape (parameters are watched first, in
// model order, so grads align with model.params).
ForwardResult forward(Model& m, Tape& tape, const Batch& batch,
                      uint64_t dropout_seed = 0);
ForwardResult forward(Model& m, Tape& tape, const Batch& batch,
                      const ForwardOptions& opt);

// Group labels: embedding, attention, intermediate, output, other.
std::string param_group(const std::string& name);

struct ParamGroupReport {
  struct Group {
    int64_t count = 0;
    int64_t bytes = 0;
  };
  std::map<std::string, Group> groups;
  int64_t total_count = 0;
  int64_t total_bytes = 0;
};

ParamGroupReport param_group_report(const Model& m, Dtype dtype);

// Length-prefixed named-tensor checkpoint with a config header.
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace bertopt

#endif  // BERTOPT_MODEL_HPP_
