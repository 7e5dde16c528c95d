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
#ifndef BERTOPT_GRAPH_HPP_
#define BERTOPT_GRAPH_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bertopt/errors.hpp"

namespace bertopt {

// Dataflow IR node kinds. The elementwise subset doubles as the fused-kernel
// instruction set; row_mean is the one in-kernel reduction (value broadcast
// back over its row).
enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kAddScalar,
  kPow,
  kTanh,
  kTanh1p,
  kExp,
  kLog,
  kSqrt,
  kRecip,
  kRsqrtEps,
  kRowMean,
  kCast,
  kMatmul,
  kSoftmax,
  kLayerNorm,
  kCrossEntropy,
  kFused,
};

const char* op_name(OpKind k);
OpKind op_from_name(const std::string& name);
bool op_is_elementwise(OpKind k);
bool op_is_barrier(OpKind k);

enum class GDtype { kF32, kF16, kUnassigned };
const char* gdtype_name(GDtype d);

// One scalar instruction of a fused kernel: out = kind(regs[a], regs[b]).
// b is -1 for unary kinds; attr carries the scalar constant where the kind
// uses one.
struct FusedInstr {
  OpKind kind;
  int a = -1;
  int b = -1;
  int out = -1;
  double attr = 0.0;
};

struct FusedKernel {
  std::string name;
  int arity = 0;   // input registers are 0..arity-1
  int n_regs = 0;  // total registers including inputs
  std::vector<FusedInstr> body;
  std::vector<int> out_regs;  // multiple outputs allowed
};

// Value ids: graph inputs occupy 0..n_inputs-1, node i produces value
// n_inputs+i. op_count() deliberately counts executable nodes only, so the
// unfused GELU graph reports exactly its seven kernels.
struct GNode {
  OpKind kind;
  GDtype dtype = GDtype::kUnassigned;
  std::vector<int> inputs;
  double attr = 0.0;
  int kernel = -1;  // index into ExprGraph::kernels for kFused
};

struct ExprGraph {
  int n_inputs = 0;
  std::vector<GDtype> input_dtypes;
  std::vector<GNode> nodes;
  std::vector<int> outputs;
  std::vector<FusedKernel> kernels;

  int op_count() const { return static_cast<int>(nodes.size()); }
  int value_count() const { return n_inputs + op_count(); }
  int add_input(GDtype dt = GDtype::kF32);
  int add_node(OpKind kind, std::vector<int> inputs, double attr = 0.0,
               GDtype dt = GDtype::kUnassigned);
  void validate() const;
};

struct SafetyTable {
  enum class Safety { kSafe, kDangerous, kNeutral };
  std::map<OpKind, Safety> entries;
  static SafetyTable defaults();
};

// Interpreter buffer. F16 buffers hold genuine 16-bit storage; compute
// always widens to FP32.
struct GBuf {
  std::vector<int64_t> shape;
  GDtype dtype = GDtype::kF32;
  std::vector<float> f32;
  std::vector<uint16_t> f16;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
  }
  static GBuf from_f32(std::vector<int64_t> shape, std::vector<float> v);
  static GBuf zeros(std::vector<int64_t> shape, GDtype dt);
  std::vector<float> to_f32() const;
};

struct InterpStats {
  int64_t node_visits = 0;
};

// Builders for the graphs the rewrites are specified against.
ExprGraph build_gelu_unfused();
ExprGraph build_layer_norm_unfused(float eps = 1e-12f);
ExprGraph build_optimizer_unfused(float lr, float beta1, float beta2,
                                  float eps, float weight_decay, int step);

ExprGraph fuse_elementwise(const ExprGraph& g);
ExprGraph amp_rewrite(const ExprGraph& g, const SafetyTable& table);

std::vector<GBuf> interpret(const ExprGraph& g, const std::vector<GBuf>& inputs,
                            InterpStats* stats = nullptr);

FusedKernel fused_layer_norm(float eps = 1e-12f);
FusedKernel fused_optimizer_step(float lr, float beta1, float beta2, float eps,
                                 float weight_decay, int step);

// Executes a kernel standalone. row_len is the row extent for row
// instructions (pass the trailing dim; 0 means whole buffer is one row).
std::vector<GBuf> run_fused_kernel(const FusedKernel& k,
                                   const std::vector<const GBuf*>& inputs,
                                   GDtype out_dtype, int64_t row_len = 0);

std::string dump_graph(const ExprGraph& g);
ExprGraph load_graph(const std::string& text);

// Block conversion helpers; hardware-accelerated when compiled with F16C,
// bit-identical to the soft path either way.
void widen_f16_block(const uint16_t* src, float* dst, size_t n);
void narrow_f16_block(const float* src, uint16_t* dst, size_t n);

}  // namespace bertopt

#endif  // BERTOPT_GRAPH_HPP_
