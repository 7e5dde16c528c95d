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
#include "bertopt/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "bertopt/half.hpp"

#if defined(__F16C__)
#include <immintrin.h>
#endif

namespace bertopt {
namespace {

struct OpInfo {
  OpKind kind;
  const char* name;
  bool elementwise;
  bool barrier;
};

constexpr OpInfo kOps[] = {
    {OpKind::kAdd, "add", true, false},
    {OpKind::kSub, "sub", true, false},
    {OpKind::kMul, "mul", true, false},
    {OpKind::kScalarMul, "scalar_mul", true, false},
    {OpKind::kAddScalar, "add_scalar", true, false},
    {OpKind::kPow, "pow", true, false},
    {OpKind::kTanh, "tanh", true, false},
    {OpKind::kTanh1p, "tanh1p", true, false},
    {OpKind::kExp, "exp", true, false},
    {OpKind::kLog, "log", true, false},
    {OpKind::kSqrt, "sqrt", true, false},
    {OpKind::kRecip, "recip", true, false},
    {OpKind::kRsqrtEps, "rsqrt_eps", true, false},
    {OpKind::kRowMean, "row_mean", false, true},
    {OpKind::kCast, "cast", false, false},
    {OpKind::kMatmul, "matmul", false, true},
    {OpKind::kSoftmax, "softmax", false, true},
    {OpKind::kLayerNorm, "layer_norm", false, true},
    {OpKind::kCrossEntropy, "cross_entropy", false, true},
    {OpKind::kFused, "fused", false, false},
};

const OpInfo& info(OpKind k) {
  for (const OpInfo& o : kOps) {
    if (o.kind == k) return o;
  }
  throw UnknownOpKind("op kind " + std::to_string(static_cast<int>(k)));
}

bool is_unary(OpKind k) {
  switch (k) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kMatmul:
    case OpKind::kCrossEntropy:
      return false;
    default:
      return true;
  }
}

}  // namespace

const char* op_name(OpKind k) { return info(k).name; }

OpKind op_from_name(const std::string& name) {
  for (const OpInfo& o : kOps) {
    if (name == o.name) return o.kind;
  }
  throw UnknownOpKind("op name '" + name + "'");
}

bool op_is_elementwise(OpKind k) { return info(k).elementwise; }
bool op_is_barrier(OpKind k) { return info(k).barrier; }

const char* gdtype_name(GDtype d) {
  switch (d) {
    case GDtype::kF32: return "f32";
    case GDtype::kF16: return "f16";
    default: return "unassigned";
  }
}

static GDtype gdtype_from_name(const std::string& s) {
  if (s == "f32") return GDtype::kF32;
  if (s == "f16") return GDtype::kF16;
  if (s == "unassigned") return GDtype::kUnassigned;
  throw InvalidConfig("unknown dtype '" + s + "'");
}

int ExprGraph::add_input(GDtype dt) {
  if (!nodes.empty()) {
    throw InvalidConfig("inputs must be declared before nodes");
  }
  input_dtypes.push_back(dt);
  return n_inputs++;
}

int ExprGraph::add_node(OpKind kind, std::vector<int> inputs, double attr,
                        GDtype dt) {
  const int id = value_count();
  for (int in : inputs) {
    if (in < 0 || in >= id) {
      throw InvalidConfig("node input " + std::to_string(in) +
                          " out of range");
    }
  }
  nodes.push_back(GNode{kind, dt, std::move(inputs), attr, -1});
  return id;
}

void ExprGraph::validate() const {
  if (static_cast<int>(input_dtypes.size()) != n_inputs) {
    throw InvalidConfig("input dtype list size mismatch");
  }
  for (size_t i = 0; i < nodes.size(); ++i) {
    const int id = n_inputs + static_cast<int>(i);
    for (int in : nodes[i].inputs) {
      if (in < 0 || in >= id) {
        throw InvalidConfig("acyclicity violated at node " + std::to_string(id));
      }
    }
    if (nodes[i].kind == OpKind::kFused &&
        (nodes[i].kernel < 0 ||
         nodes[i].kernel >= static_cast<int>(kernels.size()))) {
      throw InvalidConfig("fused node with missing kernel");
    }
  }
  for (int o : outputs) {
    if (o < 0 || o >= value_count()) {
      throw InvalidConfig("output id out of range");
    }
  }
}

SafetyTable SafetyTable::defaults() {
  using S = Safety;
  SafetyTable t;
  t.entries = {
      {OpKind::kAdd, S::kSafe},        {OpKind::kSub, S::kSafe},
      {OpKind::kMul, S::kSafe},        {OpKind::kScalarMul, S::kSafe},
      {OpKind::kAddScalar, S::kSafe},  {OpKind::kPow, S::kDangerous},
      {OpKind::kTanh, S::kSafe},       {OpKind::kTanh1p, S::kSafe},
      {OpKind::kExp, S::kDangerous},   {OpKind::kLog, S::kDangerous},
      {OpKind::kSqrt, S::kDangerous},  {OpKind::kRecip, S::kDangerous},
      {OpKind::kRsqrtEps, S::kDangerous}, {OpKind::kRowMean, S::kDangerous},
      {OpKind::kCast, S::kNeutral},    {OpKind::kMatmul, S::kSafe},
      {OpKind::kSoftmax, S::kDangerous}, {OpKind::kLayerNorm, S::kDangerous},
      {OpKind::kCrossEntropy, S::kDangerous}, {OpKind::kFused, S::kNeutral},
  };
  return t;
}

void widen_f16_block(const uint16_t* src, float* dst, size_t n) {
  size_t i = 0;
#if defined(__F16C__)
  for (; i + 8 <= n; i += 8) {
    const __m128i h =
        _mm_loadu_si128(reinterpret_cast<const __m128i*>(src + i));
    _mm256_storeu_ps(dst + i, _mm256_cvtph_ps(h));
  }
#endif
  for (; i < n; ++i) dst[i] = f16_to_f32(Binary16{src[i]});
}

void narrow_f16_block(const float* src, uint16_t* dst, size_t n) {
  size_t i = 0;
#if defined(__F16C__)
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(src + i);
    const __m128i h =
        _mm256_cvtps_ph(v, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(dst + i), h);
  }
#endif
  for (; i < n; ++i) dst[i] = f32_to_f16(src[i]).bits;
}

GBuf GBuf::from_f32(std::vector<int64_t> shape, std::vector<float> v) {
  GBuf b;
  b.shape = std::move(shape);
  b.dtype = GDtype::kF32;
  b.f32 = std::move(v);
  if (static_cast<int64_t>(b.f32.size()) != b.numel()) {
    throw ShapeMismatch("GBuf::from_f32: data size does not match shape");
  }
  return b;
}

GBuf GBuf::zeros(std::vector<int64_t> shape, GDtype dt) {
  GBuf b;
  b.shape = std::move(shape);
  b.dtype = dt;
  if (dt == GDtype::kF16) {
    b.f16.assign(static_cast<size_t>(b.numel()), 0);
  } else {
    b.f32.assign(static_cast<size_t>(b.numel()), 0.0f);
  }
  return b;
}

std::vector<float> GBuf::to_f32() const {
  if (dtype != GDtype::kF16) return f32;
  std::vector<float> out(f16.size());
  widen_f16_block(f16.data(), out.data(), f16.size());
  return out;
}

ExprGraph build_gelu_unfused() {
  // f = x^3; f = c*f; f = x+f; f = b*f; f = tanh(f)+1; f = x*f; f = a*f.
  const double a = 0.5;
  const double b = 0.79788456080286535588;  // sqrt(2/pi)
  const double c = 0.044715;
  ExprGraph g;
  const int x = g.add_input();
  int f = g.add_node(OpKind::kPow, {x}, 3.0);
  f = g.add_node(OpKind::kScalarMul, {f}, c);
  f = g.add_node(OpKind::kAdd, {x, f});
  f = g.add_node(OpKind::kScalarMul, {f}, b);
  f = g.add_node(OpKind::kTanh1p, {f});
  f = g.add_node(OpKind::kMul, {x, f});
  f = g.add_node(OpKind::kScalarMul, {f}, a);
  g.outputs = {f};
  return g;
}

ExprGraph build_layer_norm_unfused(float eps) {
  ExprGraph g;
  const int x = g.add_input();
  const int mu = g.add_node(OpKind::kRowMean, {x});
  const int cx = g.add_node(OpKind::kSub, {x, mu});
  const int sq = g.add_node(OpKind::kMul, {cx, cx});
  const int var = g.add_node(OpKind::kRowMean, {sq});
  const int rs = g.add_node(OpKind::kRsqrtEps, {var}, eps);
  const int y = g.add_node(OpKind::kMul, {cx, rs});
  g.outputs = {y};
  return g;
}

ExprGraph build_optimizer_unfused(float lr, float beta1, float beta2,
                                  float eps, float weight_decay, int step) {
  const double bc1 = 1.0 / (1.0 - std::pow(static_cast<double>(beta1), step));
  const double bc2 = 1.0 / (1.0 - std::pow(static_cast<double>(beta2), step));
  ExprGraph g;
  const int w = g.add_input();
  const int gr = g.add_input();
  const int m = g.add_input();
  const int v = g.add_input();
  const int m1 = g.add_node(OpKind::kScalarMul, {m}, beta1);
  const int m2 = g.add_node(OpKind::kScalarMul, {gr}, 1.0 - beta1);
  const int mn = g.add_node(OpKind::kAdd, {m1, m2});
  const int g2 = g.add_node(OpKind::kMul, {gr, gr});
  const int v1 = g.add_node(OpKind::kScalarMul, {v}, beta2);
  const int v2 = g.add_node(OpKind::kScalarMul, {g2}, 1.0 - beta2);
  const int vn = g.add_node(OpKind::kAdd, {v1, v2});
  const int mh = g.add_node(OpKind::kScalarMul, {mn}, bc1);
  const int vh = g.add_node(OpKind::kScalarMul, {vn}, bc2);
  const int sq = g.add_node(OpKind::kSqrt, {vh});
  const int de = g.add_node(OpKind::kAddScalar, {sq}, eps);
  const int re = g.add_node(OpKind::kRecip, {de});
  const int ad = g.add_node(OpKind::kMul, {mh, re});
  const int wd = g.add_node(OpKind::kScalarMul, {w}, weight_decay);
  const int u = g.add_node(OpKind::kAdd, {ad, wd});
  const int sc = g.add_node(OpKind::kScalarMul, {u}, -static_cast<double>(lr));
  const int wn = g.add_node(OpKind::kAdd, {w, sc});
  g.outputs = {wn, mn, vn};
  return g;
}

namespace {

// Per-block scalar evaluation shared by the per-node interpreter and the
// fused-kernel executor. The kind switch sits outside the element loop.
void apply_block(OpKind k, const float* a, const float* b, float* o, size_t n,
                 double attr) {
  const float c = static_cast<float>(attr);
  switch (k) {
    case OpKind::kAdd:
      for (size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
      break;
    case OpKind::kSub:
      for (size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
      break;
    case OpKind::kMul:
      for (size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
      break;
    case OpKind::kScalarMul:
      for (size_t i = 0; i < n; ++i) o[i] = c * a[i];
      break;
    case OpKind::kAddScalar:
      for (size_t i = 0; i < n; ++i) o[i] = a[i] + c;
      break;
    case OpKind::kPow:
      if (attr == 2.0) {
        for (size_t i = 0; i < n; ++i) o[i] = a[i] * a[i];
      } else if (attr == 3.0) {
        for (size_t i = 0; i < n; ++i) o[i] = a[i] * a[i] * a[i];
      } else {
        for (size_t i = 0; i < n; ++i) o[i] = std::pow(a[i], c);
      }
      break;
    case OpKind::kTanh:
      for (size_t i = 0; i < n; ++i) o[i] = std::tanh(a[i]);
      break;
    case OpKind::kTanh1p:
      for (size_t i = 0; i < n; ++i) o[i] = std::tanh(a[i]) + 1.0f;
      break;
    case OpKind::kExp:
      for (size_t i = 0; i < n; ++i) o[i] = std::exp(a[i]);
      break;
    case OpKind::kLog:
      for (size_t i = 0; i < n; ++i) o[i] = std::log(a[i]);
      break;
    case OpKind::kSqrt:
      for (size_t i = 0; i < n; ++i) o[i] = std::sqrt(a[i]);
      break;
    case OpKind::kRecip:
      for (size_t i = 0; i < n; ++i) o[i] = 1.0f / a[i];
      break;
    case OpKind::kRsqrtEps:
      for (size_t i = 0; i < n; ++i) o[i] = 1.0f / std::sqrt(a[i] + c);
      break;
    default:
      throw UnknownOpKind(std::string("apply_block: ") + op_name(k));
  }
}

bool kernel_has_row_instr(const FusedKernel& k) {
  for (const FusedInstr& in : k.body) {
    if (in.kind == OpKind::kRowMean) return true;
  }
  return false;
}

// In-place f16 round of a register block; keeps fused f16 chains
// bit-identical to the node-at-a-time execution they replaced.
void round_f16_block(float* p, size_t n) {
  size_t i = 0;
#if defined(__F16C__)
  for (; i + 8 <= n; i += 8) {
    const __m128i h = _mm256_cvtps_ph(
        _mm256_loadu_ps(p + i), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    _mm256_storeu_ps(p + i, _mm256_cvtph_ps(h));
  }
#endif
  for (; i < n; ++i) p[i] = f16_round(p[i]);
}

}  // namespace

std::vector<GBuf> run_fused_kernel(const FusedKernel& k,
                                   const std::vector<const GBuf*>& inputs,
                                   GDtype out_dtype, int64_t row_len) {
  if (static_cast<int>(inputs.size()) != k.arity) {
    throw ShapeMismatch("kernel '" + k.name + "' expects " +
                        std::to_string(k.arity) + " inputs");
  }
  const int64_t total = inputs.empty() ? 0 : inputs[0]->numel();
  for (const GBuf* b : inputs) {
    if (b->numel() != total) {
      throw ShapeMismatch("kernel '" + k.name + "': input sizes differ");
    }
  }
  const bool rows = kernel_has_row_instr(k);
  if (rows && row_len == 0) {
    row_len = inputs[0]->shape.empty() ? total : inputs[0]->shape.back();
  }
  const int64_t block = rows ? row_len : std::min<int64_t>(total, 1024);
  if (rows && total % row_len != 0) {
    throw ShapeMismatch("kernel '" + k.name + "': rows do not tile buffer");
  }

  std::vector<GBuf> outs;
  outs.reserve(k.out_regs.size());
  for (size_t i = 0; i < k.out_regs.size(); ++i) {
    outs.push_back(GBuf::zeros(inputs[0]->shape, out_dtype));
  }

  std::vector<std::vector<float>> regs(
      static_cast<size_t>(k.n_regs),
      std::vector<float>(static_cast<size_t>(std::max<int64_t>(block, 1))));
  for (int64_t off = 0; off < total; off += block) {
    const size_t bn = static_cast<size_t>(std::min<int64_t>(block, total - off));
    for (int r = 0; r < k.arity; ++r) {
      const GBuf* in = inputs[static_cast<size_t>(r)];
      if (in->dtype == GDtype::kF16) {
        widen_f16_block(in->f16.data() + off, regs[static_cast<size_t>(r)].data(), bn);
      } else {
        std::memcpy(regs[static_cast<size_t>(r)].data(), in->f32.data() + off,
                    bn * sizeof(float));
      }
    }
    for (const FusedInstr& in : k.body) {
      float* o = regs[static_cast<size_t>(in.out)].data();
      const float* a = regs[static_cast<size_t>(in.a)].data();
      if (in.kind == OpKind::kRowMean) {
        double s = 0.0;
        for (size_t i = 0; i < bn; ++i) s += a[i];
        const float mean = static_cast<float>(s / static_cast<double>(bn));
        for (size_t i = 0; i < bn; ++i) o[i] = mean;
      } else {
        const float* b = in.b >= 0 ? regs[static_cast<size_t>(in.b)].data() : nullptr;
        apply_block(in.kind, a, b, o, bn, in.attr);
      }
      if (out_dtype == GDtype::kF16) round_f16_block(o, bn);
    }
    for (size_t i = 0; i < k.out_regs.size(); ++i) {
      const float* src = regs[static_cast<size_t>(k.out_regs[i])].data();
      if (out_dtype == GDtype::kF16) {
        narrow_f16_block(src, outs[i].f16.data() + off, bn);
      } else {
        std::memcpy(outs[i].f32.data() + off, src, bn * sizeof(float));
      }
    }
  }
  return outs;
}

FusedKernel fused_layer_norm(float eps) {
  FusedKernel k;
  k.name = "layer_norm_fused";
  k.arity = 1;
  k.n_regs = 7;
  k.body = {
      {OpKind::kRowMean, 0, -1, 1, 0.0},
      {OpKind::kSub, 0, 1, 2, 0.0},
      {OpKind::kMul, 2, 2, 3, 0.0},
      {OpKind::kRowMean, 3, -1, 4, 0.0},
      {OpKind::kRsqrtEps, 4, -1, 5, static_cast<double>(eps)},
      {OpKind::kMul, 2, 5, 6, 0.0},
  };
  k.out_regs = {6};
  return k;
}

FusedKernel fused_optimizer_step(float lr, float beta1, float beta2, float eps,
                                 float weight_decay, int step) {
  const double bc1 = 1.0 / (1.0 - std::pow(static_cast<double>(beta1), step));
  const double bc2 = 1.0 / (1.0 - std::pow(static_cast<double>(beta2), step));
  FusedKernel k;
  k.name = "optimizer_fused";
  k.arity = 4;  // w, g, m, v
  k.n_regs = 21;
  k.body = {
      {OpKind::kScalarMul, 2, -1, 4, static_cast<double>(beta1)},
      {OpKind::kScalarMul, 1, -1, 5, 1.0 - static_cast<double>(beta1)},
      {OpKind::kAdd, 4, 5, 6, 0.0},  // m'
      {OpKind::kMul, 1, 1, 7, 0.0},
      {OpKind::kScalarMul, 3, -1, 8, static_cast<double>(beta2)},
      {OpKind::kScalarMul, 7, -1, 9, 1.0 - static_cast<double>(beta2)},
      {OpKind::kAdd, 8, 9, 10, 0.0},  // v'
      {OpKind::kScalarMul, 6, -1, 11, bc1},
      {OpKind::kScalarMul, 10, -1, 12, bc2},
      {OpKind::kSqrt, 12, -1, 13, 0.0},
      {OpKind::kAddScalar, 13, -1, 14, static_cast<double>(eps)},
      {OpKind::kRecip, 14, -1, 15, 0.0},
      {OpKind::kMul, 11, 15, 16, 0.0},
      {OpKind::kScalarMul, 0, -1, 17, static_cast<double>(weight_decay)},
      {OpKind::kAdd, 16, 17, 18, 0.0},  // u
      {OpKind::kScalarMul, 18, -1, 19, -static_cast<double>(lr)},
      {OpKind::kAdd, 0, 19, 20, 0.0},  // w'
  };
  k.out_regs = {20, 6, 10};
  return k;
}

ExprGraph fuse_elementwise(const ExprGraph& g) {
  g.validate();
  const int nv = g.value_count();
  std::vector<int> consumer_count(static_cast<size_t>(nv), 0);
  std::vector<int> sole_consumer(static_cast<size_t>(nv), -1);
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    for (int in : g.nodes[i].inputs) {
      consumer_count[static_cast<size_t>(in)]++;
      sole_consumer[static_cast<size_t>(in)] = static_cast<int>(i);
    }
  }
  std::vector<bool> is_output(static_cast<size_t>(nv), false);
  for (int o : g.outputs) is_output[static_cast<size_t>(o)] = true;

  // Greedy maximal chains: follow the sole consumer while it stays
  // elementwise, same-dtype, and the link value is not needed elsewhere.
  std::vector<int> chain_of(g.nodes.size(), -1);
  std::vector<std::vector<int>> chains;
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    if (chain_of[i] != -1 || !op_is_elementwise(g.nodes[i].kind)) continue;
    std::vector<int> chain = {static_cast<int>(i)};
    int cur = static_cast<int>(i);
    while (true) {
      const int vid = g.n_inputs + cur;
      if (consumer_count[static_cast<size_t>(vid)] != 1 ||
          is_output[static_cast<size_t>(vid)]) {
        break;
      }
      const int nxt = sole_consumer[static_cast<size_t>(vid)];
      if (nxt < 0 || chain_of[static_cast<size_t>(nxt)] != -1 ||
          !op_is_elementwise(g.nodes[static_cast<size_t>(nxt)].kind) ||
          g.nodes[static_cast<size_t>(nxt)].dtype != g.nodes[i].dtype) {
        break;
      }
      chain.push_back(nxt);
      cur = nxt;
    }
    if (chain.size() < 2) continue;
    for (int n : chain) chain_of[static_cast<size_t>(n)] = static_cast<int>(chains.size());
    chains.push_back(std::move(chain));
  }
  if (chains.empty()) return g;

  ExprGraph out;
  out.n_inputs = g.n_inputs;
  out.input_dtypes = g.input_dtypes;
  out.kernels = g.kernels;
  std::vector<int> remap(static_cast<size_t>(nv), -1);
  for (int i = 0; i < g.n_inputs; ++i) remap[static_cast<size_t>(i)] = i;

  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const int vid = g.n_inputs + static_cast<int>(i);
    const int ci = chain_of[i];
    if (ci == -1) {
      const GNode& n = g.nodes[i];
      std::vector<int> ins;
      ins.reserve(n.inputs.size());
      for (int in : n.inputs) ins.push_back(remap[static_cast<size_t>(in)]);
      const int nid = out.add_node(n.kind, std::move(ins), n.attr, n.dtype);
      out.nodes.back().kernel = n.kernel;
      remap[static_cast<size_t>(vid)] = nid;
      continue;
    }
    const std::vector<int>& chain = chains[static_cast<size_t>(ci)];
    if (chain.back() != static_cast<int>(i)) continue;  // interior: emitted with tail

    FusedKernel k;
    k.name = "fused_chain_" + std::to_string(out.kernels.size());
    std::vector<int> ext_inputs;           // original value ids
    std::vector<int> value_reg(static_cast<size_t>(nv), -1);
    auto arg_reg = [&](int v) {
      if (value_reg[static_cast<size_t>(v)] != -1) {
        return value_reg[static_cast<size_t>(v)];
      }
      const int r = static_cast<int>(ext_inputs.size());
      ext_inputs.push_back(v);
      value_reg[static_cast<size_t>(v)] = r;
      return r;
    };
    // First pass: collect external args so they take registers 0..arity-1.
    for (int n : chain) {
      for (int in : g.nodes[static_cast<size_t>(n)].inputs) {
        const int prod = in - g.n_inputs;
        const bool internal =
            prod >= 0 && chain_of[static_cast<size_t>(prod)] == ci;
        if (!internal) arg_reg(in);
      }
    }
    k.arity = static_cast<int>(ext_inputs.size());
    int next_reg = k.arity;
    for (int n : chain) {
      const GNode& gn = g.nodes[static_cast<size_t>(n)];
      FusedInstr fin;
      fin.kind = gn.kind;
      fin.attr = gn.attr;
      fin.a = value_reg[static_cast<size_t>(gn.inputs[0])];
      fin.b = gn.inputs.size() > 1
                  ? value_reg[static_cast<size_t>(gn.inputs[1])]
                  : -1;
      fin.out = next_reg++;
      value_reg[static_cast<size_t>(g.n_inputs + n)] = fin.out;
      k.body.push_back(fin);
    }
    k.n_regs = next_reg;
    k.out_regs = {k.body.back().out};

    std::vector<int> ins;
    ins.reserve(ext_inputs.size());
    for (int v : ext_inputs) ins.push_back(remap[static_cast<size_t>(v)]);
    const int nid = out.add_node(OpKind::kFused, std::move(ins), 0.0,
                                 g.nodes[static_cast<size_t>(chain[0])].dtype);
    out.nodes.back().kernel = static_cast<int>(out.kernels.size());
    out.kernels.push_back(std::move(k));
    remap[static_cast<size_t>(vid)] = nid;
  }

  out.outputs.reserve(g.outputs.size());
  for (int o : g.outputs) out.outputs.push_back(remap[static_cast<size_t>(o)]);
  out.validate();
  return out;
}

ExprGraph amp_rewrite(const ExprGraph& g, const SafetyTable& table) {
  g.validate();
  const int nv = g.value_count();
  std::vector<GDtype> vd(static_cast<size_t>(nv), GDtype::kF32);
  for (int i = 0; i < g.n_inputs; ++i) {
    vd[static_cast<size_t>(i)] = g.input_dtypes[static_cast<size_t>(i)] ==
                                         GDtype::kUnassigned
                                     ? GDtype::kF32
                                     : g.input_dtypes[static_cast<size_t>(i)];
  }
  std::vector<GDtype> tag(g.nodes.size());
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const GNode& n = g.nodes[i];
    if (n.kind == OpKind::kCast) {
      tag[i] = n.dtype == GDtype::kUnassigned ? GDtype::kF32 : n.dtype;
    } else {
      const auto it = table.entries.find(n.kind);
      if (it == table.entries.end()) {
        throw UnknownOpKind(std::string("amp_rewrite: no safety entry for '") +
                            op_name(n.kind) + "'");
      }
      switch (it->second) {
        case SafetyTable::Safety::kSafe:
          tag[i] = GDtype::kF16;
          break;
        case SafetyTable::Safety::kDangerous:
          tag[i] = GDtype::kF32;
          break;
        case SafetyTable::Safety::kNeutral: {
          int f16 = 0, f32 = 0;
          for (int in : n.inputs) {
            (vd[static_cast<size_t>(in)] == GDtype::kF16 ? f16 : f32)++;
          }
          tag[i] = f16 > f32 ? GDtype::kF16 : GDtype::kF32;  // tie -> FP32
          break;
        }
      }
    }
    vd[static_cast<size_t>(g.n_inputs + i)] = tag[i];
  }

  ExprGraph out;
  out.n_inputs = g.n_inputs;
  out.input_dtypes = g.input_dtypes;
  for (auto& d : out.input_dtypes) {
    if (d == GDtype::kUnassigned) d = GDtype::kF32;
  }
  out.kernels = g.kernels;
  std::vector<int> remap(static_cast<size_t>(nv), -1);
  for (int i = 0; i < g.n_inputs; ++i) remap[static_cast<size_t>(i)] = i;
  // One cast node per (value, target dtype), shared by all consumers.
  std::map<std::pair<int, GDtype>, int> cast_cache;

  auto casted = [&](int old_vid, GDtype want) {
    if (vd[static_cast<size_t>(old_vid)] == want) {
      return remap[static_cast<size_t>(old_vid)];
    }
    const auto key = std::make_pair(old_vid, want);
    const auto it = cast_cache.find(key);
    if (it != cast_cache.end()) return it->second;
    const int nid = out.add_node(OpKind::kCast,
                                 {remap[static_cast<size_t>(old_vid)]}, 0.0,
                                 want);
    cast_cache.emplace(key, nid);
    return nid;
  };

  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const GNode& n = g.nodes[i];
    std::vector<int> ins;
    ins.reserve(n.inputs.size());
    for (int in : n.inputs) ins.push_back(casted(in, tag[i]));
    const int nid = out.add_node(n.kind, std::move(ins), n.attr, tag[i]);
    out.nodes.back().kernel = n.kernel;
    remap[static_cast<size_t>(g.n_inputs + static_cast<int>(i))] = nid;
  }
  out.outputs.reserve(g.outputs.size());
  for (int o : g.outputs) out.outputs.push_back(remap[static_cast<size_t>(o)]);
  out.validate();
  return out;
}

namespace {

constexpr int64_t kNodeBlock = 8192;

GDtype storage_dtype(GDtype d) {
  return d == GDtype::kUnassigned ? GDtype::kF32 : d;
}

void check_input_dtype(const GBuf& b, GDtype want, const char* what) {
  if (storage_dtype(b.dtype) != storage_dtype(want)) {
    throw DtypeMismatch(std::string(what) + ": operand dtype " +
                        gdtype_name(b.dtype) + " where " + gdtype_name(want) +
                        " expected");
  }
}

// Widens a whole buffer; used by the reduction/matmul nodes where blocked
// streaming buys nothing.
std::vector<float> widened(const GBuf& b) { return b.to_f32(); }

void store_full(GBuf& dst, const std::vector<float>& v) {
  if (dst.dtype == GDtype::kF16) {
    narrow_f16_block(v.data(), dst.f16.data(), v.size());
  } else {
    std::memcpy(dst.f32.data(), v.data(), v.size() * sizeof(float));
  }
}

}  // namespace

std::vector<GBuf> interpret(const ExprGraph& g, const std::vector<GBuf>& inputs,
                            InterpStats* stats) {
  g.validate();
  if (static_cast<int>(inputs.size()) != g.n_inputs) {
    throw ShapeMismatch("interpret: " + std::to_string(inputs.size()) +
                        " inputs for graph with " + std::to_string(g.n_inputs));
  }
  std::vector<GBuf> values(static_cast<size_t>(g.value_count()));
  for (int i = 0; i < g.n_inputs; ++i) {
    check_input_dtype(inputs[static_cast<size_t>(i)],
                      g.input_dtypes[static_cast<size_t>(i)], "graph input");
    values[static_cast<size_t>(i)] = inputs[static_cast<size_t>(i)];
  }

  std::vector<float> scratch_a(kNodeBlock), scratch_b(kNodeBlock),
      scratch_o(kNodeBlock);

  for (size_t ni = 0; ni < g.nodes.size(); ++ni) {
    const GNode& n = g.nodes[ni];
    const int out_id = g.n_inputs + static_cast<int>(ni);
    const GDtype out_dt = storage_dtype(n.dtype);
    if (stats) stats->node_visits++;

    if (n.kind == OpKind::kCast) {
      const GBuf& src = values[static_cast<size_t>(n.inputs[0])];
      GBuf dst = GBuf::zeros(src.shape, out_dt);
      if (storage_dtype(src.dtype) == out_dt) {
        dst = src;
        dst.dtype = out_dt;
      } else if (out_dt == GDtype::kF16) {
        narrow_f16_block(src.f32.data(), dst.f16.data(), src.f32.size());
      } else {
        widen_f16_block(src.f16.data(), dst.f32.data(), src.f16.size());
      }
      values[static_cast<size_t>(out_id)] = std::move(dst);
      continue;
    }

    if (n.kind == OpKind::kFused) {
      const FusedKernel& k = g.kernels[static_cast<size_t>(n.kernel)];
      std::vector<const GBuf*> ins;
      ins.reserve(n.inputs.size());
      for (int in : n.inputs) {
        check_input_dtype(values[static_cast<size_t>(in)], n.dtype, "fused");
        ins.push_back(&values[static_cast<size_t>(in)]);
      }
      auto outs = run_fused_kernel(k, ins, out_dt);
      values[static_cast<size_t>(out_id)] = std::move(outs[0]);
      continue;
    }

    if (n.kind == OpKind::kMatmul) {
      const GBuf& a = values[static_cast<size_t>(n.inputs[0])];
      const GBuf& b = values[static_cast<size_t>(n.inputs[1])];
      check_input_dtype(a, n.dtype, "matmul");
      check_input_dtype(b, n.dtype, "matmul");
      if (a.shape.size() != 2 || b.shape.size() != 2 ||
          a.shape[1] != b.shape[0]) {
        throw ShapeMismatch("matmul: incompatible shapes");
      }
      const auto av = widened(a);
      const auto bv = widened(b);
      std::vector<float> cv(static_cast<size_t>(a.shape[0] * b.shape[1]));
      using MatRM =
          Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      Eigen::Map<const MatRM> A(av.data(), a.shape[0], a.shape[1]);
      Eigen::Map<const MatRM> B(bv.data(), b.shape[0], b.shape[1]);
      Eigen::Map<MatRM> C(cv.data(), a.shape[0], b.shape[1]);
      C.noalias() = A * B;
      GBuf dst = GBuf::zeros({a.shape[0], b.shape[1]}, out_dt);
      store_full(dst, cv);
      values[static_cast<size_t>(out_id)] = std::move(dst);
      continue;
    }

    if (n.kind == OpKind::kSoftmax || n.kind == OpKind::kLayerNorm ||
        n.kind == OpKind::kRowMean) {
      const GBuf& a = values[static_cast<size_t>(n.inputs[0])];
      check_input_dtype(a, n.dtype, op_name(n.kind));
      const auto av = widened(a);
      const int64_t d = a.shape.empty() ? a.numel() : a.shape.back();
      const int64_t rows = a.numel() / d;
      std::vector<float> ov(av.size());
      for (int64_t r = 0; r < rows; ++r) {
        const float* x = av.data() + r * d;
        float* y = ov.data() + r * d;
        if (n.kind == OpKind::kRowMean) {
          double s = 0.0;
          for (int64_t i = 0; i < d; ++i) s += x[i];
          const float m = static_cast<float>(s / static_cast<double>(d));
          for (int64_t i = 0; i < d; ++i) y[i] = m;
        } else if (n.kind == OpKind::kSoftmax) {
          float mx = x[0];
          for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
          float s = 0.0f;
          for (int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            s += y[i];
          }
          const float inv = 1.0f / s;
          for (int64_t i = 0; i < d; ++i) y[i] *= inv;
        } else {
          float mu = 0.0f;
          for (int64_t i = 0; i < d; ++i) mu += x[i];
          mu /= static_cast<float>(d);
          float var = 0.0f;
          for (int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
          var /= static_cast<float>(d);
          const float rs =
              1.0f / std::sqrt(var + static_cast<float>(n.attr == 0.0
                                                            ? 1e-12
                                                            : n.attr));
          for (int64_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * rs;
        }
      }
      GBuf dst = GBuf::zeros(a.shape, out_dt);
      store_full(dst, ov);
      values[static_cast<size_t>(out_id)] = std::move(dst);
      continue;
    }

    if (n.kind == OpKind::kCrossEntropy) {
      const GBuf& logits = values[static_cast<size_t>(n.inputs[0])];
      const GBuf& labels = values[static_cast<size_t>(n.inputs[1])];
      if (logits.dtype == GDtype::kF16 || n.dtype == GDtype::kF16) {
        throw DtypeMismatch("cross_entropy runs in f32");
      }
      if (logits.shape.size() != 2 ||
          labels.numel() != logits.shape[0]) {
        throw ShapeMismatch("cross_entropy: logits (n,c) with n labels");
      }
      const int64_t rows = logits.shape[0], c = logits.shape[1];
      double total = 0.0;
      for (int64_t r = 0; r < rows; ++r) {
        const float* x = logits.f32.data() + r * c;
        float mx = x[0];
        for (int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (int64_t i = 0; i < c; ++i) {
          s += std::exp(static_cast<double>(x[i] - mx));
        }
        const int64_t lab =
            static_cast<int64_t>(labels.f32[static_cast<size_t>(r)]);
        if (lab < 0 || lab >= c) {
          throw InvalidConfig("cross_entropy: label out of range");
        }
        total += mx + std::log(s) - x[lab];
      }
      GBuf dst = GBuf::zeros({}, GDtype::kF32);
      dst.f32[0] = static_cast<float>(total / static_cast<double>(rows));
      values[static_cast<size_t>(out_id)] = std::move(dst);
      continue;
    }

    // Elementwise node: one blocked pass over the buffer.
    const GBuf& a = values[static_cast<size_t>(n.inputs[0])];
    check_input_dtype(a, n.dtype, op_name(n.kind));
    const GBuf* b = nullptr;
    if (!is_unary(n.kind)) {
      b = &values[static_cast<size_t>(n.inputs[1])];
      check_input_dtype(*b, n.dtype, op_name(n.kind));
      if (b->shape != a.shape) {
        throw ShapeMismatch(std::string(op_name(n.kind)) +
                            ": shapes must match exactly in graphs");
      }
    }
    const int64_t total = a.numel();
    GBuf dst = GBuf::zeros(a.shape, out_dt);
    for (int64_t off = 0; off < total; off += kNodeBlock) {
      const size_t bn =
          static_cast<size_t>(std::min<int64_t>(kNodeBlock, total - off));
      const float* ap;
      if (a.dtype == GDtype::kF16) {
        widen_f16_block(a.f16.data() + off, scratch_a.data(), bn);
        ap = scratch_a.data();
      } else {
        ap = a.f32.data() + off;
      }
      const float* bp = nullptr;
      if (b) {
        if (b->dtype == GDtype::kF16) {
          widen_f16_block(b->f16.data() + off, scratch_b.data(), bn);
          bp = scratch_b.data();
        } else {
          bp = b->f32.data() + off;
        }
      }
      if (out_dt == GDtype::kF16) {
        apply_block(n.kind, ap, bp, scratch_o.data(), bn, n.attr);
        narrow_f16_block(scratch_o.data(), dst.f16.data() + off, bn);
      } else {
        apply_block(n.kind, ap, bp, dst.f32.data() + off, bn, n.attr);
      }
    }
    values[static_cast<size_t>(out_id)] = std::move(dst);
  }

  std::vector<GBuf> outs;
  outs.reserve(g.outputs.size());
  for (int o : g.outputs) outs.push_back(values[static_cast<size_t>(o)]);
  return outs;
}

std::string dump_graph(const ExprGraph& g) {
  g.validate();
  std::ostringstream os;
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "bertopt-graph v1\n";
  for (int i = 0; i < g.n_inputs; ++i) {
    os << "in " << i << " "
       << gdtype_name(g.input_dtypes[static_cast<size_t>(i)]) << "\n";
  }
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const GNode& n = g.nodes[i];
    os << "node " << (g.n_inputs + static_cast<int>(i)) << " "
       << op_name(n.kind) << " " << gdtype_name(n.dtype) << " in "
       << n.inputs.size();
    for (int in : n.inputs) os << " " << in;
    os << " attr " << num(n.attr);
    if (n.kind == OpKind::kFused) os << " kernel " << n.kernel;
    os << "\n";
  }
  for (int o : g.outputs) os << "out " << o << "\n";
  for (size_t i = 0; i < g.kernels.size(); ++i) {
    const FusedKernel& k = g.kernels[i];
    os << "kernel " << i << " " << k.name << " arity " << k.arity << " regs "
       << k.n_regs << " outs " << k.out_regs.size();
    for (int r : k.out_regs) os << " " << r;
    os << " body " << k.body.size();
    for (const FusedInstr& in : k.body) {
      os << " " << op_name(in.kind) << " " << in.a << " " << in.b << " "
         << in.out << " " << num(in.attr);
    }
    os << "\n";
  }
  return os.str();
}

ExprGraph load_graph(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "bertopt-graph v1") {
    throw InvalidConfig("load_graph: bad header");
  }
  ExprGraph g;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "in") {
      int id;
      std::string dt;
      ls >> id >> dt;
      if (id != g.n_inputs) throw InvalidConfig("load_graph: input order");
      g.add_input(gdtype_from_name(dt));
    } else if (tok == "node") {
      int id, nin;
      std::string kind, dt, marker;
      ls >> id >> kind >> dt >> marker >> nin;
      if (marker != "in") throw InvalidConfig("load_graph: node line");
      std::vector<int> ins(static_cast<size_t>(nin));
      for (int& v : ins) ls >> v;
      double attr = 0.0;
      ls >> marker >> attr;
      if (marker != "attr") throw InvalidConfig("load_graph: node line");
      const int nid =
          g.add_node(op_from_name(kind), std::move(ins), attr,
                     gdtype_from_name(dt));
      if (nid != id) throw InvalidConfig("load_graph: node id order");
      if (ls >> marker && marker == "kernel") {
        ls >> g.nodes.back().kernel;
      }
    } else if (tok == "out") {
      int id;
      ls >> id;
      g.outputs.push_back(id);
    } else if (tok == "kernel") {
      int idx;
      FusedKernel k;
      std::string marker;
      size_t nouts, nbody;
      ls >> idx >> k.name >> marker >> k.arity;
      ls >> marker >> k.n_regs;
      ls >> marker >> nouts;
      k.out_regs.resize(nouts);
      for (int& r : k.out_regs) ls >> r;
      ls >> marker >> nbody;
      for (size_t i = 0; i < nbody; ++i) {
        FusedInstr in;
        std::string kind;
        ls >> kind >> in.a >> in.b >> in.out >> in.attr;
        in.kind = op_from_name(kind);
        k.body.push_back(in);
      }
      if (static_cast<size_t>(idx) != g.kernels.size()) {
        throw InvalidConfig("load_graph: kernel order");
      }
      g.kernels.push_back(std::move(k));
    } else {
      throw InvalidConfig("load_graph: unknown line '" + line + "'");
    }
  }
  g.validate();
  return g;
}

}  // namespace bertopt
