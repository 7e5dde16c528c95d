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
#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <random>
#include <utility>

#include "bertopt/tensor.hpp"

namespace bertopt {
namespace {

using MatRM =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluC = 0.044715f;

void check_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype != b.dtype) {
    throw DtypeMismatch(std::string(op) + ": mixing f32 and f16 operands "
                        "requires an explicit cast");
  }
}

bool is_suffix(const std::vector<int64_t>& small,
               const std::vector<int64_t>& big) {
  if (small.size() > big.size()) return false;
  const size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i]) return false;
  }
  return true;
}

// Binary shapes must match exactly or one must be a trailing suffix of the
// other (the small operand repeats across the leading batch dims).
const std::vector<int64_t>& binary_out_shape(const Tensor& a, const Tensor& b,
                                             const char* op) {
  if (a.shape == b.shape) return a.shape;
  if (is_suffix(b.shape, a.shape)) return a.shape;
  if (is_suffix(a.shape, b.shape)) return b.shape;
  throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape) + " vs " +
                      shape_str(b.shape));
}

int64_t last_dim(const Tensor& t, const char* op) {
  if (t.shape.empty()) {
    throw ShapeMismatch(std::string(op) + ": rank-0 tensor");
  }
  return t.shape.back();
}

}  // namespace

struct TapeOps {
  template <typename Fwd, typename Back>
  static Tensor unary(Tape& tape, const Tensor& a, Fwd fwd, Back make_back) {
    Tensor out;
    out.shape = a.shape;
    out.dtype = a.dtype;
    out.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = fwd(a.data[i]);
    quantize_inplace(out);
    if (a.node >= 0) out.node = tape.record(out, {a.node}, make_back(out));
    return out;
  }

  static Tensor binary(Tape& tape, const Tensor& a, const Tensor& b,
                       const char* name, float (*f)(float, float)) {
    check_dtype(a, b, name);
    const std::vector<int64_t> os = binary_out_shape(a, b, name);
    Tensor out = Tensor::zeros(os, a.dtype);
    const size_t n = out.data.size();
    const size_t na = a.data.size();
    const size_t nb = b.data.size();
    for (size_t i = 0; i < n; ++i) {
      out.data[i] = f(a.data[i % na], b.data[i % nb]);
    }
    quantize_inplace(out);
    return out;
  }
};

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  Tensor out = TapeOps::binary(*this, a, b, "add",
                               [](float x, float y) { return x + y; });
  if (a.node < 0 && b.node < 0) return out;
  const int an = a.node, bn = b.node;
  const auto as = a.shape, bs = b.shape;
  out.node = record(out, {an, bn}, [an, bn, as, bs](const Tensor& g,
                                                   std::vector<Tensor>& acc) {
    if (an >= 0) accumulate_grad(acc, an, as, reduce_to(g, as));
    if (bn >= 0) accumulate_grad(acc, bn, bs, reduce_to(g, bs));
  });
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  Tensor out = TapeOps::binary(*this, a, b, "mul",
                               [](float x, float y) { return x * y; });
  if (a.node < 0 && b.node < 0) return out;
  const int an = a.node, bn = b.node;
  const Tensor av = a, bv = b;
  out.node = record(out, {an, bn}, [an, bn, av, bv](const Tensor& g,
                                                   std::vector<Tensor>& acc) {
    const size_t n = g.data.size();
    if (an >= 0) {
      Tensor ga = Tensor::zeros(g.shape);
      for (size_t i = 0; i < n; ++i) {
        ga.data[i] = g.data[i] * bv.data[i % bv.data.size()];
      }
      accumulate_grad(acc, an, av.shape, reduce_to(ga, av.shape));
    }
    if (bn >= 0) {
      Tensor gb = Tensor::zeros(g.shape);
      for (size_t i = 0; i < n; ++i) {
        gb.data[i] = g.data[i] * av.data[i % av.data.size()];
      }
      accumulate_grad(acc, bn, bv.shape, reduce_to(gb, bv.shape));
    }
  });
  return out;
}

Tensor Tape::scalar_mul(const Tensor& a, float c) {
  const int an = a.node;
  const auto as = a.shape;
  return TapeOps::unary(
      *this, a, [c](float x) { return c * x; },
      [an, as, c](const Tensor&) {
        return [an, as, c](const Tensor& g, std::vector<Tensor>& acc) {
          Tensor ga = Tensor::zeros(g.shape);
          for (size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] = c * g.data[i];
          }
          accumulate_grad(acc, an, as, ga);
        };
      });
}

Tensor Tape::pow(const Tensor& a, float p) {
  const int an = a.node;
  const Tensor av = a;
  return TapeOps::unary(
      *this, a, [p](float x) { return std::pow(x, p); },
      [an, av, p](const Tensor&) {
        return [an, av, p](const Tensor& g, std::vector<Tensor>& acc) {
          Tensor ga = Tensor::zeros(av.shape);
          for (size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] = p * std::pow(av.data[i], p - 1.0f) * g.data[i];
          }
          accumulate_grad(acc, an, av.shape, ga);
        };
      });
}

Tensor Tape::tanh(const Tensor& a) {
  const int an = a.node;
  return TapeOps::unary(
      *this, a, [](float x) { return std::tanh(x); },
      [an](const Tensor& out) {
        const Tensor y = out;
        return [an, y](const Tensor& g, std::vector<Tensor>& acc) {
          Tensor ga = Tensor::zeros(y.shape);
          for (size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] = (1.0f - y.data[i] * y.data[i]) * g.data[i];
          }
          accumulate_grad(acc, an, y.shape, ga);
        };
      });
}

Tensor Tape::exp(const Tensor& a) {
  const int an = a.node;
  return TapeOps::unary(
      *this, a, [](float x) { return std::exp(x); },
      [an](const Tensor& out) {
        const Tensor y = out;
        return [an, y](const Tensor& g, std::vector<Tensor>& acc) {
          Tensor ga = Tensor::zeros(y.shape);
          for (size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] = y.data[i] * g.data[i];
          }
          accumulate_grad(acc, an, y.shape, ga);
        };
      });
}

Tensor Tape::log(const Tensor& a) {
  const int an = a.node;
  const Tensor av = a;
  return TapeOps::unary(
      *this, a, [](float x) { return std::log(x); },
      [an, av](const Tensor&) {
        return [an, av](const Tensor& g, std::vector<Tensor>& acc) {
          Tensor ga = Tensor::zeros(av.shape);
          for (size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] = g.data[i] / av.data[i];
          }
          accumulate_grad(acc, an, av.shape, ga);
        };
      });
}

Tensor Tape::gelu(const Tensor& a) {
  const int an = a.node;
  const Tensor av = a;
  auto fwd = [](float x) {
    const float u = kGeluK * (x + kGeluC * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
  };
  return TapeOps::unary(*this, a, fwd, [an, av](const Tensor&) {
    return [an, av](const Tensor& g, std::vector<Tensor>& acc) {
      Tensor ga = Tensor::zeros(av.shape);
      for (size_t i = 0; i < g.data.size(); ++i) {
        const float x = av.data[i];
        const float t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
        const float du = kGeluK * (1.0f + 3.0f * kGeluC * x * x);
        const float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
        ga.data[i] = d * g.data[i];
      }
      accumulate_grad(acc, an, av.shape, ga);
    };
  });
}

Tensor Tape::softmax(const Tensor& a) {
  const int64_t d = last_dim(a, "softmax");
  const int64_t rows = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape, a.dtype);
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = a.data.data() + r * d;
    float* y = out.data.data() + r * d;
    float mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    float s = 0.0f;
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      s += y[i];
    }
    const float inv = 1.0f / s;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  quantize_inplace(out);
  if (a.node < 0) return out;
  const int an = a.node;
  const Tensor y = out;
  out.node = record(out, {an}, [an, y, d](const Tensor& g,
                                        std::vector<Tensor>& acc) {
    Tensor ga = Tensor::zeros(y.shape);
    const int64_t rows = y.numel() / d;
    for (int64_t r = 0; r < rows; ++r) {
      const float* yr = y.data.data() + r * d;
      const float* gr = g.data.data() + r * d;
      float dot = 0.0f;
      for (int64_t i = 0; i < d; ++i) dot += yr[i] * gr[i];
      float* o = ga.data.data() + r * d;
      for (int64_t i = 0; i < d; ++i) o[i] = yr[i] * (gr[i] - dot);
    }
    accumulate_grad(acc, an, y.shape, ga);
  });
  return out;
}

Tensor Tape::layer_norm(const Tensor& a, float eps) {
  const int64_t d = last_dim(a, "layer_norm");
  const int64_t rows = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape, a.dtype);
  std::vector<float> rstd(static_cast<size_t>(rows));
  std::vector<float> xhat(a.data.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = a.data.data() + r * d;
    float mu = 0.0f;
    for (int64_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (int64_t i = 0; i < d; ++i) {
      const float c = x[i] - mu;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float rs = 1.0f / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t i = 0; i < d; ++i) {
      xhat[static_cast<size_t>(r * d + i)] = (x[i] - mu) * rs;
      out.data[static_cast<size_t>(r * d + i)] =
          xhat[static_cast<size_t>(r * d + i)];
    }
  }
  quantize_inplace(out);
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  out.node = record(
      out, {an}, [an, as, d, rstd = std::move(rstd), xhat = std::move(xhat)](
               const Tensor& g, std::vector<Tensor>& acc) {
        Tensor ga = Tensor::zeros(as);
        const int64_t rows = static_cast<int64_t>(rstd.size());
        for (int64_t r = 0; r < rows; ++r) {
          const float* gr = g.data.data() + r * d;
          const float* xh = xhat.data() + r * d;
          float mg = 0.0f, mgx = 0.0f;
          for (int64_t i = 0; i < d; ++i) {
            mg += gr[i];
            mgx += gr[i] * xh[i];
          }
          mg /= static_cast<float>(d);
          mgx /= static_cast<float>(d);
          float* o = ga.data.data() + r * d;
          const float rs = rstd[static_cast<size_t>(r)];
          for (int64_t i = 0; i < d; ++i) {
            o[i] = rs * (gr[i] - mg - xh[i] * mgx);
          }
        }
        accumulate_grad(acc, an, as, ga);
      });
  return out;
}

Tensor Tape::dropout(const Tensor& a, float rate, uint64_t seed) {
  if (rate < 0.0f || rate >= 1.0f) {
    throw InvalidConfig("dropout rate must be in [0, 1)");
  }
  Tensor mask = Tensor::zeros(a.shape);
  std::mt19937_64 rng(seed);
  const float keep = 1.0f - rate;
  const float scale = 1.0f / keep;
  for (float& m : mask.data) {
    const double u = (rng() >> 11) * 0x1.0p-53;
    m = (u < keep) ? scale : 0.0f;
  }
  Tensor out = Tensor::zeros(a.shape, a.dtype);
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = a.data[i] * mask.data[i];
  }
  quantize_inplace(out);
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  out.node = record(out, {an}, [an, as, mask](const Tensor& g,
                                              std::vector<Tensor>& acc) {
    Tensor ga = Tensor::zeros(as);
    for (size_t i = 0; i < ga.data.size(); ++i) {
      ga.data[i] = g.data[i] * mask.data[i];
    }
    accumulate_grad(acc, an, as, ga);
  });
  return out;
}

namespace {

struct MatDims {
  int64_t batch;    // broadcast batch count
  int64_t m, k, n;
  bool a_batched, b_batched;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b) {
  if (a.shape.size() < 2 || b.shape.size() < 2) {
    throw ShapeMismatch("matmul: operands must have rank >= 2, got " +
                        shape_str(a.shape) + " and " + shape_str(b.shape));
  }
  MatDims md;
  md.m = a.shape[a.shape.size() - 2];
  md.k = a.shape[a.shape.size() - 1];
  const int64_t k2 = b.shape[b.shape.size() - 2];
  md.n = b.shape[b.shape.size() - 1];
  if (md.k != k2) {
    throw ShapeMismatch("matmul: inner dims " + shape_str(a.shape) + " x " +
                        shape_str(b.shape));
  }
  const std::vector<int64_t> ab(a.shape.begin(), a.shape.end() - 2);
  const std::vector<int64_t> bb(b.shape.begin(), b.shape.end() - 2);
  if (!(ab == bb || ab.empty() || bb.empty())) {
    throw ShapeMismatch("matmul: batch dims " + shape_str(a.shape) + " x " +
                        shape_str(b.shape));
  }
  const std::vector<int64_t>& big = ab.empty() ? bb : ab;
  md.batch = 1;
  for (int64_t e : big) md.batch *= e;
  md.a_batched = !ab.empty();
  md.b_batched = !bb.empty();
  return md;
}

std::vector<int64_t> matmul_out_shape(const Tensor& a, const Tensor& b,
                                      const MatDims& md) {
  const std::vector<int64_t>& src = md.a_batched ? a.shape : b.shape;
  std::vector<int64_t> os(src.begin(), src.end() - 2);
  os.push_back(md.m);
  os.push_back(md.n);
  return os;
}

}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  check_dtype(a, b, "matmul");
  const MatDims md = matmul_dims(a, b);
  Tensor out = Tensor::zeros(matmul_out_shape(a, b, md), a.dtype);
  // Inputs of F16 tensors are already binary16-exact, so the FP32 products
  // below realize exact-FP16-multiply with FP32 accumulation.
  for (int64_t i = 0; i < md.batch; ++i) {
    MapC A(a.data.data() + (md.a_batched ? i * md.m * md.k : 0), md.m, md.k);
    MapC B(b.data.data() + (md.b_batched ? i * md.k * md.n : 0), md.k, md.n);
    MapM C(out.data.data() + i * md.m * md.n, md.m, md.n);
    C.noalias() = A * B;
  }
  quantize_inplace(out);
  if (a.node < 0 && b.node < 0) return out;
  const int an = a.node, bn = b.node;
  const Tensor av = a, bv = b;
  out.node = record(out, {an, bn}, [an, bn, av, bv, md](const Tensor& g,
                                                       std::vector<Tensor>& acc) {
    if (an >= 0) {
      Tensor ga = Tensor::zeros(av.shape);
      for (int64_t i = 0; i < md.batch; ++i) {
        MapC G(g.data.data() + i * md.m * md.n, md.m, md.n);
        MapC B(bv.data.data() + (md.b_batched ? i * md.k * md.n : 0), md.k,
               md.n);
        MapM GA(ga.data.data() + (md.a_batched ? i * md.m * md.k : 0), md.m,
                md.k);
        if (md.a_batched) {
          GA.noalias() = G * B.transpose();
        } else {
          GA.noalias() += G * B.transpose();
        }
      }
      accumulate_grad(acc, an, av.shape, ga);
    }
    if (bn >= 0) {
      Tensor gb = Tensor::zeros(bv.shape);
      for (int64_t i = 0; i < md.batch; ++i) {
        MapC G(g.data.data() + i * md.m * md.n, md.m, md.n);
        MapC A(av.data.data() + (md.a_batched ? i * md.m * md.k : 0), md.m,
               md.k);
        MapM GB(gb.data.data() + (md.b_batched ? i * md.k * md.n : 0), md.k,
                md.n);
        if (md.b_batched) {
          GB.noalias() = A.transpose() * G;
        } else {
          GB.noalias() += A.transpose() * G;
        }
      }
      accumulate_grad(acc, bn, bv.shape, gb);
    }
  });
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits,
                           const std::vector<int64_t>& labels) {
  if (logits.dtype != Dtype::kF32) {
    throw DtypeMismatch("cross_entropy: logits must be f32");
  }
  if (logits.shape.size() != 2) {
    throw ShapeMismatch("cross_entropy: logits must be (n, classes), got " +
                        shape_str(logits.shape));
  }
  const int64_t n = logits.shape[0];
  const int64_t c = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ShapeMismatch("cross_entropy: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  }
  Tensor probs = Tensor::zeros(logits.shape);
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const int64_t lab = labels[static_cast<size_t>(r)];
    if (lab < 0 || lab >= c) {
      throw InvalidConfig("cross_entropy: label out of range");
    }
    const float* x = logits.data.data() + r * c;
    float mx = x[0];
    for (int64_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
    double s = 0.0;
    for (int64_t i = 0; i < c; ++i) s += std::exp(static_cast<double>(x[i] - mx));
    const double lse = mx + std::log(s);
    total += lse - x[lab];
    float* p = probs.data.data() + r * c;
    for (int64_t i = 0; i < c; ++i) {
      p[i] = static_cast<float>(std::exp(static_cast<double>(x[i] - mx)) / s);
    }
  }
  Tensor out = Tensor::from({}, {static_cast<float>(total / n)});
  if (logits.node < 0) return out;
  const int ln = logits.node;
  const std::vector<int64_t> labs = labels;
  out.node = record(out, {ln}, [ln, probs, labs, n, c](const Tensor& g,
                                                       std::vector<Tensor>& acc) {
    const float gs = g.data[0] / static_cast<float>(n);
    Tensor ga = probs;
    ga.node = -1;
    for (int64_t r = 0; r < n; ++r) {
      float* p = ga.data.data() + r * c;
      p[labs[static_cast<size_t>(r)]] -= 1.0f;
      for (int64_t i = 0; i < c; ++i) p[i] *= gs;
    }
    accumulate_grad(acc, ln, probs.shape, ga);
  });
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data) s += v;
  Tensor out = Tensor::from({}, {static_cast<float>(s)});
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  out.node = record(out, {an}, [an, as](const Tensor& g,
                                         std::vector<Tensor>& acc) {
    accumulate_grad(acc, an, as, Tensor::full(as, g.data[0]));
  });
  return out;
}

Tensor Tape::reshape(const Tensor& a, std::vector<int64_t> shape) {
  Tensor out = a;
  out.node = -1;
  out.shape = std::move(shape);
  if (out.numel() != a.numel()) {
    throw ShapeMismatch("reshape: " + shape_str(a.shape) + " -> " +
                        shape_str(out.shape));
  }
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  out.node = record(out, {an}, [an, as](const Tensor& g,
                                         std::vector<Tensor>& acc) {
    Tensor gr = g;
    gr.shape = as;
    accumulate_grad(acc, an, as, gr);
  });
  return out;
}

namespace {

void permute_into(const float* src, const std::vector<int64_t>& shape,
                  const std::vector<int>& perm, float* dst,
                  const std::vector<int64_t>& out_shape) {
  const size_t rank = shape.size();
  std::vector<int64_t> in_strides(rank, 1);
  for (size_t i = rank - 1; i > 0; --i) {
    in_strides[i - 1] = in_strides[i] * shape[i];
  }
  std::vector<int64_t> out_strides(rank, 1);
  for (size_t i = rank - 1; i > 0; --i) {
    out_strides[i - 1] = out_strides[i] * out_shape[i];
  }
  int64_t total = 1;
  for (int64_t e : shape) total *= e;
  std::vector<int64_t> idx(rank, 0);
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t rem = lin;
    int64_t off = 0;
    for (size_t i = 0; i < rank; ++i) {
      idx[i] = rem / in_strides[i];
      rem %= in_strides[i];
    }
    for (size_t i = 0; i < rank; ++i) {
      off += idx[static_cast<size_t>(perm[i])] * out_strides[i];
    }
    dst[off] = src[lin];
  }
}

}  // namespace

Tensor Tape::transpose(const Tensor& a, std::vector<int> perm) {
  const size_t rank = a.shape.size();
  if (perm.size() != rank) {
    throw ShapeMismatch("transpose: perm size " + std::to_string(perm.size()) +
                        " for rank " + std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  std::vector<int64_t> os(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (perm[i] < 0 || perm[i] >= static_cast<int>(rank) ||
        seen[static_cast<size_t>(perm[i])]) {
      throw ShapeMismatch("transpose: invalid permutation");
    }
    seen[static_cast<size_t>(perm[i])] = true;
    os[i] = a.shape[static_cast<size_t>(perm[i])];
  }
  Tensor out = Tensor::zeros(os, a.dtype);
  permute_into(a.data.data(), a.shape, perm, out.data.data(), os);
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  std::vector<int> inv(rank);
  for (size_t i = 0; i < rank; ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  out.node = record(out, {an}, [an, as, inv, os](const Tensor& g,
                                                 std::vector<Tensor>& acc) {
    Tensor ga = Tensor::zeros(as);
    permute_into(g.data.data(), os, inv, ga.data.data(), as);
    accumulate_grad(acc, an, as, ga);
  });
  return out;
}

Tensor Tape::gather_rows(const Tensor& a, const std::vector<int64_t>& idx) {
  if (a.shape.empty()) {
    throw ShapeMismatch("gather_rows: rank-0 tensor");
  }
  const int64_t rows = a.shape[0];
  const int64_t inner = a.numel() / rows;
  std::vector<int64_t> os = a.shape;
  os[0] = static_cast<int64_t>(idx.size());
  Tensor out = Tensor::zeros(os, a.dtype);
  for (size_t i = 0; i < idx.size(); ++i) {
    const int64_t r = idx[i];
    if (r < 0 || r >= rows) {
      throw InvalidConfig("gather_rows: index out of range");
    }
    std::memcpy(out.data.data() + static_cast<int64_t>(i) * inner,
                a.data.data() + r * inner, sizeof(float) * static_cast<size_t>(inner));
  }
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  const std::vector<int64_t> ix = idx;
  out.node = record(out, {an}, [an, as, ix, inner](const Tensor& g,
                                                   std::vector<Tensor>& acc) {
    Tensor ga = Tensor::zeros(as);
    for (size_t i = 0; i < ix.size(); ++i) {
      const float* src = g.data.data() + static_cast<int64_t>(i) * inner;
      float* dst = ga.data.data() + ix[i] * inner;
      for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
    accumulate_grad(acc, an, as, ga);
  });
  return out;
}

Tensor Tape::cast(const Tensor& a, Dtype dt) {
  Tensor out = a;
  out.node = -1;
  out.dtype = dt;
  quantize_inplace(out);
  if (a.node < 0) return out;
  const int an = a.node;
  const auto as = a.shape;
  out.node = record(out, {an}, [an, as](const Tensor& g,
                                         std::vector<Tensor>& acc) {
    accumulate_grad(acc, an, as, g);
  });
  return out;
}

}  // namespace bertopt
