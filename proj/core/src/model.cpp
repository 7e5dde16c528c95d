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
#include "bertopt/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace bertopt {
namespace {

constexpr char kMagic[4] = {'B', 'C', 'K', 'P'};
constexpr float kInitStddev = 0.02f;
constexpr float kMaskBias = -1e4f;
constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluC = 0.044715f;

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v));
  out.push_back(static_cast<char>(v >> 8));
  out.push_back(static_cast<char>(v >> 16));
  out.push_back(static_cast<char>(v >> 24));
}

void put_u64(std::string& out, uint64_t v) {
  put_u32(out, static_cast<uint32_t>(v));
  put_u32(out, static_cast<uint32_t>(v >> 32));
}

void put_f32(std::string& out, float v) {
  uint32_t b;
  std::memcpy(&b, &v, 4);
  put_u32(out, b);
}

struct Cursor {
  const uint8_t* p;
  size_t left;
  void need(size_t n) {
    if (left < n) throw IoFailure("truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    const uint32_t v = static_cast<uint32_t>(p[0]) |
                       static_cast<uint32_t>(p[1]) << 8 |
                       static_cast<uint32_t>(p[2]) << 16 |
                       static_cast<uint32_t>(p[3]) << 24;
    p += 4;
    left -= 4;
    return v;
  }
  uint64_t u64() {
    const uint64_t lo = u32();
    return lo | static_cast<uint64_t>(u32()) << 32;
  }
  float f32() {
    const uint32_t b = u32();
    float v;
    std::memcpy(&v, &b, 4);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

void add_param(Model& m, const std::string& name, Tensor t) {
  m.index[name] = static_cast<int>(m.params.size());
  m.names.push_back(name);
  m.params.push_back(std::move(t));
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 0) throw InvalidConfig("layers must be non-negative");
  if (hidden < 1 || heads < 1 || hidden % heads != 0) {
    throw InvalidConfig("hidden must be a positive multiple of heads");
  }
  if (vocab < static_cast<int>(Vocab::kNumSpecial)) {
    throw InvalidConfig("vocab must cover the special tokens");
  }
  if (max_seq < 8) throw InvalidConfig("max_seq must be at least 8");
  if (dropout < 0.0f || dropout >= 1.0f) {
    throw InvalidConfig("dropout must lie in [0, 1)");
  }
}

Tensor& Model::param(const std::string& name) {
  const auto it = index.find(name);
  if (it == index.end()) throw InvalidConfig("no parameter named " + name);
  return params[static_cast<size_t>(it->second)];
}

const Tensor& Model::param(const std::string& name) const {
  const auto it = index.find(name);
  if (it == index.end()) throw InvalidConfig("no parameter named " + name);
  return params[static_cast<size_t>(it->second)];
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const Tensor& p : params) n += p.numel();
  return n;
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::mt19937_64 seeds(seed);
  const int64_t d = cfg.hidden;
  const int64_t di = cfg.intermediate();
  const int64_t V = cfg.vocab;

  auto randn = [&](std::vector<int64_t> shape) {
    return Tensor::randn(std::move(shape), seeds(), kInitStddev);
  };
  auto ones = [](std::vector<int64_t> shape) {
    return Tensor::full(std::move(shape), 1.0f);
  };

  add_param(m, "embedding.word", randn({V, d}));
  add_param(m, "embedding.position", randn({cfg.max_seq, d}));
  add_param(m, "embedding.segment", randn({2, d}));
  add_param(m, "embedding.ln_gamma", ones({d}));
  add_param(m, "embedding.ln_beta", Tensor::zeros({d}));

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    add_param(m, p + ".attention.wq", randn({d, d}));
    add_param(m, p + ".attention.bq", Tensor::zeros({d}));
    add_param(m, p + ".attention.wk", randn({d, d}));
    add_param(m, p + ".attention.bk", Tensor::zeros({d}));
    add_param(m, p + ".attention.wv", randn({d, d}));
    add_param(m, p + ".attention.bv", Tensor::zeros({d}));
    add_param(m, p + ".attention.wo", randn({d, d}));
    add_param(m, p + ".attention.bo", Tensor::zeros({d}));
    add_param(m, p + ".attention.ln_gamma", ones({d}));
    add_param(m, p + ".attention.ln_beta", Tensor::zeros({d}));
    add_param(m, p + ".intermediate.w", randn({d, di}));
    add_param(m, p + ".intermediate.b", Tensor::zeros({di}));
    add_param(m, p + ".output.w", randn({di, d}));
    add_param(m, p + ".output.b", Tensor::zeros({d}));
    add_param(m, p + ".output.ln_gamma", ones({d}));
    add_param(m, p + ".output.ln_beta", Tensor::zeros({d}));
  }

  add_param(m, "mlm.transform_w", randn({d, d}));
  add_param(m, "mlm.transform_b", Tensor::zeros({d}));
  add_param(m, "mlm.ln_gamma", ones({d}));
  add_param(m, "mlm.ln_beta", Tensor::zeros({d}));
  add_param(m, "mlm.bias", Tensor::zeros({V}));
  add_param(m, "pooler.w", randn({d, d}));
  add_param(m, "pooler.b", Tensor::zeros({d}));
  add_param(m, "nsp.w", randn({d, 2}));
  add_param(m, "nsp.b", Tensor::zeros({2}));
  return m;
}

Batch make_batch(const std::vector<TrainingExample>& examples) {
  if (examples.empty()) throw InvalidConfig("empty batch");
  Batch b;
  b.B = static_cast<int64_t>(examples.size());
  b.S = static_cast<int64_t>(examples[0].ids.size());
  for (int64_t e = 0; e < b.B; ++e) {
    const TrainingExample& ex = examples[static_cast<size_t>(e)];
    if (static_cast<int64_t>(ex.ids.size()) != b.S) {
      throw LengthMismatch("examples in a batch must share seq_len");
    }
    for (uint32_t t : ex.ids) b.ids.push_back(t);
    for (uint8_t s : ex.segments) b.segments.push_back(s);
    for (size_t k = 0; k < ex.mask_positions.size(); ++k) {
      b.mask_flat.push_back(e * b.S + ex.mask_positions[k]);
      b.mask_labels.push_back(ex.mask_labels[k]);
    }
    b.is_next.push_back(ex.is_next);
  }
  return b;
}

ForwardResult forward(Model& m, Tape& tape, const Batch& batch,
                      uint64_t dropout_seed) {
  ForwardOptions opt;
  opt.dropout_seed = dropout_seed;
  return forward(m, tape, batch, opt);
}

ForwardResult forward(Model& m, Tape& tape, const Batch& batch,
                      const ForwardOptions& opt) {
  m.cfg.validate();
  const int64_t B = batch.B, S = batch.S;
  const int64_t d = m.cfg.hidden, h = m.cfg.heads, dh = m.cfg.head_dim();
  if (S > m.cfg.max_seq) {
    throw InvalidConfig("batch seq_len exceeds configured max_seq");
  }
  for (int64_t t : batch.ids) {
    if (t < 0 || t >= m.cfg.vocab) throw InvalidConfig("token id out of range");
  }
  for (Tensor& p : m.params) tape.watch(p);

  auto h16 = [&](const Tensor& t) -> Tensor {
    if (!opt.amp || t.dtype == Dtype::kF16) return t;
    return tape.cast(t, Dtype::kF16);
  };
  auto h32 = [&](const Tensor& t) -> Tensor {
    if (t.dtype == Dtype::kF32) return t;
    return tape.cast(t, Dtype::kF32);
  };

  uint64_t site = 0;
  auto drop = [&](const Tensor& x) -> Tensor {
    if (m.cfg.dropout <= 0.0f) return x;
    return tape.dropout(x, m.cfg.dropout,
                        opt.dropout_seed ^ (0x9e3779b97f4a7c15ULL * ++site));
  };
  auto ln_affine = [&](const Tensor& x, const std::string& g,
                       const std::string& b) {
    return tape.add(tape.mul(tape.layer_norm(h32(x)), m.param(g)), m.param(b));
  };
  auto linear = [&](const Tensor& x, const std::string& w,
                    const std::string& b) {
    return tape.add(tape.matmul(h16(x), h16(m.param(w))), h16(m.param(b)));
  };
  auto gelu_op = [&](const Tensor& t) -> Tensor {
    if (opt.fused_gelu) return tape.gelu(t);
    const Tensor x32 = h32(t);
    const Tensor inner = tape.scalar_mul(
        tape.add(x32, tape.scalar_mul(tape.pow(x32, 3.0f), kGeluC)), kGeluK);
    const Tensor lo = h16(inner);
    const Tensor one = Tensor::full(lo.shape, 1.0f, lo.dtype);
    return tape.mul(tape.scalar_mul(h16(t), 0.5f),
                    tape.add(tape.tanh(lo), one));
  };

  std::vector<int64_t> pos_idx(static_cast<size_t>(B * S));
  for (int64_t i = 0; i < B * S; ++i) pos_idx[static_cast<size_t>(i)] = i % S;
  // Gathers are hoisted so their tape order (word, position, segment) does
  // not depend on argument evaluation order; bucket layouts derive from it.
  const Tensor we = tape.gather_rows(m.param("embedding.word"), batch.ids);
  const Tensor pe = tape.gather_rows(m.param("embedding.position"), pos_idx);
  const Tensor se = tape.gather_rows(m.param("embedding.segment"), batch.segments);
  Tensor x = tape.add(tape.add(we, pe), se);
  x = drop(ln_affine(x, "embedding.ln_gamma", "embedding.ln_beta"));

  // Additive mask materialized at full (B,h,S,S): -1e4 on key columns that
  // hold padding, so softmax assigns them ~zero weight.
  Tensor amask =
      Tensor::zeros({B, h, S, S}, opt.amp ? Dtype::kF16 : Dtype::kF32);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < S; ++j) {
      if (batch.ids[static_cast<size_t>(b * S + j)] != Vocab::kPad) continue;
      for (int64_t hh = 0; hh < h; ++hh) {
        for (int64_t i = 0; i < S; ++i) {
          amask.data[static_cast<size_t>(((b * h + hh) * S + i) * S + j)] =
              kMaskBias;
        }
      }
    }
  }

  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int l = 0; l < m.cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    auto split_heads = [&](const Tensor& t) {
      return tape.transpose(tape.reshape(t, {B, S, h, dh}), {0, 2, 1, 3});
    };
    const Tensor q = split_heads(linear(x, p + ".attention.wq", p + ".attention.bq"));
    const Tensor k = split_heads(linear(x, p + ".attention.wk", p + ".attention.bk"));
    const Tensor v = split_heads(linear(x, p + ".attention.wv", p + ".attention.bv"));

    Tensor scores = tape.scalar_mul(
        tape.matmul(q, tape.transpose(k, {0, 1, 3, 2})), inv_sqrt_dh);
    scores = tape.add(scores, amask);
    const Tensor attn = h16(drop(tape.softmax(h32(scores))));
    Tensor ctx = tape.matmul(attn, v);
    ctx = tape.reshape(tape.transpose(ctx, {0, 2, 1, 3}), {B * S, d});
    const Tensor att_out =
        drop(linear(ctx, p + ".attention.wo", p + ".attention.bo"));
    x = ln_affine(tape.add(x, h32(att_out)), p + ".attention.ln_gamma",
                  p + ".attention.ln_beta");

    const Tensor inter =
        gelu_op(linear(x, p + ".intermediate.w", p + ".intermediate.b"));
    const Tensor ffn = drop(linear(inter, p + ".output.w", p + ".output.b"));
    x = ln_affine(tape.add(x, h32(ffn)), p + ".output.ln_gamma",
                  p + ".output.ln_beta");
  }

  ForwardResult r;
  r.masked_count = static_cast<int64_t>(batch.mask_flat.size());

  std::vector<int64_t> cls_idx(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) cls_idx[static_cast<size_t>(b)] = b * S;
  const Tensor pooled =
      tape.tanh(linear(tape.gather_rows(x, cls_idx), "pooler.w", "pooler.b"));
  r.nsp_logits = h32(linear(pooled, "nsp.w", "nsp.b"));
  const Tensor nsp_ce = tape.cross_entropy(r.nsp_logits, batch.is_next);

  if (r.masked_count > 0) {
    Tensor mh = tape.gather_rows(x, batch.mask_flat);
    mh = gelu_op(linear(mh, "mlm.transform_w", "mlm.transform_b"));
    mh = ln_affine(mh, "mlm.ln_gamma", "mlm.ln_beta");
    // Decoder tied to the word embedding.
    r.mlm_logits = h32(tape.add(
        tape.matmul(h16(mh),
                    h16(tape.transpose(m.param("embedding.word"), {1, 0}))),
        h16(m.param("mlm.bias"))));
    r.loss = tape.add(tape.cross_entropy(r.mlm_logits, batch.mask_labels),
                      nsp_ce);
  } else {
    r.loss = nsp_ce;
  }
  return r;
}

std::string param_group(const std::string& name) {
  if (name.rfind("embedding.", 0) == 0) return "embedding";
  if (name.find(".attention.") != std::string::npos) return "attention";
  if (name.find(".intermediate.") != std::string::npos) return "intermediate";
  if (name.find(".output.") != std::string::npos) return "output";
  return "other";
}

ParamGroupReport param_group_report(const Model& m, Dtype dtype) {
  ParamGroupReport r;
  for (const std::string& g :
       {"embedding", "attention", "intermediate", "output", "other"}) {
    r.groups[g];
  }
  const int64_t width = static_cast<int64_t>(dtype_size(dtype));
  for (size_t i = 0; i < m.params.size(); ++i) {
    const int64_t n = m.params[i].numel();
    auto& grp = r.groups[param_group(m.names[i])];
    grp.count += n;
    grp.bytes += n * width;
    r.total_count += n;
    r.total_bytes += n * width;
  }
  return r;
}

void save_checkpoint(const Model& m, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, 1);  // version
  put_u32(out, static_cast<uint32_t>(m.cfg.layers));
  put_u32(out, static_cast<uint32_t>(m.cfg.hidden));
  put_u32(out, static_cast<uint32_t>(m.cfg.heads));
  put_u32(out, static_cast<uint32_t>(m.cfg.vocab));
  put_u32(out, static_cast<uint32_t>(m.cfg.max_seq));
  put_f32(out, m.cfg.dropout);
  put_u64(out, m.params.size());
  for (size_t i = 0; i < m.params.size(); ++i) {
    const Tensor& t = m.params[i];
    put_u32(out, static_cast<uint32_t>(m.names[i].size()));
    out += m.names[i];
    out.push_back(t.dtype == Dtype::kF32 ? 0 : 1);
    put_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (int64_t dim : t.shape) put_u64(out, static_cast<uint64_t>(dim));
    for (float v : t.data) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoFailure("short write to " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  Cursor c{bytes.data(), bytes.size()};
  c.need(4);
  if (std::memcmp(c.p, kMagic, 4) != 0) {
    throw IoFailure("not a checkpoint: " + path);
  }
  c.p += 4;
  c.left -= 4;
  if (c.u32() != 1) throw IoFailure("unsupported checkpoint version");

  Model m;
  m.cfg.layers = static_cast<int>(c.u32());
  m.cfg.hidden = static_cast<int>(c.u32());
  m.cfg.heads = static_cast<int>(c.u32());
  m.cfg.vocab = static_cast<int>(c.u32());
  m.cfg.max_seq = static_cast<int>(c.u32());
  m.cfg.dropout = c.f32();
  const uint64_t n_tensors = c.u64();
  for (uint64_t i = 0; i < n_tensors; ++i) {
    const std::string name = c.str(c.u32());
    c.need(1);
    const Dtype dt = *c.p == 0 ? Dtype::kF32 : Dtype::kF16;
    c.p++;
    c.left--;
    const uint32_t rank = c.u32();
    std::vector<int64_t> shape(rank);
    for (uint32_t r = 0; r < rank; ++r) {
      shape[r] = static_cast<int64_t>(c.u64());
    }
    Tensor t = Tensor::zeros(shape, dt);
    for (float& v : t.data) v = c.f32();
    add_param(m, name, std::move(t));
  }
  m.cfg.validate();
  return m;
}

}  // namespace bertopt
