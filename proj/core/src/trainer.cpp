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
#include "bertopt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <thread>

#include "bertopt/data.hpp"

namespace bertopt {
namespace {

constexpr uint32_t kControlTagBit = 0x80000000u;

double steady_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

EventLog::EventLog() : t0_(steady_seconds()) {}

double EventLog::now() const { return steady_seconds() - t0_; }

void EventLog::log(int rank, const char* event, uint64_t bytes) {
  const double ts = now();
  std::lock_guard<std::mutex> lk(m_);
  events_.push_back(TrainEvent{ts, rank, event, bytes});
}

std::vector<TrainEvent> EventLog::events() const {
  std::lock_guard<std::mutex> lk(m_);
  return events_;
}

void EventLog::write_jsonl(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoFailure("cannot open " + path);
  const std::vector<TrainEvent> evs = events();
  char line[160];
  for (const TrainEvent& e : evs) {
    std::snprintf(line, sizeof(line),
                  "{\"ts\":%.9f,\"rank\":%d,\"event\":\"%s\",\"bytes\":%llu}\n",
                  e.ts, e.rank, e.event.c_str(),
                  static_cast<unsigned long long>(e.bytes));
    f << line;
  }
  if (!f) throw IoFailure("write failed for " + path);
}

BucketLayout BucketLayout::build(const Model& m,
                                 const std::vector<int>& firsts,
                                 size_t bucket_bytes) {
  const size_t P = m.params.size();
  if (firsts.size() != P) {
    throw InvalidConfig("first-consumer list does not match param count");
  }
  if (bucket_bytes == 0) throw InvalidConfig("bucket_bytes must be > 0");

  BucketLayout L;
  L.ready_order.resize(P);
  std::iota(L.ready_order.begin(), L.ready_order.end(), 0);
  std::sort(L.ready_order.begin(), L.ready_order.end(), [&](int a, int b) {
    if (firsts[static_cast<size_t>(a)] != firsts[static_cast<size_t>(b)]) {
      return firsts[static_cast<size_t>(a)] > firsts[static_cast<size_t>(b)];
    }
    return a < b;
  });

  L.bucket_of.assign(P, -1);
  L.offset_of.assign(P, 0);
  Bucket cur;
  size_t cur_bytes = 0;
  auto flush = [&] {
    if (!cur.params.empty()) {
      L.buckets.push_back(std::move(cur));
      cur = Bucket{};
      cur_bytes = 0;
    }
  };
  for (int p : L.ready_order) {
    const size_t bytes =
        static_cast<size_t>(m.params[static_cast<size_t>(p)].numel()) *
        sizeof(float);
    if (!cur.params.empty() && cur_bytes + bytes > bucket_bytes) flush();
    L.bucket_of[static_cast<size_t>(p)] = static_cast<int>(L.buckets.size());
    L.offset_of[static_cast<size_t>(p)] = cur.elems;
    cur.params.push_back(p);
    cur.elems += static_cast<size_t>(m.params[static_cast<size_t>(p)].numel());
    cur_bytes += bytes;
  }
  flush();
  return L;
}

uint64_t BucketLayout::hash(const Model& m) const {
  uint64_t h = fnv1a("bucket-layout", 13);
  const uint64_t nb = buckets.size();
  h = fnv1a(&nb, sizeof(nb), h);
  for (const Bucket& b : buckets) {
    for (int p : b.params) {
      const std::string& name = m.names[static_cast<size_t>(p)];
      h = fnv1a(name.data(), name.size(), h);
      for (int64_t e : m.params[static_cast<size_t>(p)].shape) {
        h = fnv1a(&e, sizeof(e), h);
      }
    }
    const uint64_t elems = b.elems;
    h = fnv1a(&elems, sizeof(elems), h);
  }
  return h;
}

uint64_t model_param_hash(const Model& m) {
  uint64_t h = fnv1a("params", 6);
  for (const Tensor& t : m.params) {
    h = fnv1a(t.data.data(), t.data.size() * sizeof(float), h);
  }
  return h;
}

struct DistributedTrainer::BucketJob {
  std::vector<float> flat;
  size_t pending = 0;
  bool ready = false;
};

DistributedTrainer::DistributedTrainer(const WorkerGroup& group, Model& model,
                                       const TrainerConfig& cfg, EventLog* log)
    : group_(group), model_(model), cfg_(cfg), log_(log) {
  if (cfg_.accumulation < 1) throw InvalidConfig("accumulation must be >= 1");
  if (cfg_.loss_scale <= 0.0f) throw InvalidConfig("loss_scale must be > 0");
  if (group_.world > 1 && group_.transport == nullptr) {
    throw InvalidConfig("multi-rank group requires a transport");
  }
  accum_.resize(model_.params.size());
}

void DistributedTrainer::ensure_layout(Tape& tape) {
  if (layout_built_) return;
  const std::vector<int> firsts_all = tape.first_consumers();
  std::vector<int> firsts(model_.params.size());
  for (size_t p = 0; p < model_.params.size(); ++p) {
    firsts[p] = firsts_all[static_cast<size_t>(model_.params[p].node)];
  }
  layout_ = BucketLayout::build(model_, firsts, cfg_.bucket_bytes);
  layout_built_ = true;
  if (group_.world > 1) {
    uint64_t h = layout_.hash(model_);
    h = fnv1a(&cfg_.f16_exchange, sizeof(bool), h);
    const uint64_t salt = static_cast<uint64_t>(cfg_.accumulation);
    h = fnv1a(&salt, sizeof(salt), h);
    const std::vector<uint64_t> all =
        ring_exchange_u64(group_, h, kControlTagBit | 1u);
    for (uint64_t other : all) {
      if (other != h) {
        throw BucketLayoutMismatch("rank " + std::to_string(group_.rank) +
                                   " bucket layout disagrees with peers");
      }
    }
  }
}

void DistributedTrainer::flatten_param(int p, const std::vector<Tensor>& acc,
                                       std::vector<BucketJob>& jobs) {
  const size_t sp = static_cast<size_t>(p);
  const Tensor& t = model_.params[sp];
  const size_t n = static_cast<size_t>(t.numel());
  BucketJob& job = jobs[static_cast<size_t>(layout_.bucket_of[sp])];
  float* dst = job.flat.data() + layout_.offset_of[sp];
  const float inv =
      1.0f / (static_cast<float>(cfg_.accumulation) * cfg_.loss_scale);
  const Tensor& g = acc[static_cast<size_t>(t.node)];
  const float* live = g.data.empty() ? nullptr : g.data.data();
  const float* summed = accum_[sp].empty() ? nullptr : accum_[sp].data();
  for (size_t i = 0; i < n; ++i) {
    float v = live ? live[i] : 0.0f;
    if (summed) v += summed[i];
    dst[i] = v * inv;
  }
}

void DistributedTrainer::reduce_bucket(BucketJob& job, uint32_t tag) {
  if (group_.world > 1) {
    if (cfg_.f16_exchange) {
      ring_allreduce_f16_wire(group_, job.flat.data(), job.flat.size(), tag);
    } else {
      ring_allreduce<float>(group_, job.flat.data(), job.flat.size(), tag);
    }
    const float invn = 1.0f / static_cast<float>(group_.world);
    for (float& v : job.flat) v *= invn;
  }
}

double DistributedTrainer::train_step(const std::vector<Batch>& micros) {
  const int K = cfg_.accumulation;
  if (static_cast<int>(micros.size()) != K) {
    throw InvalidConfig("train_step expects exactly K micro batches");
  }
  const size_t P = model_.params.size();
  double loss_sum = 0.0;

  for (int k = 0; k + 1 < K; ++k) {
    Tape tape;
    ForwardOptions fo;
    fo.dropout_seed =
        cfg_.dropout_seed + step_counter_ * 1000003ull + static_cast<uint64_t>(k);
    fo.amp = cfg_.amp;
    fo.fused_gelu = cfg_.fused_gelu;
    const ForwardResult r =
        forward(model_, tape, micros[static_cast<size_t>(k)], fo);
    loss_sum += static_cast<double>(r.loss.scalar());
    const Tensor scaled = cfg_.loss_scale != 1.0f
                              ? tape.scalar_mul(r.loss, cfg_.loss_scale)
                              : r.loss;
    if (log_) log_->log(group_.rank, "bwd_start", 0);
    const std::vector<Tensor> grads = tape.backward(scaled);
    for (size_t p = 0; p < P; ++p) {
      const Tensor g = tape.grad(grads, model_.params[p]);
      if (accum_[p].empty()) accum_[p].assign(g.data.size(), 0.0f);
      for (size_t i = 0; i < g.data.size(); ++i) accum_[p][i] += g.data[i];
    }
  }

  // Sync micro: buckets are flattened the moment their last gradient is
  // final during the reverse sweep and all-reduced in fixed layout order,
  // concurrently with the rest of backward when overlap is on.
  Tape tape;
  ForwardOptions fo;
  fo.dropout_seed = cfg_.dropout_seed + step_counter_ * 1000003ull +
                    static_cast<uint64_t>(K - 1);
  fo.amp = cfg_.amp;
  fo.fused_gelu = cfg_.fused_gelu;
  const ForwardResult r =
      forward(model_, tape, micros[static_cast<size_t>(K - 1)], fo);
  loss_sum += static_cast<double>(r.loss.scalar());
  const Tensor scaled = cfg_.loss_scale != 1.0f
                            ? tape.scalar_mul(r.loss, cfg_.loss_scale)
                            : r.loss;
  ensure_layout(tape);

  std::vector<int> keys(P);
  {
    const std::vector<int> firsts = tape.first_consumers();
    for (size_t p = 0; p < P; ++p) {
      keys[p] = firsts[static_cast<size_t>(model_.params[p].node)];
    }
  }

  const size_t B = layout_.buckets.size();
  std::vector<BucketJob> jobs(B);
  for (size_t j = 0; j < B; ++j) {
    jobs[j].flat.assign(layout_.buckets[j].elems, 0.0f);
    jobs[j].pending = layout_.buckets[j].params.size();
  }

  std::mutex mu;
  std::condition_variable cv;
  bool aborted = false;
  const size_t wire_elem = cfg_.f16_exchange ? 2 : 4;

  size_t cursor = 0;
  auto on_param_final = [&](int p, const std::vector<Tensor>& acc) {
    flatten_param(p, acc, jobs);
    BucketJob& job = jobs[static_cast<size_t>(layout_.bucket_of
                                                  [static_cast<size_t>(p)])];
    if (--job.pending == 0) {
      if (log_) {
        log_->log(group_.rank, "bucket_ready", job.flat.size() * sizeof(float));
      }
      {
        std::lock_guard<std::mutex> lk(mu);
        job.ready = true;
      }
      cv.notify_all();
    }
  };

  std::exception_ptr comm_err;
  auto comm_body = [&] {
    try {
      for (size_t j = 0; j < B; ++j) {
        {
          std::unique_lock<std::mutex> lk(mu);
          cv.wait(lk, [&] { return jobs[j].ready || aborted; });
          if (aborted) return;
        }
        const uint64_t wire = ring_allreduce_bytes(
            jobs[j].flat.size(), group_.world, wire_elem);
        if (group_.world > 1 && log_) {
          log_->log(group_.rank, "comm_start", wire);
        }
        reduce_bucket(jobs[j], static_cast<uint32_t>(
                                   (step_counter_ * B + j) & 0x7fffffffu));
        if (group_.world > 1 && log_) {
          log_->log(group_.rank, "comm_end", wire);
        }
      }
    } catch (...) {
      comm_err = std::current_exception();
    }
  };

  if (log_) log_->log(group_.rank, "bwd_start", 0);
  std::vector<Tensor> grads;
  if (cfg_.overlap) {
    std::thread comm(comm_body);
    try {
      grads = tape.backward(scaled, [&](int i, const std::vector<Tensor>& acc) {
        while (cursor < P &&
               keys[static_cast<size_t>(layout_.ready_order[cursor])] >= i) {
          on_param_final(layout_.ready_order[cursor], acc);
          ++cursor;
        }
      });
    } catch (...) {
      {
        std::lock_guard<std::mutex> lk(mu);
        aborted = true;
      }
      cv.notify_all();
      comm.join();
      throw;
    }
    comm.join();
    if (comm_err) std::rethrow_exception(comm_err);
  } else {
    grads = tape.backward(scaled);
    for (int p : layout_.ready_order) on_param_final(p, grads);
    comm_body();
    if (comm_err) std::rethrow_exception(comm_err);
  }

  std::vector<Tensor> gvec(P);
  for (size_t p = 0; p < P; ++p) {
    const Tensor& t = model_.params[p];
    Tensor g = Tensor::zeros(t.shape);
    const BucketJob& job =
        jobs[static_cast<size_t>(layout_.bucket_of[p])];
    std::copy_n(job.flat.data() + layout_.offset_of[p],
                static_cast<size_t>(t.numel()), g.data.data());
    gvec[p] = std::move(g);
  }
  lamb_step(model_.params, gvec, state_, cfg_.lamb);

  for (std::vector<float>& a : accum_) a.clear();
  sync_rounds_++;
  step_counter_++;
  if (log_) log_->log(group_.rank, "step_end", 0);
  return loss_sum / static_cast<double>(K);
}

uint64_t DistributedTrainer::param_hash() const {
  return model_param_hash(model_);
}

std::vector<RankReport> run_data_parallel(const DistRunConfig& cfg) {
  if (cfg.world < 1) throw InvalidConfig("world must be >= 1");
  if (cfg.steps < 1) throw InvalidConfig("steps must be >= 1");
  if (cfg.transport == TransportKind::kTcp) {
    if (cfg.endpoints.size() != static_cast<size_t>(cfg.world)) {
      throw InvalidConfig("tcp transport needs one endpoint per rank");
    }
    if (cfg.per_byte_delay != 0.0) {
      throw InvalidConfig("per-byte delay injection is in-process only");
    }
  }
  auto hub = cfg.transport == TransportKind::kInProc
                 ? std::make_shared<InProcHub>(cfg.world)
                 : nullptr;
  std::vector<RankReport> reports(static_cast<size_t>(cfg.world));
  std::vector<std::exception_ptr> errs(static_cast<size_t>(cfg.world));
  std::vector<std::thread> threads;

  for (int rank = 0; rank < cfg.world; ++rank) {
    threads.emplace_back([&, rank] {
      try {
        std::unique_ptr<Transport> tr;
        if (cfg.transport == TransportKind::kTcp) {
          tr = std::make_unique<TcpTransport>(rank, cfg.endpoints,
                                              cfg.watchdog_s);
        } else {
          auto ip = std::make_unique<InProcTransport>(hub, rank);
          ip->set_per_byte_delay(cfg.per_byte_delay);
          ip->set_watchdog(cfg.watchdog_s);
          tr = std::move(ip);
        }
        WorkerGroup g;
        g.rank = rank;
        g.world = cfg.world;
        g.machine = 0;
        g.gpu = rank;
        g.transport = tr.get();

        Model m = build_model(cfg.model, cfg.init_seed);
        char shard[32];
        std::snprintf(shard, sizeof(shard), "shard_%04d.bshd", rank);
        ShardReader reader(cfg.shard_dir + "/" + shard, cfg.micro_batch);
        uint64_t epoch = 0;
        reader.start_epoch(cfg.data_seed + 1000003ull * epoch +
                           static_cast<uint64_t>(rank));

        EventLog log;
        DistributedTrainer trainer(g, m, cfg.trainer, &log);
        RankReport& rep = reports[static_cast<size_t>(rank)];
        const double t_start = log.now();

        for (int step = 0; step < cfg.steps; ++step) {
          std::vector<Batch> micros;
          for (int k = 0; k < cfg.trainer.accumulation; ++k) {
            std::vector<TrainingExample> ex;
            while (!reader.next_batch(ex)) {
              ++epoch;
              reader.start_epoch(cfg.data_seed + 1000003ull * epoch +
                                 static_cast<uint64_t>(rank));
            }
            micros.push_back(make_batch(ex));
          }
          rep.losses.push_back(trainer.train_step(micros));
          const uint64_t h = trainer.param_hash();
          rep.hashes.push_back(h);
          if (cfg.world > 1) {
            const std::vector<uint64_t> all = ring_exchange_u64(
                g, h, kControlTagBit | (2u + static_cast<uint32_t>(step)));
            for (uint64_t other : all) {
              if (other != h) {
                throw Error("replica hash divergence at step " +
                            std::to_string(step));
              }
            }
          }
        }
        rep.wall_s = log.now() - t_start;
        rep.payload_bytes = tr->payload_bytes_sent();
        rep.events = log.events();
        if (!cfg.event_dir.empty()) {
          char name[40];
          std::snprintf(name, sizeof(name), "events_rank%d.jsonl", rank);
          log.write_jsonl(cfg.event_dir + "/" + name);
        }
        if (rank == 0 && !cfg.checkpoint_path.empty()) {
          save_checkpoint(m, cfg.checkpoint_path);
        }
      } catch (...) {
        errs[static_cast<size_t>(rank)] = std::current_exception();
      }
    });
  }
  for (std::thread& t : threads) t.join();

  // Prefer the root cause over secondary disconnect/timeout fallout.
  std::exception_ptr first;
  for (const std::exception_ptr& e : errs) {
    if (!e) continue;
    if (!first) first = e;
    try {
      std::rethrow_exception(e);
    } catch (const PeerDisconnected&) {
    } catch (const WatchdogTimeout&) {
    } catch (...) {
      first = e;
      break;
    }
  }
  if (first) std::rethrow_exception(first);
  return reports;
}

}  // namespace bertopt
