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
#ifndef BERTOPT_TRAINER_HPP_
#define BERTOPT_TRAINER_HPP_

#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

#include "bertopt/collective.hpp"
#include "bertopt/lamb.hpp"
#include "bertopt/model.hpp"

namespace bertopt {

struct TrainEvent {
  double ts = 0.0;  // seconds since log construction
  int rank = 0;
  std::string event;  // bwd_start, bucket_ready, comm_start, comm_end, step_end
  uint64_t bytes = 0;
};

// Thread-safe append-only event timeline shared by compute and
// communication contexts; serialized as JSON lines.
class EventLog {
 public:
  EventLog();
  void log(int rank, const char* event, uint64_t bytes);
  double now() const;
  std::vector<TrainEvent> events() const;
  void write_jsonl(const std::string& path) const;

 private:
  double t0_;
  mutable std::mutex m_;
  std::vector<TrainEvent> events_;
};

// Parameters grouped into fixed-byte buckets in the order their gradients
// become final during the reverse sweep (descending first-consumer node id,
// i.e. reverse order of first use in the forward pass). Assignment must be
// identical on every rank; a bucket closes before it would exceed
// bucket_bytes, so only a parameter larger than the threshold ever
// overflows it, alone.
struct BucketLayout {
  struct Bucket {
    std::vector<int> params;  // model param indices, flattened in order
    size_t elems = 0;
  };
  std::vector<Bucket> buckets;
  std::vector<int> bucket_of;    // param index -> bucket index
  std::vector<size_t> offset_of;  // param index -> element offset in bucket
  std::vector<int> ready_order;  // param indices, first-finalized first

  static BucketLayout build(const Model& m,
                            const std::vector<int>& first_consumer_by_param,
                            size_t bucket_bytes);
  uint64_t hash(const Model& m) const;
};

struct TrainerConfig {
  LambConfig lamb;
  int accumulation = 1;            // K micro-batches per optimizer step
  size_t bucket_bytes = 4u << 20;  // 4 MiB default threshold
  bool overlap = true;             // all-reduce during backward
  bool amp = false;                // binary16 forward against FP32 masters
  bool fused_gelu = true;
  bool f16_exchange = false;       // binary16 gradient payloads on the wire
  float loss_scale = 1.0f;         // static; pair 4096 with amp
  uint64_t dropout_seed = 0;
};

// Data-parallel trainer for one rank. Gradients are summed over K micro
// batches, scaled by 1/K locally, ring-all-reduced bucket by bucket, scaled
// by 1/world, and applied in one LAMB step, so the update magnitude is
// invariant to how the global batch splits across K and world.
class DistributedTrainer {
 public:
  DistributedTrainer(const WorkerGroup& group, Model& model,
                     const TrainerConfig& cfg, EventLog* log = nullptr);

  // Runs K micro forward/backward passes and one synchronized optimizer
  // step; returns the mean (unscaled) loss across the micro batches.
  double train_step(const std::vector<Batch>& micros);

  uint64_t param_hash() const;
  const BucketLayout& layout() const { return layout_; }
  bool layout_ready() const { return layout_built_; }
  uint64_t sync_rounds() const { return sync_rounds_; }
  LambState& state() { return state_; }

 private:
  struct BucketJob;
  void ensure_layout(Tape& tape);
  void flatten_param(int p, const std::vector<Tensor>& acc,
                     std::vector<BucketJob>& jobs);
  void reduce_bucket(BucketJob& job, uint32_t tag);

  WorkerGroup group_;
  Model& model_;
  TrainerConfig cfg_;
  EventLog* log_;
  LambState state_;
  BucketLayout layout_;
  bool layout_built_ = false;
  std::vector<std::vector<float>> accum_;  // scaled gradient sums per param
  uint64_t sync_rounds_ = 0;
  uint64_t step_counter_ = 0;
};

uint64_t model_param_hash(const Model& m);

// Multi-worker data-parallel run: world rank threads, each training a
// replica from its own shard. Loss histories, per-step post-sync parameter
// hashes, and event logs are returned per rank; ranks verify hash equality
// after every step and abort on divergence.
enum class TransportKind { kInProc, kTcp };

struct DistRunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  int world = 1;
  int steps = 1;
  int micro_batch = 1;           // examples per micro batch
  std::string shard_dir;         // shard_%04d.bshd per rank
  uint64_t init_seed = 1;
  uint64_t data_seed = 1;
  double per_byte_delay = 0.0;   // injected wire time, seconds per byte
  std::string event_dir;         // empty: keep logs in memory only
  double watchdog_s = 120.0;
  // kTcp binds one stream transport per rank instead of the shared hub;
  // endpoints are rank-ordered host:port, exactly world entries. Delay
  // injection is an in-process feature and rejects kTcp.
  TransportKind transport = TransportKind::kInProc;
  std::vector<std::string> endpoints;
  std::string checkpoint_path;   // empty: skip; rank 0 writes final params
};

struct RankReport {
  std::vector<double> losses;
  std::vector<uint64_t> hashes;
  uint64_t payload_bytes = 0;
  double wall_s = 0.0;
  std::vector<TrainEvent> events;
};

std::vector<RankReport> run_data_parallel(const DistRunConfig& cfg);

}  // namespace bertopt

#endif  // BERTOPT_TRAINER_HPP_
