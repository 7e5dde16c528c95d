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
#ifndef BERTOPT_COLLECTIVE_HPP_
#define BERTOPT_COLLECTIVE_HPP_

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "bertopt/transport.hpp"

namespace bertopt {

// One worker's view of the ring. Topology labels follow the "<X>M<Y>G"
// naming: machine is the node index, gpu the device index within it.
struct WorkerGroup {
  int rank = 0;
  int world = 1;
  int machine = 0;
  int gpu = 0;
  Transport* transport = nullptr;

  int right() const { return (rank + 1) % world; }
  int left() const { return (rank - 1 + world) % world; }
};

// Formats "<X>M<Y>G", e.g. label_topology(32, 8) == "32M8G".
std::string label_topology(int machines, int gpus_per_machine);

// Chunk length used by the ring phases: ceil(n / world).
size_t ring_chunk_elems(size_t n, int world);

// Per-rank payload bytes one ring_allreduce moves in each direction:
// 2 * (world-1) * ceil(n/world) * elem_bytes, zero for a single rank.
uint64_t ring_allreduce_bytes(size_t n, int world, size_t elem_bytes);

namespace detail {

template <typename T>
void ring_allreduce_impl(const WorkerGroup& g, T* data, size_t n,
                         uint32_t tag) {
  const int world = g.world;
  if (world == 1 || n == 0) return;
  const size_t c = ring_chunk_elems(n, world);
  std::vector<T> buf(c * static_cast<size_t>(world), T(0));
  std::memcpy(buf.data(), data, n * sizeof(T));

  // Reduce-scatter: after world-1 steps rank r holds the full sum of chunk
  // (r+1) % world. Every chunk is accumulated along one fixed ring path, so
  // all ranks observe identical associations and identical result bits.
  for (int s = 0; s < world - 1; ++s) {
    const size_t send_idx =
        static_cast<size_t>((g.rank - s + 2 * world) % world);
    const size_t recv_idx =
        static_cast<size_t>((g.rank - s - 1 + 2 * world) % world);
    g.transport->send_right(tag, buf.data() + send_idx * c, c * sizeof(T));
    const std::vector<uint8_t> in = g.transport->recv_left(tag);
    if (in.size() != c * sizeof(T)) {
      throw LengthMismatch("allreduce chunk: expected " +
                           std::to_string(c * sizeof(T)) + " bytes, got " +
                           std::to_string(in.size()));
    }
    const T* r = reinterpret_cast<const T*>(in.data());
    T* mine = buf.data() + recv_idx * c;
    for (size_t i = 0; i < c; ++i) mine[i] = r[i] + mine[i];
  }

  // All-gather: circulate the reduced chunks around the ring.
  for (int s = 0; s < world - 1; ++s) {
    const size_t send_idx =
        static_cast<size_t>((g.rank + 1 - s + 2 * world) % world);
    const size_t recv_idx =
        static_cast<size_t>((g.rank - s + 2 * world) % world);
    g.transport->send_right(tag, buf.data() + send_idx * c, c * sizeof(T));
    const std::vector<uint8_t> in = g.transport->recv_left(tag);
    if (in.size() != c * sizeof(T)) {
      throw LengthMismatch("allgather chunk: expected " +
                           std::to_string(c * sizeof(T)) + " bytes, got " +
                           std::to_string(in.size()));
    }
    std::memcpy(buf.data() + recv_idx * c, in.data(), c * sizeof(T));
  }

  std::memcpy(data, buf.data(), n * sizeof(T));
}

}  // namespace detail

// Elementwise sum over all ranks, in place, identical bits on every rank.
template <typename T>
void ring_allreduce(const WorkerGroup& g, T* data, size_t n, uint32_t tag) {
  detail::ring_allreduce_impl<T>(g, data, n, tag);
}

// Same sum with binary16 payloads on the wire: chunks are narrowed before
// each hop and widened on arrival, halving exchanged bytes. Accumulation
// stays FP32 between hops; the result is rounded through binary16 (and is
// still bit-identical across ranks).
void ring_allreduce_f16_wire(const WorkerGroup& g, float* data, size_t n,
                             uint32_t tag);

// Circulates one u64 per rank; returns every rank's value indexed by rank.
std::vector<uint64_t> ring_exchange_u64(const WorkerGroup& g, uint64_t v,
                                        uint32_t tag);

// FNV-1a, the hash used for parameter and bucket-layout fingerprints.
uint64_t fnv1a(const void* data, size_t len,
               uint64_t seed = 14695981039346656037ull);

}  // namespace bertopt

#endif  // BERTOPT_COLLECTIVE_HPP_
