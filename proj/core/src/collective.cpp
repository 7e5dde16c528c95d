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
#include "bertopt/collective.hpp"

#include "bertopt/graph.hpp"

namespace bertopt {

std::string label_topology(int machines, int gpus_per_machine) {
  return std::to_string(machines) + "M" + std::to_string(gpus_per_machine) +
         "G";
}

size_t ring_chunk_elems(size_t n, int world) {
  return (n + static_cast<size_t>(world) - 1) / static_cast<size_t>(world);
}

uint64_t ring_allreduce_bytes(size_t n, int world, size_t elem_bytes) {
  if (world <= 1 || n == 0) return 0;
  return 2ull * static_cast<uint64_t>(world - 1) *
         ring_chunk_elems(n, world) * elem_bytes;
}

void ring_allreduce_f16_wire(const WorkerGroup& g, float* data, size_t n,
                             uint32_t tag) {
  const int world = g.world;
  if (world == 1 || n == 0) return;
  const size_t c = ring_chunk_elems(n, world);
  std::vector<float> buf(c * static_cast<size_t>(world), 0.0f);
  std::memcpy(buf.data(), data, n * sizeof(float));

  std::vector<uint16_t> wire(c);
  std::vector<float> wide(c);
  for (int s = 0; s < world - 1; ++s) {
    const size_t send_idx =
        static_cast<size_t>((g.rank - s + 2 * world) % world);
    const size_t recv_idx =
        static_cast<size_t>((g.rank - s - 1 + 2 * world) % world);
    narrow_f16_block(buf.data() + send_idx * c, wire.data(), c);
    g.transport->send_right(tag, wire.data(), c * sizeof(uint16_t));
    const std::vector<uint8_t> in = g.transport->recv_left(tag);
    if (in.size() != c * sizeof(uint16_t)) {
      throw LengthMismatch("f16 allreduce chunk size mismatch");
    }
    widen_f16_block(reinterpret_cast<const uint16_t*>(in.data()), wide.data(),
                    c);
    float* mine = buf.data() + recv_idx * c;
    for (size_t i = 0; i < c; ++i) mine[i] = wide[i] + mine[i];
  }

  for (int s = 0; s < world - 1; ++s) {
    const size_t send_idx =
        static_cast<size_t>((g.rank + 1 - s + 2 * world) % world);
    const size_t recv_idx =
        static_cast<size_t>((g.rank - s + 2 * world) % world);
    narrow_f16_block(buf.data() + send_idx * c, wire.data(), c);
    g.transport->send_right(tag, wire.data(), c * sizeof(uint16_t));
    const std::vector<uint8_t> in = g.transport->recv_left(tag);
    if (in.size() != c * sizeof(uint16_t)) {
      throw LengthMismatch("f16 allgather chunk size mismatch");
    }
    widen_f16_block(reinterpret_cast<const uint16_t*>(in.data()),
                    buf.data() + recv_idx * c, c);
  }

  // The owner's fully reduced chunk never crossed the wire narrowed; round
  // it the same way so every rank holds identical binary16-exact sums.
  const size_t own = static_cast<size_t>((g.rank + 1) % world);
  narrow_f16_block(buf.data() + own * c, wire.data(), c);
  widen_f16_block(wire.data(), buf.data() + own * c, c);

  std::memcpy(data, buf.data(), n * sizeof(float));
}

std::vector<uint64_t> ring_exchange_u64(const WorkerGroup& g, uint64_t v,
                                        uint32_t tag) {
  std::vector<uint64_t> vals(static_cast<size_t>(g.world), 0);
  vals[static_cast<size_t>(g.rank)] = v;
  uint64_t cur = v;
  for (int s = 0; s < g.world - 1; ++s) {
    g.transport->send_right(tag, &cur, sizeof(cur));
    const std::vector<uint8_t> in = g.transport->recv_left(tag);
    if (in.size() != sizeof(uint64_t)) {
      throw LengthMismatch("u64 exchange payload size");
    }
    std::memcpy(&cur, in.data(), sizeof(cur));
    vals[static_cast<size_t>((g.rank - s - 1 + 2 * g.world) % g.world)] = cur;
  }
  return vals;
}

uint64_t fnv1a(const void* data, size_t len, uint64_t seed) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace bertopt
