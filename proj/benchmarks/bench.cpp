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
#include <benchmark/benchmark.h>

#include <cstdint>
#include <memory>
#include <random>
#include <thread>
#include <vector>

#include "bertopt/collective.hpp"
#include "bertopt/graph.hpp"
#include "bertopt/transport.hpp"

namespace {

using namespace bertopt;

std::vector<float> random_floats(int64_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
  std::vector<float> v(static_cast<size_t>(n));
  for (float& x : v) x = dist(rng);
  return v;
}

enum GeluVariant { kUnfused, kFused, kFusedAmp };

void gelu_bench(benchmark::State& state, GeluVariant variant) {
  const int64_t n = state.range(0);
  ExprGraph g = build_gelu_unfused();
  if (variant == kFusedAmp) g = amp_rewrite(g, SafetyTable::defaults());
  if (variant != kUnfused) g = fuse_elementwise(g);
  const std::vector<GBuf> inputs{GBuf::from_f32({n}, random_floats(n, 1))};
  for (auto _ : state) {
    benchmark::DoNotOptimize(interpret(g, inputs));
  }
  state.SetItemsProcessed(state.iterations() * n);
}

void BM_GeluUnfused(benchmark::State& state) { gelu_bench(state, kUnfused); }
void BM_GeluFused(benchmark::State& state) { gelu_bench(state, kFused); }
void BM_GeluFusedAmp(benchmark::State& state) { gelu_bench(state, kFusedAmp); }

BENCHMARK(BM_GeluUnfused)->Arg(1 << 12)->Arg(1 << 16)->Arg(1 << 20)->Arg(1 << 22);
BENCHMARK(BM_GeluFused)->Arg(1 << 12)->Arg(1 << 16)->Arg(1 << 20)->Arg(1 << 22);
BENCHMARK(BM_GeluFusedAmp)
    ->Arg(1 << 12)
    ->Arg(1 << 16)
    ->Arg(1 << 20)
    ->Arg(1 << 22);

void BM_HalfNarrow(benchmark::State& state) {
  const int64_t n = state.range(0);
  const std::vector<float> src = random_floats(n, 2);
  std::vector<uint16_t> dst(static_cast<size_t>(n));
  for (auto _ : state) {
    narrow_f16_block(src.data(), dst.data(), static_cast<size_t>(n));
    benchmark::DoNotOptimize(dst.data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}

void BM_HalfWiden(benchmark::State& state) {
  const int64_t n = state.range(0);
  const std::vector<float> f32 = random_floats(n, 3);
  std::vector<uint16_t> src(static_cast<size_t>(n));
  narrow_f16_block(f32.data(), src.data(), static_cast<size_t>(n));
  std::vector<float> dst(static_cast<size_t>(n));
  for (auto _ : state) {
    widen_f16_block(src.data(), dst.data(), static_cast<size_t>(n));
    benchmark::DoNotOptimize(dst.data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}

BENCHMARK(BM_HalfNarrow)->Arg(1 << 16)->Arg(1 << 22);
BENCHMARK(BM_HalfWiden)->Arg(1 << 16)->Arg(1 << 22);

// End-to-end group cost: thread spawn, two ring phases, join. args are
// (world, elems); f16_wire halves the exchanged bytes.
void allreduce_bench(benchmark::State& state, bool f16_wire) {
  const int world = static_cast<int>(state.range(0));
  const size_t n = static_cast<size_t>(state.range(1));
  const std::vector<float> init = random_floats(static_cast<int64_t>(n), 4);
  for (auto _ : state) {
    auto hub = std::make_shared<InProcHub>(world);
    std::vector<std::thread> threads;
    for (int r = 0; r < world; ++r) {
      threads.emplace_back([&, r] {
        InProcTransport tr(hub, r);
        WorkerGroup g;
        g.rank = r;
        g.world = world;
        g.transport = &tr;
        std::vector<float> data = init;
        if (f16_wire) {
          ring_allreduce_f16_wire(g, data.data(), n, 1);
        } else {
          ring_allreduce(g, data.data(), n, 1);
        }
        benchmark::DoNotOptimize(data.data());
      });
    }
    for (std::thread& t : threads) t.join();
  }
  state.SetBytesProcessed(
      state.iterations() * static_cast<int64_t>(ring_allreduce_bytes(
                               n, world, f16_wire ? 2 : 4)) *
      world);
}

void BM_RingAllreduceF32(benchmark::State& state) {
  allreduce_bench(state, false);
}
void BM_RingAllreduceF16Wire(benchmark::State& state) {
  allreduce_bench(state, true);
}

BENCHMARK(BM_RingAllreduceF32)
    ->Args({2, 1 << 16})
    ->Args({4, 1 << 16})
    ->Args({8, 1 << 16})
    ->UseRealTime();
BENCHMARK(BM_RingAllreduceF16Wire)
    ->Args({2, 1 << 16})
    ->Args({4, 1 << 16})
    ->Args({8, 1 << 16})
    ->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
