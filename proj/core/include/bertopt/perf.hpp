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
#ifndef BERTOPT_PERF_HPP_
#define BERTOPT_PERF_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bertopt {

// Analytical model of a data-parallel training cluster. All quantities are
// value types; every operation here is a pure function over them.

struct ClusterSpec {
  int machines = 1;          // X in the "<X>M<Y>G" topology label
  int gpus_per_machine = 1;  // Y
  double throughput_tokens_per_s = 0.0;  // sustained per-GPU compute rate
  double pcie_bandwidth_bits_per_s = 64e9;
  double network_bandwidth_bits_per_s = 10e9;
  uint64_t param_count = 0;
  size_t grad_elem_bytes = 4;  // gradient dtype width on the wire

  int world() const { return machines * gpus_per_machine; }
  double grad_bytes() const {
    return static_cast<double>(param_count) *
           static_cast<double>(grad_elem_bytes);
  }
  std::string label() const;  // "<X>M<Y>G"
  void validate() const;      // throws InvalidConfig
};

struct PhaseConfig {
  int sequence_length = 128;
  int sentences_per_micro = 32;  // per GPU per micro-step
  int accumulation = 1;          // micro-steps per optimizer step (K)
  double epochs = 1.0;
  double tokens_per_epoch = 0.0;

  double tokens_per_micro() const {
    return static_cast<double>(sequence_length) *
           static_cast<double>(sentences_per_micro);
  }
  void validate() const;  // throws InvalidConfig
};

// Cloud rental prices device-hours; acquisition prices whole nodes.
struct CostSpec {
  enum class Billing { kCloudHourly, kAcquisition };
  Billing billing = Billing::kCloudHourly;
  int devices = 0;
  double price_per_device_hour = 0.0;  // kCloudHourly
  double hours = 0.0;                  // kCloudHourly
  double node_price = 0.0;             // kAcquisition

  void validate() const;  // throws InvalidConfig
};

// Hours to stream tokens_per_epoch through one device:
// tokens / (throughput * 3600).
double epoch_time_hours(double throughput_tokens_per_s,
                        double tokens_per_epoch);

// Whole-run time, exactly epochs * epoch_time_hours.
double training_time_hours(double throughput_tokens_per_s,
                           double tokens_per_epoch, double epochs);

// Ring all-reduce wall time for one participant's payload:
// 2 * (n-1)/n * bytes * 8 / bandwidth. One participant needs no exchange.
double ring_comm_time_s(double bytes, int n_participants,
                        double bandwidth_bits_per_s);

struct IterationModelOptions {
  // Fraction of backward-pass time available to hide communication under.
  double overlap_fraction = 0.5;
  // Share of per-micro compute attributed to the backward pass.
  double backward_share = 2.0 / 3.0;
  // Model hierarchical exchange as t_pcie + t_net instead of the default
  // max(t_pcie, t_net); the two channels are physically independent, the
  // sum form exists for sensitivity analysis.
  bool sum_comm = false;
};

struct IterationBreakdown {
  double t_compute = 0.0;      // K micro-steps of forward+backward
  double t_pcie = 0.0;         // intra-node ring over Y devices
  double t_net = 0.0;          // inter-node ring over X nodes
  double t_comm = 0.0;         // combined exchange time
  double t_bwd = 0.0;          // backward span of the last micro-step
  double exposed_comm = 0.0;   // comm left over after overlap
  double total = 0.0;          // t_compute + exposed_comm
};

// One optimizer step: K micro-steps of compute, then a gradient exchange of
// which overlap_fraction * t_bwd can hide under the final backward pass.
IterationBreakdown iteration_time(const ClusterSpec& spec,
                                  const PhaseConfig& phase,
                                  const IterationModelOptions& opt = {});

// Cluster token throughput implied by the iteration model:
// world * K * tokens_per_micro / iteration total.
double cluster_throughput(const ClusterSpec& spec, const PhaseConfig& phase,
                          const IterationModelOptions& opt = {});

struct ScalingPoint {
  ClusterSpec cluster;
  PhaseConfig phase;
  double cost = 0.0;  // optional, carried into the output row
};

struct ScalingRow {
  std::string label;  // "<X>M<Y>G"
  int world = 1;
  double throughput = 0.0;  // cluster tokens/s
  double efficiency = 0.0;  // E(N) = T(N) / (N * T(1))
  IterationBreakdown breakdown;
  double cost = 0.0;
};

// Evaluates every point against a shared 1M1G baseline built from the first
// point's per-GPU rate and phase. E(1M1G) == 1 by construction.
std::vector<ScalingRow> weak_scaling_curve(
    const std::vector<ScalingPoint>& points,
    const IterationModelOptions& opt = {});

double cost_estimate(const CostSpec& c);

// Flat key=value text with optional [section] headers; '#' or ';' opens a
// comment line. Keys outside any section keep their bare name; keys inside
// are returned as "section.key". Later duplicates overwrite earlier ones.
std::map<std::string, std::string> parse_kv_config(const std::string& text);

// Builders over a parsed config; keys are looked up as "<section>.<field>"
// and fall back to `base` when absent. Unparsable values throw
// InvalidConfig.
ClusterSpec cluster_from_config(const std::map<std::string, std::string>& kv,
                                const std::string& section = "cluster",
                                ClusterSpec base = {});
PhaseConfig phase_from_config(const std::map<std::string, std::string>& kv,
                              const std::string& section = "phase",
                              PhaseConfig base = {});
CostSpec cost_from_config(const std::map<std::string, std::string>& kv,
                          const std::string& section = "cost",
                          CostSpec base = {});
IterationModelOptions model_options_from_config(
    const std::map<std::string, std::string>& kv,
    const std::string& section = "model", IterationModelOptions base = {});

// RFC 4180 CSV with header row
// "config,throughput_tokens_per_s,efficiency,t_compute,t_pcie,t_net,cost".
std::string scaling_csv(const std::vector<ScalingRow>& rows);

}  // namespace bertopt

#endif  // BERTOPT_PERF_HPP_
