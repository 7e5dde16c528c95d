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
#include "bertopt/perf.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "bertopt/collective.hpp"
#include "bertopt/errors.hpp"

namespace bertopt {

std::string ClusterSpec::label() const {
  return label_topology(machines, gpus_per_machine);
}

void ClusterSpec::validate() const {
  if (machines < 1 || gpus_per_machine < 1) {
    throw InvalidConfig("cluster topology must have at least one device");
  }
  if (!(throughput_tokens_per_s > 0.0)) {
    throw InvalidConfig("per-GPU throughput must be positive");
  }
  if (!(pcie_bandwidth_bits_per_s > 0.0) ||
      !(network_bandwidth_bits_per_s > 0.0)) {
    throw InvalidConfig("bandwidths must be positive");
  }
  if (param_count == 0) throw InvalidConfig("param_count must be positive");
  if (grad_elem_bytes == 0) {
    throw InvalidConfig("grad_elem_bytes must be positive");
  }
}

void PhaseConfig::validate() const {
  if (sequence_length < 1 || sentences_per_micro < 1) {
    throw InvalidConfig("phase shape must be positive");
  }
  if (accumulation < 1) throw InvalidConfig("accumulation must be >= 1");
  if (!(epochs > 0.0)) throw InvalidConfig("epochs must be positive");
  if (!(tokens_per_epoch > 0.0)) {
    throw InvalidConfig("tokens_per_epoch must be positive");
  }
}

void CostSpec::validate() const {
  if (devices < 0) throw InvalidConfig("device count must be nonnegative");
  if (price_per_device_hour < 0.0 || hours < 0.0 || node_price < 0.0) {
    throw InvalidConfig("prices and duration must be nonnegative");
  }
}

double epoch_time_hours(double throughput_tokens_per_s,
                        double tokens_per_epoch) {
  if (!(throughput_tokens_per_s > 0.0) || !(tokens_per_epoch > 0.0)) {
    throw InvalidConfig("epoch_time_hours requires positive inputs");
  }
  return tokens_per_epoch / (throughput_tokens_per_s * 3600.0);
}

double training_time_hours(double throughput_tokens_per_s,
                           double tokens_per_epoch, double epochs) {
  if (!(epochs > 0.0)) throw InvalidConfig("epochs must be positive");
  return epochs * epoch_time_hours(throughput_tokens_per_s, tokens_per_epoch);
}

double ring_comm_time_s(double bytes, int n_participants,
                        double bandwidth_bits_per_s) {
  if (n_participants < 1) {
    throw InvalidConfig("ring needs at least one participant");
  }
  if (bytes < 0.0 || !(bandwidth_bits_per_s > 0.0)) {
    throw InvalidConfig("ring_comm_time_s requires nonnegative bytes and "
                        "positive bandwidth");
  }
  if (n_participants == 1) return 0.0;
  const double n = static_cast<double>(n_participants);
  return 2.0 * (n - 1.0) / n * bytes * 8.0 / bandwidth_bits_per_s;
}

IterationBreakdown iteration_time(const ClusterSpec& spec,
                                  const PhaseConfig& phase,
                                  const IterationModelOptions& opt) {
  spec.validate();
  phase.validate();
  if (opt.overlap_fraction < 0.0 || opt.overlap_fraction > 1.0) {
    throw InvalidConfig("overlap_fraction must lie in [0,1]");
  }
  if (opt.backward_share < 0.0 || opt.backward_share > 1.0) {
    throw InvalidConfig("backward_share must lie in [0,1]");
  }

  IterationBreakdown b;
  const double micro_s = phase.tokens_per_micro() / spec.throughput_tokens_per_s;
  b.t_compute = static_cast<double>(phase.accumulation) * micro_s;
  b.t_pcie = ring_comm_time_s(spec.grad_bytes(), spec.gpus_per_machine,
                              spec.pcie_bandwidth_bits_per_s);
  b.t_net = ring_comm_time_s(spec.grad_bytes(), spec.machines,
                             spec.network_bandwidth_bits_per_s);
  b.t_comm = opt.sum_comm ? b.t_pcie + b.t_net : std::max(b.t_pcie, b.t_net);
  b.t_bwd = opt.backward_share * micro_s;
  b.exposed_comm = std::max(0.0, b.t_comm - opt.overlap_fraction * b.t_bwd);
  b.total = b.t_compute + b.exposed_comm;
  return b;
}

double cluster_throughput(const ClusterSpec& spec, const PhaseConfig& phase,
                          const IterationModelOptions& opt) {
  const IterationBreakdown b = iteration_time(spec, phase, opt);
  const double tokens_per_step = static_cast<double>(spec.world()) *
                                 static_cast<double>(phase.accumulation) *
                                 phase.tokens_per_micro();
  return tokens_per_step / b.total;
}

std::vector<ScalingRow> weak_scaling_curve(
    const std::vector<ScalingPoint>& points,
    const IterationModelOptions& opt) {
  std::vector<ScalingRow> rows;
  if (points.empty()) return rows;

  // Shared single-GPU baseline: the first point's device and phase, ring
  // collapsed to one participant.
  ClusterSpec base = points.front().cluster;
  base.machines = 1;
  base.gpus_per_machine = 1;
  const double t1 = cluster_throughput(base, points.front().phase, opt);

  rows.reserve(points.size());
  for (const ScalingPoint& p : points) {
    ScalingRow r;
    r.label = p.cluster.label();
    r.world = p.cluster.world();
    r.breakdown = iteration_time(p.cluster, p.phase, opt);
    r.throughput = cluster_throughput(p.cluster, p.phase, opt);
    r.efficiency = r.throughput / (static_cast<double>(r.world) * t1);
    r.cost = p.cost;
    rows.push_back(r);
  }
  return rows;
}

double cost_estimate(const CostSpec& c) {
  c.validate();
  if (c.billing == CostSpec::Billing::kCloudHourly) {
    return static_cast<double>(c.devices) * c.price_per_device_hour * c.hours;
  }
  return static_cast<double>(c.devices) * c.node_price;
}

namespace {

std::string trim(const std::string& s) {
  size_t a = 0;
  size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

const std::string* find_key(const std::map<std::string, std::string>& kv,
                            const std::string& section,
                            const std::string& field) {
  const std::string key = section.empty() ? field : section + "." + field;
  auto it = kv.find(key);
  return it == kv.end() ? nullptr : &it->second;
}

double parse_double(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (errno != 0 || end == value.c_str() || *end != '\0') {
    throw InvalidConfig("config key '" + key + "' has a non-numeric value '" +
                        value + "'");
  }
  return v;
}

void load_double(const std::map<std::string, std::string>& kv,
                 const std::string& section, const std::string& field,
                 double* out) {
  if (const std::string* v = find_key(kv, section, field)) {
    *out = parse_double(section + "." + field, *v);
  }
}

void load_int(const std::map<std::string, std::string>& kv,
              const std::string& section, const std::string& field, int* out) {
  if (const std::string* v = find_key(kv, section, field)) {
    const double d = parse_double(section + "." + field, *v);
    const int i = static_cast<int>(d);
    if (static_cast<double>(i) != d) {
      throw InvalidConfig("config key '" + section + "." + field +
                          "' must be an integer, got '" + *v + "'");
    }
    *out = i;
  }
}

void load_u64(const std::map<std::string, std::string>& kv,
              const std::string& section, const std::string& field,
              uint64_t* out) {
  if (const std::string* v = find_key(kv, section, field)) {
    const double d = parse_double(section + "." + field, *v);
    if (d < 0.0 || static_cast<double>(static_cast<uint64_t>(d)) != d) {
      throw InvalidConfig("config key '" + section + "." + field +
                          "' must be a nonnegative integer, got '" + *v + "'");
    }
    *out = static_cast<uint64_t>(d);
  }
}

void load_size(const std::map<std::string, std::string>& kv,
               const std::string& section, const std::string& field,
               size_t* out) {
  uint64_t v = static_cast<uint64_t>(*out);
  load_u64(kv, section, field, &v);
  *out = static_cast<size_t>(v);
}

void load_bool(const std::map<std::string, std::string>& kv,
               const std::string& section, const std::string& field,
               bool* out) {
  if (const std::string* v = find_key(kv, section, field)) {
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") {
      *out = true;
    } else if (*v == "false" || *v == "0" || *v == "no" || *v == "off") {
      *out = false;
    } else {
      throw InvalidConfig("config key '" + section + "." + field +
                          "' must be a boolean, got '" + *v + "'");
    }
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

std::map<std::string, std::string> parse_kv_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw InvalidConfig("config line " + std::to_string(lineno) +
                            ": malformed section header '" + t + "'");
      }
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) {
        throw InvalidConfig("config line " + std::to_string(lineno) +
                            ": empty section name");
      }
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw InvalidConfig("config line " + std::to_string(lineno) +
                          ": expected key=value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw InvalidConfig("config line " + std::to_string(lineno) +
                          ": empty key");
    }
    kv[section.empty() ? key : section + "." + key] = value;
  }
  return kv;
}

ClusterSpec cluster_from_config(const std::map<std::string, std::string>& kv,
                                const std::string& section, ClusterSpec base) {
  ClusterSpec c = base;
  load_int(kv, section, "machines", &c.machines);
  load_int(kv, section, "gpus_per_machine", &c.gpus_per_machine);
  load_double(kv, section, "throughput_tokens_per_s",
              &c.throughput_tokens_per_s);
  load_double(kv, section, "pcie_bandwidth_bits_per_s",
              &c.pcie_bandwidth_bits_per_s);
  load_double(kv, section, "network_bandwidth_bits_per_s",
              &c.network_bandwidth_bits_per_s);
  load_u64(kv, section, "param_count", &c.param_count);
  load_size(kv, section, "grad_elem_bytes", &c.grad_elem_bytes);
  return c;
}

PhaseConfig phase_from_config(const std::map<std::string, std::string>& kv,
                              const std::string& section, PhaseConfig base) {
  PhaseConfig p = base;
  load_int(kv, section, "sequence_length", &p.sequence_length);
  load_int(kv, section, "sentences_per_micro", &p.sentences_per_micro);
  load_int(kv, section, "accumulation", &p.accumulation);
  load_double(kv, section, "epochs", &p.epochs);
  load_double(kv, section, "tokens_per_epoch", &p.tokens_per_epoch);
  return p;
}

CostSpec cost_from_config(const std::map<std::string, std::string>& kv,
                          const std::string& section, CostSpec base) {
  CostSpec c = base;
  if (const std::string* v = find_key(kv, section, "billing")) {
    if (*v == "cloud") {
      c.billing = CostSpec::Billing::kCloudHourly;
    } else if (*v == "acquisition") {
      c.billing = CostSpec::Billing::kAcquisition;
    } else {
      throw InvalidConfig("config key '" + section +
                          ".billing' must be cloud or acquisition, got '" +
                          *v + "'");
    }
  }
  load_int(kv, section, "devices", &c.devices);
  load_double(kv, section, "price_per_device_hour", &c.price_per_device_hour);
  load_double(kv, section, "hours", &c.hours);
  load_double(kv, section, "node_price", &c.node_price);
  return c;
}

IterationModelOptions model_options_from_config(
    const std::map<std::string, std::string>& kv, const std::string& section,
    IterationModelOptions base) {
  IterationModelOptions o = base;
  load_double(kv, section, "overlap_fraction", &o.overlap_fraction);
  load_double(kv, section, "backward_share", &o.backward_share);
  load_bool(kv, section, "sum_comm", &o.sum_comm);
  return o;
}

std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::string out =
      "config,throughput_tokens_per_s,efficiency,t_compute,t_pcie,t_net,"
      "cost\r\n";
  for (const ScalingRow& r : rows) {
    out += csv_field(r.label);
    out += ',';
    out += fmt_num(r.throughput);
    out += ',';
    out += fmt_num(r.efficiency);
    out += ',';
    out += fmt_num(r.breakdown.t_compute);
    out += ',';
    out += fmt_num(r.breakdown.t_pcie);
    out += ',';
    out += fmt_num(r.breakdown.t_net);
    out += ',';
    out += fmt_num(r.cost);
    out += "\r\n";
  }
  return out;
}

}  // namespace bertopt
