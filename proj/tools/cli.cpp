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
#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bertopt/data.hpp"
#include "bertopt/errors.hpp"
#include "bertopt/graph.hpp"
#include "bertopt/model.hpp"
#include "bertopt/perf.hpp"
#include "bertopt/trainer.hpp"
#include "bertopt/transport.hpp"
#include "json.hpp"

namespace bertopt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// "-" writes to stdout; anything else is a file path.
void write_text(const std::string& out, const std::string& text) {
  if (out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw IoFailure("cannot open '" + out + "' for writing");
  f << text;
  f.flush();
  if (!f) throw IoFailure("write to '" + out + "' failed");
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Shortest round-trippable decimal for doubles; loss values printed this
// way reparse to the exact bits the engine produced.
std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_brief(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct PrepareOpts {
  std::string corpus;
  std::string out;
  int seq_len = 128;
  int max_pred = 20;
  int shards = 4;
  int vocab_size = 30000;
  uint64_t data_seed = 1;
};

void cmd_prepare(const PrepareOpts& o) {
  const std::vector<std::string> sentences = split_sentences(read_text(o.corpus));
  const Vocab vocab =
      Vocab::build(sentences, static_cast<size_t>(o.vocab_size));
  const std::vector<TrainingExample> examples =
      make_examples(sentences, vocab, o.seq_len, o.max_pred, o.data_seed);
  fs::create_directories(o.out);
  const std::vector<std::string> paths = shard_dataset(
      examples, o.shards, o.out, static_cast<uint32_t>(o.seq_len),
      static_cast<uint32_t>(o.max_pred), o.data_seed);
  vocab.save(o.out + "/vocab.txt");

  json shard_list = json::array();
  for (const std::string& p : paths) {
    ShardReader r(p, 1);
    shard_list.push_back({{"path", p}, {"count", r.header().count}});
  }
  json j;
  j["command"] = "prepare";
  j["corpus"] = o.corpus;
  j["seq_len"] = o.seq_len;
  j["max_pred"] = o.max_pred;
  j["vocab_size"] = vocab.size();
  j["example_count"] = examples.size();
  j["seeds"] = {{"data", o.data_seed}};
  j["shards"] = shard_list;
  write_text(o.out + "/manifest.json", j.dump(2) + "\n");
  std::cout << "prepared " << examples.size() << " examples in "
            << paths.size() << " shards under " << o.out << "\n";
}

struct TrainOpts {
  std::string shards;
  std::string out;
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int vocab = 1000;
  int max_seq = 128;
  double dropout = 0.0;
  int steps = 20;
  int micro_batch = 8;
  int world = 1;
  int accumulation = 1;
  uint64_t bucket_kb = 4096;
  double lr = 1e-3;
  bool fp16 = false;
  bool no_fusion = false;
  bool no_overlap = false;
  bool f16_exchange = false;
  double loss_scale = 0.0;  // 0: 4096 with --fp16, else 1
  uint64_t init_seed = 1;
  uint64_t data_seed = 1;
  uint64_t dropout_seed = 0;
  std::string transport = "inproc";
  std::string endpoints;
  double delay = 0.0;
  double watchdog = 120.0;
};

DistRunConfig train_run_config(const TrainOpts& o) {
  DistRunConfig rc;
  rc.model.layers = o.layers;
  rc.model.hidden = o.hidden;
  rc.model.heads = o.heads;
  rc.model.vocab = o.vocab;
  rc.model.max_seq = o.max_seq;
  rc.model.dropout = static_cast<float>(o.dropout);
  rc.trainer.lamb.lr = static_cast<float>(o.lr);
  rc.trainer.accumulation = o.accumulation;
  rc.trainer.bucket_bytes = static_cast<size_t>(o.bucket_kb) << 10;
  rc.trainer.overlap = !o.no_overlap;
  rc.trainer.amp = o.fp16;
  rc.trainer.fused_gelu = !o.no_fusion;
  rc.trainer.f16_exchange = o.f16_exchange;
  rc.trainer.loss_scale =
      o.loss_scale > 0.0 ? static_cast<float>(o.loss_scale)
                         : (o.fp16 ? 4096.0f : 1.0f);
  rc.trainer.dropout_seed = o.dropout_seed;
  rc.world = o.world;
  rc.steps = o.steps;
  rc.micro_batch = o.micro_batch;
  rc.shard_dir = o.shards;
  rc.init_seed = o.init_seed;
  rc.data_seed = o.data_seed;
  rc.per_byte_delay = o.delay;
  rc.event_dir = o.out;
  rc.watchdog_s = o.watchdog;
  rc.checkpoint_path = o.out + "/checkpoint.bin";
  if (o.transport == "tcp") {
    rc.transport = TransportKind::kTcp;
    rc.endpoints = o.endpoints.empty() ? loopback_endpoints(o.world)
                                       : split_list(o.endpoints, ',');
  } else if (o.transport != "inproc") {
    throw InvalidConfig("transport must be inproc or tcp, got '" +
                        o.transport + "'");
  }
  return rc;
}

void cmd_train(const TrainOpts& o) {
  fs::create_directories(o.out);
  const DistRunConfig rc = train_run_config(o);
  const std::vector<RankReport> reps = run_data_parallel(rc);

  std::string csv = "step,rank,loss\r\n";
  for (int s = 0; s < rc.steps; ++s) {
    for (int r = 0; r < rc.world; ++r) {
      csv += std::to_string(s) + "," + std::to_string(r) + "," +
             fmt_exact(reps[static_cast<size_t>(r)]
                           .losses[static_cast<size_t>(s)]) +
             "\r\n";
    }
  }
  write_text(o.out + "/loss.csv", csv);

  json outputs = json::array({"loss.csv", "checkpoint.bin", "manifest.json"});
  for (int r = 0; r < rc.world; ++r) {
    outputs.push_back("events_rank" + std::to_string(r) + ".jsonl");
  }
  json j;
  j["command"] = "train";
  j["model"] = {{"layers", o.layers},   {"hidden", o.hidden},
                {"heads", o.heads},     {"vocab", o.vocab},
                {"max_seq", o.max_seq}, {"dropout", o.dropout}};
  j["trainer"] = {{"accumulation", o.accumulation},
                  {"bucket_bytes", rc.trainer.bucket_bytes},
                  {"overlap", rc.trainer.overlap},
                  {"fp16", rc.trainer.amp},
                  {"fusion", rc.trainer.fused_gelu},
                  {"f16_exchange", rc.trainer.f16_exchange},
                  {"loss_scale", rc.trainer.loss_scale},
                  {"lr", o.lr}};
  j["world"] = o.world;
  j["steps"] = o.steps;
  j["micro_batch"] = o.micro_batch;
  j["transport"] = o.transport;
  if (rc.transport == TransportKind::kTcp) j["endpoints"] = rc.endpoints;
  j["seeds"] = {{"data", o.data_seed},
                {"init", o.init_seed},
                {"dropout", o.dropout_seed}};
  j["shard_dir"] = o.shards;
  j["outputs"] = outputs;
  write_text(o.out + "/manifest.json", j.dump(2) + "\n");
  std::cout << "trained " << o.steps << " steps on " << o.world
            << " worker(s); final loss "
            << fmt_brief(reps[0].losses.back()) << "\n";
}

struct BenchOpts {
  int64_t elems = int64_t(1) << 22;
  int repeats = 5;
  uint64_t seed = 1;
  std::string out = "-";
};

double bench_throughput(const ExprGraph& g, const GBuf& input, int64_t elems,
                        int repeats) {
  using clock = std::chrono::steady_clock;
  const std::vector<GBuf> ins{input};
  (void)interpret(g, ins);  // warm caches and allocator
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = clock::now();
    (void)interpret(g, ins);
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    best = std::min(best, dt);
  }
  return static_cast<double>(elems) / best;
}

void cmd_bench(const BenchOpts& o) {
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
  std::vector<float> xs(static_cast<size_t>(o.elems));
  for (float& x : xs) x = dist(rng);
  const GBuf input = GBuf::from_f32({o.elems}, std::move(xs));

  const ExprGraph base = build_gelu_unfused();
  const ExprGraph amp = amp_rewrite(base, SafetyTable::defaults());
  struct Row {
    bool fp16;
    bool fusion;
    ExprGraph graph;
  };
  std::vector<Row> rows;
  rows.push_back({false, false, base});
  rows.push_back({true, false, amp});
  rows.push_back({false, true, fuse_elementwise(base)});
  rows.push_back({true, true, fuse_elementwise(amp)});

  std::string csv = "fp16,fusion,elems,elems_per_s,speedup_vs_baseline\r\n";
  double baseline = 0.0;
  for (const Row& r : rows) {
    const double thr = bench_throughput(r.graph, input, o.elems, o.repeats);
    if (!r.fp16 && !r.fusion) baseline = thr;
    csv += std::string(r.fp16 ? "1" : "0") + "," + (r.fusion ? "1" : "0") +
           "," + std::to_string(o.elems) + "," + fmt_brief(thr) + "," +
           fmt_brief(thr / baseline) + "\r\n";
  }
  write_text(o.out, csv);
}

struct ModelSweepOpts {
  std::string table = "scaling";
  std::string spec;
  std::string out = "-";
  int k = 4;
  double omega = 0.5;
  double bwd_share = 2.0 / 3.0;
  bool sum_comm = false;
  bool f16_exchange = false;
  double tokens = 16752.7e6;
  double epochs = 40.0;
  std::vector<double> throughputs = {3228.8, 5429.1, 10765.8};
  // Option handles, for command-line-beats-spec-file precedence.
  CLI::Option* k_opt = nullptr;
  CLI::Option* omega_opt = nullptr;
  CLI::Option* bwd_opt = nullptr;
  CLI::Option* sum_opt = nullptr;
};

void cmd_model(const ModelSweepOpts& o) {
  // Documented defaults: the 32-node T4 cluster and its phase-1 shape.
  ClusterSpec base;
  base.machines = 1;
  base.gpus_per_machine = 1;
  base.throughput_tokens_per_s = 5429.1;
  base.pcie_bandwidth_bits_per_s = 64e9;
  base.network_bandwidth_bits_per_s = 10e9;
  base.param_count = 340000000ull;
  base.grad_elem_bytes = 4;
  PhaseConfig ph;
  ph.sequence_length = 128;
  ph.sentences_per_micro = 32;
  ph.accumulation = o.k;
  ph.epochs = 36.0;
  ph.tokens_per_epoch = o.tokens;
  IterationModelOptions mo;
  mo.overlap_fraction = o.omega;
  mo.backward_share = o.bwd_share;
  mo.sum_comm = o.sum_comm;

  if (!o.spec.empty()) {
    const auto kv = parse_kv_config(read_text(o.spec));
    base = cluster_from_config(kv, "cluster", base);
    ph = phase_from_config(kv, "phase", ph);
    mo = model_options_from_config(kv, "model", mo);
    // Explicit flags still win over the spec file.
    if (o.k_opt && o.k_opt->count() > 0) ph.accumulation = o.k;
    if (o.omega_opt && o.omega_opt->count() > 0) mo.overlap_fraction = o.omega;
    if (o.bwd_opt && o.bwd_opt->count() > 0) mo.backward_share = o.bwd_share;
    if (o.sum_opt && o.sum_opt->count() > 0) mo.sum_comm = o.sum_comm;
  }
  if (o.f16_exchange) base.grad_elem_bytes = 2;

  if (o.table == "scaling") {
    // Both scaling directions plus the full-cluster diagonal.
    const std::pair<int, int> grid[] = {{1, 1}, {1, 2},  {1, 4},  {1, 8},
                                        {2, 1}, {4, 1},  {8, 1},  {16, 1},
                                        {32, 1}, {2, 8}, {4, 8},  {8, 8},
                                        {16, 8}, {32, 8}};
    std::vector<ScalingPoint> points;
    for (const auto& [x, y] : grid) {
      ClusterSpec c = base;
      c.machines = x;
      c.gpus_per_machine = y;
      points.push_back({c, ph, 0.0});
    }
    write_text(o.out, scaling_csv(weak_scaling_curve(points, mo)));
    return;
  }
  if (o.table == "epochs") {
    std::string csv =
        "throughput_tokens_per_s,tokens_per_epoch,epoch_hours,epochs,"
        "total_hours\r\n";
    for (double thr : o.throughputs) {
      const double eh = epoch_time_hours(thr, ph.tokens_per_epoch);
      csv += fmt_brief(thr) + "," + fmt_brief(ph.tokens_per_epoch) + "," +
             fmt_brief(eh) + "," + fmt_brief(o.epochs) + "," +
             fmt_brief(training_time_hours(thr, ph.tokens_per_epoch,
                                           o.epochs)) +
             "\r\n";
    }
    write_text(o.out, csv);
    return;
  }
  if (o.table == "costs") {
    struct CostRow {
      const char* label;
      CostSpec spec;
    };
    CostSpec cloud;
    cloud.billing = CostSpec::Billing::kCloudHourly;
    cloud.devices = 256;
    cloud.price_per_device_hour = 0.35;
    cloud.hours = 288.0;
    CostSpec cluster;
    cluster.billing = CostSpec::Billing::kAcquisition;
    cluster.devices = 32;
    cluster.node_price = 19500.0;
    CostSpec dgx1 = cluster;
    dgx1.node_price = 149000.0;
    CostSpec dgx2 = cluster;
    dgx2.node_price = 399000.0;
    const CostRow rows[] = {{"cloud-t4-256", cloud},
                            {"cluster-t4-32", cluster},
                            {"dgx1-32", dgx1},
                            {"dgx2-32", dgx2}};
    std::string csv =
        "label,billing,devices,price_per_device_hour,hours,node_price,cost\r\n";
    for (const CostRow& r : rows) {
      const bool hourly = r.spec.billing == CostSpec::Billing::kCloudHourly;
      csv += std::string(r.label) + "," + (hourly ? "cloud" : "acquisition") +
             "," + std::to_string(r.spec.devices) + "," +
             fmt_brief(r.spec.price_per_device_hour) + "," +
             fmt_brief(r.spec.hours) + "," + fmt_brief(r.spec.node_price) +
             "," + fmt_brief(cost_estimate(r.spec)) + "\r\n";
    }
    write_text(o.out, csv);
    return;
  }
  throw InvalidConfig("unknown table '" + o.table +
                      "' (expected scaling, epochs, or costs)");
}

struct InspectOpts {
  std::string graph = "gelu";
  bool fuse = false;
  bool amp = false;
  std::string out = "-";
};

void cmd_inspect(const InspectOpts& o) {
  ExprGraph g;
  if (o.graph == "gelu") {
    g = build_gelu_unfused();
  } else if (o.graph == "layer_norm") {
    g = build_layer_norm_unfused();
  } else if (o.graph == "optimizer") {
    g = build_optimizer_unfused(1e-3f, 0.9f, 0.999f, 1e-6f, 0.01f, 1);
  } else {
    throw InvalidConfig("unknown graph '" + o.graph +
                        "' (expected gelu, layer_norm, or optimizer)");
  }
  const int before = g.op_count();
  if (o.amp) g = amp_rewrite(g, SafetyTable::defaults());
  if (o.fuse) g = fuse_elementwise(g);
  std::string rewrites;
  if (o.amp) rewrites += " amp";
  if (o.fuse) rewrites += " fuse";
  std::string text = "# graph: " + o.graph + "\n";
  text += "# rewrites:" + (rewrites.empty() ? " none" : rewrites) + "\n";
  text += "# ops: " + std::to_string(before) + " -> " +
          std::to_string(g.op_count()) + "\n";
  text += dump_graph(g);
  write_text(o.out, text);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"BERT pre-training optimization workbench"};
  app.set_config("--config", "",
                 "key=value options file with [subcommand] sections");
  app.require_subcommand(1);

  PrepareOpts po;
  CLI::App* prepare =
      app.add_subcommand("prepare", "tokenize a corpus into training shards");
  prepare->add_option("--corpus", po.corpus, "UTF-8 text corpus")
      ->required()
      ->check(CLI::ExistingFile);
  prepare->add_option("--out", po.out, "output directory")->required();
  prepare->add_option("--seq-len", po.seq_len, "sequence length")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--max-pred", po.max_pred, "max masked positions")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--shards", po.shards, "shard count")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--vocab-size", po.vocab_size, "vocabulary cap")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--data-seed", po.data_seed, "data pipeline seed");
  prepare->callback([&po] { cmd_prepare(po); });

  TrainOpts to;
  CLI::App* train =
      app.add_subcommand("train", "run data-parallel pre-training");
  train->add_option("--shards", to.shards, "shard directory from prepare")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", to.out, "metrics directory")->required();
  train->add_option("--layers", to.layers)->check(CLI::PositiveNumber);
  train->add_option("--hidden", to.hidden)->check(CLI::PositiveNumber);
  train->add_option("--heads", to.heads)->check(CLI::PositiveNumber);
  train->add_option("--vocab", to.vocab)->check(CLI::PositiveNumber);
  train->add_option("--max-seq", to.max_seq)->check(CLI::PositiveNumber);
  train->add_option("--dropout", to.dropout);
  train->add_option("--steps", to.steps)->check(CLI::PositiveNumber);
  train->add_option("--micro-batch", to.micro_batch)
      ->check(CLI::PositiveNumber);
  train->add_option("--world", to.world, "worker count")
      ->check(CLI::PositiveNumber);
  train->add_option("-K,--accumulation", to.accumulation,
                    "micro batches per optimizer step")
      ->check(CLI::PositiveNumber);
  train->add_option("--bucket-kb", to.bucket_kb, "gradient bucket threshold");
  train->add_option("--lr", to.lr, "LAMB learning rate");
  train->add_flag("--fp16", to.fp16, "mixed-precision forward pass");
  train->add_flag("--no-fusion", to.no_fusion, "disable fused GELU");
  train->add_flag("--no-overlap", to.no_overlap,
                  "serialize communication after backward");
  train->add_flag("--f16-exchange", to.f16_exchange,
                  "binary16 gradient payloads on the wire");
  train->add_option("--loss-scale", to.loss_scale,
                    "static loss scale (0: 4096 with --fp16, else 1)");
  train->add_option("--init-seed", to.init_seed, "parameter init seed");
  train->add_option("--data-seed", to.data_seed, "shard shuffle seed");
  train->add_option("--dropout-seed", to.dropout_seed, "dropout mask seed");
  train->add_option("--transport", to.transport, "inproc or tcp")
      ->check(CLI::IsMember({"inproc", "tcp"}));
  train->add_option("--endpoints", to.endpoints,
                    "rank-ordered host:port list for tcp")
      ->envname("BERTOPT_ENDPOINTS");
  train->add_option("--delay", to.delay,
                    "simulated seconds per wire byte (inproc only)");
  train->add_option("--watchdog", to.watchdog, "transport timeout seconds");
  train->callback([&to] { cmd_train(to); });

  BenchOpts bo;
  CLI::App* bench = app.add_subcommand(
      "bench", "interpreter throughput per optimization toggle");
  bench->add_option("--elems", bo.elems, "vector length")
      ->check(CLI::PositiveNumber);
  bench->add_option("--repeats", bo.repeats, "timing repeats, best taken")
      ->check(CLI::PositiveNumber);
  bench->add_option("--seed", bo.seed, "input data seed");
  bench->add_option("--out", bo.out, "CSV path or - for stdout");
  bench->callback([&bo] { cmd_bench(bo); });

  ModelSweepOpts mo;
  CLI::App* model = app.add_subcommand(
      "model", "analytical scaling, epoch-time, and cost tables");
  model->add_option("--table", mo.table, "scaling, epochs, or costs")
      ->check(CLI::IsMember({"scaling", "epochs", "costs"}));
  model->add_option("--spec", mo.spec,
                    "key=value file with [cluster]/[phase]/[model] sections")
      ->check(CLI::ExistingFile);
  model->add_option("--out", mo.out, "CSV path or - for stdout");
  mo.k_opt = model->add_option("--k", mo.k, "gradient accumulation")
                 ->check(CLI::PositiveNumber);
  mo.omega_opt =
      model->add_option("--omega", mo.omega, "overlap fraction in [0,1]");
  mo.bwd_opt =
      model->add_option("--bwd-share", mo.bwd_share, "backward compute share");
  mo.sum_opt = model->add_flag("--sum-comm", mo.sum_comm,
                               "sum PCIe and network instead of max");
  model->add_flag("--f16-exchange", mo.f16_exchange,
                  "2-byte gradient wire width");
  model->add_option("--tokens", mo.tokens, "tokens per epoch");
  model->add_option("--epochs", mo.epochs, "epochs for the total-time column");
  model->add_option("--throughputs", mo.throughputs,
                    "per-device rates for the epochs table")
      ->delimiter(',');
  model->callback([&mo] { cmd_model(mo); });

  InspectOpts io;
  CLI::App* inspect = app.add_subcommand(
      "inspect-graph", "dump compiler IR before/after rewrites");
  inspect->add_option("--graph", io.graph, "gelu, layer_norm, or optimizer")
      ->check(CLI::IsMember({"gelu", "layer_norm", "optimizer"}));
  inspect->add_flag("--amp", io.amp, "apply the mixed-precision rewrite");
  inspect->add_flag("--fuse", io.fuse, "apply elementwise fusion");
  inspect->add_option("--out", io.out, "path or - for stdout");
  inspect->callback([&io] { cmd_inspect(io); });

  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "bertopt: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace bertopt
