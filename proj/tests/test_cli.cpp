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
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bertopt/data.hpp"
#include "bertopt/model.hpp"
#include "bertopt/trainer.hpp"
#include "bertopt/transport.hpp"
#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"

namespace {

using namespace bertopt;
using nlohmann::json;

int cli(const std::vector<std::string>& sub_args) {
  std::vector<std::string> args{"bertopt"};
  args.insert(args.end(), sub_args.begin(), sub_args.end());
  return run_cli(args);
}

std::string tmpdir(const char* tag) {
  const auto p = std::filesystem::temp_directory_path() /
                 (std::string("bertopt_cli_") + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "missing file ", path);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

// CRLF record split; the trailing empty piece after the final CRLF is
// dropped.
std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t nl = text.find("\r\n", pos);
    REQUIRE(nl != std::string::npos);
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 2;
  }
  return lines;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double num(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  REQUIRE(end == s.c_str() + s.size());
  return v;
}

// Topic-pooled sentences so the vocabulary is small and examples abound.
void write_corpus(const std::string& path, uint64_t seed, int n_sentences) {
  std::mt19937_64 rng(seed);
  std::ofstream f(path, std::ios::binary);
  REQUIRE(f.good());
  for (int i = 0; i < n_sentences; ++i) {
    const int topic = static_cast<int>(rng() % 6);
    const int len = 6 + static_cast<int>(rng() % 8);
    for (int w = 0; w < len; ++w) {
      f << "t" << topic << "w" << rng() % 40 << " ";
    }
    f << ". ";
  }
}

struct Workspace {
  std::string root;
  std::string corpus;
  std::string data;
};

// Shared prepared dataset; building it once keeps the suite fast.
const Workspace& workspace() {
  static const Workspace ws = [] {
    Workspace w;
    w.root = tmpdir("ws");
    w.corpus = w.root + "/corpus.txt";
    w.data = w.root + "/data";
    write_corpus(w.corpus, 5, 700);
    REQUIRE(cli({"prepare", "--corpus", w.corpus, "--out", w.data,
                 "--seq-len", "32", "--max-pred", "5", "--shards", "3",
                 "--vocab-size", "600", "--data-seed", "11"}) == 0);
    return w;
  }();
  return ws;
}

void set_arg(std::vector<std::string>& args, const std::string& flag,
             const std::string& value) {
  for (size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == flag) {
      args[i + 1] = value;
      return;
    }
  }
  REQUIRE_MESSAGE(false, "flag not present: ", flag);
}

std::vector<std::string> base_train_args(const std::string& out) {
  return {"train",   "--shards",      workspace().data,
          "--out",   out,             "--layers",
          "1",       "--hidden",      "32",
          "--heads", "2",             "--vocab",
          "600",     "--max-seq",     "32",
          "--steps", "3",             "--micro-batch",
          "4",       "--world",       "2",
          "-K",      "2",             "--init-seed",
          "7",       "--data-seed",   "11"};
}

TEST_CASE("cli: prepare writes balanced shards and a consistent manifest") {
  const Workspace& ws = workspace();

  const json manifest = json::parse(file_bytes(ws.data + "/manifest.json"));
  CHECK(manifest.at("command") == "prepare");
  CHECK(manifest.at("seeds").at("data") == 11);
  REQUIRE(manifest.at("shards").size() == 3);

  uint64_t manifest_total = 0;
  uint64_t lo = UINT64_MAX, hi = 0;
  for (const json& s : manifest.at("shards")) {
    const std::string path = s.at("path");
    ShardReader r(path, 1);
    const uint64_t n = r.header().count;
    CHECK(n == s.at("count").get<uint64_t>());
    manifest_total += n;
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  CHECK(manifest_total == manifest.at("example_count").get<uint64_t>());
  CHECK(hi - lo <= 1);
  CHECK(std::filesystem::exists(ws.data + "/vocab.txt"));

  SUBCASE("same seed reruns are byte-identical") {
    const std::string again = tmpdir("prep_again");
    REQUIRE(cli({"prepare", "--corpus", ws.corpus, "--out", again,
                 "--seq-len", "32", "--max-pred", "5", "--shards", "3",
                 "--vocab-size", "600", "--data-seed", "11"}) == 0);
    for (const json& s : manifest.at("shards")) {
      const std::string path = s.at("path");
      const std::string name = std::filesystem::path(path).filename();
      CHECK(file_bytes(path) == file_bytes(again + "/" + name));
    }
    CHECK(file_bytes(ws.data + "/vocab.txt") ==
          file_bytes(again + "/vocab.txt"));
  }
}

TEST_CASE("cli: prepare rejects a corpus with too few sentences") {
  const std::string root = tmpdir("prep_small");
  const std::string corpus = root + "/one.txt";
  {
    std::ofstream f(corpus);
    f << "just one sentence here .";
  }
  CHECK(cli({"prepare", "--corpus", corpus, "--out", root + "/out"}) == 1);
  CHECK_FALSE(std::filesystem::exists(root + "/out/manifest.json"));
}

TEST_CASE("cli: train reproduces the library API exactly") {
  const std::string out = tmpdir("train_api");
  REQUIRE(cli(base_train_args(out)) == 0);

  DistRunConfig rc;
  rc.model.layers = 1;
  rc.model.hidden = 32;
  rc.model.heads = 2;
  rc.model.vocab = 600;
  rc.model.max_seq = 32;
  rc.trainer.accumulation = 2;
  rc.world = 2;
  rc.steps = 3;
  rc.micro_batch = 4;
  rc.shard_dir = workspace().data;
  rc.init_seed = 7;
  rc.data_seed = 11;
  const std::vector<RankReport> reps = run_data_parallel(rc);

  const std::vector<std::string> lines =
      csv_lines(file_bytes(out + "/loss.csv"));
  REQUIRE(lines.size() == 1 + 3 * 2);
  CHECK(lines[0] == "step,rank,loss");
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = fields(lines[i]);
    REQUIRE(f.size() == 3);
    const int step = static_cast<int>(num(f[0]));
    const int rank = static_cast<int>(num(f[1]));
    CHECK(step == static_cast<int>(i - 1) / 2);
    CHECK(rank == static_cast<int>(i - 1) % 2);
    // %.17g output must reparse to the bit pattern the engine produced.
    CHECK(num(f[2]) == reps[static_cast<size_t>(rank)]
                           .losses[static_cast<size_t>(step)]);
  }

  const json manifest = json::parse(file_bytes(out + "/manifest.json"));
  CHECK(manifest.at("seeds").at("data") == 11);
  CHECK(manifest.at("seeds").at("init") == 7);
  CHECK(manifest.at("seeds").at("dropout") == 0);
  for (int r = 0; r < 2; ++r) {
    const std::string log =
        file_bytes(out + "/events_rank" + std::to_string(r) + ".jsonl");
    CHECK(log.find("\"event\":") != std::string::npos);
  }

  const Model loaded = load_checkpoint(out + "/checkpoint.bin");
  CHECK(loaded.param_count() == build_model(rc.model, 7).param_count());
}

TEST_CASE("cli: baseline and optimized runs share one step grid") {
  const std::string base_out = tmpdir("train_base");
  const std::string opt_out = tmpdir("train_opt");
  auto base_args = base_train_args(base_out);
  REQUIRE(cli(base_args) == 0);
  auto opt_args = base_train_args(opt_out);
  opt_args.insert(opt_args.end(), {"--fp16", "--f16-exchange"});
  REQUIRE(cli(opt_args) == 0);

  const auto a = csv_lines(file_bytes(base_out + "/loss.csv"));
  const auto b = csv_lines(file_bytes(opt_out + "/loss.csv"));
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    const auto fa = fields(a[i]);
    const auto fb = fields(b[i]);
    CHECK(fa[0] == fb[0]);
    CHECK(fa[1] == fb[1]);
  }
}

TEST_CASE("cli: tcp transport reproduces the in-process run bit for bit") {
  const std::string inproc_out = tmpdir("train_inproc");
  auto args = base_train_args(inproc_out);
  set_arg(args, "--steps", "2");
  REQUIRE(cli(args) == 0);

  const std::string tcp_out = tmpdir("train_tcp");
  auto tcp_args = base_train_args(tcp_out);
  set_arg(tcp_args, "--steps", "2");
  tcp_args.insert(tcp_args.end(), {"--transport", "tcp"});

  SUBCASE("auto-assigned loopback endpoints") {
    REQUIRE(cli(tcp_args) == 0);
  }
  SUBCASE("endpoints from the environment") {
    const std::vector<std::string> eps = loopback_endpoints(2);
    setenv("BERTOPT_ENDPOINTS", (eps[0] + "," + eps[1]).c_str(), 1);
    const int rcode = cli(tcp_args);
    unsetenv("BERTOPT_ENDPOINTS");
    REQUIRE(rcode == 0);
    const json manifest = json::parse(file_bytes(tcp_out + "/manifest.json"));
    CHECK(manifest.at("endpoints") == json(eps));
  }
  CHECK(file_bytes(inproc_out + "/loss.csv") ==
        file_bytes(tcp_out + "/loss.csv"));
}

TEST_CASE("cli: train rejects delay injection over tcp") {
  const std::string out = tmpdir("train_tcp_delay");
  auto args = base_train_args(out);
  args.insert(args.end(), {"--transport", "tcp", "--delay", "1e-9"});
  CHECK(cli(args) == 1);
  CHECK_FALSE(std::filesystem::exists(out + "/loss.csv"));
}

TEST_CASE("cli: bench emits one row per toggle pair with unit baseline") {
  const std::string out = tmpdir("bench") + "/bench.csv";
  REQUIRE(cli({"bench", "--elems", "4096", "--repeats", "1", "--out", out}) ==
          0);
  const auto lines = csv_lines(file_bytes(out));
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "fp16,fusion,elems,elems_per_s,speedup_vs_baseline");
  const std::string toggles[4] = {"0,0", "1,0", "0,1", "1,1"};
  for (int i = 0; i < 4; ++i) {
    const auto f = fields(lines[static_cast<size_t>(i) + 1]);
    REQUIRE(f.size() == 5);
    CHECK(f[0] + "," + f[1] == toggles[i]);
    CHECK(num(f[2]) == 4096.0);
    CHECK(num(f[3]) > 0.0);
    if (i == 0) CHECK(num(f[4]) == 1.0);
  }
}

TEST_CASE("cli: model costs table pins the published totals") {
  const std::string out = tmpdir("model_costs") + "/costs.csv";
  REQUIRE(cli({"model", "--table", "costs", "--out", out}) == 0);
  const auto lines = csv_lines(file_bytes(out));
  REQUIRE(lines.size() == 5);
  std::map<std::string, double> cost;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = fields(lines[i]);
    cost[f[0]] = num(f[6]);
  }
  CHECK(cost.at("cloud-t4-256") == 25804.8);
  CHECK(cost.at("cluster-t4-32") == 624000.0);
  CHECK(cost.at("dgx1-32") == 4768000.0);
  CHECK(cost.at("dgx2-32") == 12768000.0);
}

TEST_CASE("cli: model epochs table reproduces the reference durations") {
  const std::string out = tmpdir("model_epochs") + "/epochs.csv";
  REQUIRE(cli({"model", "--table", "epochs", "--out", out}) == 0);
  const auto lines = csv_lines(file_bytes(out));
  REQUIRE(lines.size() == 4);
  const double expected[3] = {1441.6, 857.1, 432.3};
  for (int i = 0; i < 3; ++i) {
    const auto f = fields(lines[static_cast<size_t>(i) + 1]);
    const double eh = num(f[2]);
    CHECK(std::abs(eh - expected[i]) / expected[i] < 0.005);
    CHECK(num(f[4]) == doctest::Approx(eh * 40.0));
  }
}

TEST_CASE("cli: model scaling table spans both directions of the sweep") {
  const std::string out = tmpdir("model_scaling") + "/scaling.csv";
  REQUIRE(cli({"model", "--table", "scaling", "--out", out}) == 0);
  const auto lines = csv_lines(file_bytes(out));
  REQUIRE(lines.size() == 15);
  std::map<std::string, std::pair<double, double>> rows;  // thr, eff
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = fields(lines[i]);
    rows[f[0]] = {num(f[1]), num(f[2])};
  }
  CHECK(rows.at("1M1G").second == 1.0);
  CHECK(rows.at("1M2G").second > rows.at("2M1G").second);
  CHECK(rows.at("2M1G").second > 1.0 / 1.3);
  const double factor = rows.at("32M8G").first / rows.at("1M1G").first;
  CHECK(factor > 140.0);
  CHECK(factor < 190.0);
  CHECK(factor == doctest::Approx(158.5).epsilon(0.005));
}

TEST_CASE("cli: model spec file applies and explicit flags beat it") {
  const std::string root = tmpdir("model_spec");
  const std::string spec = root + "/cluster.cfg";
  {
    std::ofstream f(spec);
    f << "[phase]\naccumulation = 1\n[cluster]\n"
      << "network_bandwidth_bits_per_s = 5e9\n";
  }
  const std::string plain = root + "/plain.csv";
  const std::string tuned = root + "/tuned.csv";
  const std::string forced = root + "/forced.csv";
  REQUIRE(cli({"model", "--table", "scaling", "--out", plain}) == 0);
  REQUIRE(cli({"model", "--table", "scaling", "--spec", spec, "--out",
               tuned}) == 0);
  REQUIRE(cli({"model", "--table", "scaling", "--spec", spec, "--k", "4",
               "--out", forced}) == 0);

  auto eff = [](const std::string& path, const std::string& label) {
    for (const std::string& line : csv_lines(file_bytes(path))) {
      const auto f = fields(line);
      if (f[0] == label) return num(f[2]);
    }
    REQUIRE(false);
    return 0.0;
  };
  // K=1 at 5 Gb/s exposes far more communication than the K=4 default.
  CHECK(eff(tuned, "32M1G") < eff(plain, "32M1G"));
  // --k on the command line overrides the spec file's accumulation.
  CHECK(eff(forced, "32M1G") > eff(tuned, "32M1G"));
}

TEST_CASE("cli: inspect-graph reports the fusion collapse") {
  const std::string root = tmpdir("inspect");
  const std::string out = root + "/gelu.txt";
  REQUIRE(cli({"inspect-graph", "--graph", "gelu", "--fuse", "--out", out}) ==
          0);
  const std::string text = file_bytes(out);
  CHECK(text.find("# graph: gelu") != std::string::npos);
  CHECK(text.find("# ops: 7 -> 1") != std::string::npos);

  const std::string amp_out = root + "/opt_amp.txt";
  REQUIRE(cli({"inspect-graph", "--graph", "optimizer", "--amp", "--out",
               amp_out}) == 0);
  const std::string amp_text = file_bytes(amp_out);
  CHECK(amp_text.find("# rewrites: amp") != std::string::npos);

  const std::string plain_out = root + "/ln.txt";
  REQUIRE(cli({"inspect-graph", "--graph", "layer_norm", "--out",
               plain_out}) == 0);
  CHECK(file_bytes(plain_out).find("# rewrites: none") != std::string::npos);
}

TEST_CASE("cli: ini config file feeds subcommand options") {
  const std::string root = tmpdir("config");
  const std::string conf = root + "/bench.ini";
  const std::string out = root + "/bench.csv";
  {
    std::ofstream f(conf);
    f << "[bench]\nelems = 2048\nrepeats = 1\nout = " << out << "\n";
  }
  REQUIRE(cli({"--config", conf, "bench"}) == 0);
  const auto lines = csv_lines(file_bytes(out));
  REQUIRE(lines.size() == 5);
  CHECK(num(fields(lines[1])[2]) == 2048.0);
}

TEST_CASE("cli: bad invocations exit nonzero") {
  CHECK(cli({}) != 0);
  CHECK(cli({"frobnicate"}) != 0);
  CHECK(cli({"model", "--table", "nonsense"}) != 0);
  CHECK(cli({"train", "--shards", "/no/such/dir", "--out", "/tmp/x"}) != 0);
  CHECK(cli({"prepare", "--corpus", "/no/such/file", "--out", "/tmp/x"}) != 0);
}

}  // namespace
