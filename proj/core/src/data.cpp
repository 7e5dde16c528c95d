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
#include "bertopt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>

namespace bertopt {
namespace {

constexpr char kMagic[4] = {'B', 'S', 'H', 'D'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  put_u32(out, static_cast<uint32_t>(v));
  put_u32(out, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

uint64_t get_u64(const uint8_t* p) {
  return static_cast<uint64_t>(get_u32(p)) |
         static_cast<uint64_t>(get_u32(p + 4)) << 32;
}

uint64_t draw(std::mt19937_64& rng, uint64_t n) { return rng() % n; }

void check_example(const TrainingExample& e, uint32_t seq_len,
                   uint32_t max_pred) {
  if (e.ids.size() != seq_len || e.segments.size() != seq_len) {
    throw LengthMismatch("example sequence length does not match shard");
  }
  if (e.mask_positions.size() > max_pred ||
      e.mask_positions.size() != e.mask_labels.size()) {
    throw LengthMismatch("example mask arrays exceed max_pred");
  }
}

void serialize_record(std::vector<uint8_t>& out, const TrainingExample& e,
                      uint32_t seq_len, uint32_t max_pred) {
  for (uint32_t i = 0; i < seq_len; ++i) put_u32(out, e.ids[i]);
  for (uint32_t i = 0; i < seq_len; ++i) out.push_back(e.segments[i]);
  put_u32(out, static_cast<uint32_t>(e.mask_positions.size()));
  for (uint32_t i = 0; i < max_pred; ++i) {
    put_u32(out, i < e.mask_positions.size() ? e.mask_positions[i] : 0);
  }
  for (uint32_t i = 0; i < max_pred; ++i) {
    put_u32(out, i < e.mask_labels.size() ? e.mask_labels[i] : 0);
  }
  out.push_back(e.is_next);
}

TrainingExample parse_record(const uint8_t* p, uint32_t seq_len,
                             uint32_t max_pred) {
  TrainingExample e;
  e.ids.resize(seq_len);
  for (uint32_t i = 0; i < seq_len; ++i) e.ids[i] = get_u32(p + 4 * i);
  p += 4 * static_cast<size_t>(seq_len);
  e.segments.assign(p, p + seq_len);
  p += seq_len;
  const uint32_t mask_count = get_u32(p);
  p += 4;
  if (mask_count > max_pred) throw CorruptShard("mask count exceeds max_pred");
  e.mask_positions.resize(mask_count);
  for (uint32_t i = 0; i < mask_count; ++i) {
    e.mask_positions[i] = get_u32(p + 4 * i);
  }
  p += 4 * static_cast<size_t>(max_pred);
  e.mask_labels.resize(mask_count);
  for (uint32_t i = 0; i < mask_count; ++i) {
    e.mask_labels[i] = get_u32(p + 4 * i);
  }
  p += 4 * static_cast<size_t>(max_pred);
  e.is_next = *p;
  return e;
}

std::vector<uint8_t> serialize_header(uint32_t seq_len, uint32_t max_pred,
                                      uint64_t count, uint64_t seed) {
  std::vector<uint8_t> h;
  h.insert(h.end(), kMagic, kMagic + 4);
  put_u32(h, 1);  // version
  put_u32(h, seq_len);
  put_u32(h, max_pred);
  put_u64(h, count);
  put_u64(h, seed);
  return h;
}

ShardHeader parse_header(const uint8_t* p, size_t n) {
  if (n < shard_header_size()) throw CorruptShard("truncated header");
  if (std::memcmp(p, kMagic, 4) != 0) throw CorruptShard("bad magic");
  ShardHeader h;
  h.version = get_u32(p + 4);
  if (h.version != 1) {
    throw CorruptShard("unsupported version " + std::to_string(h.version));
  }
  h.seq_len = get_u32(p + 8);
  h.max_pred = get_u32(p + 12);
  h.count = get_u64(p + 16);
  h.seed = get_u64(p + 24);
  return h;
}

}  // namespace

std::vector<std::string> split_sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '.' || c == '!' || c == '?' || c == '\n') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<std::string> split_words(const std::string& sentence) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : sentence) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& sentences,
                   size_t max_size) {
  if (max_size <= kNumSpecial) {
    throw InvalidConfig("vocab size must exceed the special tokens");
  }
  std::unordered_map<std::string, uint64_t> freq;
  for (const std::string& s : sentences) {
    for (const std::string& w : split_words(s)) freq[w]++;
  }
  std::vector<std::pair<std::string, uint64_t>> by_freq(freq.begin(),
                                                        freq.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  v.tokens = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
  for (const auto& [word, n] : by_freq) {
    if (v.tokens.size() >= max_size) break;
    v.tokens.push_back(word);
  }
  for (uint32_t i = 0; i < v.tokens.size(); ++i) v.ids[v.tokens[i]] = i;
  return v;
}

uint32_t Vocab::id(const std::string& word) const {
  const auto it = ids.find(word);
  return it == ids.end() ? kUnk : it->second;
}

void Vocab::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoFailure("cannot write vocab to " + path);
  for (const std::string& t : tokens) f << t << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("cannot read vocab from " + path);
  Vocab v;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) v.tokens.push_back(line);
  }
  if (v.tokens.size() < kNumSpecial || v.tokens[kPad] != "[PAD]" ||
      v.tokens[kMask] != "[MASK]") {
    throw InvalidConfig("vocab file missing special tokens: " + path);
  }
  for (uint32_t i = 0; i < v.tokens.size(); ++i) v.ids[v.tokens[i]] = i;
  return v;
}

std::vector<TrainingExample> make_examples(
    const std::vector<std::string>& sentences, const Vocab& vocab, int seq_len,
    int max_pred, uint64_t seed) {
  if (seq_len < 8) throw InvalidConfig("seq_len must be at least 8");
  if (max_pred < 1) throw InvalidConfig("max_pred must be at least 1");

  std::vector<std::vector<uint32_t>> toks;
  toks.reserve(sentences.size());
  for (const std::string& s : sentences) {
    std::vector<uint32_t> t;
    for (const std::string& w : split_words(s)) t.push_back(vocab.id(w));
    if (!t.empty()) toks.push_back(std::move(t));
  }
  if (toks.size() < 2) {
    throw CorpusTooSmall("need at least 2 non-empty sentences, have " +
                         std::to_string(toks.size()));
  }

  std::mt19937_64 rng(seed);
  std::vector<TrainingExample> out;
  out.reserve(toks.size() - 1);
  const size_t n = toks.size();

  for (size_t i = 0; i + 1 < n; ++i) {
    TrainingExample e;
    const bool adjacent = (rng() & 1u) != 0 || n < 3;
    size_t j = i + 1;
    if (!adjacent) {
      do {
        j = static_cast<size_t>(draw(rng, n));
      } while (j == i || j == i + 1);
    }
    e.is_next = adjacent ? 1 : 0;

    std::vector<uint32_t> a = toks[i];
    std::vector<uint32_t> b = toks[j];
    // Trim the longer segment first; [CLS] + [SEP] + [SEP] take 3 slots.
    while (a.size() + b.size() + 3 > static_cast<size_t>(seq_len)) {
      if (a.size() >= b.size() && a.size() > 1) {
        a.pop_back();
      } else if (b.size() > 1) {
        b.pop_back();
      } else {
        a.pop_back();
      }
    }

    e.ids.push_back(Vocab::kCls);
    e.segments.push_back(0);
    for (uint32_t t : a) {
      e.ids.push_back(t);
      e.segments.push_back(0);
    }
    e.ids.push_back(Vocab::kSep);
    e.segments.push_back(0);
    for (uint32_t t : b) {
      e.ids.push_back(t);
      e.segments.push_back(1);
    }
    e.ids.push_back(Vocab::kSep);
    e.segments.push_back(1);
    while (e.ids.size() < static_cast<size_t>(seq_len)) {
      e.ids.push_back(Vocab::kPad);
      e.segments.push_back(0);
    }

    // 15% of maskable positions, capped by max_pred, at least one.
    std::vector<uint32_t> cand;
    for (uint32_t p = 0; p < e.ids.size(); ++p) {
      const uint32_t t = e.ids[p];
      if (t != Vocab::kPad && t != Vocab::kCls && t != Vocab::kSep) {
        cand.push_back(p);
      }
    }
    size_t n_pred = static_cast<size_t>(
        std::lround(0.15 * static_cast<double>(cand.size())));
    n_pred = std::min(std::max<size_t>(n_pred, 1),
                      std::min(cand.size(), static_cast<size_t>(max_pred)));
    for (size_t k = 0; k < n_pred; ++k) {
      const size_t pick = k + static_cast<size_t>(draw(rng, cand.size() - k));
      std::swap(cand[k], cand[pick]);
    }
    cand.resize(n_pred);
    std::sort(cand.begin(), cand.end());
    for (uint32_t p : cand) {
      e.mask_positions.push_back(p);
      e.mask_labels.push_back(e.ids[p]);
      e.ids[p] = Vocab::kMask;
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_shard(const std::string& path,
                 const std::vector<TrainingExample>& examples,
                 uint32_t seq_len, uint32_t max_pred, uint64_t seed) {
  std::vector<uint8_t> bytes =
      serialize_header(seq_len, max_pred, examples.size(), seed);
  bytes.reserve(bytes.size() +
                examples.size() * shard_record_size(seq_len, max_pred));
  for (const TrainingExample& e : examples) {
    check_example(e, seq_len, max_pred);
    serialize_record(bytes, e, seq_len, max_pred);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoFailure("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoFailure("short write to " + path);
}

std::vector<TrainingExample> read_shard(const std::string& path,
                                        ShardHeader* header) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoFailure("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  const ShardHeader h = parse_header(bytes.data(), bytes.size());
  const size_t rec = shard_record_size(h.seq_len, h.max_pred);
  if (bytes.size() != shard_header_size() + h.count * rec) {
    throw CorruptShard("file size does not match header count: " + path);
  }
  std::vector<TrainingExample> out;
  out.reserve(h.count);
  for (uint64_t i = 0; i < h.count; ++i) {
    out.push_back(parse_record(bytes.data() + shard_header_size() + i * rec,
                               h.seq_len, h.max_pred));
  }
  if (header) *header = h;
  return out;
}

std::vector<std::string> shard_dataset(
    const std::vector<TrainingExample>& examples, int n_shards,
    const std::string& out_dir, uint32_t seq_len, uint32_t max_pred,
    uint64_t seed) {
  if (n_shards < 1) throw InvalidConfig("n_shards must be at least 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoFailure("cannot create " + out_dir + ": " + ec.message());

  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<size_t>(draw(rng, i))]);
  }

  std::vector<std::vector<TrainingExample>> shards(
      static_cast<size_t>(n_shards));
  for (size_t i = 0; i < order.size(); ++i) {
    shards[i % static_cast<size_t>(n_shards)].push_back(examples[order[i]]);
  }

  std::vector<std::string> paths;
  for (int s = 0; s < n_shards; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "shard_%04d.bshd", s);
    const std::string path =
        (std::filesystem::path(out_dir) / name).string();
    write_shard(path, shards[static_cast<size_t>(s)], seq_len, max_pred, seed);
    paths.push_back(path);
  }
  return paths;
}

ShardReader::ShardReader(const std::string& path, int batch_size, int window)
    : batch_(batch_size), window_(window) {
  if (batch_size < 1 || window < 1) {
    throw InvalidConfig("batch size and window must be positive");
  }
  f_.open(path, std::ios::binary);
  if (!f_) throw IoFailure("cannot open shard " + path);
  uint8_t hdr[32];
  f_.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (f_.gcount() != sizeof(hdr)) throw CorruptShard("truncated header");
  hdr_ = parse_header(hdr, sizeof(hdr));
  bytes_read_ += sizeof(hdr);

  f_.seekg(0, std::ios::end);
  const auto actual = static_cast<uint64_t>(f_.tellg());
  const uint64_t expected =
      shard_header_size() +
      hdr_.count * shard_record_size(hdr_.seq_len, hdr_.max_pred);
  if (actual != expected) {
    throw CorruptShard("file size does not match header count: " + path);
  }
  next_record_ = hdr_.count;  // no epoch started yet
}

void ShardReader::start_epoch(uint64_t epoch_seed) {
  f_.clear();
  f_.seekg(static_cast<std::streamoff>(shard_header_size()));
  next_record_ = 0;
  buf_.clear();
  rng_.seed(epoch_seed);
}

TrainingExample ShardReader::read_record() {
  const size_t rec = shard_record_size(hdr_.seq_len, hdr_.max_pred);
  std::vector<uint8_t> raw(rec);
  f_.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(rec));
  if (static_cast<size_t>(f_.gcount()) != rec) {
    throw CorruptShard("truncated record");
  }
  bytes_read_ += rec;
  return parse_record(raw.data(), hdr_.seq_len, hdr_.max_pred);
}

bool ShardReader::next_batch(std::vector<TrainingExample>& out) {
  out.clear();
  while (out.size() < static_cast<size_t>(batch_)) {
    while (buf_.size() < static_cast<size_t>(window_) &&
           next_record_ < hdr_.count) {
      buf_.push_back(read_record());
      ++next_record_;
    }
    if (buf_.empty()) break;
    const size_t k = static_cast<size_t>(draw(rng_, buf_.size()));
    out.push_back(std::move(buf_[k]));
    buf_[k] = std::move(buf_.back());
    buf_.pop_back();
  }
  return !out.empty();
}

}  // namespace bertopt
