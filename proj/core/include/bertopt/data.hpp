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
#ifndef BERTOPT_DATA_HPP_
#define BERTOPT_DATA_HPP_

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "bertopt/errors.hpp"

namespace bertopt {

// Word-frequency vocabulary with reserved control tokens. Sub-word merging
// is out of scope; unknown words map to [UNK].
struct Vocab {
  static constexpr uint32_t kPad = 0;
  static constexpr uint32_t kCls = 1;
  static constexpr uint32_t kSep = 2;
  static constexpr uint32_t kMask = 3;
  static constexpr uint32_t kUnk = 4;
  static constexpr uint32_t kNumSpecial = 5;

  std::vector<std::string> tokens;             // id -> token text
  std::unordered_map<std::string, uint32_t> ids;

  static Vocab build(const std::vector<std::string>& sentences,
                     size_t max_size = 30000);
  uint32_t id(const std::string& word) const;
  size_t size() const { return tokens.size(); }
  static bool is_special(uint32_t id) { return id < kNumSpecial; }

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

std::vector<std::string> split_sentences(const std::string& text);
std::vector<std::string> split_words(const std::string& sentence);

// One masked sentence-pair example. mask_positions/mask_labels hold only the
// live entries (mask_count of them); padding is added at serialization time.
struct TrainingExample {
  std::vector<uint32_t> ids;             // length seq_len, [PAD]-padded
  std::vector<uint8_t> segments;         // 0 first segment, 1 second
  std::vector<uint32_t> mask_positions;  // ascending, unique
  std::vector<uint32_t> mask_labels;     // original token at each position
  uint8_t is_next = 0;

  bool operator==(const TrainingExample&) const = default;
};

struct ShardHeader {
  uint32_t version = 1;
  uint32_t seq_len = 0;
  uint32_t max_pred = 0;
  uint64_t count = 0;
  uint64_t seed = 0;
};

constexpr size_t shard_header_size() { return 32; }
constexpr size_t shard_record_size(uint32_t seq_len, uint32_t max_pred) {
  return static_cast<size_t>(seq_len) * 4 + seq_len + 4 +
         static_cast<size_t>(max_pred) * 8 + 1;
}

// Sentence-pair construction with 50% adjacent / 50% random second segment
// and 15% token masking (100% [MASK] replacement). Deterministic in seed.
std::vector<TrainingExample> make_examples(
    const std::vector<std::string>& sentences, const Vocab& vocab, int seq_len,
    int max_pred, uint64_t seed);

void write_shard(const std::string& path,
                 const std::vector<TrainingExample>& examples,
                 uint32_t seq_len, uint32_t max_pred, uint64_t seed);
std::vector<TrainingExample> read_shard(const std::string& path,
                                        ShardHeader* header = nullptr);

// Seeded shuffle then round-robin split into n files under out_dir.
// Returns the shard paths in rank order.
std::vector<std::string> shard_dataset(
    const std::vector<TrainingExample>& examples, int n_shards,
    const std::string& out_dir, uint32_t seq_len, uint32_t max_pred,
    uint64_t seed);

// Streaming batch reader over one shard: sequential record reads feed a
// fixed-size shuffle window, so memory stays constant in the shard size.
// bytes_read() instruments exactly what was pulled from disk.
class ShardReader {
 public:
  explicit ShardReader(const std::string& path, int batch_size,
                       int window = 1024);

  const ShardHeader& header() const { return hdr_; }
  void start_epoch(uint64_t epoch_seed);
  bool next_batch(std::vector<TrainingExample>& out);
  uint64_t bytes_read() const { return bytes_read_; }

 private:
  TrainingExample read_record();

  std::ifstream f_;
  ShardHeader hdr_;
  int batch_;
  int window_;
  uint64_t next_record_ = 0;
  std::vector<TrainingExample> buf_;
  std::mt19937_64 rng_;
  uint64_t bytes_read_ = 0;
};

}  // namespace bertopt

#endif  // BERTOPT_DATA_HPP_
