#pragma once

// Byte-level BPE: 256 byte tokens plus pad/bos/eos/unk specials, greedy
// most-frequent-pair merges learned from a corpus. Byte coverage means
// encode/decode round-trips any UTF-8 text with no unknowns. Merges never
// cross whitespace/non-whitespace run boundaries.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace melfuse::text {

using TokenId = std::int32_t;

struct EncodedRow {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;  // 1 = real token
};

// Padded/truncated token-id matrix with attention mask.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<TokenId> ids;         // [batch x len]
  std::vector<std::uint8_t> mask;   // [batch x len]

  EncodedRow row(std::size_t b) const;
};

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNumSpecials = 4;

  // Greedy BPE training; deterministic given corpus order. Ties between
  // equally frequent pairs break lexicographically on the pair's bytes.
  static Vocabulary train(const std::vector<std::string>& corpus, std::size_t cap);

  std::size_t size() const { return tokens_.size(); }

  std::vector<TokenId> encode_text(const std::string& text) const;
  EncodedRow encode(const std::string& text, std::size_t max_len) const;
  TokenBatch encode_batch(const std::vector<std::string>& texts, std::size_t max_len) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

 private:
  Vocabulary() = default;
  void init_base();
  void rebuild_rank_index();
  std::vector<TokenId> encode_run(const std::string& run) const;

  std::vector<std::string> tokens_;                       // id -> bytes
  std::vector<std::pair<TokenId, TokenId>> merges_;       // learned order = rank
  std::unordered_map<std::uint64_t, std::pair<std::size_t, TokenId>> rank_;  // pair -> (rank, id)
};

}  // namespace melfuse::text
