#include "melfuse/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace melfuse::text {

namespace {

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

bool is_space_byte(unsigned char b) {
  return b == ' ' || b == '\t' || b == '\n' || b == '\r' || b == '\f' || b == '\v';
}

// Split into maximal runs of whitespace / non-whitespace bytes.
std::vector<std::string> split_runs(const std::string& text) {
  std::vector<std::string> runs;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool ws = is_space_byte(static_cast<unsigned char>(text[i]));
    std::size_t j = i + 1;
    while (j < text.size() && is_space_byte(static_cast<unsigned char>(text[j])) == ws) ++j;
    runs.push_back(text.substr(i, j - i));
    i = j;
  }
  return runs;
}

std::string escape_token(const std::string& t) {
  std::string out;
  for (unsigned char c : t) {
    if (c >= 0x21 && c <= 0x7e && c != '\\') {
      out.push_back(static_cast<char>(c));
    } else {
      static const char* hex = "0123456789abcdef";
      out += "\\x";
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xf]);
    }
  }
  return out;
}

std::string unescape_token(const std::string& t) {
  std::string out;
  std::size_t i = 0;
  while (i < t.size()) {
    if (t[i] == '\\') {
      if (i + 3 >= t.size() || t[i + 1] != 'x')
        throw std::runtime_error("vocabulary: bad escape in '" + t + "'");
      out.push_back(static_cast<char>(std::stoi(t.substr(i + 2, 2), nullptr, 16)));
      i += 4;
    } else {
      out.push_back(t[i++]);
    }
  }
  return out;
}

}  // namespace

EncodedRow TokenBatch::row(std::size_t b) const {
  if (b >= batch) throw std::out_of_range("TokenBatch::row");
  EncodedRow r;
  r.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(b * len),
               ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * len));
  r.mask.assign(mask.begin() + static_cast<std::ptrdiff_t>(b * len),
                mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * len));
  return r;
}

void Vocabulary::init_base() {
  tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int b = 0; b < 256; ++b) tokens_.push_back(std::string(1, static_cast<char>(b)));
}

void Vocabulary::rebuild_rank_index() {
  rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r)
    rank_[pair_key(merges_[r].first, merges_[r].second)] = {
        r, static_cast<TokenId>(kNumSpecials + 256 + r)};
}

Vocabulary Vocabulary::train(const std::vector<std::string>& corpus, std::size_t cap) {
  if (cap < static_cast<std::size_t>(kNumSpecials) + 256)
    throw std::invalid_argument("Vocabulary::train: cap " + std::to_string(cap) +
                                " below specials + 256 base bytes");
  bool any = false;
  for (const auto& t : corpus) any = any || !t.empty();
  if (!any) throw std::invalid_argument("Vocabulary::train: empty corpus");

  Vocabulary v;
  v.init_base();

  // distinct runs with frequencies, in first-occurrence order
  struct Word {
    std::vector<TokenId> toks;
    std::size_t freq = 0;
  };
  std::vector<Word> words;
  std::unordered_map<std::string, std::size_t> word_index;
  for (const auto& doc : corpus) {
    for (auto& run : split_runs(doc)) {
      auto it = word_index.find(run);
      if (it != word_index.end()) {
        ++words[it->second].freq;
        continue;
      }
      Word w;
      w.freq = 1;
      w.toks.reserve(run.size());
      for (unsigned char c : run) w.toks.push_back(kNumSpecials + static_cast<TokenId>(c));
      word_index.emplace(run, words.size());
      words.push_back(std::move(w));
    }
  }

  std::unordered_set<std::string> surface(v.tokens_.begin() + kNumSpecials, v.tokens_.end());
  while (v.tokens_.size() < cap) {
    std::unordered_map<std::uint64_t, std::size_t> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.toks.size(); ++i)
        counts[pair_key(w.toks[i], w.toks[i + 1])] += w.freq;

    // order-independent selection: highest count, ties by pair bytes; pairs
    // whose concatenation already exists are skipped to keep ids injective
    bool found = false;
    std::uint64_t best_key = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : counts) {
      if (count < 2) continue;
      if (surface.count(v.tokens_[static_cast<std::size_t>(key >> 32)] +
                        v.tokens_[static_cast<std::size_t>(key & 0xffffffff)]))
        continue;
      if (!found || count > best_count) {
        found = true;
        best_key = key;
        best_count = count;
        continue;
      }
      if (count == best_count) {
        const TokenId a = static_cast<TokenId>(key >> 32), b = static_cast<TokenId>(key & 0xffffffff);
        const TokenId ba = static_cast<TokenId>(best_key >> 32),
                      bb = static_cast<TokenId>(best_key & 0xffffffff);
        const auto cand = std::tie(v.tokens_[static_cast<std::size_t>(a)],
                                   v.tokens_[static_cast<std::size_t>(b)]);
        const auto best = std::tie(v.tokens_[static_cast<std::size_t>(ba)],
                                   v.tokens_[static_cast<std::size_t>(bb)]);
        if (cand < best) best_key = key;
      }
    }
    if (!found) break;

    const TokenId left = static_cast<TokenId>(best_key >> 32);
    const TokenId right = static_cast<TokenId>(best_key & 0xffffffff);
    const TokenId merged = static_cast<TokenId>(v.tokens_.size());
    v.tokens_.push_back(v.tokens_[static_cast<std::size_t>(left)] +
                        v.tokens_[static_cast<std::size_t>(right)]);
    surface.insert(v.tokens_.back());
    v.merges_.emplace_back(left, right);

    for (auto& w : words) {
      if (w.toks.size() < 2) continue;
      std::vector<TokenId> out;
      out.reserve(w.toks.size());
      std::size_t i = 0;
      while (i < w.toks.size()) {
        if (i + 1 < w.toks.size() && w.toks[i] == left && w.toks[i + 1] == right) {
          out.push_back(merged);
          i += 2;
        } else {
          out.push_back(w.toks[i++]);
        }
      }
      w.toks = std::move(out);
    }
  }
  v.rebuild_rank_index();
  return v;
}

std::vector<TokenId> Vocabulary::encode_run(const std::string& run) const {
  std::vector<TokenId> toks;
  toks.reserve(run.size());
  for (unsigned char c : run) toks.push_back(kNumSpecials + static_cast<TokenId>(c));
  while (toks.size() > 1) {
    // lowest-rank pair present wins this round
    std::size_t best_rank = SIZE_MAX;
    TokenId best_left = 0, best_right = 0, best_id = 0;
    for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
      auto it = rank_.find(pair_key(toks[i], toks[i + 1]));
      if (it != rank_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_left = toks[i];
        best_right = toks[i + 1];
        best_id = it->second.second;
      }
    }
    if (best_rank == SIZE_MAX) break;
    std::vector<TokenId> out;
    out.reserve(toks.size());
    std::size_t i = 0;
    while (i < toks.size()) {
      if (i + 1 < toks.size() && toks[i] == best_left && toks[i + 1] == best_right) {
        out.push_back(best_id);
        i += 2;
      } else {
        out.push_back(toks[i++]);
      }
    }
    toks = std::move(out);
  }
  return toks;
}

std::vector<TokenId> Vocabulary::encode_text(const std::string& text) const {
  std::vector<TokenId> ids;
  for (const auto& run : split_runs(text)) {
    auto part = encode_run(run);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

EncodedRow Vocabulary::encode(const std::string& text, std::size_t max_len) const {
  if (max_len < 2)
    throw std::invalid_argument("Vocabulary::encode: max_len must be >= 2 for bos + eos");
  std::vector<TokenId> body = encode_text(text);
  EncodedRow row;
  row.ids.reserve(max_len);
  row.ids.push_back(kBos);
  const std::size_t keep = std::min(body.size(), max_len - 2);  // eos always retained
  row.ids.insert(row.ids.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(keep));
  row.ids.push_back(kEos);
  row.mask.assign(row.ids.size(), 1);
  while (row.ids.size() < max_len) {
    row.ids.push_back(kPad);
    row.mask.push_back(0);
  }
  return row;
}

TokenBatch Vocabulary::encode_batch(const std::vector<std::string>& texts,
                                    std::size_t max_len) const {
  TokenBatch b;
  b.batch = texts.size();
  b.len = max_len;
  b.ids.reserve(b.batch * max_len);
  b.mask.reserve(b.batch * max_len);
  for (const auto& t : texts) {
    EncodedRow r = encode(t, max_len);
    b.ids.insert(b.ids.end(), r.ids.begin(), r.ids.end());
    b.mask.insert(b.mask.end(), r.mask.begin(), r.mask.end());
  }
  return b;
}

std::string Vocabulary::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::out_of_range("Vocabulary::decode: unknown id " + std::to_string(id));
    if (id < kNumSpecials) continue;  // specials stripped
    out += tokens_[static_cast<std::size_t>(id)];
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("Vocabulary::save: cannot write " + path);
  f << "melfuse-vocab v1\n";
  f << "tokens " << tokens_.size() << "\n";
  for (const auto& t : tokens_) f << escape_token(t) << "\n";
  f << "merges " << merges_.size() << "\n";
  for (const auto& [a, b] : merges_) f << a << ' ' << b << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("Vocabulary::load: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "melfuse-vocab v1")
    throw std::runtime_error("Vocabulary::load: bad header in " + path);

  Vocabulary v;
  std::size_t n_tokens = 0, n_merges = 0;
  if (!std::getline(f, line) || line.rfind("tokens ", 0) != 0)
    throw std::runtime_error("Vocabulary::load: missing tokens section");
  n_tokens = std::stoull(line.substr(7));
  v.tokens_.reserve(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    if (!std::getline(f, line)) throw std::runtime_error("Vocabulary::load: truncated tokens");
    v.tokens_.push_back(i < static_cast<std::size_t>(kNumSpecials) ? line : unescape_token(line));
  }
  if (!std::getline(f, line) || line.rfind("merges ", 0) != 0)
    throw std::runtime_error("Vocabulary::load: missing merges section");
  n_merges = std::stoull(line.substr(7));
  for (std::size_t i = 0; i < n_merges; ++i) {
    if (!std::getline(f, line)) throw std::runtime_error("Vocabulary::load: truncated merges");
    std::istringstream ls(line);
    TokenId a = 0, b = 0;
    if (!(ls >> a >> b)) throw std::runtime_error("Vocabulary::load: bad merge line '" + line + "'");
    v.merges_.emplace_back(a, b);
  }
  if (v.tokens_.size() != static_cast<std::size_t>(kNumSpecials) + 256 + v.merges_.size())
    throw std::runtime_error("Vocabulary::load: token/merge count mismatch");
  v.rebuild_rank_index();
  return v;
}

}  // namespace melfuse::text
