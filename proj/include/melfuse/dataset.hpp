#pragma once

// Song-interpretation dataset handling: JSONL ingest, character-length
// filtering with word-safe truncation, vote-based subset selection, and
// leakage-safe train/valid/test splits.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "melfuse/tensor.hpp"

namespace melfuse::data {

struct InterpretationRecord {
  std::string text;
  long votes = 0;  // community votes, may be negative
};

struct SongRecord {
  std::string song_id;
  std::string title;
  std::string artist;
  std::string genre;
  std::string lyrics;
  std::string audio_path;  // relative WAV path
  std::vector<InterpretationRecord> interpretations;
};

// One training example: a (song, interpretation) pair flattened out.
struct TrainItem {
  std::string song_id;
  std::string lyrics;
  std::string audio_path;
  std::string target;
};

// number of Unicode scalar values
std::size_t utf8_length(const std::string& s);

// First max_chars scalars cut back to the last whitespace boundary so the
// final word stays complete; trailing whitespace trimmed. nullopt when no
// word-safe cut exists.
std::optional<std::string> truncate_word_safe(const std::string& s, std::size_t max_chars);

// line-delimited JSON, one song per line
std::vector<SongRecord> load_dataset(const std::string& path);
void save_dataset(const std::string& path, const std::vector<SongRecord>& records);

std::vector<std::string> load_id_list(const std::string& path);

// drop interpretations under 256 characters; word-safe-truncate those over
// 2048 (re-dropping any that fall under 256 after the cut)
std::vector<SongRecord> filter_length(std::vector<SongRecord> records,
                                      std::size_t min_chars = 256, std::size_t max_chars = 2048);

enum class VoteMode { full, nonneg, positive, random_n };

struct VoteFilter {
  VoteMode mode = VoteMode::full;
  std::size_t n = 0;          // random_n only
  std::uint64_t seed = 0;     // random_n only

  // "full" | "nonneg" | "positive" | "random:<n>"
  static VoteFilter parse(const std::string& spec, std::uint64_t seed);
  std::string name() const;
};

std::vector<SongRecord> filter_votes(const std::vector<SongRecord>& records,
                                     const VoteFilter& filter);

struct ItemRef {
  std::string song_id;
  std::size_t interp_index = 0;

  bool operator==(const ItemRef&) const = default;
};

struct DatasetSplit {
  std::vector<ItemRef> train;
  std::vector<ItemRef> valid;
  std::vector<ItemRef> test;
};

// test takes every interpretation of the listed songs; remaining items are
// shuffled (seeded) and divided train/valid. Songs in the test list never
// contribute to train or valid.
DatasetSplit split_dataset(const std::vector<SongRecord>& records, double valid_fraction,
                           const std::set<std::string>& test_song_ids, std::uint64_t seed,
                           std::vector<std::string>* warnings = nullptr);

std::vector<TrainItem> flatten(const std::vector<SongRecord>& records,
                               const std::vector<ItemRef>& refs);

std::vector<TrainItem> load_items(const std::string& path);
void save_items(const std::string& path, const std::vector<TrainItem>& items);

struct CorpusStats {
  std::size_t songs = 0;
  std::size_t interpretations = 0;
  double mean_interpretation_words = 0.0;
  std::map<std::string, std::size_t> genre_histogram;
  std::size_t subset_full = 0;
  std::size_t subset_nonneg = 0;
  std::size_t subset_positive = 0;
};

CorpusStats corpus_stats(const std::vector<SongRecord>& records);
std::string render_stats(const CorpusStats& stats);

}  // namespace melfuse::data
