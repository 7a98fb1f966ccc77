#include "melfuse/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace melfuse::data {

namespace {

bool is_ws(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v';
}

// byte offsets of each scalar start, plus the end offset
std::vector<std::size_t> utf8_offsets(const std::string& s) {
  std::vector<std::size_t> offs;
  std::size_t i = 0;
  while (i < s.size()) {
    offs.push_back(i);
    const unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) i += 1;
    else if ((c >> 5) == 0x6) i += 2;
    else if ((c >> 4) == 0xe) i += 3;
    else if ((c >> 3) == 0x1e) i += 4;
    else i += 1;  // tolerate stray bytes as single scalars
  }
  offs.push_back(s.size());
  return offs;
}

std::string rtrim_ws(const std::string& s) {
  std::size_t end = s.size();
  while (end > 0 && is_ws(static_cast<unsigned char>(s[end - 1]))) --end;
  return s.substr(0, end);
}

}  // namespace

std::size_t utf8_length(const std::string& s) { return utf8_offsets(s).size() - 1; }

std::optional<std::string> truncate_word_safe(const std::string& s, std::size_t max_chars) {
  const std::vector<std::size_t> offs = utf8_offsets(s);
  const std::size_t len = offs.size() - 1;
  if (len <= max_chars) return rtrim_ws(s);

  // ascii whitespace marks word boundaries; scalar at index i spans
  // [offs[i], offs[i+1])
  const auto ws_at = [&](std::size_t i) {
    return offs[i + 1] - offs[i] == 1 && is_ws(static_cast<unsigned char>(s[offs[i]]));
  };

  // prefix of max_chars scalars; keep it whole when the cut lands between
  // words, otherwise back off to the last whitespace inside it
  if (ws_at(max_chars) || ws_at(max_chars - 1)) {
    return rtrim_ws(s.substr(0, offs[max_chars]));
  }
  for (std::size_t i = max_chars - 1; i-- > 0;) {
    if (ws_at(i)) return rtrim_ws(s.substr(0, offs[i]));
  }
  return std::nullopt;  // a single word longer than the limit
}

std::vector<SongRecord> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
  std::vector<SongRecord> records;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset: " + path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
    try {
      SongRecord r;
      r.song_id = j.at("song_id").get<std::string>();
      r.title = j.value("title", "");
      r.artist = j.value("artist", "");
      r.genre = j.value("genre", "");
      r.lyrics = j.at("lyrics").get<std::string>();
      r.audio_path = j.value("audio", "");
      if (j.contains("interpretations")) {
        for (const auto& item : j.at("interpretations")) {
          InterpretationRecord ir;
          ir.text = item.at("text").get<std::string>();
          ir.votes = item.value("votes", 0L);
          r.interpretations.push_back(std::move(ir));
        }
      }
      if (r.song_id.empty() || r.lyrics.empty())
        throw std::runtime_error("song_id and lyrics must be non-empty");
      if (!seen.insert(r.song_id).second)
        throw std::runtime_error("duplicate song_id '" + r.song_id + "'");
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset: " + path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("load_dataset: " + path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return records;
}

void save_dataset(const std::string& path, const std::vector<SongRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_dataset: cannot write " + path);
  for (const auto& r : records) {
    nlohmann::json j;
    j["song_id"] = r.song_id;
    j["title"] = r.title;
    j["artist"] = r.artist;
    j["genre"] = r.genre;
    j["lyrics"] = r.lyrics;
    j["audio"] = r.audio_path;
    nlohmann::json interps = nlohmann::json::array();
    for (const auto& ir : r.interpretations) interps.push_back({{"text", ir.text}, {"votes", ir.votes}});
    j["interpretations"] = interps;
    f << j.dump() << "\n";
  }
}

std::vector<std::string> load_id_list(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_id_list: cannot open " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

std::vector<SongRecord> filter_length(std::vector<SongRecord> records, std::size_t min_chars,
                                      std::size_t max_chars) {
  for (auto& r : records) {
    std::vector<InterpretationRecord> kept;
    for (auto& ir : r.interpretations) {
      const std::size_t len = utf8_length(ir.text);
      if (len < min_chars) continue;
      if (len > max_chars) {
        auto cut = truncate_word_safe(ir.text, max_chars);
        if (!cut || utf8_length(*cut) < min_chars) continue;
        ir.text = std::move(*cut);
      }
      kept.push_back(std::move(ir));
    }
    r.interpretations = std::move(kept);
  }
  return records;
}

VoteFilter VoteFilter::parse(const std::string& spec, std::uint64_t seed) {
  VoteFilter f;
  f.seed = seed;
  if (spec == "full") {
    f.mode = VoteMode::full;
  } else if (spec == "nonneg") {
    f.mode = VoteMode::nonneg;
  } else if (spec == "positive") {
    f.mode = VoteMode::positive;
  } else if (spec.rfind("random:", 0) == 0) {
    f.mode = VoteMode::random_n;
    try {
      f.n = std::stoull(spec.substr(7));
    } catch (const std::exception&) {
      throw std::invalid_argument("VoteFilter: bad sample size in '" + spec + "'");
    }
  } else {
    throw std::invalid_argument("VoteFilter: unknown mode '" + spec +
                                "' (full|nonneg|positive|random:<n>)");
  }
  return f;
}

std::string VoteFilter::name() const {
  switch (mode) {
    case VoteMode::full: return "full";
    case VoteMode::nonneg: return "nonneg";
    case VoteMode::positive: return "positive";
    case VoteMode::random_n: return "random:" + std::to_string(n);
  }
  return "?";
}

std::vector<SongRecord> filter_votes(const std::vector<SongRecord>& records,
                                     const VoteFilter& filter) {
  if (filter.mode == VoteMode::full) return records;

  if (filter.mode == VoteMode::random_n) {
    std::size_t total = 0;
    for (const auto& r : records) total += r.interpretations.size();
    if (filter.n > total)
      throw std::invalid_argument("filter_votes: random sample of " + std::to_string(filter.n) +
                                  " from only " + std::to_string(total) + " interpretations");
    // seeded Fisher-Yates over flat indices, then order-stable selection
    std::vector<std::size_t> idx(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
    Rng rng(filter.seed);
    for (std::size_t i = total; i > 1; --i) {
      const std::size_t j = rng.uniform_index(i);
      std::swap(idx[i - 1], idx[j]);
    }
    std::vector<bool> take(total, false);
    for (std::size_t i = 0; i < filter.n; ++i) take[idx[i]] = true;

    std::vector<SongRecord> out;
    out.reserve(records.size());
    std::size_t flat = 0;
    for (const auto& r : records) {
      SongRecord nr = r;
      nr.interpretations.clear();
      for (const auto& ir : r.interpretations) {
        if (take[flat++]) nr.interpretations.push_back(ir);
      }
      out.push_back(std::move(nr));
    }
    return out;
  }

  std::vector<SongRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    SongRecord nr = r;
    nr.interpretations.clear();
    for (const auto& ir : r.interpretations) {
      const bool keep = filter.mode == VoteMode::nonneg ? ir.votes >= 0 : ir.votes > 0;
      if (keep) nr.interpretations.push_back(ir);
    }
    out.push_back(std::move(nr));
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<SongRecord>& records, double valid_fraction,
                           const std::set<std::string>& test_song_ids, std::uint64_t seed,
                           std::vector<std::string>* warnings) {
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0))
    throw std::invalid_argument("split_dataset: valid_fraction must lie in (0,1), got " +
                                std::to_string(valid_fraction));
  std::set<std::string> present;
  for (const auto& r : records) present.insert(r.song_id);
  for (const auto& id : test_song_ids) {
    if (!present.count(id) && warnings)
      warnings->push_back("test song id '" + id + "' not found in the dataset");
  }

  DatasetSplit split;
  std::vector<ItemRef> pool;
  for (const auto& r : records) {
    const bool in_test = test_song_ids.count(r.song_id) > 0;
    for (std::size_t k = 0; k < r.interpretations.size(); ++k) {
      if (in_test) {
        split.test.push_back({r.song_id, k});
      } else {
        pool.push_back({r.song_id, k});
      }
    }
  }

  Rng rng(seed);
  for (std::size_t i = pool.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(pool[i - 1], pool[j]);
  }
  const std::size_t n_valid = static_cast<std::size_t>(
      static_cast<double>(pool.size()) * valid_fraction);
  split.valid.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_valid));
  split.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_valid), pool.end());

  // leakage guard, asserted on every run
  for (const auto& item : split.train)
    if (test_song_ids.count(item.song_id))
      throw std::logic_error("split_dataset: test song leaked into train");
  for (const auto& item : split.valid)
    if (test_song_ids.count(item.song_id))
      throw std::logic_error("split_dataset: test song leaked into valid");
  return split;
}

std::vector<TrainItem> flatten(const std::vector<SongRecord>& records,
                               const std::vector<ItemRef>& refs) {
  std::map<std::string, const SongRecord*> by_id;
  for (const auto& r : records) by_id[r.song_id] = &r;
  std::vector<TrainItem> items;
  items.reserve(refs.size());
  for (const auto& ref : refs) {
    auto it = by_id.find(ref.song_id);
    if (it == by_id.end())
      throw std::invalid_argument("flatten: unknown song_id '" + ref.song_id + "'");
    const SongRecord& r = *it->second;
    if (ref.interp_index >= r.interpretations.size())
      throw std::out_of_range("flatten: interpretation index " +
                              std::to_string(ref.interp_index) + " for '" + ref.song_id + "'");
    items.push_back({r.song_id, r.lyrics, r.audio_path,
                     r.interpretations[ref.interp_index].text});
  }
  return items;
}

std::vector<TrainItem> load_items(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_items: cannot open " + path);
  std::vector<TrainItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      TrainItem it;
      it.song_id = j.at("song_id").get<std::string>();
      it.lyrics = j.at("lyrics").get<std::string>();
      it.audio_path = j.value("audio", "");
      it.target = j.at("target").get<std::string>();
      items.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_items: " + path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return items;
}

void save_items(const std::string& path, const std::vector<TrainItem>& items) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_items: cannot write " + path);
  for (const auto& it : items) {
    nlohmann::json j;
    j["song_id"] = it.song_id;
    j["lyrics"] = it.lyrics;
    j["audio"] = it.audio_path;
    j["target"] = it.target;
    f << j.dump() << "\n";
  }
}

CorpusStats corpus_stats(const std::vector<SongRecord>& records) {
  CorpusStats s;
  s.songs = records.size();
  std::size_t total_words = 0;
  for (const auto& r : records) {
    if (!r.genre.empty()) ++s.genre_histogram[r.genre];
    for (const auto& ir : r.interpretations) {
      ++s.interpretations;
      // whitespace-delimited word count
      std::istringstream ws(ir.text);
      std::string w;
      while (ws >> w) ++total_words;
      ++s.subset_full;
      if (ir.votes >= 0) ++s.subset_nonneg;
      if (ir.votes > 0) ++s.subset_positive;
    }
  }
  if (s.interpretations > 0)
    s.mean_interpretation_words =
        static_cast<double>(total_words) / static_cast<double>(s.interpretations);
  return s;
}

std::string render_stats(const CorpusStats& s) {
  std::ostringstream os;
  os << "songs " << s.songs << "\n";
  os << "interpretations " << s.interpretations << "\n";
  os << "mean_interpretation_words " << s.mean_interpretation_words << "\n";
  os << "subset full=" << s.subset_full << " nonneg=" << s.subset_nonneg
     << " positive=" << s.subset_positive << "\n";
  for (const auto& [genre, count] : s.genre_histogram)
    os << "genre " << genre << " " << count << "\n";
  return os.str();
}

}  // namespace melfuse::data
