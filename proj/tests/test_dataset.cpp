#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "melfuse/dataset.hpp"

using namespace melfuse;
using namespace melfuse::data;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

SongRecord song(const std::string& id, std::vector<InterpretationRecord> interps,
                const std::string& genre = "rock") {
  SongRecord r;
  r.song_id = id;
  r.title = "t-" + id;
  r.artist = "a-" + id;
  r.genre = genre;
  r.lyrics = "la la " + id;
  r.audio_path = id + ".wav";
  r.interpretations = std::move(interps);
  return r;
}

std::string repeat_words(const std::string& word, std::size_t count) {
  std::string out;
  for (std::size_t i = 0; i < count; ++i) {
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

// whitespace-delimited token list
std::vector<std::string> words_of(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("dataset");

TEST_CASE("utf8 scalar counting") {
  CHECK(utf8_length("abc") == 3);
  CHECK(utf8_length("") == 0);
  CHECK(utf8_length("éé") == 2);        // 2-byte scalars
  CHECK(utf8_length("你好") == 2);        // 3-byte scalars
  CHECK(utf8_length("\U0001F3B5") == 1);          // 4-byte scalar
}

TEST_CASE("dataset jsonl loading") {
  const std::string path = temp_file("melfuse_ds.jsonl");
  {
    std::ofstream f(path);
  }
  CHECK(load_dataset(path).empty());

  {
    std::ofstream f(path);
    f << R"({"song_id":"s1","title":"T","artist":"A","genre":"rock","lyrics":"la la",)"
      << R"("audio":"s1.wav","interpretations":[{"text":"hello","votes":3}]})" << "\n";
  }
  auto records = load_dataset(path);
  REQUIRE(records.size() == 1);
  CHECK(records[0].song_id == "s1");
  CHECK(records[0].interpretations.size() == 1);
  CHECK(records[0].interpretations[0].votes == 3);

  {
    std::ofstream f(path);
    f << R"({"song_id":"s1","lyrics":"a"})" << "\n";
    f << R"({"song_id":"s1","lyrics":"b"})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("duplicate"), std::runtime_error);

  {
    std::ofstream f(path);
    f << R"({"song_id":"ok","lyrics":"x"})" << "\n";
    f << "{not json\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains(":2"), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("dataset save/load round trip") {
  const std::string path = temp_file("melfuse_ds_rt.jsonl");
  std::vector<SongRecord> records = {song("s1", {{"only text", -2}}),
                                     song("s2", {{"another", 5}, {"more", 0}})};
  save_dataset(path, records);
  auto back = load_dataset(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].song_id == "s1");
  CHECK(back[0].interpretations[0].votes == -2);
  CHECK(back[1].interpretations.size() == 2);
  std::filesystem::remove(path);
}

TEST_CASE("length filter boundaries") {
  const std::string s255 = std::string(255, 'x');
  const std::string s256 = std::string(256, 'x');
  std::vector<SongRecord> records = {song("s1", {{s255, 0}, {s256, 0}})};
  auto out = filter_length(records);
  REQUIRE(out[0].interpretations.size() == 1);
  CHECK(out[0].interpretations[0].text == s256);  // kept unchanged
}

TEST_CASE("word-safe truncation of long interpretations") {
  // 2100 characters, the 2048th falls mid-word
  std::string text = repeat_words("word", 419);  // 419*4 + 418 = 2094 chars
  text += " abcdefgh";                           // total 2103, boundary cuts 'abcdefgh'
  REQUIRE(utf8_length(text) == 2103);
  std::vector<SongRecord> records = {song("s1", {{text, 0}})};
  auto out = filter_length(records);
  REQUIRE(out[0].interpretations.size() == 1);
  const std::string& cut = out[0].interpretations[0].text;
  CHECK(utf8_length(cut) <= 2048);
  // the scalar at position 2048 sits inside word 410, so the cut backs off
  // to the whitespace after word 409
  CHECK(cut == repeat_words("word", 409));
  CHECK(utf8_length(cut) == 2044);
}

TEST_CASE("truncation counts scalars, not bytes") {
  // 2100 three-byte scalars in words of 10
  std::string word;
  for (int i = 0; i < 10; ++i) word += "你";
  std::string text;
  for (int i = 0; i < 191; ++i) {
    if (!text.empty()) text += ' ';
    text += word;  // 191*10 + 190 = 2100 scalars
  }
  REQUIRE(utf8_length(text) == 2100);
  auto out = filter_length({song("s1", {{text, 0}})});
  REQUIRE(out[0].interpretations.size() == 1);
  const std::string& cut = out[0].interpretations[0].text;
  CHECK(utf8_length(cut) <= 2048);
  // last unit is the full 10-scalar word
  CHECK(cut.size() % (word.size() + 1) == word.size() % (word.size() + 1));
}

TEST_CASE("filter_length property suite on synthetic corpora") {
  Rng rng(9001);
  static const std::vector<std::string> parts = {"la", "deep", "meaning", "song", "x",
                                                 "interpretation", "of", "the", "lyric"};
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<SongRecord> records;
    for (int s = 0; s < 4; ++s) {
      std::vector<InterpretationRecord> interps;
      const std::size_t n = rng.uniform_index(5);
      for (std::size_t k = 0; k < n; ++k) {
        std::string text;
        const std::size_t target = rng.uniform_index(3000);
        while (utf8_length(text) < target) {
          if (!text.empty()) text += ' ';
          text += parts[rng.uniform_index(parts.size())];
        }
        interps.push_back({text, 0});
      }
      records.push_back(song("t" + std::to_string(trial) + "s" + std::to_string(s), interps));
    }
    // originals stashed for the complete-token check
    std::vector<std::string> originals;
    for (const auto& r : records)
      for (const auto& ir : r.interpretations) originals.push_back(ir.text);

    auto out = filter_length(records);
    for (const auto& r : out) {
      for (const auto& ir : r.interpretations) {
        const std::size_t len = utf8_length(ir.text);
        CHECK(len >= 256);
        CHECK(len <= 2048);
        // survivor must be a prefix of some original, cut on a word boundary
        bool found = false;
        for (const auto& orig : originals) {
          if (orig.rfind(ir.text, 0) != 0) continue;
          if (orig.size() == ir.text.size() || orig[ir.text.size()] == ' ') {
            found = true;
            break;
          }
        }
        CHECK(found);
        CHECK(!words_of(ir.text).empty());
      }
    }
  }
}

TEST_CASE("vote filter modes") {
  std::vector<SongRecord> records = {
      song("s1", {{repeat_words("neg", 1), -1}, {repeat_words("zero", 1), 0},
                  {repeat_words("pos", 1), 2}})};
  auto positive = filter_votes(records, VoteFilter::parse("positive", 0));
  REQUIRE(positive[0].interpretations.size() == 1);
  CHECK(positive[0].interpretations[0].votes == 2);

  auto nonneg = filter_votes(records, VoteFilter::parse("nonneg", 0));
  REQUIRE(nonneg[0].interpretations.size() == 2);
  CHECK(nonneg[0].interpretations[0].votes == 0);

  auto full = filter_votes(records, VoteFilter::parse("full", 0));
  CHECK(full[0].interpretations.size() == 3);

  CHECK_THROWS_AS(VoteFilter::parse("bogus", 0), std::invalid_argument);
  CHECK(VoteFilter::parse("random:5", 1).n == 5);
  CHECK_THROWS_AS(VoteFilter::parse("random:x", 0), std::invalid_argument);
}

TEST_CASE("vote subsets nest: positive within nonneg within full") {
  Rng rng(57);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<SongRecord> records;
    for (int s = 0; s < 5; ++s) {
      std::vector<InterpretationRecord> interps;
      const std::size_t n = rng.uniform_index(6);
      for (std::size_t k = 0; k < n; ++k)
        interps.push_back({"i" + std::to_string(trial) + "_" + std::to_string(s) + "_" +
                               std::to_string(k),
                           static_cast<long>(rng.uniform_index(7)) - 3});
      records.push_back(song("s" + std::to_string(s), interps));
    }
    auto texts = [](const std::vector<SongRecord>& rs) {
      std::set<std::string> out;
      for (const auto& r : rs)
        for (const auto& ir : r.interpretations) out.insert(r.song_id + "/" + ir.text);
      return out;
    };
    const auto full = texts(filter_votes(records, VoteFilter::parse("full", 0)));
    const auto nonneg = texts(filter_votes(records, VoteFilter::parse("nonneg", 0)));
    const auto positive = texts(filter_votes(records, VoteFilter::parse("positive", 0)));
    CHECK(std::includes(full.begin(), full.end(), nonneg.begin(), nonneg.end()));
    CHECK(std::includes(nonneg.begin(), nonneg.end(), positive.begin(), positive.end()));
  }
}

TEST_CASE("random subset sampling") {
  std::vector<SongRecord> records = {
      song("s1", {{"a", 0}, {"b", 1}, {"c", -1}}),
      song("s2", {{"d", 2}, {"e", 0}}),
  };
  auto sampled = filter_votes(records, VoteFilter::parse("random:3", 42));
  std::size_t count = 0;
  for (const auto& r : sampled) count += r.interpretations.size();
  CHECK(count == 3);

  auto again = filter_votes(records, VoteFilter::parse("random:3", 42));
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    REQUIRE(again[i].interpretations.size() == sampled[i].interpretations.size());
    for (std::size_t k = 0; k < sampled[i].interpretations.size(); ++k)
      CHECK(again[i].interpretations[k].text == sampled[i].interpretations[k].text);
  }
  CHECK_THROWS_AS(filter_votes(records, VoteFilter::parse("random:6", 0)),
                  std::invalid_argument);
}

TEST_CASE("split honors the test list and never leaks") {
  std::vector<SongRecord> records;
  for (int s = 0; s < 10; ++s) {
    std::vector<InterpretationRecord> interps;
    for (int k = 0; k < 3; ++k) interps.push_back({"text", k});
    records.push_back(song("s" + std::to_string(s), interps));
  }

  DatasetSplit empty_test = split_dataset(records, 0.2, {}, 7);
  CHECK(empty_test.test.empty());
  CHECK(empty_test.train.size() + empty_test.valid.size() == 30);

  std::set<std::string> test_ids = {"s2", "s5"};
  DatasetSplit split = split_dataset(records, 0.25, test_ids, 7);
  CHECK(split.test.size() == 6);
  for (const auto& it : split.train) CHECK(!test_ids.count(it.song_id));
  for (const auto& it : split.valid) CHECK(!test_ids.count(it.song_id));
  CHECK(split.train.size() + split.valid.size() == 24);
  CHECK(split.valid.size() == 6);  // floor(24 * 0.25)

  DatasetSplit split2 = split_dataset(records, 0.25, test_ids, 7);
  CHECK(split2.train == split.train);
  CHECK(split2.valid == split.valid);
  CHECK(split2.test == split.test);

  std::vector<std::string> warnings;
  split_dataset(records, 0.25, {"s2", "missing"}, 7, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("missing") != std::string::npos);

  CHECK_THROWS_AS(split_dataset(records, 0.0, {}, 7), std::invalid_argument);
  CHECK_THROWS_AS(split_dataset(records, 1.0, {}, 7), std::invalid_argument);
}

TEST_CASE("flatten and item files") {
  std::vector<SongRecord> records = {song("s1", {{"first", 0}, {"second", 1}})};
  auto items = flatten(records, {{"s1", 1}, {"s1", 0}});
  REQUIRE(items.size() == 2);
  CHECK(items[0].target == "second");
  CHECK(items[1].target == "first");
  CHECK(items[0].lyrics == records[0].lyrics);
  CHECK_THROWS_AS(flatten(records, {{"sX", 0}}), std::invalid_argument);
  CHECK_THROWS_AS(flatten(records, {{"s1", 2}}), std::out_of_range);

  const std::string path = temp_file("melfuse_items.jsonl");
  save_items(path, items);
  auto back = load_items(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].target == "second");
  CHECK(back[0].song_id == "s1");
  std::filesystem::remove(path);
}

TEST_CASE("corpus statistics") {
  std::vector<SongRecord> records = {
      song("s1", {{repeat_words("w", 10), 1}}, "rock"),
      song("s2", {{repeat_words("w", 4), 0}, {repeat_words("w", 6), -2}}, "pop"),
      song("s3", {}, "rock"),
  };
  CorpusStats s = corpus_stats(records);
  CHECK(s.songs == 3);
  CHECK(s.interpretations == 3);
  CHECK(s.mean_interpretation_words == doctest::Approx((10 + 4 + 6) / 3.0));
  CHECK(s.genre_histogram.at("rock") == 2);
  CHECK(s.genre_histogram.at("pop") == 1);
  CHECK(s.subset_full == 3);
  CHECK(s.subset_nonneg == 2);
  CHECK(s.subset_positive == 1);
  CHECK(s.subset_positive <= s.subset_nonneg);
  CHECK(s.subset_nonneg <= s.subset_full);

  const std::string text = render_stats(s);
  CHECK(text.find("songs 3") != std::string::npos);
  CHECK(text.find("genre rock 2") != std::string::npos);
}

TEST_SUITE_END();
