#include <filesystem>
#include <set>

#include "doctest.h"
#include "melfuse/bpe.hpp"
#include "melfuse/tensor.hpp"

using namespace melfuse::text;

namespace {

// Random UTF-8 strings mixing ASCII, multi-byte letters and whitespace.
std::string random_utf8(melfuse::Rng& rng, std::size_t max_chars) {
  static const std::vector<std::string> pieces = {
      "a", "b", "z", "Q", "0", "9", " ", "  ", "\t", "\n", ".", ",", "!",
      "é", "ß", "你", "好", "ñ", "\U0001F3B5", "—"};
  std::string out;
  const std::size_t n = rng.uniform_index(max_chars + 1);
  for (std::size_t i = 0; i < n; ++i) out += pieces[rng.uniform_index(pieces.size())];
  return out;
}

const std::vector<std::string> kCorpus = {
    "the quick brown fox jumps over the lazy dog",
    "pack my box with five dozen liquor jugs",
    "singing songs about singing songs",
    "la la la la la the end",
};

}  // namespace

TEST_SUITE_BEGIN("text");

TEST_CASE("vocabulary always contains the specials and respects the cap") {
  Vocabulary v = Vocabulary::train(kCorpus, 300);
  CHECK(v.size() <= 300);
  CHECK(v.size() >= 260);
  CHECK(Vocabulary::kPad == 0);
  CHECK(Vocabulary::kBos == 1);
  CHECK(Vocabulary::kEos == 2);
  CHECK(Vocabulary::kUnk == 3);

  Vocabulary tight = Vocabulary::train(kCorpus, 260);
  CHECK(tight.size() == 260);  // no room for merges

  CHECK_THROWS_AS(Vocabulary::train(kCorpus, 259), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary::train({""}, 300), std::invalid_argument);
}

TEST_CASE("byte-level round trip over random UTF-8") {
  Vocabulary v = Vocabulary::train(kCorpus, 400);
  melfuse::Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    const std::string t = random_utf8(rng, 40);
    CHECK(v.decode(v.encode_text(t)) == t);
  }
  CHECK(v.decode(v.encode_text("")) == "");
}

TEST_CASE("encode pads, truncates, and always keeps eos") {
  Vocabulary v = Vocabulary::train(kCorpus, 300);

  EncodedRow empty = v.encode("", 8);
  REQUIRE(empty.ids.size() == 8);
  CHECK(empty.ids[0] == Vocabulary::kBos);
  CHECK(empty.ids[1] == Vocabulary::kEos);
  for (std::size_t i = 2; i < 8; ++i) CHECK(empty.ids[i] == Vocabulary::kPad);
  CHECK(empty.mask == std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 0, 0});

  // text tokenizing far past max_len -> exactly max_len ids ending in eos
  std::string longtext;
  for (int i = 0; i < 300; ++i) longtext += "overflowing ";
  EncodedRow full = v.encode(longtext, 32);
  REQUIRE(full.ids.size() == 32);
  CHECK(full.ids[0] == Vocabulary::kBos);
  CHECK(full.ids[31] == Vocabulary::kEos);
  for (std::size_t i = 0; i < 32; ++i) CHECK(full.mask[i] == 1);

  // mask counts bos + body + eos exactly
  EncodedRow row = v.encode("the dog", 16);
  std::size_t mask_sum = 0;
  for (auto m : row.mask) mask_sum += m;
  CHECK(mask_sum == v.encode_text("the dog").size() + 2);
  // exactly one eos among masked positions, row begins with bos
  std::size_t eos_count = 0;
  for (std::size_t i = 0; i < row.ids.size(); ++i)
    if (row.mask[i] && row.ids[i] == Vocabulary::kEos) ++eos_count;
  CHECK(eos_count == 1);
  CHECK(row.ids[0] == Vocabulary::kBos);
}

TEST_CASE("token batches stack rows with their masks") {
  Vocabulary v = Vocabulary::train(kCorpus, 300);
  TokenBatch batch = v.encode_batch({"the dog", "fox", ""}, 12);
  CHECK(batch.batch == 3);
  CHECK(batch.len == 12);
  CHECK(batch.ids.size() == 36);
  for (std::size_t b = 0; b < 3; ++b) {
    EncodedRow row = batch.row(b);
    CHECK(row.ids[0] == Vocabulary::kBos);
    std::size_t eos_count = 0;
    for (std::size_t i = 0; i < row.ids.size(); ++i) {
      if (row.mask[i]) {
        CHECK(row.ids[i] != Vocabulary::kPad);
        if (row.ids[i] == Vocabulary::kEos) ++eos_count;
      } else {
        CHECK(row.ids[i] == Vocabulary::kPad);
      }
    }
    CHECK(eos_count == 1);
  }
  CHECK_THROWS_AS(batch.row(3), std::out_of_range);
}

TEST_CASE("decode strips specials and rejects unknown ids") {
  Vocabulary v = Vocabulary::train(kCorpus, 300);
  CHECK(v.decode({Vocabulary::kBos, Vocabulary::kEos}) == "");
  EncodedRow row = v.encode("fox", 16);
  CHECK(v.decode(row.ids) == "fox");  // pads ignored
  CHECK_THROWS_AS(v.decode({static_cast<TokenId>(v.size())}), std::out_of_range);
}

TEST_CASE("round trip through encode with specials") {
  Vocabulary v = Vocabulary::train(kCorpus, 512);
  melfuse::Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const std::string t = random_utf8(rng, 12);
    EncodedRow row = v.encode(t, 256);
    CHECK(v.decode(row.ids) == t);
  }
}

TEST_CASE("training is deterministic and serialization round-trips") {
  Vocabulary a = Vocabulary::train(kCorpus, 320);
  Vocabulary b = Vocabulary::train(kCorpus, 320);
  const std::string text = "the lazy dog sings";
  CHECK(a.encode_text(text) == b.encode_text(text));
  CHECK(a.merges() == b.merges());

  const auto path = (std::filesystem::temp_directory_path() / "melfuse_vocab_test.txt").string();
  a.save(path);
  Vocabulary c = Vocabulary::load(path);
  CHECK(c.size() == a.size());
  CHECK(c.merges() == a.merges());
  CHECK(c.encode_text(text) == a.encode_text(text));
  CHECK(c.decode(c.encode_text("你好 world")) == "你好 world");
  std::filesystem::remove(path);
}

TEST_CASE("merges learn frequent pairs") {
  std::vector<std::string> corpus(20, "aaaa bbbb aaaa");
  Vocabulary v = Vocabulary::train(corpus, 270);
  // 'aa' must be merged early; encoding "aaaa" takes fewer tokens than bytes
  CHECK(v.encode_text("aaaa").size() < 4);
}

TEST_CASE("token table stays injective even with colliding merge surfaces") {
  // "abc" is reachable as ab+c and a+bc; training must keep one id per form
  std::vector<std::string> corpus;
  for (int i = 0; i < 30; ++i) {
    corpus.push_back("ab ab abc abc abc");
    corpus.push_back("bc bc abc a abc");
  }
  Vocabulary v = Vocabulary::train(corpus, 400);
  for (const std::string& probe : {"abc", "ab", "bc", "a", "c"})
    CHECK(v.decode(v.encode_text(probe)) == probe);
  // decode every id and count duplicates among the learned merges
  std::set<std::string> surfaces;
  std::size_t duplicates = 0;
  for (TokenId id = Vocabulary::kNumSpecials; id < static_cast<TokenId>(v.size()); ++id) {
    const std::string bytes = v.decode({id});
    if (!surfaces.insert(bytes).second) ++duplicates;
  }
  CHECK(duplicates == 0);
}

TEST_SUITE_END();
