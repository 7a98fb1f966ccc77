#include "melfuse/stemmer.hpp"

#include <cstddef>

namespace melfuse::metrics {

namespace {

bool is_vowel_at(const std::string& w, std::size_t i) {
  const char c = w[i];
  if (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') return true;
  if (c == 'y') return i > 0 && !is_vowel_at(w, i - 1);
  return false;
}

// measure m: number of VC transitions in [C](VC)^m[V]
int measure(const std::string& w) {
  int m = 0;
  bool prev_vowel = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const bool v = is_vowel_at(w, i);
    if (prev_vowel && !v) ++m;
    prev_vowel = v;
  }
  return m;
}

bool contains_vowel(const std::string& w) {
  for (std::size_t i = 0; i < w.size(); ++i)
    if (is_vowel_at(w, i)) return true;
  return false;
}

bool ends_double_consonant(const std::string& w) {
  const std::size_t n = w.size();
  return n >= 2 && w[n - 1] == w[n - 2] && !is_vowel_at(w, n - 1);
}

// *o: stem ends cvc where the final c is not w, x or y
bool ends_cvc(const std::string& w) {
  const std::size_t n = w.size();
  if (n < 3) return false;
  if (is_vowel_at(w, n - 3) || !is_vowel_at(w, n - 2) || is_vowel_at(w, n - 1)) return false;
  const char c = w[n - 1];
  return c != 'w' && c != 'x' && c != 'y';
}

bool ends_with(const std::string& w, const char* suf) {
  const std::size_t n = std::char_traits<char>::length(suf);
  return w.size() >= n && w.compare(w.size() - n, n, suf) == 0;
}

std::string stem_part(const std::string& w, const char* suf) {
  return w.substr(0, w.size() - std::char_traits<char>::length(suf));
}

// replace suffix when the measure condition on the stem holds
bool rule(std::string& w, const char* suf, const char* rep, int min_m) {
  if (!ends_with(w, suf)) return false;
  const std::string stem = stem_part(w, suf);
  if (measure(stem) > min_m) w = stem + rep;
  return true;  // suffix matched, stop scanning this step
}

}  // namespace

std::string porter_stem(const std::string& word) {
  if (word.size() <= 2) return word;
  std::string w = word;

  // step 1a
  if (ends_with(w, "sses")) {
    w = stem_part(w, "es");
  } else if (ends_with(w, "ies")) {
    w = stem_part(w, "es");
  } else if (!ends_with(w, "ss") && ends_with(w, "s")) {
    w = stem_part(w, "s");
  }

  // step 1b
  bool extra_1b = false;
  if (ends_with(w, "eed")) {
    if (measure(stem_part(w, "eed")) > 0) w = stem_part(w, "d");
  } else if (ends_with(w, "ed") && contains_vowel(stem_part(w, "ed"))) {
    w = stem_part(w, "ed");
    extra_1b = true;
  } else if (ends_with(w, "ing") && contains_vowel(stem_part(w, "ing"))) {
    w = stem_part(w, "ing");
    extra_1b = true;
  }
  if (extra_1b) {
    if (ends_with(w, "at") || ends_with(w, "bl") || ends_with(w, "iz")) {
      w += 'e';
    } else if (ends_double_consonant(w) && !ends_with(w, "l") && !ends_with(w, "s") &&
               !ends_with(w, "z")) {
      w.pop_back();
    } else if (measure(w) == 1 && ends_cvc(w)) {
      w += 'e';
    }
  }

  // step 1c
  if (ends_with(w, "y") && contains_vowel(w.substr(0, w.size() - 1))) w.back() = 'i';

  // step 2
  static const std::pair<const char*, const char*> step2[] = {
      {"ational", "ate"}, {"tional", "tion"}, {"enci", "ence"}, {"anci", "ance"},
      {"izer", "ize"},    {"abli", "able"},   {"alli", "al"},   {"entli", "ent"},
      {"eli", "e"},       {"ousli", "ous"},   {"ization", "ize"}, {"ation", "ate"},
      {"ator", "ate"},    {"alism", "al"},    {"iveness", "ive"}, {"fulness", "ful"},
      {"ousness", "ous"}, {"aliti", "al"},    {"iviti", "ive"},   {"biliti", "ble"}};
  for (const auto& [suf, rep] : step2)
    if (rule(w, suf, rep, 0)) break;

  // step 3
  static const std::pair<const char*, const char*> step3[] = {
      {"icate", "ic"}, {"ative", ""}, {"alize", "al"},
      {"iciti", "ic"}, {"ical", "ic"}, {"ful", ""}, {"ness", ""}};
  for (const auto& [suf, rep] : step3)
    if (rule(w, suf, rep, 0)) break;

  // step 4
  static const char* step4[] = {"al",  "ance", "ence", "er",  "ic",  "able", "ible",
                                "ant", "ement", "ment", "ent", "ou",  "ism",  "ate",
                                "iti", "ous",  "ive",  "ize"};
  bool matched4 = false;
  if (ends_with(w, "ion")) {
    // (m>1 and stem ends s or t) ION -> ""; a failed condition still stops
    // the scan, per the longest-match rule
    matched4 = true;
    const std::string stem = stem_part(w, "ion");
    if (!stem.empty() && (stem.back() == 's' || stem.back() == 't') && measure(stem) > 1)
      w = stem;
  }
  if (!matched4) {
    for (const char* suf : step4) {
      if (ends_with(w, suf)) {
        const std::string stem = stem_part(w, suf);
        if (measure(stem) > 1) w = stem;
        break;
      }
    }
  }

  // step 5a
  if (ends_with(w, "e")) {
    const std::string stem = stem_part(w, "e");
    const int m = measure(stem);
    if (m > 1 || (m == 1 && !ends_cvc(stem))) w = stem;
  }
  // step 5b
  if (measure(w) > 1 && ends_double_consonant(w) && ends_with(w, "l")) w.pop_back();

  return w;
}

}  // namespace melfuse::metrics
