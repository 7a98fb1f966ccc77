#include "melfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "melfuse/stemmer.hpp"

namespace melfuse::metrics {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur.push_back(static_cast<char>(c));
    } else if (c >= 'A' && c <= 'Z') {
      cur.push_back(static_cast<char>(c - 'A' + 'a'));
    } else {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

namespace {

Prf prf_from(double overlap, double n_cand, double n_ref) {
  Prf out;
  if (n_cand > 0) out.precision = overlap / n_cand;
  if (n_ref > 0) out.recall = overlap / n_ref;
  if (out.precision + out.recall > 0)
    out.f = 2.0 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(
    const std::vector<std::string>& toks, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

Prf rouge_n(const std::string& candidate, const std::string& reference, int n) {
  if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
  const auto cand = tokenize(candidate);
  const auto ref = tokenize(reference);
  const auto cc = ngram_counts(cand, static_cast<std::size_t>(n));
  const auto rc = ngram_counts(ref, static_cast<std::size_t>(n));
  std::size_t overlap = 0, n_cand = 0, n_ref = 0;
  for (const auto& [g, c] : cc) n_cand += c;
  for (const auto& [g, c] : rc) n_ref += c;
  for (const auto& [g, c] : cc) {
    auto it = rc.find(g);
    if (it != rc.end()) overlap += std::min(c, it->second);  // clipped
  }
  return prf_from(static_cast<double>(overlap), static_cast<double>(n_cand),
                  static_cast<double>(n_ref));
}

Prf rouge_l(const std::string& candidate, const std::string& reference) {
  const auto cand = tokenize(candidate);
  const auto ref = tokenize(reference);
  const std::size_t n = cand.size(), m = ref.size();
  if (n == 0 || m == 0) return {};
  // standard LCS dynamic program
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = cand[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prf_from(static_cast<double>(prev[m]), static_cast<double>(n), static_cast<double>(m));
}

double meteor_lite(const std::string& candidate, const std::string& reference) {
  const auto cand = tokenize(candidate);
  const auto ref = tokenize(reference);
  if (cand.empty() || ref.empty()) return 0.0;

  // alignment: cand position -> ref position, exact stage then stem stage;
  // greedy left to right, preferring the continuation of the previous chunk
  std::vector<long> align(cand.size(), -1);
  std::vector<bool> ref_used(ref.size(), false);

  const auto run_stage = [&](const std::vector<std::string>& cand_keys,
                             const std::vector<std::string>& ref_keys) {
    long prev_ref = -2;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (align[i] >= 0) {
        prev_ref = align[i];
        continue;
      }
      long chosen = -1;
      // continue the current chunk when possible
      const long want = prev_ref + 1;
      if (want >= 0 && want < static_cast<long>(ref.size()) &&
          !ref_used[static_cast<std::size_t>(want)] &&
          ref_keys[static_cast<std::size_t>(want)] == cand_keys[i]) {
        chosen = want;
      } else {
        for (std::size_t j = 0; j < ref.size(); ++j) {
          if (!ref_used[j] && ref_keys[j] == cand_keys[i]) {
            chosen = static_cast<long>(j);
            break;
          }
        }
      }
      if (chosen >= 0) {
        align[i] = chosen;
        ref_used[static_cast<std::size_t>(chosen)] = true;
        prev_ref = chosen;
      }
    }
  };

  run_stage(cand, ref);
  std::vector<std::string> cand_stems(cand.size()), ref_stems(ref.size());
  for (std::size_t i = 0; i < cand.size(); ++i) cand_stems[i] = porter_stem(cand[i]);
  for (std::size_t j = 0; j < ref.size(); ++j) ref_stems[j] = porter_stem(ref[j]);
  run_stage(cand_stems, ref_stems);

  std::size_t matches = 0;
  for (long a : align)
    if (a >= 0) ++matches;
  if (matches == 0) return 0.0;

  // chunks: maximal runs contiguous in both strings
  std::size_t chunks = 0;
  long prev_i = -10, prev_j = -10;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] < 0) continue;
    if (static_cast<long>(i) != prev_i + 1 || align[i] != prev_j + 1) ++chunks;
    prev_i = static_cast<long>(i);
    prev_j = align[i];
  }

  const double p = static_cast<double>(matches) / static_cast<double>(cand.size());
  const double r = static_cast<double>(matches) / static_cast<double>(ref.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty =
      0.5 * std::pow(static_cast<double>(chunks) / static_cast<double>(matches), 3.0);
  return f_mean * (1.0 - penalty);
}

double mrr(const std::vector<std::size_t>& ranks, std::size_t n) {
  if (ranks.empty()) throw std::invalid_argument("mrr: empty rank list");
  double total = 0.0;
  for (std::size_t k : ranks) {
    if (k < 1 || k > n)
      throw std::out_of_range("mrr: rank " + std::to_string(k) + " outside [1," +
                              std::to_string(n) + "]");
    total += 1.0 / static_cast<double>(k);
  }
  return total / static_cast<double>(ranks.size());
}

MetricReport evaluate_pairs(const std::vector<std::string>& candidates,
                            const std::vector<std::string>& references) {
  if (candidates.size() != references.size())
    throw std::invalid_argument("evaluate_pairs: " + std::to_string(candidates.size()) +
                                " candidates vs " + std::to_string(references.size()) +
                                " references");
  if (candidates.empty()) throw std::invalid_argument("evaluate_pairs: empty input");
  MetricReport report;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    PairScores s;
    s.rouge1 = rouge_n(candidates[i], references[i], 1).f;
    s.rouge2 = rouge_n(candidates[i], references[i], 2).f;
    s.rouge_l = rouge_l(candidates[i], references[i]).f;
    s.meteor = meteor_lite(candidates[i], references[i]);
    report.mean.rouge1 += s.rouge1;
    report.mean.rouge2 += s.rouge2;
    report.mean.rouge_l += s.rouge_l;
    report.mean.meteor += s.meteor;
    report.pairs.push_back(s);
  }
  const double inv = 1.0 / static_cast<double>(candidates.size());
  report.mean.rouge1 *= inv;
  report.mean.rouge2 *= inv;
  report.mean.rouge_l *= inv;
  report.mean.meteor *= inv;
  return report;
}

}  // namespace melfuse::metrics
