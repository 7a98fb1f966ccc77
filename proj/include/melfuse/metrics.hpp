#pragma once

// Summarization metrics: clipped n-gram ROUGE, LCS-based ROUGE-L, a METEOR
// variant with exact + Porter-stem unigram alignment, and mean reciprocal
// rank. One shared tokenizer (lowercase, split on non-alphanumeric) keeps
// the scores reproducible.

#include <string>
#include <vector>

namespace melfuse::metrics {

std::vector<std::string> tokenize(const std::string& text);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

Prf rouge_n(const std::string& candidate, const std::string& reference, int n);
Prf rouge_l(const std::string& candidate, const std::string& reference);

// Unigram alignment by exact match then stem match, F_mean = 10PR/(R+9P),
// fragmentation penalty 0.5 (chunks/matches)^3.
double meteor_lite(const std::string& candidate, const std::string& reference);

// (1/m) sum 1/k_i; every rank must lie in [1, n].
double mrr(const std::vector<std::size_t>& ranks, std::size_t n);

struct PairScores {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;
  double meteor = 0.0;
};

struct MetricReport {
  PairScores mean;
  std::vector<PairScores> pairs;
};

MetricReport evaluate_pairs(const std::vector<std::string>& candidates,
                            const std::vector<std::string>& references);

}  // namespace melfuse::metrics
