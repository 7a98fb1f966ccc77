#pragma once

// Cross-modal retrieval: embed generated interpretations into unit vectors,
// rank a database against sentence queries by cosine similarity, score with
// mean reciprocal rank.

#include <map>
#include <memory>

#include "melfuse/model_io.hpp"

namespace melfuse::retrieval {

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<float> embed(const std::string& text) const = 0;  // unit norm
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
};

// Deterministic, dependency-free text embedder: hashed term frequencies
// (sublinear tf) weighted by corpus idf, L2-normalized.
class HashedTfIdfEmbedder : public Embedder {
 public:
  explicit HashedTfIdfEmbedder(std::size_t buckets = 1u << 14);

  void fit(const std::vector<std::string>& corpus);

  std::vector<float> embed(const std::string& text) const override;
  std::string id() const override { return "tfidf"; }
  std::size_t dim() const override { return buckets_; }

  static std::size_t bucket_of(const std::string& token, std::size_t buckets);

 private:
  double idf(const std::string& token) const;

  std::size_t buckets_;
  std::map<std::string, std::size_t> df_;
  std::size_t n_docs_ = 0;
};

// Mean-pooled final hidden state of the trained text encoder.
class EncoderEmbedder : public Embedder {
 public:
  EncoderEmbedder(model::FusionModel& m, const text::Vocabulary& vocab)
      : model_(m), vocab_(vocab) {}

  std::vector<float> embed(const std::string& text) const override;
  std::string id() const override { return "encoder"; }
  std::size_t dim() const override { return model_.config().d_t; }

 private:
  model::FusionModel& model_;
  const text::Vocabulary& vocab_;
};

struct EmbeddingIndex {
  std::string embedder_id;
  std::size_t dim = 0;
  std::map<std::string, std::vector<float>> entries;  // song_id -> unit vector

  void validate() const;
  void save(const std::string& prefix) const;
  static EmbeddingIndex load(const std::string& prefix);
};

struct IndexSource {
  std::string song_id;
  std::string text;
};

struct SongInput {
  std::string song_id;
  std::string lyrics;
  const Tensor* mel = nullptr;  // optional audio features
};

// Greedy-generate one interpretation per song; failures are recorded as
// warnings and the song skipped.
std::vector<IndexSource> generate_interpretations(model::FusionModel& m,
                                                  const text::Vocabulary& vocab,
                                                  const std::vector<SongInput>& songs,
                                                  const model::GenerateOptions& gen,
                                                  std::vector<std::string>* warnings = nullptr);

EmbeddingIndex build_index(const std::vector<IndexSource>& sources, const Embedder& embedder);

// song ids in descending cosine order; ties break by ascending song_id
std::vector<std::string> query_rank(const std::string& query, const EmbeddingIndex& index,
                                    const Embedder& embedder);

// 1-based rank of `truth` under an explicit query vector
std::size_t rank_of_vector(const std::vector<float>& query_vec, const EmbeddingIndex& index,
                           const std::string& truth);

struct RetrievalQuery {
  std::string query;
  std::string song_id;  // ground truth
};

// terminal-punctuation sentence split, sentences under min_chars excluded
std::vector<std::string> split_sentences(const std::string& text, std::size_t min_chars = 20);

// one uniformly chosen sentence per song from its reference interpretations
std::vector<RetrievalQuery> make_queries(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& references,
    std::uint64_t seed, std::vector<std::string>* warnings = nullptr);

struct RetrievalResult {
  double mrr = 0.0;
  std::vector<std::pair<std::string, std::size_t>> ranks;  // song_id, rank
};

RetrievalResult evaluate_retrieval(const std::vector<RetrievalQuery>& queries,
                                   const EmbeddingIndex& index, const Embedder& embedder);

}  // namespace melfuse::retrieval
