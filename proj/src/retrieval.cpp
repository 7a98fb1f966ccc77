#include "melfuse/retrieval.hpp"

#include <algorithm>
#include <cmath>

#include "melfuse/dataset.hpp"
#include "melfuse/metrics.hpp"

namespace melfuse::retrieval {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void l2_normalize(std::vector<float>& v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  if (sq == 0.0) throw std::invalid_argument("embed: zero vector cannot be normalized");
  const double inv = 1.0 / std::sqrt(sq);
  for (float& x : v) x = static_cast<float>(x * inv);
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace

HashedTfIdfEmbedder::HashedTfIdfEmbedder(std::size_t buckets) : buckets_(buckets) {
  if (buckets_ == 0) throw std::invalid_argument("HashedTfIdfEmbedder: zero buckets");
}

std::size_t HashedTfIdfEmbedder::bucket_of(const std::string& token, std::size_t buckets) {
  return static_cast<std::size_t>(fnv1a(token) % buckets);
}

void HashedTfIdfEmbedder::fit(const std::vector<std::string>& corpus) {
  df_.clear();
  n_docs_ = corpus.size();
  for (const auto& doc : corpus) {
    std::map<std::string, std::size_t> seen;
    for (auto& tok : metrics::tokenize(doc)) ++seen[tok];
    for (const auto& [tok, c] : seen) ++df_[tok];
  }
}

double HashedTfIdfEmbedder::idf(const std::string& token) const {
  const auto it = df_.find(token);
  const std::size_t df = it == df_.end() ? 0 : it->second;
  return std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + static_cast<double>(df))) + 1.0;
}

std::vector<float> HashedTfIdfEmbedder::embed(const std::string& text) const {
  if (text.empty()) throw std::invalid_argument("embed: empty text");
  const auto tokens = metrics::tokenize(text);
  std::map<std::string, std::size_t> tf;
  for (const auto& t : tokens) ++tf[t];
  if (tf.empty()) throw std::invalid_argument("embed: text has no tokens");
  std::vector<float> v(buckets_, 0.0f);
  for (const auto& [tok, count] : tf) {
    const double w = (1.0 + std::log(static_cast<double>(count))) * idf(tok);
    v[bucket_of(tok, buckets_)] += static_cast<float>(w);
  }
  l2_normalize(v);
  return v;
}

std::vector<float> EncoderEmbedder::embed(const std::string& text) const {
  if (text.empty()) throw std::invalid_argument("embed: empty text");
  std::vector<float> v = model::encode_text_embedding(model_, vocab_, text);
  l2_normalize(v);
  return v;
}

void EmbeddingIndex::validate() const {
  for (const auto& [id, v] : entries) {
    if (v.size() != dim)
      throw std::runtime_error("EmbeddingIndex: entry '" + id + "' has dim " +
                               std::to_string(v.size()) + ", expected " + std::to_string(dim));
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-5)
      throw std::runtime_error("EmbeddingIndex: entry '" + id + "' is not unit norm");
  }
}

void EmbeddingIndex::save(const std::string& prefix) const {
  Container c;
  c.meta = "{\"embedder\":\"" + embedder_id + "\",\"dim\":" + std::to_string(dim) + "}";
  for (const auto& [id, v] : entries) {
    ContainerEntry e;
    e.name = id;
    e.shape = {v.size()};
    e.values = v;
    c.entries.push_back(std::move(e));
  }
  save_container(prefix, c);
}

EmbeddingIndex EmbeddingIndex::load(const std::string& prefix) {
  const Container c = load_container(prefix);
  EmbeddingIndex idx;
  // minimal meta parse; format is written by save()
  const std::string& m = c.meta;
  const auto epos = m.find("\"embedder\":\"");
  const auto dpos = m.find("\"dim\":");
  if (epos == std::string::npos || dpos == std::string::npos)
    throw std::runtime_error("EmbeddingIndex: bad metadata in " + prefix);
  const auto estart = epos + 12;
  idx.embedder_id = m.substr(estart, m.find('"', estart) - estart);
  idx.dim = std::stoull(m.substr(dpos + 6));
  for (const auto& e : c.entries) idx.entries[e.name] = e.values;
  idx.validate();
  return idx;
}

std::vector<IndexSource> generate_interpretations(model::FusionModel& m,
                                                  const text::Vocabulary& vocab,
                                                  const std::vector<SongInput>& songs,
                                                  const model::GenerateOptions& gen,
                                                  std::vector<std::string>* warnings) {
  std::vector<IndexSource> out;
  out.reserve(songs.size());
  for (const auto& song : songs) {
    try {
      std::string text = model::generate(m, vocab, song.lyrics, song.mel, gen);
      if (text.empty()) throw std::runtime_error("empty generation");
      out.push_back({song.song_id, std::move(text)});
    } catch (const std::exception& e) {
      if (warnings)
        warnings->push_back("generation failed for '" + song.song_id + "': " + e.what());
    }
  }
  return out;
}

EmbeddingIndex build_index(const std::vector<IndexSource>& sources, const Embedder& embedder) {
  EmbeddingIndex idx;
  idx.embedder_id = embedder.id();
  idx.dim = embedder.dim();
  for (const auto& src : sources) idx.entries[src.song_id] = embedder.embed(src.text);
  idx.validate();
  return idx;
}

std::vector<std::string> query_rank(const std::string& query, const EmbeddingIndex& index,
                                    const Embedder& embedder) {
  if (index.entries.empty()) throw std::invalid_argument("query_rank: empty index");
  return [&](const std::vector<float> qv) {
    std::vector<std::pair<double, std::string>> scored;
    scored.reserve(index.entries.size());
    for (const auto& [id, v] : index.entries) scored.emplace_back(dot(qv, v), id);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<std::string> out;
    out.reserve(scored.size());
    for (auto& [s, id] : scored) out.push_back(std::move(id));
    return out;
  }(embedder.embed(query));
}

std::size_t rank_of_vector(const std::vector<float>& query_vec, const EmbeddingIndex& index,
                           const std::string& truth) {
  const auto it = index.entries.find(truth);
  if (it == index.entries.end())
    throw std::invalid_argument("rank_of_vector: unknown song '" + truth + "'");
  const double truth_score = dot(query_vec, it->second);
  std::size_t rank = 1;
  for (const auto& [id, v] : index.entries) {
    if (id == truth) continue;
    const double s = dot(query_vec, v);
    if (s > truth_score || (s == truth_score && id < truth)) ++rank;
  }
  return rank;
}

std::vector<std::string> split_sentences(const std::string& text, std::size_t min_chars) {
  std::vector<std::string> out;
  std::string cur;
  const auto flush = [&]() {
    // trim surrounding whitespace
    std::size_t b = 0, e = cur.size();
    while (b < e && std::isspace(static_cast<unsigned char>(cur[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(cur[e - 1]))) --e;
    const std::string s = cur.substr(b, e - b);
    if (!s.empty() && data::utf8_length(s) >= min_chars) out.push_back(s);
    cur.clear();
  };
  for (char ch : text) {
    cur.push_back(ch);
    if (ch == '.' || ch == '!' || ch == '?') flush();
  }
  flush();
  return out;
}

std::vector<RetrievalQuery> make_queries(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& references,
    std::uint64_t seed, std::vector<std::string>* warnings) {
  Rng rng(seed);
  std::vector<RetrievalQuery> queries;
  for (const auto& [song_id, refs] : references) {
    std::vector<std::string> sentences;
    for (const auto& ref : refs) {
      auto part = split_sentences(ref);
      sentences.insert(sentences.end(), part.begin(), part.end());
    }
    if (sentences.empty()) {
      if (warnings) warnings->push_back("no eligible sentence for '" + song_id + "'");
      continue;
    }
    queries.push_back({sentences[rng.uniform_index(sentences.size())], song_id});
  }
  return queries;
}

RetrievalResult evaluate_retrieval(const std::vector<RetrievalQuery>& queries,
                                   const EmbeddingIndex& index, const Embedder& embedder) {
  if (queries.empty()) throw std::invalid_argument("evaluate_retrieval: no queries");
  RetrievalResult result;
  std::vector<std::size_t> ranks;
  for (const auto& q : queries) {
    const std::vector<std::string> order = query_rank(q.query, index, embedder);
    const auto it = std::find(order.begin(), order.end(), q.song_id);
    if (it == order.end())
      throw std::invalid_argument("evaluate_retrieval: ground truth '" + q.song_id +
                                  "' missing from the index");
    const std::size_t rank = static_cast<std::size_t>(it - order.begin()) + 1;
    ranks.push_back(rank);
    result.ranks.emplace_back(q.song_id, rank);
  }
  result.mrr = metrics::mrr(ranks, index.entries.size());
  return result;
}

}  // namespace melfuse::retrieval
