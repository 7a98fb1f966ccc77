#include "melfuse/model.hpp"

#include <algorithm>

#include "json.hpp"
#include "melfuse/model_io.hpp"

namespace melfuse::model {

std::size_t ModelConfig::audio_seq_len(std::size_t mel_frames) const {
  std::size_t t = mel_frames;
  for (const auto& [sf, st] : audio_strides) t = (t + st - 1) / st;
  return t;
}

void ModelConfig::validate() const {
  if (vocab_size <= 4) throw std::invalid_argument("ModelConfig: vocab_size must exceed specials");
  if (d_t == 0 || n_heads == 0 || d_a == 0) throw std::invalid_argument("ModelConfig: zero dims");
  if (d_t % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_t must be divisible by n_heads");
  if (d_a % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_a must be divisible by n_heads");
  if (fuse_last_k > n_enc)
    throw std::invalid_argument("ModelConfig: fuse_last_k " + std::to_string(fuse_last_k) +
                                " exceeds n_enc " + std::to_string(n_enc));
  if (audio_channels.size() != audio_strides.size())
    throw std::invalid_argument("ModelConfig: channel/stride lists differ in length");
  if (audio_channels.empty()) throw std::invalid_argument("ModelConfig: empty audio stack");
  std::size_t f = n_mels;
  for (const auto& [sf, st] : audio_strides) {
    if (sf == 0 || st == 0) throw std::invalid_argument("ModelConfig: zero stride");
    f = (f + sf - 1) / sf;
  }
  if (f != 1)
    throw std::invalid_argument("ModelConfig: frequency strides leave " + std::to_string(f) +
                                " rows; the mel axis must collapse to 1");
  if (d_m() % audio_heads != 0)
    throw std::invalid_argument("ModelConfig: d_m must be divisible by audio_heads");
  if (d_cross % cma_heads != 0)
    throw std::invalid_argument("ModelConfig: d_cross must be divisible by cma_heads");
  if (max_source_len < 2 || max_target_len < 2)
    throw std::invalid_argument("ModelConfig: sequence limits must be >= 2");
}

ModelConfig ModelConfig::toy(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  return c;
}

ModelConfig ModelConfig::paper(std::size_t vocab) {
  ModelConfig c;
  c.d_t = 768;
  c.n_enc = 6;
  c.n_dec = 6;
  c.n_heads = 12;
  c.d_ffn = 3072;
  c.d_a = 768;
  c.vocab_size = vocab;
  c.max_source_len = 2048;
  c.max_target_len = 512;
  c.n_mels = 128;
  c.audio_channels = {128, 128, 256, 256, 256, 256, 256};
  c.audio_strides = {{2, 2}, {2, 2}, {2, 2}, {2, 1}, {2, 1}, {2, 1}, {2, 1}};
  c.n_audio_tx = 2;
  c.audio_heads = 4;
  c.d_cross = 768;
  c.cma_heads = 1;
  c.fuse_last_k = 2;
  return c;
}

ModelConfig ModelConfig::profile(const std::string& name, std::size_t vocab) {
  if (name == "toy") return toy(vocab);
  if (name == "paper") return paper(vocab);
  throw std::invalid_argument("ModelConfig: unknown profile '" + name + "'");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["d_t"] = d_t;
  j["n_enc"] = n_enc;
  j["n_dec"] = n_dec;
  j["n_heads"] = n_heads;
  j["d_ffn"] = d_ffn;
  j["d_a"] = d_a;
  j["vocab_size"] = vocab_size;
  j["max_source_len"] = max_source_len;
  j["max_target_len"] = max_target_len;
  j["n_mels"] = n_mels;
  j["audio_channels"] = audio_channels;
  nlohmann::json strides = nlohmann::json::array();
  for (const auto& [sf, st] : audio_strides) strides.push_back({sf, st});
  j["audio_strides"] = strides;
  j["n_audio_tx"] = n_audio_tx;
  j["audio_heads"] = audio_heads;
  j["d_cross"] = d_cross;
  j["cma_heads"] = cma_heads;
  j["fuse_last_k"] = fuse_last_k;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  const nlohmann::json j = nlohmann::json::parse(json);
  ModelConfig c;
  c.d_t = j.at("d_t");
  c.n_enc = j.at("n_enc");
  c.n_dec = j.at("n_dec");
  c.n_heads = j.at("n_heads");
  c.d_ffn = j.at("d_ffn");
  c.d_a = j.at("d_a");
  c.vocab_size = j.at("vocab_size");
  c.max_source_len = j.at("max_source_len");
  c.max_target_len = j.at("max_target_len");
  c.n_mels = j.at("n_mels");
  c.audio_channels = j.at("audio_channels").get<std::vector<std::size_t>>();
  c.audio_strides.clear();
  for (const auto& s : j.at("audio_strides"))
    c.audio_strides.emplace_back(s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>());
  c.n_audio_tx = j.at("n_audio_tx");
  c.audio_heads = j.at("audio_heads");
  c.d_cross = j.at("d_cross");
  c.cma_heads = j.at("cma_heads");
  c.fuse_last_k = j.at("fuse_last_k");
  c.validate();
  return c;
}

namespace {

std::vector<double> log_softmax_row(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lz = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

}  // namespace

std::vector<TokenId> greedy_decode(const LogitsFn& fn, TokenId bos, TokenId eos,
                                   std::size_t max_new) {
  if (max_new == 0) throw std::invalid_argument("greedy_decode: max_new must be positive");
  std::vector<TokenId> prefix = {bos};
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::vector<double> logits = fn(prefix);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    const TokenId tok = static_cast<TokenId>(best);
    out.push_back(tok);
    if (tok == eos) break;
    prefix.push_back(tok);
  }
  return out;
}

std::vector<TokenId> beam_decode(const LogitsFn& fn, TokenId bos, TokenId eos,
                                 std::size_t max_new, std::size_t beam_width,
                                 double length_power) {
  if (max_new == 0) throw std::invalid_argument("beam_decode: max_new must be positive");
  if (beam_width == 0) throw std::invalid_argument("beam_decode: beam width must be positive");

  struct Hyp {
    std::vector<TokenId> toks;  // includes bos
    double logp = 0.0;
  };
  const auto normalized = [length_power](const Hyp& h) {
    const double len = static_cast<double>(h.toks.size() - 1);
    return h.logp / std::pow(std::max(1.0, len), length_power);
  };

  std::vector<Hyp> live = {{{bos}, 0.0}};
  std::vector<std::pair<double, std::vector<TokenId>>> finished;

  for (std::size_t step = 0; step < max_new && !live.empty(); ++step) {
    struct Cand {
      std::size_t hyp;
      TokenId tok;
      double logp;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const std::vector<double> lp = log_softmax_row(fn(live[h].toks));
      std::vector<std::size_t> idx(lp.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      const std::size_t keep = std::min(beam_width, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                        [&](std::size_t a, std::size_t b) {
                          if (lp[a] != lp[b]) return lp[a] > lp[b];
                          return a < b;
                        });
      for (std::size_t i = 0; i < keep; ++i)
        cands.push_back({h, static_cast<TokenId>(idx[i]), live[h].logp + lp[idx[i]]});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.tok < b.tok;
    });

    std::vector<Hyp> next;
    for (const Cand& c : cands) {
      if (next.size() >= beam_width) break;
      Hyp h = live[c.hyp];
      h.toks.push_back(c.tok);
      h.logp = c.logp;
      if (c.tok == eos) {
        finished.emplace_back(normalized(h), std::move(h.toks));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  for (const Hyp& h : live) finished.emplace_back(normalized(h), h.toks);
  if (finished.empty()) return {};
  std::stable_sort(finished.begin(), finished.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<TokenId> best = finished.front().second;
  best.erase(best.begin());  // drop bos
  return best;
}

Container model_to_container(const FusionModel& m) {
  Container c;
  c.meta = m.config().to_json();
  for (const auto& p : m.parameters()) {
    ContainerEntry e;
    e.name = p.name;
    e.shape = p.value.shape;
    e.values = *p.value.data;
    c.entries.push_back(std::move(e));
  }
  // running statistics travel with the checkpoint
  auto& self = const_cast<FusionModel&>(m);
  for (std::size_t i = 0; i < m.config().audio_channels.size(); ++i) {
    for (const char* bn : {"bn2", "bn3"}) {
      const std::string name = "audio.block" + std::to_string(i) + "." + bn;
      auto* state = self.find_batch_norm(name);
      if (!state || !state->has_stats) continue;
      ContainerEntry mean{name + ".running_mean", {state->running_mean.size()},
                          state->running_mean};
      ContainerEntry var{name + ".running_var", {state->running_var.size()}, state->running_var};
      c.entries.push_back(std::move(mean));
      c.entries.push_back(std::move(var));
    }
  }
  return c;
}

void save_model(const FusionModel& m, const std::string& prefix) {
  save_container(prefix, model_to_container(m));
}

FusionModel load_model(const std::string& prefix) {
  Container c = load_container(prefix);
  if (c.meta.empty()) throw std::runtime_error("load_model: checkpoint has no config metadata");
  ModelConfig cfg = ModelConfig::from_json(c.meta);
  FusionModel m(cfg, 0);
  for (auto& p : m.parameters()) {
    const ContainerEntry* e = c.find(p.name);
    if (!e) throw std::runtime_error("load_model: missing parameter " + p.name);
    if (e->shape != p.value.shape)
      throw std::runtime_error("load_model: shape mismatch for " + p.name + ": checkpoint " +
                               shape_str(e->shape) + " vs model " + shape_str(p.value.shape));
    *p.value.data = e->values;
  }
  for (std::size_t i = 0; i < cfg.audio_channels.size(); ++i) {
    for (const char* bn : {"bn2", "bn3"}) {
      const std::string name = "audio.block" + std::to_string(i) + "." + bn;
      auto* state = m.find_batch_norm(name);
      const ContainerEntry* mean = c.find(name + ".running_mean");
      const ContainerEntry* var = c.find(name + ".running_var");
      if (state && mean && var) {
        state->running_mean = mean->values;
        state->running_var = var->values;
        state->has_stats = true;
      }
    }
  }
  return m;
}

std::string generate(FusionModel& m, const text::Vocabulary& vocab, const std::string& lyrics,
                     const Tensor* mel, const GenerateOptions& opts) {
  if (opts.max_new <= 0)
    throw std::invalid_argument("generate: max_new must be positive, got " +
                                std::to_string(opts.max_new));
  NoGradGuard ng;
  const EncodedRow src = vocab.encode(lyrics, m.config().max_source_len);
  Tensor z_m;
  if (mel) z_m = m.audio_encoder_forward(*mel, /*train=*/false);
  const Tensor memory = m.encode(src, mel ? &z_m : nullptr);

  const LogitsFn fn = [&](const std::vector<TokenId>& prefix) {
    NoGradGuard inner;
    Tensor logits = m.decoder_logits(prefix, memory, src.mask);
    const std::size_t v = logits.shape[1];
    const std::size_t last = (logits.shape[0] - 1) * v;
    std::vector<double> row(v);
    for (std::size_t i = 0; i < v; ++i) row[i] = static_cast<double>((*logits.data)[last + i]);
    // non-lexical specials never decode; eos waits for min_new tokens
    const double neg_inf = -std::numeric_limits<double>::infinity();
    row[text::Vocabulary::kPad] = neg_inf;
    row[text::Vocabulary::kBos] = neg_inf;
    row[text::Vocabulary::kUnk] = neg_inf;
    if (static_cast<long>(prefix.size()) - 1 < opts.min_new)
      row[text::Vocabulary::kEos] = neg_inf;
    return row;
  };

  // leave room for bos inside the positional table
  const std::size_t cap = std::min<std::size_t>(static_cast<std::size_t>(opts.max_new),
                                                m.config().max_target_len - 1);
  std::vector<TokenId> out;
  if (opts.mode == DecodeMode::greedy) {
    out = greedy_decode(fn, text::Vocabulary::kBos, text::Vocabulary::kEos, cap);
  } else {
    out = beam_decode(fn, text::Vocabulary::kBos, text::Vocabulary::kEos, cap, opts.beam_width,
                      opts.length_power);
  }
  return vocab.decode(out);
}

std::vector<float> encode_text_embedding(const FusionModel& m, const text::Vocabulary& vocab,
                                         const std::string& text) {
  NoGradGuard ng;
  const EncodedRow src = vocab.encode(text, m.config().max_source_len);
  const Tensor h = m.encode(src, nullptr);
  return masked_mean_rows(h, src.mask);
}

}  // namespace melfuse::model
