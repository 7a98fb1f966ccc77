#pragma once

// The fusion network: token embedding + learned positions, post-LN
// transformer encoder/decoder, CNN + self-attention audio encoder, and a
// cross-modal attention module whose output is added to the text hidden
// state at the last fuse_last_k encoder layers. With the output projection
// of the cross-modal module at zero the network computes exactly the
// text-only model, whatever the audio input.

#include <optional>

#include "melfuse/bpe.hpp"
#include "melfuse/ops.hpp"

namespace melfuse::model {

using text::EncodedRow;
using text::TokenId;

struct ModelConfig {
  std::size_t d_t = 64;
  std::size_t n_enc = 2;
  std::size_t n_dec = 2;
  std::size_t n_heads = 2;
  std::size_t d_ffn = 128;
  std::size_t d_a = 64;  // total self-attention width across heads
  std::size_t vocab_size = 0;
  std::size_t max_source_len = 128;
  std::size_t max_target_len = 128;

  // audio encoder: residual conv blocks then transformer layers at width d_m
  std::size_t n_mels = 128;
  std::vector<std::size_t> audio_channels = {8, 8, 16, 16, 16, 16, 16};
  std::vector<std::pair<std::size_t, std::size_t>> audio_strides = {
      {2, 2}, {2, 2}, {2, 2}, {2, 1}, {2, 1}, {2, 1}, {2, 1}};
  std::size_t n_audio_tx = 1;
  std::size_t audio_heads = 2;

  // cross-modal fusion
  std::size_t d_cross = 32;  // attention width of the cross-modal module
  std::size_t cma_heads = 1;
  std::size_t fuse_last_k = 1;

  std::size_t d_m() const { return audio_channels.back(); }
  std::size_t audio_seq_len(std::size_t mel_frames) const;
  void validate() const;

  static ModelConfig toy(std::size_t vocab);
  static ModelConfig paper(std::size_t vocab);
  static ModelConfig profile(const std::string& name, std::size_t vocab);

  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);

  bool operator==(const ModelConfig&) const = default;
};

// Test hook: when enabled, attention row sums are recorded so attention
// normalization can be asserted end to end.
struct AttentionProbe {
  static bool& enabled() {
    thread_local bool on = false;
    return on;
  }
  static std::vector<double>& row_sums() {
    thread_local std::vector<double> sums;
    return sums;
  }
};

template <class T>
struct AttentionParamsT {
  TensorT<T> wq, wk, wv, wo;
};

template <class T>
struct LayerNormParamsT {
  TensorT<T> gamma, beta;
};

template <class T>
struct FfnParamsT {
  TensorT<T> w1, b1, w2, b2;
};

template <class T>
struct EncoderLayerParamsT {
  AttentionParamsT<T> sa;
  LayerNormParamsT<T> ln1;
  FfnParamsT<T> ffn;
  LayerNormParamsT<T> ln2;
};

template <class T>
struct DecoderLayerParamsT {
  AttentionParamsT<T> sa;
  LayerNormParamsT<T> ln1;
  AttentionParamsT<T> cross;
  LayerNormParamsT<T> ln2;
  FfnParamsT<T> ffn;
  LayerNormParamsT<T> ln3;
};

template <class T>
struct ConvBlockParamsT {
  TensorT<T> k1, k2, k3;  // 3x3 kernels; k1/k3 carry the stride
  BatchNormStateT<T> bn2, bn3;
};

// Scaled dot-product multi-head attention, queries from q_in, keys/values
// from kv_in. key_mask marks admissible keys; causal restricts position i
// to keys <= i.
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& q_in, const TensorT<T>& kv_in,
                                const AttentionParamsT<T>& p, std::size_t n_heads,
                                const std::vector<std::uint8_t>* key_mask, bool causal) {
  const std::size_t lq = q_in.shape[0], lk = kv_in.shape[0];
  if (lk == 0) throw std::invalid_argument("attention: empty key/value sequence");
  if (key_mask && key_mask->size() != lk)
    throw std::invalid_argument("attention: key mask length mismatch");
  const std::size_t d_attn = p.wq.shape[1];
  const std::size_t d_head = d_attn / n_heads;

  TensorT<T> q = matmul(q_in, p.wq);
  TensorT<T> k = matmul(kv_in, p.wk);
  TensorT<T> v = matmul(kv_in, p.wv);

  // additive mask shared by every head; -inf excludes a key
  TensorT<T> bias;
  const bool need_bias = key_mask != nullptr || causal;
  if (need_bias) {
    bias = TensorT<T>::zeros({lq, lk});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t j = 0; j < lk; ++j) {
        const bool masked = (key_mask && !(*key_mask)[j]) || (causal && j > i);
        if (masked) (*bias.data)[i * lk + j] = neg_inf;
      }
  }

  const T scaling = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_head)));
  std::vector<TensorT<T>> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    TensorT<T> qh = slice_cols(q, h * d_head, d_head);
    TensorT<T> kh = slice_cols(k, h * d_head, d_head);
    TensorT<T> vh = slice_cols(v, h * d_head, d_head);
    TensorT<T> scores = scale(matmul(qh, transpose2d(kh)), scaling);
    if (need_bias) scores = add(scores, bias);
    TensorT<T> attn = softmax(scores, 1);
    if (AttentionProbe::enabled()) {
      for (std::size_t i = 0; i < lq; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < lk; ++j) s += static_cast<double>((*attn.data)[i * lk + j]);
        AttentionProbe::row_sums().push_back(s);
      }
    }
    heads.push_back(matmul(attn, vh));
  }
  TensorT<T> concat = n_heads == 1 ? heads[0] : concat_cols(heads);
  return matmul(concat, p.wo);
}

template <class T>
TensorT<T> ffn_forward(const TensorT<T>& x, const FfnParamsT<T>& p) {
  return linear(gelu(linear(x, p.w1, &p.b1)), p.w2, &p.b2);
}

// Post-LN ordering exactly as the residual equations read:
// h1 = LN(SA(h) Wo + h); out = LN(FFN(h1) + h1).
template <class T>
TensorT<T> encoder_layer_forward(const TensorT<T>& h, const EncoderLayerParamsT<T>& p,
                                 std::size_t n_heads, const std::vector<std::uint8_t>* key_mask) {
  if (key_mask) {
    bool any = false;
    for (auto m : *key_mask) any = any || m;
    if (!any) throw std::invalid_argument("encoder_layer: mask excludes every position");
  }
  TensorT<T> att = multi_head_attention(h, h, p.sa, n_heads, key_mask, false);
  TensorT<T> h1 = layer_norm(add(att, h), p.ln1.gamma, p.ln1.beta);
  return layer_norm(add(ffn_forward(h1, p.ffn), h1), p.ln2.gamma, p.ln2.beta);
}

template <class T>
class FusionModelT {
 public:
  FusionModelT(ModelConfig cfg, std::uint64_t seed);
  FusionModelT(const FusionModelT&) = delete;
  FusionModelT& operator=(const FusionModelT&) = delete;
  FusionModelT(FusionModelT&&) noexcept = default;
  FusionModelT& operator=(FusionModelT&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  std::vector<ParameterT<T>>& parameters() { return params_; }
  const std::vector<ParameterT<T>>& parameters() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  // CNN blocks then audio transformer layers; [n_mels x frames] -> [L_m x d_m].
  TensorT<T> audio_encoder_forward(const TensorT<T>& mel, bool train);

  // Domain-adapted audio representation for one text state: [L_t x d_t].
  TensorT<T> cross_modal_attention(const TensorT<T>& h_t, const TensorT<T>& z_m) const;

  // H0 = token embedding + positional rows (encoder side).
  TensorT<T> embed_tokens(const std::vector<TokenId>& ids) const;

  // Full encoder stack; audio fuses into the inputs of the last fuse_last_k
  // layers. layer_outputs, when given, receives every layer's output.
  TensorT<T> encode(const EncodedRow& src, const TensorT<T>* z_m,
                    std::vector<TensorT<T>>* layer_outputs = nullptr) const;

  // Causal decoder over an unpadded target prefix against encoder memory.
  // Returns vocabulary logits [len(target) x V], tied to the embedding.
  TensorT<T> decoder_logits(const std::vector<TokenId>& target,
                            const TensorT<T>& memory,
                            const std::vector<std::uint8_t>& memory_mask) const;

  BatchNormStateT<T>* find_batch_norm(const std::string& name);

  AttentionParamsT<T>& cross_modal_params() { return cma_; }

 private:
  TensorT<T> register_param(const std::string& name, TensorT<T> t) {
    params_.push_back({name, t});
    return t;
  }
  AttentionParamsT<T> make_attention(const std::string& prefix, std::size_t d_in_q,
                                     std::size_t d_in_kv, std::size_t d_attn, std::size_t d_out,
                                     Rng& rng, bool zero_out_proj = false);
  LayerNormParamsT<T> make_layer_norm(const std::string& prefix, std::size_t d);
  FfnParamsT<T> make_ffn(const std::string& prefix, std::size_t d, std::size_t hidden, Rng& rng);

  ModelConfig cfg_;
  TensorT<T> tok_embedding_;  // [V x d_t], also the tied output projection
  TensorT<T> pos_encoder_;    // [max_source_len x d_t]
  TensorT<T> pos_decoder_;    // [max_target_len x d_t]
  std::vector<EncoderLayerParamsT<T>> enc_layers_;
  std::vector<DecoderLayerParamsT<T>> dec_layers_;
  std::vector<ConvBlockParamsT<T>> conv_blocks_;
  std::vector<EncoderLayerParamsT<T>> audio_tx_;
  AttentionParamsT<T> cma_;
  std::vector<ParameterT<T>> params_;
  std::vector<std::pair<std::string, BatchNormStateT<T>*>> batch_norms_;
};

template <class T>
FusionModelT<T>::FusionModelT(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  constexpr double kInitStd = 0.02;

  tok_embedding_ = register_param(
      "tok_embedding", TensorT<T>::randn({cfg_.vocab_size, cfg_.d_t}, rng, kInitStd, true));
  pos_encoder_ = register_param(
      "pos_encoder", TensorT<T>::randn({cfg_.max_source_len, cfg_.d_t}, rng, kInitStd, true));
  pos_decoder_ = register_param(
      "pos_decoder", TensorT<T>::randn({cfg_.max_target_len, cfg_.d_t}, rng, kInitStd, true));

  for (std::size_t i = 0; i < cfg_.n_enc; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    EncoderLayerParamsT<T> layer;
    layer.sa = make_attention(p + ".sa", cfg_.d_t, cfg_.d_t, cfg_.d_a, cfg_.d_t, rng);
    layer.ln1 = make_layer_norm(p + ".ln1", cfg_.d_t);
    layer.ffn = make_ffn(p + ".ffn", cfg_.d_t, cfg_.d_ffn, rng);
    layer.ln2 = make_layer_norm(p + ".ln2", cfg_.d_t);
    enc_layers_.push_back(std::move(layer));
  }

  for (std::size_t i = 0; i < cfg_.n_dec; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    DecoderLayerParamsT<T> layer;
    layer.sa = make_attention(p + ".sa", cfg_.d_t, cfg_.d_t, cfg_.d_a, cfg_.d_t, rng);
    layer.ln1 = make_layer_norm(p + ".ln1", cfg_.d_t);
    layer.cross = make_attention(p + ".cross", cfg_.d_t, cfg_.d_t, cfg_.d_a, cfg_.d_t, rng);
    layer.ln2 = make_layer_norm(p + ".ln2", cfg_.d_t);
    layer.ffn = make_ffn(p + ".ffn", cfg_.d_t, cfg_.d_ffn, rng);
    layer.ln3 = make_layer_norm(p + ".ln3", cfg_.d_t);
    dec_layers_.push_back(std::move(layer));
  }

  conv_blocks_.reserve(cfg_.audio_channels.size());
  std::size_t cin = 1;
  for (std::size_t i = 0; i < cfg_.audio_channels.size(); ++i) {
    const std::size_t cout = cfg_.audio_channels[i];
    const std::string p = "audio.block" + std::to_string(i);
    ConvBlockParamsT<T> block;
    block.k1 = register_param(p + ".k1", TensorT<T>::randn({cout, cin, 3, 3}, rng, kInitStd, true));
    block.k2 = register_param(p + ".k2", TensorT<T>::randn({cout, cout, 3, 3}, rng, kInitStd, true));
    block.k3 = register_param(p + ".k3", TensorT<T>::randn({cout, cin, 3, 3}, rng, kInitStd, true));
    block.bn2 = BatchNormStateT<T>::init(cout);
    block.bn3 = BatchNormStateT<T>::init(cout);
    register_param(p + ".bn2.gamma", block.bn2.gamma);
    register_param(p + ".bn2.beta", block.bn2.beta);
    register_param(p + ".bn3.gamma", block.bn3.gamma);
    register_param(p + ".bn3.beta", block.bn3.beta);
    conv_blocks_.push_back(std::move(block));
    cin = cout;
  }
  for (auto& b : conv_blocks_) {
    const std::string p = "audio.block" + std::to_string(&b - conv_blocks_.data());
    batch_norms_.emplace_back(p + ".bn2", &b.bn2);
    batch_norms_.emplace_back(p + ".bn3", &b.bn3);
  }

  const std::size_t d_m = cfg_.d_m();
  for (std::size_t i = 0; i < cfg_.n_audio_tx; ++i) {
    const std::string p = "audio.tx" + std::to_string(i);
    EncoderLayerParamsT<T> layer;
    layer.sa = make_attention(p + ".sa", d_m, d_m, d_m, d_m, rng);
    layer.ln1 = make_layer_norm(p + ".ln1", d_m);
    layer.ffn = make_ffn(p + ".ffn", d_m, 4 * d_m, rng);
    layer.ln2 = make_layer_norm(p + ".ln2", d_m);
    audio_tx_.push_back(std::move(layer));
  }

  // zero output projection keeps the fused model identical to the text-only
  // model at initialization
  cma_ = make_attention("cma", cfg_.d_t, d_m, cfg_.d_cross, cfg_.d_t, rng,
                        /*zero_out_proj=*/true);
}

template <class T>
AttentionParamsT<T> FusionModelT<T>::make_attention(const std::string& prefix, std::size_t d_in_q,
                                                    std::size_t d_in_kv, std::size_t d_attn,
                                                    std::size_t d_out, Rng& rng,
                                                    bool zero_out_proj) {
  constexpr double kInitStd = 0.02;
  AttentionParamsT<T> p;
  p.wq = register_param(prefix + ".wq", TensorT<T>::randn({d_in_q, d_attn}, rng, kInitStd, true));
  p.wk = register_param(prefix + ".wk", TensorT<T>::randn({d_in_kv, d_attn}, rng, kInitStd, true));
  p.wv = register_param(prefix + ".wv", TensorT<T>::randn({d_in_kv, d_attn}, rng, kInitStd, true));
  p.wo = register_param(prefix + ".wo",
                        zero_out_proj ? TensorT<T>::zeros({d_attn, d_out}, true)
                                      : TensorT<T>::randn({d_attn, d_out}, rng, kInitStd, true));
  return p;
}

template <class T>
LayerNormParamsT<T> FusionModelT<T>::make_layer_norm(const std::string& prefix, std::size_t d) {
  LayerNormParamsT<T> p;
  p.gamma = register_param(prefix + ".gamma", TensorT<T>::full({d}, T(1), true));
  p.beta = register_param(prefix + ".beta", TensorT<T>::zeros({d}, true));
  return p;
}

template <class T>
FfnParamsT<T> FusionModelT<T>::make_ffn(const std::string& prefix, std::size_t d,
                                        std::size_t hidden, Rng& rng) {
  constexpr double kInitStd = 0.02;
  FfnParamsT<T> p;
  p.w1 = register_param(prefix + ".w1", TensorT<T>::randn({d, hidden}, rng, kInitStd, true));
  p.b1 = register_param(prefix + ".b1", TensorT<T>::zeros({hidden}, true));
  p.w2 = register_param(prefix + ".w2", TensorT<T>::randn({hidden, d}, rng, kInitStd, true));
  p.b2 = register_param(prefix + ".b2", TensorT<T>::zeros({d}, true));
  return p;
}

template <class T>
BatchNormStateT<T>* FusionModelT<T>::find_batch_norm(const std::string& name) {
  for (auto& [n, bn] : batch_norms_)
    if (n == name) return bn;
  return nullptr;
}

template <class T>
TensorT<T> FusionModelT<T>::audio_encoder_forward(const TensorT<T>& mel, bool train) {
  if (mel.ndim() != 2 || mel.shape[0] != cfg_.n_mels)
    throw std::invalid_argument("audio_encoder: expected [" + std::to_string(cfg_.n_mels) +
                                " x frames] mel input, got " + shape_str(mel.shape));
  const BatchNormMode mode = train ? BatchNormMode::train : BatchNormMode::infer;
  TensorT<T> x = reshape(mel, {1, 1, mel.shape[0], mel.shape[1]});
  for (std::size_t i = 0; i < conv_blocks_.size(); ++i) {
    auto& b = conv_blocks_[i];
    const auto [sf, st] = cfg_.audio_strides[i];
    TensorT<T> main = conv2d(relu(conv2d(x, b.k1, sf, st)), b.k2, 1, 1);
    TensorT<T> tilde = batch_norm(main, b.bn2, mode);
    TensorT<T> shortcut = batch_norm(conv2d(x, b.k3, sf, st), b.bn3, mode);
    x = add(tilde, shortcut);
  }
  // [1 x d_m x 1 x L_m] -> sequence [L_m x d_m]
  const std::size_t d_m = cfg_.d_m();
  const std::size_t l_m = x.shape[3];
  TensorT<T> seq = transpose2d(reshape(x, {d_m, l_m}));
  for (const auto& layer : audio_tx_)
    seq = encoder_layer_forward(seq, layer, cfg_.audio_heads, nullptr);
  return seq;
}

template <class T>
TensorT<T> FusionModelT<T>::cross_modal_attention(const TensorT<T>& h_t,
                                                  const TensorT<T>& z_m) const {
  if (z_m.ndim() != 2 || z_m.shape[0] == 0)
    throw std::invalid_argument("cross_modal_attention: empty audio representation");
  return multi_head_attention(h_t, z_m, cma_, cfg_.cma_heads, nullptr, false);
}

template <class T>
TensorT<T> FusionModelT<T>::embed_tokens(const std::vector<TokenId>& ids) const {
  if (ids.size() > cfg_.max_source_len)
    throw std::invalid_argument("embed_tokens: sequence of " + std::to_string(ids.size()) +
                                " exceeds " + std::to_string(cfg_.max_source_len) + " positions");
  TensorT<T> emb = embedding_lookup(tok_embedding_, ids);
  TensorT<T> pos = slice_rows(pos_encoder_, 0, ids.size());
  return add(emb, pos);
}

template <class T>
TensorT<T> FusionModelT<T>::encode(const EncodedRow& src, const TensorT<T>* z_m,
                                   std::vector<TensorT<T>>* layer_outputs) const {
  if (src.ids.empty()) throw std::invalid_argument("encode: empty input");
  TensorT<T> h = embed_tokens(src.ids);
  for (std::size_t i = 0; i < cfg_.n_enc; ++i) {
    TensorT<T> layer_in = h;
    const bool fused_layer = z_m != nullptr && i + cfg_.fuse_last_k >= cfg_.n_enc;
    if (fused_layer) layer_in = add(h, cross_modal_attention(h, *z_m));
    h = encoder_layer_forward(layer_in, enc_layers_[i], cfg_.n_heads, &src.mask);
    if (layer_outputs) layer_outputs->push_back(h);
  }
  return h;
}

template <class T>
TensorT<T> FusionModelT<T>::decoder_logits(const std::vector<TokenId>& target,
                                           const TensorT<T>& memory,
                                           const std::vector<std::uint8_t>& memory_mask) const {
  if (target.empty()) throw std::invalid_argument("decoder_logits: empty target");
  if (target.size() > cfg_.max_target_len)
    throw std::invalid_argument("decoder_logits: target of " + std::to_string(target.size()) +
                                " exceeds " + std::to_string(cfg_.max_target_len) + " positions");
  TensorT<T> h = add(embedding_lookup(tok_embedding_, target),
                     slice_rows(pos_decoder_, 0, target.size()));
  for (const auto& layer : dec_layers_) {
    TensorT<T> att = multi_head_attention(h, h, layer.sa, cfg_.n_heads, nullptr, true);
    h = layer_norm(add(att, h), layer.ln1.gamma, layer.ln1.beta);
    TensorT<T> xa = multi_head_attention(h, memory, layer.cross, cfg_.n_heads, &memory_mask, false);
    h = layer_norm(add(xa, h), layer.ln2.gamma, layer.ln2.beta);
    h = layer_norm(add(ffn_forward(h, layer.ffn), h), layer.ln3.gamma, layer.ln3.beta);
  }
  return matmul(h, transpose2d(tok_embedding_));
}

using FusionModel = FusionModelT<float>;

}  // namespace melfuse::model
