#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "melfuse/gradcheck.hpp"
#include "melfuse/model_io.hpp"

using namespace melfuse;
using namespace melfuse::model;
using melfuse::text::EncodedRow;
using melfuse::text::TokenId;

namespace {

// ---- scalar reference implementations (independent of the tensor engine) --

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.shape[0], std::vector<double>(t.shape[1]));
  for (std::size_t i = 0; i < t.shape[0]; ++i)
    for (std::size_t j = 0; j < t.shape[1]; ++j) m[i][j] = (*t.data)[i * t.shape[1] + j];
  return m;
}

Mat ref_matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

std::vector<double> ref_softmax(const std::vector<double>& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> out(row.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> ref_layer_norm_row(const std::vector<double>& row,
                                       const std::vector<double>& gamma,
                                       const std::vector<double>& beta, double eps = 1e-5) {
  double mu = 0.0;
  for (double v : row) mu += v;
  mu /= static_cast<double>(row.size());
  double var = 0.0;
  for (double v : row) var += (v - mu) * (v - mu);
  var /= static_cast<double>(row.size());
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j)
    out[j] = gamma[j] * ((row[j] - mu) / std::sqrt(var + eps)) + beta[j];
  return out;
}

double ref_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// step-by-step multi-head attention, queries from q_in, keys/values from kv_in
Mat ref_attention(const Mat& q_in, const Mat& kv_in, const Mat& wq, const Mat& wk, const Mat& wv,
                  const Mat& wo, std::size_t heads, bool causal,
                  const std::vector<std::uint8_t>* key_mask) {
  const Mat q = ref_matmul(q_in, wq), k = ref_matmul(kv_in, wk), v = ref_matmul(kv_in, wv);
  const std::size_t d_attn = wq[0].size(), dh = d_attn / heads;
  Mat concat(q.size(), std::vector<double>(d_attn, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> scores(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        scores[j] = dot / std::sqrt(static_cast<double>(dh));
        if ((causal && j > i) || (key_mask && !(*key_mask)[j]))
          scores[j] = -std::numeric_limits<double>::infinity();
      }
      const std::vector<double> attn = ref_softmax(scores);
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k.size(); ++j) acc += attn[j] * v[j][h * dh + c];
        concat[i][h * dh + c] = acc;
      }
    }
  }
  return ref_matmul(concat, wo);
}

Mat ref_ffn(const Mat& x, const Mat& w1, const std::vector<double>& b1, const Mat& w2,
            const std::vector<double>& b2) {
  Mat h = ref_matmul(x, w1);
  for (auto& row : h)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = ref_gelu(row[j] + b1[j]);
  Mat y = ref_matmul(h, w2);
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b2[j];
  return y;
}

const Tensor& param(const FusionModel& m, const std::string& name) {
  for (const auto& p : m.parameters())
    if (p.name == name) return p.value;
  throw std::runtime_error("no parameter " + name);
}

std::vector<double> vec_of(const Tensor& t) {
  return std::vector<double>(t.data->begin(), t.data->end());
}

ModelConfig tiny_config(std::size_t vocab = 13) {
  ModelConfig c;
  c.d_t = 6;
  c.n_enc = 2;
  c.n_dec = 1;
  c.n_heads = 2;
  c.d_ffn = 8;
  c.d_a = 6;
  c.vocab_size = vocab;
  c.max_source_len = 8;
  c.max_target_len = 8;
  c.n_mels = 4;
  c.audio_channels = {2, 2};
  c.audio_strides = {{2, 1}, {2, 1}};
  c.n_audio_tx = 1;
  c.audio_heads = 1;
  c.d_cross = 4;
  c.cma_heads = 1;
  c.fuse_last_k = 1;
  return c;
}

EncodedRow make_row(std::vector<TokenId> ids) {
  EncodedRow r;
  r.mask.assign(ids.size(), 1);
  r.ids = std::move(ids);
  return r;
}

template <class T>
bool bitwise_equal(const TensorT<T>& a, const TensorT<T>& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data->data(), b.data->data(), a.numel() * sizeof(T)) == 0;
}

void randomize(const Tensor& t, Rng& rng, double std = 0.05) {
  for (auto& v : *t.data) v = static_cast<float>(rng.normal() * std);
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("config validation rejects bad fusion depth and stride tables") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.fuse_last_k = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.audio_strides = {{2, 1}};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.audio_strides = {{2, 1}, {1, 1}};  // mel axis no longer collapses
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  CHECK(c.audio_seq_len(5) == 5);
  CHECK(ModelConfig::paper(100).audio_seq_len(1874) == 235);
}

TEST_CASE("config json round trip") {
  const ModelConfig c = ModelConfig::paper(50000);
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back == c);
  CHECK_THROWS_AS(ModelConfig::profile("huge", 100), std::invalid_argument);
}

TEST_CASE("embed_tokens adds token and positional rows") {
  FusionModel m(tiny_config(), 5);
  const Tensor& emb = param(m, "tok_embedding");
  const Tensor& pos = param(m, "pos_encoder");

  // zero embedding table -> output equals positional rows
  std::vector<float> emb_saved = *emb.data;
  std::fill(emb.data->begin(), emb.data->end(), 0.0f);
  Tensor h = m.embed_tokens({3, 7});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(h[i * 6 + j] == (*pos.data)[i * 6 + j]);
  *emb.data = emb_saved;

  // zero positional table -> output equals token embeddings
  std::vector<float> pos_saved = *pos.data;
  std::fill(pos.data->begin(), pos.data->end(), 0.0f);
  Tensor h2 = m.embed_tokens({3});
  for (std::size_t j = 0; j < 6; ++j) CHECK(h2[j] == (*emb.data)[3 * 6 + j]);
  *pos.data = pos_saved;

  // both nonzero: elementwise sum
  Tensor h3 = m.embed_tokens({9});
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(h3[j] == doctest::Approx((*emb.data)[9 * 6 + j] + (*pos.data)[j]));

  CHECK_THROWS_AS(m.embed_tokens(std::vector<TokenId>(9, 1)), std::invalid_argument);
}

TEST_CASE("encoder stack: shape, post-LN statistics, masked rows rejected") {
  FusionModel m(tiny_config(), 6);
  EncodedRow row = make_row({1, 5, 6, 7, 2});
  NoGradGuard ng;
  Tensor out = m.encode(row, nullptr);
  CHECK(out.shape == Shape{5, 6});

  // gamma=1, beta=0 at init, so output rows sit at mean 0, variance 1
  for (std::size_t i = 0; i < 5; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 6; ++j) mu += out[i * 6 + j];
    mu /= 6.0;
    for (std::size_t j = 0; j < 6; ++j) var += (out[i * 6 + j] - mu) * (out[i * 6 + j] - mu);
    var /= 6.0;
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-2);
  }

  EncodedRow dead = make_row({1, 2});
  dead.mask = {0, 0};
  CHECK_THROWS_AS(m.encode(dead, nullptr), std::invalid_argument);
}

TEST_CASE("encoder layer matches a step-by-step scalar recomputation") {
  ModelConfig c = tiny_config();
  c.n_enc = 1;
  c.n_heads = 1;
  FusionModel m(c, 42);
  Rng rng(1234);
  for (auto& p : m.parameters()) randomize(p.value, rng, 0.3);

  EncodedRow row = make_row({1, 6, 2});
  NoGradGuard ng;
  Tensor out = m.encode(row, nullptr);

  const Mat emb = to_mat(param(m, "tok_embedding"));
  const Mat pos = to_mat(param(m, "pos_encoder"));
  Mat h(3, std::vector<double>(6));
  const std::vector<TokenId> ids = {1, 6, 2};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      h[i][j] = emb[static_cast<std::size_t>(ids[i])][j] + pos[i][j];

  const Mat att = ref_attention(h, h, to_mat(param(m, "encoder.0.sa.wq")),
                                to_mat(param(m, "encoder.0.sa.wk")),
                                to_mat(param(m, "encoder.0.sa.wv")),
                                to_mat(param(m, "encoder.0.sa.wo")), 1, false, &row.mask);
  Mat h1(3, std::vector<double>(6));
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> summed(6);
    for (std::size_t j = 0; j < 6; ++j) summed[j] = att[i][j] + h[i][j];
    h1[i] = ref_layer_norm_row(summed, vec_of(param(m, "encoder.0.ln1.gamma")),
                               vec_of(param(m, "encoder.0.ln1.beta")));
  }
  const Mat ff = ref_ffn(h1, to_mat(param(m, "encoder.0.ffn.w1")),
                         vec_of(param(m, "encoder.0.ffn.b1")),
                         to_mat(param(m, "encoder.0.ffn.w2")),
                         vec_of(param(m, "encoder.0.ffn.b2")));
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> summed(6);
    for (std::size_t j = 0; j < 6; ++j) summed[j] = ff[i][j] + h1[i][j];
    const std::vector<double> expect =
        ref_layer_norm_row(summed, vec_of(param(m, "encoder.0.ln2.gamma")),
                           vec_of(param(m, "encoder.0.ln2.beta")));
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(out[i * 6 + j] == doctest::Approx(expect[j]).epsilon(1e-5));
  }
}

TEST_CASE("audio encoder: shape chain, infer determinism, band-count guard") {
  FusionModel m(tiny_config(), 7);
  Rng rng(55);
  NoGradGuard ng;
  Tensor mel = Tensor::randn({4, 5}, rng, 1.0);

  Tensor z = m.audio_encoder_forward(mel, false);
  CHECK(z.shape == Shape{5, 2});  // time strides are 1, freq collapses 4->1

  Tensor z2 = m.audio_encoder_forward(mel, false);
  CHECK(bitwise_equal(z, z2));

  Tensor bad = Tensor::zeros({3, 5});
  CHECK_THROWS_AS(m.audio_encoder_forward(bad, false), std::invalid_argument);
}

TEST_CASE("encoder output shape is independent of the audio length") {
  FusionModel m(tiny_config(), 21);
  Rng rng(3);
  randomize(m.cross_modal_params().wo, rng, 0.2);
  EncodedRow row = make_row({1, 5, 9, 2});
  NoGradGuard ng;
  for (std::size_t frames : {3, 7, 19}) {
    Tensor mel = Tensor::randn({4, frames}, rng, 1.0);
    Tensor z = m.audio_encoder_forward(mel, false);
    CHECK(z.shape[0] == frames);  // toy strides keep time untouched
    Tensor out = m.encode(row, &z);
    CHECK(out.shape == Shape{4, 6});
  }
}

TEST_CASE("conv block with zero main path reduces to the shortcut") {
  using DM = FusionModelT<double>;
  ModelConfig c = tiny_config();
  c.audio_channels = {2};
  c.audio_strides = {{4, 1}};
  c.n_audio_tx = 0;
  DM m(c, 8);
  const TensorT<double>* k3 = nullptr;
  for (const auto& p : m.parameters()) {
    if (p.name == "audio.block0.k1" || p.name == "audio.block0.k2")
      std::fill(p.value.data->begin(), p.value.data->end(), 0.0);
    if (p.name == "audio.block0.k3") k3 = &p.value;
  }
  REQUIRE(k3 != nullptr);

  Rng rng(9);
  TensorT<double> mel = TensorT<double>::randn({4, 5}, rng, 1.0);
  TensorT<double> z = m.audio_encoder_forward(mel, true);

  // shortcut computed by hand: BN(CNN3(input)) through a fresh BN state
  NoGradGuard ng;
  TensorT<double> x = reshape(mel, {1, 1, 4, 5});
  auto bn = BatchNormStateT<double>::init(2, false);
  TensorT<double> shortcut = batch_norm(conv2d(x, *k3, 4, 1), bn, BatchNormMode::train);
  TensorT<double> expected = transpose2d(reshape(shortcut, {2, 5}));
  REQUIRE(z.shape == expected.shape);
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z[i] == doctest::Approx(expected[i]));
}

TEST_CASE("cross-modal attention: zero projection, uniform values, scalar oracle") {
  FusionModel m(tiny_config(), 11);
  Rng rng(70);
  NoGradGuard ng;
  Tensor h = Tensor::randn({3, 6}, rng, 1.0);

  // the output projection starts at zero: output must be exactly zero
  Tensor z = Tensor::randn({4, 2}, rng, 1.0);
  Tensor out = m.cross_modal_attention(h, z);
  CHECK(out.shape == Shape{3, 6});
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0f);

  Tensor empty = Tensor::zeros({0, 2});
  CHECK_THROWS_AS(m.cross_modal_attention(h, empty), std::invalid_argument);

  // identical value rows: every query yields the same output row
  randomize(m.cross_modal_params().wo, rng, 0.3);
  Tensor zsame = Tensor::zeros({4, 2});
  for (std::size_t j = 0; j < 4; ++j) {
    (*zsame.data)[j * 2] = 0.8f;
    (*zsame.data)[j * 2 + 1] = -0.3f;
  }
  Tensor out2 = m.cross_modal_attention(h, zsame);
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(out2[i * 6 + j] == doctest::Approx(out2[j]).epsilon(1e-5));

  // hand-seeded scalar recomputation
  Tensor z3 = Tensor::randn({3, 2}, rng, 0.7);
  Tensor out3 = m.cross_modal_attention(h, z3);
  const Mat ref = ref_attention(to_mat(h), to_mat(z3), to_mat(param(m, "cma.wq")),
                                to_mat(param(m, "cma.wk")), to_mat(param(m, "cma.wv")),
                                to_mat(param(m, "cma.wo")), 1, false, nullptr);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(out3[i * 6 + j] == doctest::Approx(ref[i][j]).epsilon(1e-5));
}

TEST_CASE("baseline equivalence: zero fusion projection reproduces the text-only model") {
  FusionModel m(tiny_config(), 13);
  Rng rng(30);
  NoGradGuard ng;
  for (int trial = 0; trial < 5; ++trial) {
    EncodedRow row = make_row({1, static_cast<TokenId>(5 + trial), 9, 2});
    Tensor mel = Tensor::randn({4, 5}, rng, 1.0);
    Tensor z = m.audio_encoder_forward(mel, false);
    Tensor fused = m.encode(row, &z);
    Tensor plain = m.encode(row, nullptr);
    CHECK(bitwise_equal(fused, plain));

    Tensor logits_f = m.decoder_logits({1, 5}, fused, row.mask);
    Tensor logits_p = m.decoder_logits({1, 5}, plain, row.mask);
    CHECK(bitwise_equal(logits_f, logits_p));
  }
}

TEST_CASE("fusion locality: audio perturbs only the last fuse_last_k layers") {
  ModelConfig c = tiny_config();
  c.n_enc = 4;
  c.fuse_last_k = 2;
  FusionModel m(c, 17);
  Rng rng(31);
  randomize(m.cross_modal_params().wo, rng, 0.3);  // make fusion active

  EncodedRow row = make_row({1, 5, 6, 2});
  NoGradGuard ng;
  Tensor mel_a = Tensor::randn({4, 5}, rng, 1.0);
  Tensor mel_b = Tensor::randn({4, 5}, rng, 1.0);
  Tensor za = m.audio_encoder_forward(mel_a, false);
  Tensor zb = m.audio_encoder_forward(mel_b, false);

  std::vector<Tensor> trace_a, trace_b;
  m.encode(row, &za, &trace_a);
  m.encode(row, &zb, &trace_b);
  REQUIRE(trace_a.size() == 4);
  CHECK(bitwise_equal(trace_a[0], trace_b[0]));
  CHECK(bitwise_equal(trace_a[1], trace_b[1]));
  CHECK(!bitwise_equal(trace_a[2], trace_b[2]));
  CHECK(!bitwise_equal(trace_a[3], trace_b[3]));

  // layers before the fusion point agree with the audio-free stack
  std::vector<Tensor> trace_p;
  m.encode(row, nullptr, &trace_p);
  CHECK(bitwise_equal(trace_a[0], trace_p[0]));
  CHECK(bitwise_equal(trace_a[1], trace_p[1]));
}

TEST_CASE("decoder: causality, shape, scalar oracle") {
  ModelConfig c = tiny_config();
  c.n_heads = 1;
  FusionModel m(c, 19);
  Rng rng(90);
  for (auto& p : m.parameters()) randomize(p.value, rng, 0.3);

  EncodedRow row = make_row({1, 5, 2});
  NoGradGuard ng;
  Tensor memory = m.encode(row, nullptr);

  Tensor l1 = m.decoder_logits({1, 7, 8, 9}, memory, row.mask);
  CHECK(l1.shape == Shape{4, 13});
  Tensor l2 = m.decoder_logits({1, 7, 11, 12}, memory, row.mask);
  // positions 0 and 1 saw identical prefixes; causality keeps them equal
  for (std::size_t j = 0; j < 13; ++j) {
    CHECK(l1[j] == doctest::Approx(l2[j]));
    CHECK(l1[13 + j] == doctest::Approx(l2[13 + j]));
  }

  CHECK_THROWS_AS(m.decoder_logits({}, memory, row.mask), std::invalid_argument);

  // scalar recomputation of the single decoder layer
  const std::vector<TokenId> tgt = {1, 7};
  Tensor logits = m.decoder_logits(tgt, memory, row.mask);
  const Mat emb = to_mat(param(m, "tok_embedding"));
  const Mat dpos = to_mat(param(m, "pos_decoder"));
  Mat h(2, std::vector<double>(6));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      h[i][j] = emb[static_cast<std::size_t>(tgt[i])][j] + dpos[i][j];

  const Mat sa = ref_attention(h, h, to_mat(param(m, "decoder.0.sa.wq")),
                               to_mat(param(m, "decoder.0.sa.wk")),
                               to_mat(param(m, "decoder.0.sa.wv")),
                               to_mat(param(m, "decoder.0.sa.wo")), 1, true, nullptr);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> s(6);
    for (std::size_t j = 0; j < 6; ++j) s[j] = sa[i][j] + h[i][j];
    h[i] = ref_layer_norm_row(s, vec_of(param(m, "decoder.0.ln1.gamma")),
                              vec_of(param(m, "decoder.0.ln1.beta")));
  }
  const Mat xa = ref_attention(h, to_mat(memory), to_mat(param(m, "decoder.0.cross.wq")),
                               to_mat(param(m, "decoder.0.cross.wk")),
                               to_mat(param(m, "decoder.0.cross.wv")),
                               to_mat(param(m, "decoder.0.cross.wo")), 1, false, &row.mask);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> s(6);
    for (std::size_t j = 0; j < 6; ++j) s[j] = xa[i][j] + h[i][j];
    h[i] = ref_layer_norm_row(s, vec_of(param(m, "decoder.0.ln2.gamma")),
                              vec_of(param(m, "decoder.0.ln2.beta")));
  }
  const Mat ff = ref_ffn(h, to_mat(param(m, "decoder.0.ffn.w1")),
                         vec_of(param(m, "decoder.0.ffn.b1")),
                         to_mat(param(m, "decoder.0.ffn.w2")),
                         vec_of(param(m, "decoder.0.ffn.b2")));
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> s(6);
    for (std::size_t j = 0; j < 6; ++j) s[j] = ff[i][j] + h[i][j];
    h[i] = ref_layer_norm_row(s, vec_of(param(m, "decoder.0.ln3.gamma")),
                              vec_of(param(m, "decoder.0.ln3.beta")));
  }
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t v = 0; v < 13; ++v) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 6; ++j) acc += h[i][j] * emb[v][j];
      CHECK(logits[i * 13 + v] == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("attention weights sum to one across every attention site") {
  FusionModel m(tiny_config(), 23);
  Rng rng(64);
  randomize(m.cross_modal_params().wo, rng, 0.3);
  EncodedRow row = make_row({1, 5, 6, 7, 2});
  Tensor mel = Tensor::randn({4, 6}, rng, 1.0);

  AttentionProbe::row_sums().clear();
  AttentionProbe::enabled() = true;
  NoGradGuard ng;
  Tensor z = m.audio_encoder_forward(mel, false);
  Tensor memory = m.encode(row, &z);
  m.decoder_logits({1, 5, 6}, memory, row.mask);
  AttentionProbe::enabled() = false;

  REQUIRE(!AttentionProbe::row_sums().empty());
  for (double s : AttentionProbe::row_sums()) CHECK(std::abs(s - 1.0) < 1e-5);
}

TEST_CASE("greedy decode follows a probability-1 chain") {
  const std::vector<TokenId> chain = {5, 9, 4, 2};  // ends in eos=2
  const LogitsFn fn = [&](const std::vector<TokenId>& prefix) {
    std::vector<double> logits(13, 0.0);
    const std::size_t step = prefix.size() - 1;
    const TokenId want = step < chain.size() ? chain[step] : 2;
    logits[static_cast<std::size_t>(want)] = 50.0;
    return logits;
  };
  CHECK(greedy_decode(fn, 1, 2, 16) == chain);
  CHECK(beam_decode(fn, 1, 2, 16, 3) == chain);
}

TEST_CASE("beam width 1 equals greedy on arbitrary score tables") {
  Rng rng(111);
  for (int trial = 0; trial < 10; ++trial) {
    // deterministic pseudo-random logits keyed on the prefix
    const std::uint64_t salt = rng.next_u64();
    const LogitsFn fn = [salt](const std::vector<TokenId>& prefix) {
      std::uint64_t h = salt;
      for (TokenId t : prefix) h = h * 6364136223846793005ull + static_cast<std::uint64_t>(t) + 1;
      std::vector<double> logits(9);
      for (std::size_t i = 0; i < logits.size(); ++i) {
        h = h * 6364136223846793005ull + 1442695040888963407ull;
        logits[i] = static_cast<double>(h >> 40) / 1e6;
      }
      return logits;
    };
    CHECK(greedy_decode(fn, 1, 2, 12) == beam_decode(fn, 1, 2, 12, 1));
  }
}

TEST_CASE("generate validates max_new and runs deterministically") {
  auto corpus = std::vector<std::string>{"sing a song", "hum a tune"};
  text::Vocabulary vocab = text::Vocabulary::train(corpus, 300);
  ModelConfig c = tiny_config(vocab.size());
  FusionModel m(c, 3);
  GenerateOptions opts;
  opts.max_new = 0;
  CHECK_THROWS_AS(generate(m, vocab, "sing", nullptr, opts), std::invalid_argument);
  opts.max_new = 6;
  const std::string a = generate(m, vocab, "sing a song", nullptr, opts);
  const std::string b = generate(m, vocab, "sing a song", nullptr, opts);
  CHECK(a == b);
  opts.mode = DecodeMode::beam;
  opts.beam_width = 2;
  CHECK_NOTHROW(generate(m, vocab, "sing a song", nullptr, opts));
}

TEST_CASE("model checkpoints reload to identical outputs") {
  ModelConfig c = tiny_config();
  FusionModel m(c, 77);
  Rng rng(5);
  randomize(m.cross_modal_params().wo, rng, 0.2);
  EncodedRow row = make_row({1, 5, 6, 2});
  NoGradGuard ng;
  Tensor mel = Tensor::randn({4, 5}, rng, 1.0);
  Tensor z = m.audio_encoder_forward(mel, false);
  Tensor before = m.encode(row, &z);

  const std::string prefix =
      (std::filesystem::temp_directory_path() / "melfuse_model_rt").string();
  save_model(m, prefix);
  FusionModel back = load_model(prefix);
  Tensor z2 = back.audio_encoder_forward(mel, false);
  Tensor after = back.encode(row, &z2);
  CHECK(bitwise_equal(before, after));
  std::filesystem::remove(prefix + ".manifest");
  std::filesystem::remove(prefix + ".blob");
}

TEST_CASE("gradcheck: encoder stack with fused audio path") {
  using DM = FusionModelT<double>;
  // the denominator floor sits at the finite-difference resolution limit:
  // central differences at h=1e-5 in double cannot resolve gradients below
  // the rounding noise of f, so tinier ones read as matching
  GradCheckOptions opt;
  opt.denom_floor = 1e-6;
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 103; ++seed) {
    ModelConfig c = tiny_config();
    DM m(c, seed);
    Rng rng(seed * 7 + 1);
    std::vector<TensorT<double>*> params;
    for (auto& p : m.parameters()) {
      for (auto& v : *p.value.data) v += rng.normal() * 0.1;
      params.push_back(&p.value);
    }
    EncodedRow row = make_row({1, 5, 9, 2});
    TensorT<double> mel = TensorT<double>::randn({4, 5}, rng, 2.0);
    TensorT<double> probe = TensorT<double>::randn({4, 6}, rng, 1.0);
    auto f = [&]() {
      TensorT<double> z = m.audio_encoder_forward(mel, true);
      TensorT<double> enc = m.encode(row, &z);
      return sum(mul(enc, probe));
    };
    worst = std::max(worst, check_gradients(f, params, opt));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("gradcheck: full fused encoder-decoder loss at tiny dims") {
  using DM = FusionModelT<double>;
  double worst = 0.0;
  for (std::uint64_t seed = 200; seed < 202; ++seed) {
    DM m(tiny_config(), seed);
    Rng rng(seed + 9);
    std::vector<TensorT<double>*> params;
    for (auto& p : m.parameters()) {
      for (auto& v : *p.value.data) v += rng.normal() * 0.1;
      params.push_back(&p.value);
    }
    EncodedRow src = make_row({1, 5, 9, 6, 2});
    TensorT<double> mel = TensorT<double>::randn({4, 5}, rng, 2.0);
    const std::vector<TokenId> tgt_in = {1, 7, 8};
    const std::vector<TokenId> labels = {7, 8, 2};
    GradCheckOptions opt;
    opt.denom_floor = 1e-7;  // finite-difference resolution at h=1e-5
    auto f = [&]() {
      TensorT<double> z = m.audio_encoder_forward(mel, true);
      TensorT<double> enc = m.encode(src, &z);
      TensorT<double> logits = m.decoder_logits(tgt_in, enc, src.mask);
      return cross_entropy(logits, labels, text::Vocabulary::kPad);
    };
    worst = std::max(worst, check_gradients(f, params, opt));
  }
  CHECK(worst < 1e-3);
}

TEST_SUITE_END();
