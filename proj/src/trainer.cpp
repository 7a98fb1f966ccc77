#include "melfuse/trainer.hpp"

#include <cmath>
#include <sstream>

#include "melfuse/metrics.hpp"

namespace melfuse::train {

void TrainConfig::validate() const {
  if (reduce_at_epoch > max_epochs)
    throw std::invalid_argument("TrainConfig: reduce_at_epoch must not exceed max_epochs");
  if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch < 1) throw std::invalid_argument("lr_schedule: epochs are 1-based");
  return epoch < cfg.reduce_at_epoch ? cfg.lr_initial : cfg.lr_reduced;
}

void adafactor_update(Tensor& value, const std::vector<float>& grad, AdafactorState& state,
                      std::size_t t, double lr, const AdafactorOptions& opts) {
  if (grad.size() != value.numel())
    throw std::invalid_argument("adafactor_update: gradient size mismatch");
  for (float g : grad)
    if (!std::isfinite(g)) throw std::runtime_error("adafactor_update: non-finite gradient");
  if (t < 1) throw std::invalid_argument("adafactor_update: step counter is 1-based");

  const double beta2t = 1.0 - std::pow(static_cast<double>(t), -opts.decay_exponent);
  const bool matrix = value.ndim() == 2;
  std::vector<double> inv_sqrt_v(grad.size());

  if (matrix) {
    const std::size_t n = value.shape[0], m = value.shape[1];
    if (state.row.size() != n) {
      state.row.assign(n, 0.0);
      state.col.assign(m, 0.0);
      state.factored = true;
    }
    // row/col means of grad^2 + eps1
    std::vector<double> row_mean(n, 0.0), col_mean(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double g2 = static_cast<double>(grad[i * m + j]) * grad[i * m + j] + opts.eps1;
        row_mean[i] += g2;
        col_mean[j] += g2;
      }
    for (double& v : row_mean) v /= static_cast<double>(m);
    for (double& v : col_mean) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      state.row[i] = beta2t * state.row[i] + (1.0 - beta2t) * row_mean[i];
    for (std::size_t j = 0; j < m; ++j)
      state.col[j] = beta2t * state.col[j] + (1.0 - beta2t) * col_mean[j];
    double row_total = 0.0;
    for (double v : state.row) row_total += v;
    const double row_mean_all = row_total / static_cast<double>(n);
    // v_ij = (row_i / mean(row)) * col_j
    for (std::size_t i = 0; i < n; ++i) {
      const double r = state.row[i] / row_mean_all;
      for (std::size_t j = 0; j < m; ++j)
        inv_sqrt_v[i * m + j] = 1.0 / std::sqrt(r * state.col[j]);
    }
  } else {
    if (state.full.size() != grad.size()) {
      state.full.assign(grad.size(), 0.0);
      state.factored = false;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g2 = static_cast<double>(grad[i]) * grad[i] + opts.eps1;
      state.full[i] = beta2t * state.full[i] + (1.0 - beta2t) * g2;
      inv_sqrt_v[i] = 1.0 / std::sqrt(state.full[i]);
    }
  }

  // update = grad / sqrt(v), then RMS-clip at the threshold d
  std::vector<double> update(grad.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    update[i] = static_cast<double>(grad[i]) * inv_sqrt_v[i];
    sq += update[i] * update[i];
  }
  const double rms = std::sqrt(sq / static_cast<double>(grad.size()));
  const double denom = std::max(1.0, rms / opts.clip_threshold);
  const double scale = lr / denom;
  for (std::size_t i = 0; i < grad.size(); ++i)
    (*value.data)[i] -= static_cast<float>(scale * update[i]);
}

void Adafactor::step(std::vector<Parameter>& params, double lr) {
  ++t_;
  for (auto& p : params) {
    if (!p.value.grad) continue;
    adafactor_update(p.value, *p.value.grad, states_[p.name], t_, lr, opts_);
  }
}

const AdafactorState* Adafactor::state(const std::string& name) const {
  auto it = states_.find(name);
  return it == states_.end() ? nullptr : &it->second;
}

Example make_example(const text::Vocabulary& vocab, const std::string& lyrics,
                     const std::string& target, std::size_t max_source, std::size_t max_target,
                     std::optional<Tensor> mel) {
  Example ex;
  ex.src = vocab.encode(lyrics, max_source);
  const EncodedRow tgt = vocab.encode(target, max_target);
  // teacher forcing: input is the target shifted right, labels are the
  // target itself with pad ignored
  ex.decoder_input.assign(tgt.ids.begin(), tgt.ids.end() - 1);
  ex.labels.assign(tgt.ids.begin() + 1, tgt.ids.end());
  // positions after eos stay pad in both streams; trim the decoder input of
  // trailing pads so the graph skips dead positions
  std::size_t real = 0;
  for (std::size_t i = 0; i < tgt.mask.size(); ++i)
    if (tgt.mask[i]) real = i + 1;
  ex.decoder_input.resize(std::max<std::size_t>(1, real - 1));
  ex.labels.resize(ex.decoder_input.size());
  ex.mel = std::move(mel);
  return ex;
}

double training_step(FusionModel& model, const std::vector<Example>& batch, Adafactor& opt,
                     double lr, bool* skipped) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  if (skipped) *skipped = false;

  model.zero_grad();
  std::size_t total_positions = 0;
  std::vector<std::size_t> counts;
  for (const auto& ex : batch) {
    std::size_t n = 0;
    for (TokenId t : ex.labels)
      if (t != text::Vocabulary::kPad) ++n;
    counts.push_back(n);
    total_positions += n;
  }
  if (total_positions == 0) throw std::invalid_argument("training_step: no target tokens");

  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = batch[i];
    Tensor z;
    const Tensor* z_ptr = nullptr;
    if (ex.mel) {
      z = model.audio_encoder_forward(*ex.mel, /*train=*/true);
      z_ptr = &z;
    }
    Tensor memory = model.encode(ex.src, z_ptr);
    Tensor logits = model.decoder_logits(ex.decoder_input, memory, ex.src.mask);
    Tensor loss_i = cross_entropy(logits, ex.labels, text::Vocabulary::kPad);
    Tensor weighted = scale(loss_i, static_cast<float>(static_cast<double>(counts[i]) /
                                                       static_cast<double>(total_positions)));
    total = total.defined() ? add(total, weighted) : weighted;
  }

  const double loss = static_cast<double>(total.item());
  total.backward();

  for (const auto& p : model.parameters()) {
    if (!p.value.grad) continue;
    for (float g : *p.value.grad) {
      if (!std::isfinite(g)) {
        // skip the update, keep training
        model.zero_grad();
        if (skipped) *skipped = true;
        return loss;
      }
    }
  }
  opt.step(model.parameters(), lr);
  model.zero_grad();
  return loss;
}

namespace {

double default_validation_score(FusionModel& model, const text::Vocabulary& vocab,
                                const std::vector<EvalItem>& valid_set, std::size_t max_new) {
  if (valid_set.empty()) throw std::invalid_argument("fit: empty validation set");
  model::GenerateOptions gen;
  gen.mode = model::DecodeMode::greedy;
  gen.max_new = static_cast<long>(max_new);
  double total = 0.0;
  for (const auto& item : valid_set) {
    const std::string out =
        model::generate(model, vocab, item.lyrics, item.mel ? &*item.mel : nullptr, gen);
    total += metrics::rouge_n(out, item.reference, 1).f;
  }
  return total / static_cast<double>(valid_set.size());
}

}  // namespace

FitResult fit(FusionModel& model, const text::Vocabulary& vocab, std::vector<Example> train_set,
              const std::vector<EvalItem>& valid_set, const TrainConfig& cfg,
              const ValScorer* scorer_override) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("fit: empty training set");
  if (valid_set.empty() && !scorer_override)
    throw std::invalid_argument("fit: empty validation set");

  Adafactor opt;
  Rng shuffle_rng(cfg.seed);
  FitResult result;
  double best = -1.0;
  std::size_t non_improving = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = shuffle_rng.uniform_index(i);
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Example> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) batch.push_back(train_set[order[k]]);
      loss_sum += training_step(model, batch, opt, lr);
      ++n_batches;
    }
    const double mean_loss = loss_sum / static_cast<double>(n_batches);

    double score = 0.0;
    try {
      if (scorer_override) {
        score = (*scorer_override)(model, epoch);
      } else {
        score = default_validation_score(model, vocab, valid_set, cfg.val_max_new);
      }
    } catch (const std::exception& e) {
      // validation failure aborts the run; the partial history survives
      result.abort_reason = e.what();
      break;
    }
    result.history.push_back({epoch, mean_loss, score, lr});

    if (score > best) {
      best = score;
      result.best_epoch = epoch;
      result.best_score = score;
      result.best_checkpoint = model::model_to_container(model);
      non_improving = 0;
    } else {
      ++non_improving;
      if (non_improving >= cfg.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  return result;
}

std::string history_to_jsonl(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  for (const auto& r : history) {
    os << "{\"epoch\":" << r.epoch << ",\"loss\":" << r.loss << ",\"val_rouge1\":" << r.val_rouge1
       << ",\"lr\":" << r.lr << "}\n";
  }
  return os.str();
}

}  // namespace melfuse::train
