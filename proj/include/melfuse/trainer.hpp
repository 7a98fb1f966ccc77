#pragma once

// Teacher-forced cross-entropy training: AdaFactor with factored second
// moments, the two-step learning-rate schedule, and early stopping on
// validation ROUGE-1.

#include <functional>
#include <map>
#include <optional>

#include "melfuse/checkpoint.hpp"
#include "melfuse/model_io.hpp"

namespace melfuse::train {

using model::FusionModel;
using text::EncodedRow;
using text::TokenId;

struct TrainConfig {
  double lr_initial = 6e-4;
  double lr_reduced = 6e-5;
  std::size_t reduce_at_epoch = 11;  // 1-based; reduced rate applies from here on
  std::size_t max_epochs = 20;
  std::size_t patience = 3;  // epochs without validation improvement
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t val_max_new = 128;  // greedy decoding budget for validation

  void validate() const;
};

double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

// Factored second moments for matrices, a full vector otherwise.
struct AdafactorState {
  std::vector<double> row;   // [n] for an [n x m] parameter
  std::vector<double> col;   // [m]
  std::vector<double> full;  // non-matrix parameters
  bool factored = false;
};

struct AdafactorOptions {
  double eps1 = 1e-30;
  double clip_threshold = 1.0;   // RMS clipping bound d
  double decay_exponent = 0.8;   // beta2_t = 1 - t^(-decay)
};

// One update of a single parameter from its accumulated gradient; t is the
// 1-based step count. Non-finite gradients leave the parameter untouched.
void adafactor_update(Tensor& value, const std::vector<float>& grad, AdafactorState& state,
                      std::size_t t, double lr, const AdafactorOptions& opts = {});

class Adafactor {
 public:
  explicit Adafactor(AdafactorOptions opts = {}) : opts_(opts) {}

  // applies one step over every parameter with an allocated gradient
  void step(std::vector<Parameter>& params, double lr);

  std::size_t step_count() const { return t_; }
  const AdafactorState* state(const std::string& name) const;

 private:
  AdafactorOptions opts_;
  std::map<std::string, AdafactorState> states_;
  std::size_t t_ = 0;
};

// One teacher-forced example; mel is absent for text-only training.
struct Example {
  EncodedRow src;
  std::vector<TokenId> decoder_input;  // bos + target tokens
  std::vector<TokenId> labels;         // target tokens + eos, pad-filled
  std::optional<Tensor> mel;
};

Example make_example(const text::Vocabulary& vocab, const std::string& lyrics,
                     const std::string& target, std::size_t max_source, std::size_t max_target,
                     std::optional<Tensor> mel);

// Forward + backward over the batch and an AdaFactor step. Returns the mean
// loss; a non-finite gradient skips the update (the loss still reports).
double training_step(FusionModel& model, const std::vector<Example>& batch, Adafactor& opt,
                     double lr, bool* skipped = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_rouge1 = 0.0;
  double lr = 0.0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  Container best_checkpoint;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  bool stopped_early = false;
  std::string abort_reason;  // non-empty when validation scoring failed
};

struct EvalItem {
  std::string lyrics;
  std::optional<Tensor> mel;
  std::string reference;
};

// Validation score hook; the default greedy-generates each item and averages
// ROUGE-1 F against the reference. Scripted scores drive the early-stopping
// tests.
using ValScorer = std::function<double(FusionModel&, std::size_t epoch)>;

FitResult fit(FusionModel& model, const text::Vocabulary& vocab, std::vector<Example> train_set,
              const std::vector<EvalItem>& valid_set, const TrainConfig& cfg,
              const ValScorer* scorer_override = nullptr);

std::string history_to_jsonl(const std::vector<EpochRecord>& history);

}  // namespace melfuse::train
