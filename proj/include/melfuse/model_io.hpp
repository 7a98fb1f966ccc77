#pragma once

// Model persistence (shared container format, config recorded as manifest
// metadata) and text generation entry points.

#include "melfuse/checkpoint.hpp"
#include "melfuse/decode.hpp"
#include "melfuse/model.hpp"

namespace melfuse::model {

enum class DecodeMode { greedy, beam };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t beam_width = 4;
  long max_new = 64;
  long min_new = 1;  // eos is suppressed until this many tokens exist
  double length_power = 0.7;
};

Container model_to_container(const FusionModel& m);
void save_model(const FusionModel& m, const std::string& prefix);
FusionModel load_model(const std::string& prefix);

// Encode lyrics (and optionally a mel spectrogram), then decode a new
// interpretation. Inference mode throughout.
std::string generate(FusionModel& m, const text::Vocabulary& vocab, const std::string& lyrics,
                     const Tensor* mel, const GenerateOptions& opts);

// Mean-pooled final encoder hidden state of the text-only encoder.
std::vector<float> encode_text_embedding(const FusionModel& m, const text::Vocabulary& vocab,
                                         const std::string& text);

}  // namespace melfuse::model
