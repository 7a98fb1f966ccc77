#pragma once

// Autoregressive decoding over an abstract next-token scorer, so the search
// logic is testable against hand-built distributions.

#include <functional>

#include "melfuse/bpe.hpp"

namespace melfuse::model {

using text::TokenId;

// Maps a prefix (starting with bos) to raw vocabulary logits for the next
// position.
using LogitsFn = std::function<std::vector<double>(const std::vector<TokenId>&)>;

// Argmax continuation until eos or max_new tokens. Returns the generated
// tokens (eos included when reached, bos excluded).
std::vector<TokenId> greedy_decode(const LogitsFn& fn, TokenId bos, TokenId eos,
                                   std::size_t max_new);

// Beam search with k hypotheses ranked by length-normalized log-probability
// (sum log p / len^length_power).
std::vector<TokenId> beam_decode(const LogitsFn& fn, TokenId bos, TokenId eos,
                                 std::size_t max_new, std::size_t beam_width,
                                 double length_power = 0.7);

}  // namespace melfuse::model
