#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pagnol/matrix.hpp"
#include "pagnol/model.hpp"
#include "pagnol/tokenizer.hpp"

namespace pagnol {

enum class DecodeMode : std::uint8_t { Greedy, TopK };

struct DecodeConfig {
  std::size_t max_new_tokens = 64;
  DecodeMode mode = DecodeMode::Greedy;
  std::size_t k = 10;
  double temperature = 1.0;
  std::vector<TokenId> stop_ids{Vocabulary::special(SpecialToken::Eos)};
  std::uint64_t seed = 0;
  // When the prompt does not fit, drop its oldest tokens instead of failing.
  bool truncate_left = false;
  // Optional soft prompt (k x d_model) placed ahead of the prompt tokens.
  std::span<const float> prefix{};
  bool rotate_prefix = true;

  void validate() const;
};

// Per-layer keys and values of every position seen so far. One cache serves
// one decoding request.
struct KVCache {
  explicit KVCache(const ModelConfig& config);

  ModelConfig config;
  std::vector<Matrix> keys;    // per layer [context_length, d_model], rotary applied
  std::vector<Matrix> values;  // per layer [context_length, d_model]
  std::size_t length = 0;
  std::size_t prefix_len = 0;  // leading soft-prompt positions
  bool rotate_prefix = true;
};

// Feeds one token at position cache.length and returns next-token logits.
// Equal (up to summation order) to the last row of a full forward pass.
std::vector<double> incremental_forward(const Model& model, KVCache& cache, TokenId token);
// Same for a raw input embedding (a soft-prompt row); counts as prefix.
std::vector<double> incremental_forward_embedding(const Model& model, KVCache& cache, std::span<const float> embedding);

// Called after every decoding step with the logits the choice was made from.
using DecodeObserver = std::function<void(std::size_t step, std::span<const double> logits, TokenId chosen)>;

// Lowest id among the maximal logits.
TokenId argmax_token(std::span<const double> logits);

// Generated continuation only. A stop token, when hit, is the last element.
std::vector<TokenId> generate(const Model& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              const DecodeObserver& observer = {});

}  // namespace pagnol
