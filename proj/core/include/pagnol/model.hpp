#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pagnol/matrix.hpp"
#include "pagnol/tokenizer.hpp"

namespace pagnol {

enum class PositionalMode : std::uint8_t { Learned, Rotary };

std::string_view to_string(PositionalMode mode);
PositionalMode positional_mode_from_string(std::string_view s);

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int context_length = 128;
  int vocab_size = 262;
  PositionalMode positional = PositionalMode::Learned;
  bool tie_embeddings = true;
  double dropout_p = 0.1;
  double init_std = 0.02;
  double rotary_base = 10000.0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Architecture presets. "s" through "xl" are the full-size models
// (xl: 2,048 context, rotary positions); "xxs" and "xs" are small configs
// used for scaling-law fits on a desk.
ModelConfig model_preset(std::string_view name, int vocab_size = 50262);

// Closed-form count of trainable parameters.
std::uint64_t count_params(const ModelConfig& config);

// One named parameter tensor inside the flat parameter buffer.
struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  enum class Init : std::uint8_t { Normal, ResidualNormal, Zeros, Ones } init = Init::Normal;
};

// Offsets of every tensor, precomputed for the hot loops.
struct LayerSlots {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
};

class ParamLayout {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit ParamLayout(const ModelConfig& config);

  std::span<const TensorInfo> tensors() const { return tensors_; }
  std::size_t total() const { return total_; }
  const TensorInfo& find(std::string_view name) const;
  // Tensor containing flat index i.
  const TensorInfo& owner(std::size_t flat_index) const;

  std::size_t wte = 0;
  std::size_t wpe = npos;   // learned mode only
  std::size_t lnf_g = 0;
  std::size_t lnf_b = 0;
  std::size_t head = npos;  // untied only, shape [vocab, d_model]
  std::vector<LayerSlots> layers;

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape, TensorInfo::Init init);

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

// Decoder-only transformer parameters. Weights are stored as float32; all
// arithmetic on them runs in double.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }

  std::span<float> params() { return params_; }
  std::span<const float> params() const { return params_; }

  std::span<float> tensor(std::string_view name);
  std::span<const float> tensor(std::string_view name) const;

  // FNV-1a hash of the raw parameter bytes; used to check frozen weights.
  std::uint64_t param_hash() const;

  friend bool operator==(const Model& a, const Model& b);

 private:
  ModelConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<float> params_;
};

// Megatron-style initialization: N(0, init_std) weights, residual output
// projections scaled by 1/sqrt(2 n_layers), LayerNorm (1, 0), zero biases.
Model init_params(const ModelConfig& config, std::uint64_t seed);

// Rotates consecutive feature pairs (2j, 2j+1) of a head vector by
// pos * base^(-2j/d_head). Throws on odd head dimension.
void apply_rotary(std::span<double> head_vec, double position, double base = 10000.0);
// Inverse rotation (the transpose), used by the backward pass.
void apply_rotary_inverse(std::span<double> head_vec, double position, double base = 10000.0);

struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
  // Optional soft-prompt embeddings (k x d_model, row-major) placed at
  // positions 0..k-1 ahead of the token embeddings.
  std::span<const float> prefix{};
  // When false, prefix positions skip the rotary rotation.
  bool rotate_prefix = true;
  bool compute_logits = true;
  bool keep_cache = true;
  std::optional<double> dropout_p;  // overrides config().dropout_p
};

struct LayerCache {
  Matrix x_in;
  Matrix ln1_hat;
  std::vector<double> ln1_rstd;
  Matrix ln1_out;
  Matrix q, k, v;    // after rotary
  Matrix probs;      // [n_heads * T, T], pre-dropout
  Matrix probs_mask; // same shape, empty when no dropout
  Matrix attn_cat;
  Matrix attn_mask;  // residual dropout mask, empty when no dropout
  Matrix x_mid;
  Matrix ln2_hat;
  std::vector<double> ln2_rstd;
  Matrix ln2_out;
  Matrix fc_pre;
  Matrix fc_act;
  Matrix mlp_mask;
};

struct ForwardCache {
  bool valid = false;
  std::vector<TokenId> ids;
  std::size_t prefix_len = 0;
  bool rotate_prefix = true;
  Matrix embed_mask;
  std::vector<LayerCache> layers;
  Matrix lnf_hat;
  std::vector<double> lnf_rstd;
  Matrix hidden;  // final LayerNorm output, [T, d_model]
};

struct ForwardResult {
  Matrix logits;  // [T, vocab] with T = prefix + ids; empty when !compute_logits
  ForwardCache cache;
  const Matrix& hidden() const { return cache.hidden; }
};

ForwardResult forward(const Model& model, std::span<const TokenId> ids, const ForwardOptions& options = {});

struct Gradients {
  std::vector<double> params;  // aligned with Model::params()
  std::vector<double> prefix;  // aligned with ForwardOptions::prefix

  explicit Gradients(std::size_t n_params = 0, std::size_t n_prefix = 0) : params(n_params), prefix(n_prefix) {}
};

// Reverse pass. Upstream gradients can be given at the logits, at the final
// hidden states, or both; either pointer may be null. Accumulates into grads.
void backward(const Model& model, const ForwardCache& cache, const Matrix* dlogits, const Matrix* dhidden,
              Gradients& grads);

Gradients backward(const Model& model, const ForwardCache& cache, const Matrix* dlogits,
                   const Matrix* dhidden = nullptr);

}  // namespace pagnol
