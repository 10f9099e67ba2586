#include "pagnol/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pagnol/error.hpp"
#include "pagnol/rng.hpp"

namespace pagnol {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

std::vector<double> layer_norm(std::span<const double> x, const float* g, const float* b) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * rs * g[i] + b[i];
  return y;
}

std::vector<double> linear(std::span<const double> x, const float* w, const float* b, std::size_t out) {
  std::vector<double> y(b, b + out);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float* wr = w + i * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += x[i] * wr[o];
  }
  return y;
}

std::vector<double> step(const Model& model, KVCache& cache, std::vector<double> x, bool is_prefix) {
  const auto& cfg = model.config();
  if (!(cache.config == cfg)) throw InvalidArgument("KV cache was built for a different model config");
  const auto& lay = model.layout();
  const float* P = model.params().data();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const std::size_t t = cache.length;
  if (t >= static_cast<std::size_t>(cfg.context_length)) throw InvalidArgument("KV cache is full");
  if (is_prefix && t != cache.prefix_len) throw InvalidArgument("soft prompt rows must precede all tokens");

  if (lay.wpe != ParamLayout::npos) {
    const float* pe = P + lay.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) x[i] += pe[i];
  }
  const bool rotate = cfg.positional == PositionalMode::Rotary && (cache.rotate_prefix || !is_prefix);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(t + 1);

  for (std::size_t l = 0; l < lay.layers.size(); ++l) {
    const LayerSlots& s = lay.layers[l];
    const auto h1 = layer_norm(x, P + s.ln1_g, P + s.ln1_b);
    auto qkv = linear(h1, P + s.qkv_w, P + s.qkv_b, 3 * d);
    std::span<double> q(qkv.data(), d);
    Matrix& K = cache.keys[l];
    Matrix& Vm = cache.values[l];
    for (std::size_t i = 0; i < d; ++i) {
      K(t, i) = qkv[d + i];
      Vm(t, i) = qkv[2 * d + i];
    }
    if (rotate) {
      for (std::size_t h = 0; h < H; ++h) {
        apply_rotary(q.subspan(h * dh, dh), static_cast<double>(t), cfg.rotary_base);
        apply_rotary(K.row(t).subspan(h * dh, dh), static_cast<double>(t), cfg.rotary_base);
      }
    }
    std::vector<double> attn(d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= t; ++j) {
        const double* kj = K.data.data() + j * d + h * dh;
        double sdot = 0.0;
        for (std::size_t i = 0; i < dh; ++i) sdot += q[h * dh + i] * kj[i];
        scores[j] = sdot * scale;
        mx = std::max(mx, scores[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        sum += scores[j];
      }
      for (std::size_t j = 0; j <= t; ++j) {
        const double pj = scores[j] / sum;
        const double* vj = Vm.data.data() + j * d + h * dh;
        for (std::size_t i = 0; i < dh; ++i) attn[h * dh + i] += pj * vj[i];
      }
    }
    const auto r = linear(attn, P + s.proj_w, P + s.proj_b, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += r[i];
    const auto h2 = layer_norm(x, P + s.ln2_g, P + s.ln2_b);
    auto fc = linear(h2, P + s.fc_w, P + s.fc_b, 4 * d);
    for (auto& v : fc) v = gelu(v);
    const auto r2 = linear(fc, P + s.out_w, P + s.out_b, d);
    for (std::size_t i = 0; i < d; ++i) x[i] += r2[i];
  }
  const auto hidden = layer_norm(x, P + lay.lnf_g, P + lay.lnf_b);
  ++cache.length;
  if (is_prefix) ++cache.prefix_len;

  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const float* W = P + (lay.head == ParamLayout::npos ? lay.wte : lay.head);
  std::vector<double> logits(V);
  for (std::size_t v = 0; v < V; ++v) {
    const float* wr = W + v * d;
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += hidden[i] * wr[i];
    logits[v] = acc;
  }
  return logits;
}

TokenId sample_top_k(std::span<const double> logits, std::size_t k, double temperature, Rng& rng) {
  std::vector<TokenId> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](TokenId a, TokenId b) {
    return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
  });
  std::vector<double> w(k);
  const double top = logits[idx[0]] / temperature;
  for (std::size_t i = 0; i < k; ++i) w[i] = std::exp(logits[idx[i]] / temperature - top);
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return idx[dist(rng)];
}

}  // namespace

void DecodeConfig::validate() const {
  if (mode == DecodeMode::TopK && k < 1) throw InvalidArgument("top-k decoding needs k >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InvalidArgument("temperature must be positive");
}

KVCache::KVCache(const ModelConfig& c) : config(c) {
  const auto ctx = static_cast<std::size_t>(c.context_length);
  const auto d = static_cast<std::size_t>(c.d_model);
  keys.assign(static_cast<std::size_t>(c.n_layers), Matrix(ctx, d));
  values.assign(static_cast<std::size_t>(c.n_layers), Matrix(ctx, d));
}

std::vector<double> incremental_forward(const Model& model, KVCache& cache, TokenId token) {
  const auto& cfg = model.config();
  if (token < 0 || token >= cfg.vocab_size) throw InvalidArgument("token id out of range");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const float* e = model.params().data() + model.layout().wte + static_cast<std::size_t>(token) * d;
  return step(model, cache, std::vector<double>(e, e + d), false);
}

std::vector<double> incremental_forward_embedding(const Model& model, KVCache& cache, std::span<const float> emb) {
  if (emb.size() != static_cast<std::size_t>(model.config().d_model)) {
    throw InvalidArgument("embedding size does not match d_model");
  }
  return step(model, cache, std::vector<double>(emb.begin(), emb.end()), true);
}

TokenId argmax_token(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

std::vector<TokenId> generate(const Model& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              const DecodeObserver& observer) {
  cfg.validate();
  if (prompt.empty()) throw InvalidArgument("generate: empty prompt");
  const auto& mc = model.config();
  const auto d = static_cast<std::size_t>(mc.d_model);
  if (cfg.prefix.size() % d != 0) throw InvalidArgument("generate: prefix size is not a multiple of d_model");
  const std::size_t n_prefix = cfg.prefix.size() / d;
  const auto ctx = static_cast<std::size_t>(mc.context_length);
  if (n_prefix >= ctx) throw InvalidArgument("generate: soft prompt fills the context");

  if (n_prefix + prompt.size() >= ctx) {
    if (!cfg.truncate_left) {
      throw InvalidArgument("generate: prompt of " + std::to_string(prompt.size()) +
                            " tokens leaves no room in a context of " + std::to_string(ctx));
    }
    prompt = prompt.subspan(prompt.size() - (ctx - n_prefix - 1));
  }

  KVCache cache(mc);
  cache.rotate_prefix = cfg.rotate_prefix;
  for (std::size_t i = 0; i < n_prefix; ++i) incremental_forward_embedding(model, cache, cfg.prefix.subspan(i * d, d));
  std::vector<double> logits;
  for (TokenId id : prompt) logits = incremental_forward(model, cache, id);

  Rng rng(cfg.seed);
  std::vector<TokenId> out;
  for (std::size_t s = 0; s < cfg.max_new_tokens; ++s) {
    const TokenId next = cfg.mode == DecodeMode::Greedy ? argmax_token(logits)
                                                        : sample_top_k(logits, cfg.k, cfg.temperature, rng);
    if (observer) observer(s, logits, next);
    out.push_back(next);
    if (std::find(cfg.stop_ids.begin(), cfg.stop_ids.end(), next) != cfg.stop_ids.end()) break;
    if (cache.length + 1 >= ctx) break;  // the sequence now fills the context
    logits = incremental_forward(model, cache, next);
  }
  return out;
}

}  // namespace pagnol
