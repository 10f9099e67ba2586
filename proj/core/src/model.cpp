#include "pagnol/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "pagnol/error.hpp"
#include "pagnol/rng.hpp"

namespace pagnol {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

// y = x W + b with W stored [in, out].
void linear(const Matrix& x, const float* w, const float* b, std::size_t out, Matrix& y) {
  const std::size_t in = x.cols;
  y = Matrix(x.rows, out);
  for (std::size_t t = 0; t < x.rows; ++t) {
    double* yr = y.data.data() + t * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
    const double* xr = x.data.data() + t * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const float* wr = w + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
}

// dx = dy W^T (overwrites), dW += x^T dy, db += sum_t dy.
void linear_backward(const Matrix& x, const float* w, const Matrix& dy, Matrix& dx, double* dw, double* db) {
  const std::size_t in = x.cols;
  const std::size_t out = dy.cols;
  dx = Matrix(x.rows, in);
  for (std::size_t t = 0; t < x.rows; ++t) {
    const double* dyr = dy.data.data() + t * out;
    const double* xr = x.data.data() + t * in;
    double* dxr = dx.data.data() + t * in;
    for (std::size_t i = 0; i < in; ++i) {
      const float* wr = w + i * out;
      double* dwr = dw + i * out;
      const double xi = xr[i];
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        acc += dyr[o] * wr[o];
        dwr[o] += xi * dyr[o];
      }
      dxr[i] = acc;
    }
    for (std::size_t o = 0; o < out; ++o) db[o] += dyr[o];
  }
}

void layer_norm(const Matrix& x, const float* g, const float* b, Matrix& hat, std::vector<double>& rstd, Matrix& y) {
  const std::size_t d = x.cols;
  hat = Matrix(x.rows, d);
  y = Matrix(x.rows, d);
  rstd.assign(x.rows, 0.0);
  for (std::size_t t = 0; t < x.rows; ++t) {
    const auto xr = x.row(t);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[t] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mean) * rs;
      hat(t, i) = h;
      y(t, i) = h * g[i] + b[i];
    }
  }
}

// Accumulates the input gradient into dx.
void layer_norm_backward(const Matrix& dy, const Matrix& hat, const std::vector<double>& rstd, const float* g,
                         double* dg, double* db, Matrix& dx) {
  const std::size_t d = dy.cols;
  std::vector<double> dhat(d);
  for (std::size_t t = 0; t < dy.rows; ++t) {
    double mean_dhat = 0.0;
    double mean_dhat_hat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double gy = dy(t, i);
      dg[i] += gy * hat(t, i);
      db[i] += gy;
      dhat[i] = gy * g[i];
      mean_dhat += dhat[i];
      mean_dhat_hat += dhat[i] * hat(t, i);
    }
    mean_dhat /= static_cast<double>(d);
    mean_dhat_hat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx(t, i) += rstd[t] * (dhat[i] - mean_dhat - hat(t, i) * mean_dhat_hat);
    }
  }
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, Rng& rng) {
  Matrix m(rows, cols);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 / (1.0 - p);
  for (auto& v : m.data) v = u(rng) >= p ? keep : 0.0;
  return m;
}

void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask.data[i];
}

bool rotated(const ForwardCache& c, std::size_t pos) { return c.rotate_prefix || pos >= c.prefix_len; }

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string_view to_string(PositionalMode mode) { return mode == PositionalMode::Learned ? "learned" : "rotary"; }

PositionalMode positional_mode_from_string(std::string_view s) {
  if (s == "learned") return PositionalMode::Learned;
  if (s == "rotary") return PositionalMode::Rotary;
  throw InvalidArgument("unknown positional mode: " + std::string(s));
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw InvalidArgument("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) throw InvalidArgument("d_model and n_heads must be >= 1");
  if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  if (context_length < 2) throw InvalidArgument("context_length must be >= 2");
  if (vocab_size < 1) throw InvalidArgument("vocab_size must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidArgument("dropout_p must be in [0, 1)");
  if (!(init_std > 0.0)) throw InvalidArgument("init_std must be positive");
  if (positional == PositionalMode::Rotary && head_dim() % 2 != 0) {
    throw InvalidArgument("rotary positions need an even head dimension");
  }
}

ModelConfig model_preset(std::string_view name, int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.dropout_p = 0.1;
  auto set = [&](int layers, int d, int heads, int ctx) {
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = heads;
    c.context_length = ctx;
  };
  if (name == "xxs") {
    set(2, 64, 4, 128);
  } else if (name == "xs") {
    set(4, 128, 4, 256);
  } else if (name == "s") {
    set(12, 768, 12, 1024);
  } else if (name == "s-oscar") {
    set(12, 768, 12, 1024);
    c.tie_embeddings = false;
  } else if (name == "m" || name == "m-oscar") {
    set(24, 1024, 16, 1024);
  } else if (name == "l") {
    set(36, 1280, 20, 1024);
  } else if (name == "xl") {
    set(48, 1600, 25, 2048);
    c.positional = PositionalMode::Rotary;
  } else {
    throw InvalidArgument("unknown model preset: " + std::string(name));
  }
  return c;
}

std::uint64_t count_params(const ModelConfig& c) {
  c.validate();
  const std::uint64_t d = static_cast<std::uint64_t>(c.d_model);
  const std::uint64_t v = static_cast<std::uint64_t>(c.vocab_size);
  std::uint64_t n = v * d;
  if (c.positional == PositionalMode::Learned) n += static_cast<std::uint64_t>(c.context_length) * d;
  n += static_cast<std::uint64_t>(c.n_layers) * (12 * d * d + 13 * d);
  n += 2 * d;
  if (!c.tie_embeddings) n += v * d;
  return n;
}

// ---------------------------------------------------------------------------
// Layout

std::size_t ParamLayout::add(std::string name, std::vector<std::size_t> shape, TensorInfo::Init init) {
  std::size_t size = 1;
  for (auto s : shape) size *= s;
  tensors_.push_back({std::move(name), std::move(shape), total_, size, init});
  total_ += size;
  return tensors_.back().offset;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  using I = TensorInfo::Init;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  wte = add("wte", {v, d}, I::Normal);
  if (c.positional == PositionalMode::Learned) {
    wpe = add("wpe", {static_cast<std::size_t>(c.context_length), d}, I::Normal);
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    LayerSlots s{};
    s.ln1_g = add(p + "ln1.g", {d}, I::Ones);
    s.ln1_b = add(p + "ln1.b", {d}, I::Zeros);
    s.qkv_w = add(p + "attn.qkv.w", {d, 3 * d}, I::Normal);
    s.qkv_b = add(p + "attn.qkv.b", {3 * d}, I::Zeros);
    s.proj_w = add(p + "attn.proj.w", {d, d}, I::ResidualNormal);
    s.proj_b = add(p + "attn.proj.b", {d}, I::Zeros);
    s.ln2_g = add(p + "ln2.g", {d}, I::Ones);
    s.ln2_b = add(p + "ln2.b", {d}, I::Zeros);
    s.fc_w = add(p + "mlp.fc.w", {d, 4 * d}, I::Normal);
    s.fc_b = add(p + "mlp.fc.b", {4 * d}, I::Zeros);
    s.out_w = add(p + "mlp.proj.w", {4 * d, d}, I::ResidualNormal);
    s.out_b = add(p + "mlp.proj.b", {d}, I::Zeros);
    layers.push_back(s);
  }
  lnf_g = add("lnf.g", {d}, I::Ones);
  lnf_b = add("lnf.b", {d}, I::Zeros);
  if (!c.tie_embeddings) head = add("head", {v, d}, I::Normal);
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw InvalidArgument("no parameter tensor named " + std::string(name));
}

const TensorInfo& ParamLayout::owner(std::size_t flat_index) const {
  auto it = std::upper_bound(tensors_.begin(), tensors_.end(), flat_index,
                             [](std::size_t i, const TensorInfo& t) { return i < t.offset; });
  if (it == tensors_.begin() || flat_index >= total_) throw InvalidArgument("flat index out of range");
  return *std::prev(it);
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& config)
    : config_(config), layout_(std::make_shared<const ParamLayout>(config)), params_(layout_->total(), 0.0f) {}

std::span<float> Model::tensor(std::string_view name) {
  const auto& t = layout_->find(name);
  return std::span<float>(params_).subspan(t.offset, t.size);
}

std::span<const float> Model::tensor(std::string_view name) const {
  const auto& t = layout_->find(name);
  return std::span<const float>(params_).subspan(t.offset, t.size);
}

std::uint64_t Model::param_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (float f : params_) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    for (int i = 0; i < 4; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

bool operator==(const Model& a, const Model& b) {
  if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
  return std::memcmp(a.params_.data(), b.params_.data(), a.params_.size() * sizeof(float)) == 0;
}

Model init_params(const ModelConfig& config, std::uint64_t seed) {
  Model m(config);
  Rng rng(seed);
  const double residual_std = config.init_std / std::sqrt(2.0 * config.n_layers);
  auto params = m.params();
  for (const auto& t : m.layout().tensors()) {
    auto dst = params.subspan(t.offset, t.size);
    switch (t.init) {
      case TensorInfo::Init::Zeros:
        std::fill(dst.begin(), dst.end(), 0.0f);
        break;
      case TensorInfo::Init::Ones:
        std::fill(dst.begin(), dst.end(), 1.0f);
        break;
      case TensorInfo::Init::Normal:
      case TensorInfo::Init::ResidualNormal: {
        std::normal_distribution<double> dist(
            0.0, t.init == TensorInfo::Init::Normal ? config.init_std : residual_std);
        for (auto& x : dst) x = static_cast<float>(dist(rng));
        break;
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Rotary

void apply_rotary(std::span<double> v, double position, double base) {
  if (v.size() % 2 != 0) throw InvalidArgument("rotary embedding needs an even head dimension");
  const double dh = static_cast<double>(v.size());
  for (std::size_t j = 0; j < v.size() / 2; ++j) {
    const double theta = position * std::pow(base, -2.0 * static_cast<double>(j) / dh);
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double a = v[2 * j];
    const double b = v[2 * j + 1];
    v[2 * j] = a * c - b * s;
    v[2 * j + 1] = a * s + b * c;
  }
}

void apply_rotary_inverse(std::span<double> v, double position, double base) { apply_rotary(v, -position, base); }

// ---------------------------------------------------------------------------
// Forward

ForwardResult forward(const Model& model, std::span<const TokenId> ids, const ForwardOptions& opt) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const float* P = model.params().data();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const auto V = static_cast<std::size_t>(cfg.vocab_size);

  if (opt.prefix.size() % d != 0) throw InvalidArgument("prefix size is not a multiple of d_model");
  const std::size_t k = opt.prefix.size() / d;
  const std::size_t T = k + ids.size();
  if (T == 0) throw InvalidArgument("empty input");
  if (T > static_cast<std::size_t>(cfg.context_length)) {
    throw InvalidArgument("sequence of length " + std::to_string(T) + " exceeds context length " +
                          std::to_string(cfg.context_length));
  }
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) throw InvalidArgument("token id out of range");
  }

  const double p_drop = opt.train ? opt.dropout_p.value_or(cfg.dropout_p) : 0.0;
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw InvalidArgument("dropout_p must be in [0, 1)");
  const bool use_dropout = p_drop > 0.0;
  Rng rng(opt.seed);

  ForwardResult res;
  ForwardCache& c = res.cache;
  c.ids.assign(ids.begin(), ids.end());
  c.prefix_len = k;
  c.rotate_prefix = opt.rotate_prefix;

  Matrix x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    auto xr = x.row(t);
    if (t < k) {
      for (std::size_t i = 0; i < d; ++i) xr[i] = opt.prefix[t * d + i];
    } else {
      const float* e = P + lay.wte + static_cast<std::size_t>(ids[t - k]) * d;
      for (std::size_t i = 0; i < d; ++i) xr[i] = e[i];
    }
    if (lay.wpe != ParamLayout::npos) {
      const float* pe = P + lay.wpe + t * d;
      for (std::size_t i = 0; i < d; ++i) xr[i] += pe[i];
    }
  }
  if (use_dropout) {
    c.embed_mask = dropout_mask(T, d, p_drop, rng);
    apply_mask(x, c.embed_mask);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool rotary = cfg.positional == PositionalMode::Rotary;
  c.layers.resize(lay.layers.size());
  for (std::size_t l = 0; l < lay.layers.size(); ++l) {
    const LayerSlots& s = lay.layers[l];
    LayerCache& lc = c.layers[l];
    lc.x_in = x;

    layer_norm(x, P + s.ln1_g, P + s.ln1_b, lc.ln1_hat, lc.ln1_rstd, lc.ln1_out);
    Matrix qkv;
    linear(lc.ln1_out, P + s.qkv_w, P + s.qkv_b, 3 * d, qkv);
    lc.q = Matrix(T, d);
    lc.k = Matrix(T, d);
    lc.v = Matrix(T, d);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < d; ++i) {
        lc.q(t, i) = qkv(t, i);
        lc.k(t, i) = qkv(t, d + i);
        lc.v(t, i) = qkv(t, 2 * d + i);
      }
      if (rotary && rotated(c, t)) {
        for (std::size_t h = 0; h < H; ++h) {
          apply_rotary(lc.q.row(t).subspan(h * dh, dh), static_cast<double>(t), cfg.rotary_base);
          apply_rotary(lc.k.row(t).subspan(h * dh, dh), static_cast<double>(t), cfg.rotary_base);
        }
      }
    }

    lc.probs = Matrix(H * T, T);
    if (use_dropout) lc.probs_mask = Matrix(H * T, T);
    lc.attn_cat = Matrix(T, d);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double keep = use_dropout ? 1.0 / (1.0 - p_drop) : 1.0;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        auto pr = lc.probs.row(h * T + t);
        const double* qt = lc.q.data.data() + t * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= t; ++j) {
          const double* kj = lc.k.data.data() + j * d + h * dh;
          double sdot = 0.0;
          for (std::size_t i = 0; i < dh; ++i) sdot += qt[i] * kj[i];
          pr[j] = sdot * scale;
          mx = std::max(mx, pr[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          sum += pr[j];
        }
        for (std::size_t j = 0; j <= t; ++j) pr[j] /= sum;

        double* out = lc.attn_cat.data.data() + t * d + h * dh;
        for (std::size_t j = 0; j <= t; ++j) {
          double pj = pr[j];
          if (use_dropout) {
            const double m = unif(rng) >= p_drop ? keep : 0.0;
            lc.probs_mask(h * T + t, j) = m;
            pj *= m;
          }
          const double* vj = lc.v.data.data() + j * d + h * dh;
          for (std::size_t i = 0; i < dh; ++i) out[i] += pj * vj[i];
        }
      }
    }

    Matrix r;
    linear(lc.attn_cat, P + s.proj_w, P + s.proj_b, d, r);
    if (use_dropout) {
      lc.attn_mask = dropout_mask(T, d, p_drop, rng);
      apply_mask(r, lc.attn_mask);
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += r.data[i];
    lc.x_mid = x;

    layer_norm(x, P + s.ln2_g, P + s.ln2_b, lc.ln2_hat, lc.ln2_rstd, lc.ln2_out);
    linear(lc.ln2_out, P + s.fc_w, P + s.fc_b, 4 * d, lc.fc_pre);
    lc.fc_act = lc.fc_pre;
    for (auto& vv : lc.fc_act.data) vv = gelu(vv);
    Matrix r2;
    linear(lc.fc_act, P + s.out_w, P + s.out_b, d, r2);
    if (use_dropout) {
      lc.mlp_mask = dropout_mask(T, d, p_drop, rng);
      apply_mask(r2, lc.mlp_mask);
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += r2.data[i];
  }

  layer_norm(x, P + lay.lnf_g, P + lay.lnf_b, c.lnf_hat, c.lnf_rstd, c.hidden);

  if (opt.compute_logits) {
    const float* W = P + (lay.head == ParamLayout::npos ? lay.wte : lay.head);
    res.logits = Matrix(T, V);
    for (std::size_t t = 0; t < T; ++t) {
      const double* hr = c.hidden.data.data() + t * d;
      double* lr = res.logits.data.data() + t * V;
      for (std::size_t vv = 0; vv < V; ++vv) {
        const float* wr = W + vv * d;
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += hr[i] * wr[i];
        lr[vv] = acc;
      }
    }
  }

  c.valid = opt.keep_cache;
  if (!opt.keep_cache) {
    c.layers.clear();
    c.embed_mask = Matrix();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Model& model, const ForwardCache& c, const Matrix* dlogits, const Matrix* dhidden,
              Gradients& g) {
  if (!c.valid) throw InvalidArgument("forward cache missing; run forward with keep_cache");
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const float* P = model.params().data();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t T = c.hidden.rows;
  const std::size_t k = c.prefix_len;

  if (g.params.size() != lay.total()) g.params.assign(lay.total(), 0.0);
  if (g.prefix.size() != k * d) g.prefix.assign(k * d, 0.0);
  if (dlogits && (dlogits->rows != T || dlogits->cols != V)) throw InvalidArgument("dlogits shape mismatch");
  if (dhidden && (dhidden->rows != T || dhidden->cols != d)) throw InvalidArgument("dhidden shape mismatch");

  double* G = g.params.data();
  Matrix dy(T, d);
  if (dlogits) {
    const std::size_t w_off = lay.head == ParamLayout::npos ? lay.wte : lay.head;
    const float* W = P + w_off;
    double* dW = G + w_off;
    for (std::size_t t = 0; t < T; ++t) {
      double* dyr = dy.data.data() + t * d;
      const double* hr = c.hidden.data.data() + t * d;
      for (std::size_t vv = 0; vv < V; ++vv) {
        const double gl = (*dlogits)(t, vv);
        if (gl == 0.0) continue;
        const float* wr = W + vv * d;
        double* dwr = dW + vv * d;
        for (std::size_t i = 0; i < d; ++i) {
          dyr[i] += gl * wr[i];
          dwr[i] += gl * hr[i];
        }
      }
    }
  }
  if (dhidden) {
    for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] += dhidden->data[i];
  }

  Matrix dx(T, d);
  layer_norm_backward(dy, c.lnf_hat, c.lnf_rstd, P + lay.lnf_g, G + lay.lnf_g, G + lay.lnf_b, dx);

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool rotary = cfg.positional == PositionalMode::Rotary;
  Matrix tmp;
  for (std::size_t li = lay.layers.size(); li-- > 0;) {
    const LayerSlots& s = lay.layers[li];
    const LayerCache& lc = c.layers[li];

    // MLP branch.
    Matrix dr2 = dx;
    apply_mask(dr2, lc.mlp_mask);
    Matrix dact;
    linear_backward(lc.fc_act, P + s.out_w, dr2, dact, G + s.out_w, G + s.out_b);
    for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_grad(lc.fc_pre.data[i]);
    Matrix dln2;
    linear_backward(lc.ln2_out, P + s.fc_w, dact, dln2, G + s.fc_w, G + s.fc_b);
    layer_norm_backward(dln2, lc.ln2_hat, lc.ln2_rstd, P + s.ln2_g, G + s.ln2_g, G + s.ln2_b, dx);

    // Attention branch.
    Matrix dr = dx;
    apply_mask(dr, lc.attn_mask);
    Matrix dcat;
    linear_backward(lc.attn_cat, P + s.proj_w, dr, dcat, G + s.proj_w, G + s.proj_b);

    Matrix dq(T, d), dk(T, d), dv(T, d);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const auto pr = lc.probs.row(h * T + t);
        const double* dout = dcat.data.data() + t * d + h * dh;
        double dsum = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double m = lc.probs_mask.empty() ? 1.0 : lc.probs_mask(h * T + t, j);
          const double* vj = lc.v.data.data() + j * d + h * dh;
          double* dvj = dv.data.data() + j * d + h * dh;
          double dpd = 0.0;
          const double pd = pr[j] * m;
          for (std::size_t i = 0; i < dh; ++i) {
            dpd += dout[i] * vj[i];
            dvj[i] += pd * dout[i];
          }
          dp[j] = dpd * m;
          dsum += dp[j] * pr[j];
        }
        const double* qt = lc.q.data.data() + t * d + h * dh;
        double* dqt = dq.data.data() + t * d + h * dh;
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = pr[j] * (dp[j] - dsum) * scale;
          if (ds == 0.0) continue;
          const double* kj = lc.k.data.data() + j * d + h * dh;
          double* dkj = dk.data.data() + j * d + h * dh;
          for (std::size_t i = 0; i < dh; ++i) {
            dqt[i] += ds * kj[i];
            dkj[i] += ds * qt[i];
          }
        }
      }
    }

    Matrix dqkv(T, 3 * d);
    for (std::size_t t = 0; t < T; ++t) {
      if (rotary && rotated(c, t)) {
        for (std::size_t h = 0; h < H; ++h) {
          apply_rotary_inverse(dq.row(t).subspan(h * dh, dh), static_cast<double>(t), cfg.rotary_base);
          apply_rotary_inverse(dk.row(t).subspan(h * dh, dh), static_cast<double>(t), cfg.rotary_base);
        }
      }
      for (std::size_t i = 0; i < d; ++i) {
        dqkv(t, i) = dq(t, i);
        dqkv(t, d + i) = dk(t, i);
        dqkv(t, 2 * d + i) = dv(t, i);
      }
    }
    Matrix dln1;
    linear_backward(lc.ln1_out, P + s.qkv_w, dqkv, dln1, G + s.qkv_w, G + s.qkv_b);
    layer_norm_backward(dln1, lc.ln1_hat, lc.ln1_rstd, P + s.ln1_g, G + s.ln1_g, G + s.ln1_b, dx);
  }

  apply_mask(dx, c.embed_mask);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dxr = dx.data.data() + t * d;
    if (t < k) {
      for (std::size_t i = 0; i < d; ++i) g.prefix[t * d + i] += dxr[i];
    } else {
      double* de = G + lay.wte + static_cast<std::size_t>(c.ids[t - k]) * d;
      for (std::size_t i = 0; i < d; ++i) de[i] += dxr[i];
    }
    if (lay.wpe != ParamLayout::npos) {
      double* dpe = G + lay.wpe + t * d;
      for (std::size_t i = 0; i < d; ++i) dpe[i] += dxr[i];
    }
  }
}

Gradients backward(const Model& model, const ForwardCache& cache, const Matrix* dlogits, const Matrix* dhidden) {
  Gradients g(model.layout().total(), cache.prefix_len * static_cast<std::size_t>(model.config().d_model));
  backward(model, cache, dlogits, dhidden, g);
  return g;
}

}  // namespace pagnol
