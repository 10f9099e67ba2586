#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "pagnol/error.hpp"
#include "pagnol/model.hpp"
#include "pagnol/training.hpp"

using namespace pagnol;

namespace {

using Mat = std::vector<std::vector<double>>;

ModelConfig tiny(PositionalMode mode, int layers = 2, int d = 8, int heads = 4, int vocab = 11, int ctx = 12) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.vocab_size = vocab;
  c.context_length = ctx;
  c.positional = mode;
  c.dropout_p = 0.0;
  return c;
}

Mat weight(const Model& m, const std::string& name, std::size_t rows, std::size_t cols) {
  const auto t = m.tensor(name);
  REQUIRE(t.size() == rows * cols);
  Mat w(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) w[r][c] = t[r * cols + c];
  }
  return w;
}

std::vector<double> vec(const Model& m, const std::string& name) {
  const auto t = m.tensor(name);
  return {t.begin(), t.end()};
}

Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    }
  }
  return out;
}

Mat add_bias(Mat x, const std::vector<double>& b) {
  for (auto& row : x) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
  return x;
}

Mat layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat out = x;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double n = static_cast<double>(x[t].size());
    const double mean = std::accumulate(x[t].begin(), x[t].end(), 0.0) / n;
    double var = 0.0;
    for (double v : x[t]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < x[t].size(); ++j) out[t][j] = (x[t][j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return out;
}

// Straight-line reference forward for a learned-position model in eval mode.
Mat reference_logits(const Model& m, const std::vector<TokenId>& ids) {
  const auto& c = m.config();
  const std::size_t d = c.d_model, H = c.n_heads, dh = d / H, T = ids.size(), V = c.vocab_size;
  const Mat wte = weight(m, "wte", V, d);
  const Mat wpe = weight(m, "wpe", c.context_length, d);
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < d; ++j) x[t][j] = wte[ids[t]][j] + wpe[t][j];
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    const Mat h = layer_norm(x, vec(m, p + "ln1.g"), vec(m, p + "ln1.b"));
    const Mat qkv = add_bias(matmul(h, weight(m, p + "attn.qkv.w", d, 3 * d)), vec(m, p + "attn.qkv.b"));
    Mat att(T, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> s(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (std::size_t i = 0; i < dh; ++i) dot += qkv[t][hd * dh + i] * qkv[u][d + hd * dh + i];
          s[u] = dot / std::sqrt(static_cast<double>(dh));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& v : s) z += (v = std::exp(v - mx));
        for (std::size_t u = 0; u <= t; ++u) {
          for (std::size_t i = 0; i < dh; ++i) att[t][hd * dh + i] += s[u] / z * qkv[u][2 * d + hd * dh + i];
        }
      }
    }
    const Mat r = add_bias(matmul(att, weight(m, p + "attn.proj.w", d, d)), vec(m, p + "attn.proj.b"));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < d; ++j) x[t][j] += r[t][j];
    }
    const Mat h2 = layer_norm(x, vec(m, p + "ln2.g"), vec(m, p + "ln2.b"));
    Mat f = add_bias(matmul(h2, weight(m, p + "mlp.fc.w", d, 4 * d)), vec(m, p + "mlp.fc.b"));
    for (auto& row : f) {
      for (double& v : row) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    }
    const Mat r2 = add_bias(matmul(f, weight(m, p + "mlp.proj.w", 4 * d, d)), vec(m, p + "mlp.proj.b"));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < d; ++j) x[t][j] += r2[t][j];
    }
  }
  const Mat hf = layer_norm(x, vec(m, "lnf.g"), vec(m, "lnf.b"));
  const Mat head = c.tie_embeddings ? wte : weight(m, "head", V, d);
  Mat logits(T, std::vector<double>(V, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t j = 0; j < d; ++j) logits[t][v] += hf[t][j] * head[v][j];
    }
  }
  return logits;
}

double stdev(std::span<const float> xs) {
  double mean = 0.0;
  for (float x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (float x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace

TEST_CASE("count_params on a hand-countable config") {
  ModelConfig c = tiny(PositionalMode::Learned, 1, 2, 1, 4, 2);
  c.tie_embeddings = false;
  // wte 8, wpe 4, ln1 4, qkv 12+6, proj 4+2, ln2 4, fc 16+8, mlp.proj 16+2,
  // lnf 4, head 8.
  CHECK(count_params(c) == 98);
  CHECK(Model(c).params().size() == 98);
}

TEST_CASE("count_params equals the instantiated layout") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    ModelConfig c;
    c.n_heads = 1 + static_cast<int>(rng() % 4);
    c.d_model = c.n_heads * 2 * (1 + static_cast<int>(rng() % 4));
    c.n_layers = 1 + static_cast<int>(rng() % 3);
    c.vocab_size = 1 + static_cast<int>(rng() % 300);
    c.context_length = 2 + static_cast<int>(rng() % 40);
    c.positional = rng() % 2 ? PositionalMode::Rotary : PositionalMode::Learned;
    c.tie_embeddings = rng() % 2;
    CHECK(count_params(c) == ParamLayout(c).total());
  }
}

TEST_CASE("preset parameter counts") {
  CHECK(count_params(model_preset("s")) == 124443648);
  CHECK(count_params(model_preset("m")) == 354828288);
  CHECK(count_params(model_preset("l")) == 774036480);
  CHECK(count_params(model_preset("xl")) == 1555980800);
  CHECK(count_params(model_preset("s-oscar")) == 124443648 + 50262ull * 768);
  CHECK(model_preset("xl").head_dim() == 64);
  CHECK(model_preset("xl").positional == PositionalMode::Rotary);
  CHECK_THROWS_AS(model_preset("xxl"), InvalidArgument);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny(PositionalMode::Learned);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = tiny(PositionalMode::Rotary, 1, 6, 2);  // head dim 3
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = tiny(PositionalMode::Learned);
  c.dropout_p = 1.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.dropout_p = 0.1;
  c.context_length = 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("init follows the scaled-normal rule") {
  ModelConfig c = tiny(PositionalMode::Learned, 2, 128, 4, 300, 64);
  const Model m = init_params(c, 42);
  std::vector<float> residual, regular;
  for (const auto& t : m.layout().tensors()) {
    const auto xs = m.params().subspan(t.offset, t.size);
    if (t.init == TensorInfo::Init::ResidualNormal) residual.insert(residual.end(), xs.begin(), xs.end());
    if (t.init == TensorInfo::Init::Normal) regular.insert(regular.end(), xs.begin(), xs.end());
    if (t.init == TensorInfo::Init::Ones) {
      for (float x : xs) CHECK(x == 1.0f);
    }
    if (t.init == TensorInfo::Init::Zeros) {
      for (float x : xs) CHECK(x == 0.0f);
    }
  }
  REQUIRE(residual.size() >= 100000);
  CHECK(stdev(residual) == doctest::Approx(0.01).epsilon(0.05));
  CHECK(stdev(regular) == doctest::Approx(0.02).epsilon(0.05));
  CHECK(m.layout().find("h0.attn.proj.w").init == TensorInfo::Init::ResidualNormal);
  CHECK(m.layout().find("h1.mlp.proj.w").init == TensorInfo::Init::ResidualNormal);
  CHECK(m.layout().find("h0.attn.qkv.b").init == TensorInfo::Init::Zeros);
  // Twelve layers scale by 1/sqrt(24).
  CHECK(0.02 / std::sqrt(2.0 * 12) == doctest::Approx(0.02 / std::sqrt(24.0)));
}

TEST_CASE("init is deterministic per seed") {
  const auto c = tiny(PositionalMode::Rotary);
  CHECK(init_params(c, 5) == init_params(c, 5));
  CHECK_FALSE(init_params(c, 5) == init_params(c, 6));
  CHECK(init_params(c, 5).param_hash() == init_params(c, 5).param_hash());
}

TEST_CASE("forward matches a straight-line reference") {
  for (bool tied : {true, false}) {
    ModelConfig c = tiny(PositionalMode::Learned, 1, 8, 2, 13, 10);
    c.tie_embeddings = tied;
    const Model m = oracle::random_model(c, 3);
    const std::vector<TokenId> ids{3, 7, 1, 12, 0, 5};
    const auto ref = reference_logits(m, ids);
    const auto got = forward(m, ids).logits;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      for (std::size_t v = 0; v < 13; ++v) CHECK(std::abs(got(t, v) - ref[t][v]) < 1e-6);
    }
  }
  const Model two = oracle::random_model(tiny(PositionalMode::Learned), 4);
  const std::vector<TokenId> ids{1, 2, 3, 4};
  const auto ref = reference_logits(two, ids);
  const auto got = forward(two, ids).logits;
  double worst = 0.0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    for (std::size_t v = 0; v < 11; ++v) worst = std::max(worst, std::abs(got(t, v) - ref[t][v]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("forward shapes and errors") {
  const Model m = init_params(tiny(PositionalMode::Learned), 1);
  const std::vector<TokenId> one{4};
  const auto r = forward(m, one);
  CHECK(r.logits.rows == 1);
  CHECK(r.logits.cols == 11);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>(13, 0)), InvalidArgument);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{11}), InvalidArgument);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{}), InvalidArgument);
}

TEST_CASE("logits are causal") {
  std::mt19937_64 rng(8);
  for (auto mode : {PositionalMode::Learned, PositionalMode::Rotary}) {
    const Model m = oracle::random_model(tiny(mode), rng());
    for (int trial = 0; trial < 20; ++trial) {
      auto ids = oracle::random_ids(12, 11, rng);
      const std::size_t p = rng() % 12;
      const auto a = forward(m, ids).logits;
      ids[p] = (ids[p] + 1 + static_cast<TokenId>(rng() % 10)) % 11;
      const auto b = forward(m, ids).logits;
      for (std::size_t t = 0; t < p; ++t) {
        for (std::size_t v = 0; v < 11; ++v) REQUIRE(a(t, v) == b(t, v));
      }
    }
  }
}

TEST_CASE("forward is reproducible; dropout depends only on the seed") {
  ModelConfig c = tiny(PositionalMode::Learned);
  c.dropout_p = 0.3;
  const Model m = oracle::random_model(c, 2);
  const std::vector<TokenId> ids{1, 2, 3, 4, 5};
  CHECK(forward(m, ids).logits.data == forward(m, ids).logits.data);
  ForwardOptions tr;
  tr.train = true;
  tr.seed = 77;
  CHECK(forward(m, ids, tr).logits.data == forward(m, ids, tr).logits.data);
  ForwardOptions other = tr;
  other.seed = 78;
  CHECK(forward(m, ids, tr).logits.data != forward(m, ids, other).logits.data);
  CHECK(forward(m, ids, tr).logits.data != forward(m, ids).logits.data);
}

TEST_CASE("analytic gradients match finite differences") {
  for (auto mode : {PositionalMode::Learned, PositionalMode::Rotary}) {
    for (bool tied : {true, false}) {
      ModelConfig c = tiny(mode);
      c.tie_embeddings = tied;
      Model m = oracle::random_model(c, 11);
      std::mt19937_64 rng(12);
      const auto ids = oracle::random_ids(7, 11, rng);
      const auto targets = oracle::random_ids(7, 11, rng);
      const auto rep = oracle::fd_check(m, ids, targets, {});
      INFO(to_string(mode) << " tied=" << tied << " worst " << rep.worst);
      CHECK(rep.checked == m.params().size());
      CHECK(rep.max_rel < 1e-4);
    }
  }
}

TEST_CASE("gradients with dropout masks match finite differences") {
  ModelConfig c = tiny(PositionalMode::Learned, 1);
  c.dropout_p = 0.2;
  Model m = oracle::random_model(c, 13);
  std::mt19937_64 rng(14);
  const auto ids = oracle::random_ids(6, 11, rng);
  const auto targets = oracle::random_ids(6, 11, rng);
  ForwardOptions opt;
  opt.train = true;
  opt.seed = 99;
  const auto rep = oracle::fd_check(m, ids, targets, opt);
  INFO(rep.worst);
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("soft-prefix gradients match finite differences") {
  for (bool rotate : {true, false}) {
    const ModelConfig c = tiny(PositionalMode::Rotary);
    const Model m = oracle::random_model(c, 15);
    std::mt19937_64 rng(16);
    const auto ids = oracle::random_ids(5, 11, rng);
    std::vector<float> prefix(3 * 8);
    std::normal_distribution<double> nd(0.0, 0.5);
    for (auto& x : prefix) x = static_cast<float>(nd(rng));
    // Rows 2.. predict ids; rows 0..1 are unsupervised.
    std::vector<TokenId> targets(7, 0);
    std::vector<double> mask(7, 0.0);
    for (std::size_t r = 2; r < 7; ++r) {
      targets[r] = ids[r - 2];
      mask[r] = 1.0;
    }
    ForwardOptions opt;
    opt.prefix = prefix;
    opt.rotate_prefix = rotate;
    auto fr = forward(m, ids, opt);
    const auto lg = lm_loss_grad(fr.logits, targets, mask, 1.0);
    const auto g = backward(m, fr.cache, &lg.dlogits);
    REQUIRE(g.prefix.size() == prefix.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      const float orig = prefix[i];
      const float hi = orig + 1e-4f, lo = orig - 1e-4f;
      ForwardOptions o = opt;
      o.keep_cache = false;
      prefix[i] = hi;
      const double fp = lm_loss_grad(forward(m, ids, o).logits, targets, mask, 0.0).loss_sum;
      prefix[i] = lo;
      const double fm = lm_loss_grad(forward(m, ids, o).logits, targets, mask, 0.0).loss_sum;
      prefix[i] = orig;
      const double num = (fp - fm) / (static_cast<double>(hi) - lo);
      worst = std::max(worst, std::abs(num - g.prefix[i]) / std::max({std::abs(num), std::abs(g.prefix[i]), 1e-6}));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  const Model m = oracle::random_model(tiny(PositionalMode::Rotary), 3);
  const std::vector<TokenId> ids{1, 2, 3};
  const auto fr = forward(m, ids);
  const Matrix zeros(3, 11);
  const auto g = backward(m, fr.cache, &zeros);
  for (double x : g.params) CHECK(x == 0.0);
}

TEST_CASE("tied embedding gradient sums input and output contributions") {
  ModelConfig tied_cfg = tiny(PositionalMode::Learned);
  ModelConfig untied_cfg = tied_cfg;
  untied_cfg.tie_embeddings = false;
  const Model tied = oracle::random_model(tied_cfg, 21);
  Model untied(untied_cfg);
  for (const auto& t : tied.layout().tensors()) {
    const auto src = tied.tensor(t.name);
    std::copy(src.begin(), src.end(), untied.tensor(t.name).begin());
  }
  const auto wte = tied.tensor("wte");
  std::copy(wte.begin(), wte.end(), untied.tensor("head").begin());

  const std::vector<TokenId> ids{1, 5, 9, 2};
  const std::vector<TokenId> targets{5, 9, 2};
  auto grad_of = [&](const Model& m) {
    const auto fr = forward(m, ids);
    const auto lg = lm_loss_grad(fr.logits, targets, {}, 1.0);
    return backward(m, fr.cache, &lg.dlogits);
  };
  const auto gt = grad_of(tied);
  const auto gu = grad_of(untied);
  const auto& wt = tied.layout().find("wte");
  const auto& wu = untied.layout().find("wte");
  const auto& hu = untied.layout().find("head");
  for (std::size_t i = 0; i < wt.size; ++i) {
    CHECK(gt.params[wt.offset + i] ==
          doctest::Approx(gu.params[wu.offset + i] + gu.params[hu.offset + i]).epsilon(1e-12));
  }
}

TEST_CASE("backward requires a cache") {
  const Model m = init_params(tiny(PositionalMode::Learned), 1);
  ForwardOptions opt;
  opt.keep_cache = false;
  const auto fr = forward(m, std::vector<TokenId>{1, 2}, opt);
  CHECK_THROWS_AS(backward(m, fr.cache, &fr.logits), InvalidArgument);
  const ForwardCache empty;
  CHECK_THROWS_AS(backward(m, empty, nullptr), InvalidArgument);
}

TEST_CASE("rotary rotation properties") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<double> q(16), k(16);
  for (auto& x : q) x = nd(rng);
  for (auto& x : k) x = nd(rng);

  auto q0 = q;
  apply_rotary(q0, 0.0);
  CHECK(q0 == q);

  auto qr = q;
  apply_rotary(qr, 17.0);
  auto norm = [](const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); };
  CHECK(norm(qr) == doctest::Approx(norm(q)).epsilon(1e-12));

  auto back = qr;
  apply_rotary_inverse(back, 17.0);
  for (std::size_t i = 0; i < q.size(); ++i) CHECK(back[i] == doctest::Approx(q[i]).epsilon(1e-12));

  // First pair rotates by exactly the position (theta_0 = pos).
  std::vector<double> e{1.0, 0.0};
  apply_rotary(e, 0.5);
  CHECK(e[0] == doctest::Approx(std::cos(0.5)));
  CHECK(e[1] == doctest::Approx(std::sin(0.5)));

  for (int trial = 0; trial < 100; ++trial) {
    const double p1 = static_cast<double>(rng() % 500), p2 = static_cast<double>(rng() % 500);
    const double s = static_cast<double>(rng() % 1000);
    auto a = q, b = k, c = q, d = k;
    apply_rotary(a, p1);
    apply_rotary(b, p2);
    apply_rotary(c, p1 + s);
    apply_rotary(d, p2 + s);
    const double dot1 = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    const double dot2 = std::inner_product(c.begin(), c.end(), d.begin(), 0.0);
    CHECK(std::abs(dot1 - dot2) < 1e-6);
  }
  std::vector<double> odd(3, 1.0);
  CHECK_THROWS_AS(apply_rotary(odd, 1.0), InvalidArgument);
}
