#include "pagnol/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <numbers>
#include <sstream>

#include "pagnol/kv_config.hpp"
#include "pagnol/rng.hpp"

namespace pagnol {

// ---------------------------------------------------------------------------
// Plan

void TrainPlan::validate() const {
  if (!(lr_min >= 0.0 && lr_min <= lr_max)) throw InvalidArgument("plan: need 0 <= lr_min <= lr_max");
  if (warmup_steps < 0 || decay_steps < 0) throw InvalidArgument("plan: negative step counts");
  if (warmup_steps > decay_steps) throw InvalidArgument("plan: warmup_steps must not exceed decay_steps");
  if (!(epsilon > 0.0)) throw InvalidArgument("plan: epsilon must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgument("plan: betas must be in [0, 1)");
  }
  if (!(grad_clip > 0.0)) throw InvalidArgument("plan: grad_clip must be positive");
  if (weight_decay < 0.0) throw InvalidArgument("plan: weight_decay must be non-negative");
  if (batch_size < 1) throw InvalidArgument("plan: batch_size must be >= 1");
  if (total_steps < 0) throw InvalidArgument("plan: total_steps must be >= 0");
  if (micro_batches < 1 || batch_size % micro_batches != 0) {
    throw InvalidArgument("plan: micro_batches must divide batch_size");
  }
}

TrainPlan plan_preset(std::string_view name) {
  TrainPlan p;
  auto lr = [&](double hi) {
    p.lr_max = hi;
    p.lr_min = hi / 10.0;
  };
  if (name == "xxs") {
    lr(3e-3);
    p.warmup_steps = 20;
    p.decay_steps = 480;
    p.batch_size = 8;
    p.beta2 = 0.95;
    p.total_steps = 500;
  } else if (name == "xs") {
    lr(1e-3);
    p.warmup_steps = 50;
    p.decay_steps = 1000;
    p.batch_size = 8;
    p.beta2 = 0.95;
    p.total_steps = 1000;
  } else if (name == "s") {
    lr(5e-4);
    p.warmup_steps = 5000;
    p.decay_steps = 400000;
    p.batch_size = 10;
  } else if (name == "m") {
    lr(3e-4);
    p.warmup_steps = 5000;
    p.decay_steps = 500000;
    p.batch_size = 5;
  } else if (name == "l") {
    lr(2.5e-4);
    p.warmup_steps = 5000;
    p.decay_steps = 100000;
    p.batch_size = 1;
  } else if (name == "xl") {
    lr(2.5e-4);
    p.warmup_steps = 3600;
    p.decay_steps = 400000;
    p.batch_size = 4;
    p.beta2 = 0.95;
    p.grad_clip = 0.75;
  } else if (name == "s-oscar") {
    lr(6e-4);
    p.warmup_steps = 2000;
    p.decay_steps = 325000;
    p.batch_size = 12;
    p.beta2 = 0.95;
  } else if (name == "m-oscar") {
    lr(3e-4);
    p.warmup_steps = 2000;
    p.decay_steps = 325000;
    p.batch_size = 5;
  } else {
    throw InvalidArgument("unknown plan preset: " + std::string(name));
  }
  if (p.total_steps == 0) p.total_steps = p.warmup_steps + p.decay_steps;
  return p;
}

std::map<std::string, std::string> plan_to_map(const TrainPlan& p) {
  return {
      {"lr_max", format_double(p.lr_max)},
      {"lr_min", format_double(p.lr_min)},
      {"warmup_steps", std::to_string(p.warmup_steps)},
      {"decay_steps", std::to_string(p.decay_steps)},
      {"beta1", format_double(p.beta1)},
      {"beta2", format_double(p.beta2)},
      {"epsilon", format_double(p.epsilon)},
      {"grad_clip", format_double(p.grad_clip)},
      {"weight_decay", format_double(p.weight_decay)},
      {"batch_size", std::to_string(p.batch_size)},
      {"total_steps", std::to_string(p.total_steps)},
      {"seed", std::to_string(p.seed)},
      {"micro_batches", std::to_string(p.micro_batches)},
  };
}

void apply_plan_keys(TrainPlan& p, std::map<std::string, std::string>& kv) {
  auto take = [&](const char* key, auto apply) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    apply(it->first, it->second);
    kv.erase(it);
  };
  auto dbl = [](double& field) { return [&field](const std::string& k, const std::string& v) { field = parse_double(k, v); }; };
  auto i64 = [](std::int64_t& field) {
    return [&field](const std::string& k, const std::string& v) { field = parse_int<std::int64_t>(k, v); };
  };
  take("lr_max", dbl(p.lr_max));
  take("lr_min", dbl(p.lr_min));
  take("warmup_steps", i64(p.warmup_steps));
  take("decay_steps", i64(p.decay_steps));
  take("beta1", dbl(p.beta1));
  take("beta2", dbl(p.beta2));
  take("epsilon", dbl(p.epsilon));
  take("grad_clip", dbl(p.grad_clip));
  take("weight_decay", dbl(p.weight_decay));
  take("batch_size", i64(p.batch_size));
  take("total_steps", i64(p.total_steps));
  take("micro_batches", i64(p.micro_batches));
  take("seed", [&](const std::string& k, const std::string& v) { p.seed = parse_int<std::uint64_t>(k, v); });
}

// ---------------------------------------------------------------------------
// Objective

LossGrad lm_loss_grad(const Matrix& logits, std::span<const TokenId> targets, std::span<const double> mask,
                      double grad_scale) {
  if (logits.rows < targets.size()) throw InvalidArgument("lm_loss: fewer logit rows than targets");
  if (!mask.empty() && mask.size() != targets.size()) throw InvalidArgument("lm_loss: mask/target size mismatch");
  const std::size_t V = logits.cols;
  LossGrad out;
  out.dlogits = Matrix(logits.rows, V);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const double w = mask.empty() ? 1.0 : mask[t];
    if (w != 0.0 && w != 1.0) throw InvalidArgument("lm_loss: mask weights must be 0 or 1");
    if (w == 0.0) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V) throw InvalidArgument("lm_loss: bad target id");
    const auto row = logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double z : row) sum += std::exp(z - mx);
    const double lse = mx + std::log(sum);
    out.loss_sum += lse - row[static_cast<std::size_t>(targets[t])];
    out.weight += 1.0;
    auto drow = out.dlogits.row(t);
    for (std::size_t v = 0; v < V; ++v) drow[v] = grad_scale * std::exp(row[v] - lse);
    drow[static_cast<std::size_t>(targets[t])] -= grad_scale;
  }
  return out;
}

double lm_loss(const Matrix& logits, std::span<const TokenId> targets, std::span<const double> mask) {
  if (logits.rows != targets.size()) throw InvalidArgument("lm_loss: logits rows must equal target count");
  const auto lg = lm_loss_grad(logits, targets, mask, 0.0);
  if (lg.weight == 0.0) throw InvalidArgument("no supervised positions");
  return lg.loss_sum / lg.weight;
}

std::vector<TokenId> next_token_targets(std::span<const TokenId> ids) {
  if (ids.size() < 2) return {};
  return std::vector<TokenId>(ids.begin() + 1, ids.end());
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_at(std::int64_t step, const TrainPlan& plan) {
  if (step < 0) throw InvalidArgument("lr_at: negative step");
  if (step < plan.warmup_steps) {
    return plan.lr_max * static_cast<double>(step) / static_cast<double>(plan.warmup_steps);
  }
  const std::int64_t into = step - plan.warmup_steps;
  if (plan.decay_steps == 0 || into >= plan.decay_steps) return plan.lr_min;
  const double u = static_cast<double>(into) / static_cast<double>(plan.decay_steps);
  return plan.lr_min + (plan.lr_max - plan.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

void adam_step(Model& model, std::span<const double> grads, OptimizerState& state, double lr, const TrainPlan& plan) {
  const std::size_t n = model.params().size();
  if (grads.size() != n) throw InvalidArgument("adam_step: gradient size mismatch");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(n, 0.0f);
    state.v.assign(n, 0.0f);
  }
  if (state.m.size() != n || state.v.size() != n) throw InvalidArgument("adam_step: optimizer state size mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("non-finite gradient in tensor " + model.layout().owner(i).name);
    }
  }
  state.step += 1;
  adam_update<float>(model.params(), grads, state.m, state.v, state.step, lr,
                     {plan.beta1, plan.beta2, plan.epsilon, plan.weight_decay});
}

ClipResult clip_global_norm(std::span<double> grads, double bound) {
  if (!(bound > 0.0)) throw InvalidArgument("clip bound must be positive");
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  ClipResult r{std::sqrt(sq), false};
  if (r.norm > bound) {
    const double s = bound / r.norm;
    for (double& g : grads) g *= s;
    r.clipped = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradients

namespace {

struct SeqGrad {
  double loss_sum = 0.0;
  double weight = 0.0;
  Gradients grads;
};

SeqGrad sequence_gradient(const Model& model, const Sequence& seq, bool train, std::uint64_t seed) {
  ForwardOptions opt;
  opt.train = train;
  opt.seed = seed;
  auto fr = forward(model, seq.ids, opt);
  const auto targets = next_token_targets(seq.ids);
  auto lg = lm_loss_grad(fr.logits, targets, seq.mask, 1.0);
  SeqGrad out{lg.loss_sum, lg.weight, Gradients(model.layout().total())};
  backward(model, fr.cache, &lg.dlogits, nullptr, out.grads);
  return out;
}

}  // namespace

BatchGradient batch_gradient(const Model& model, const Batch& batch, bool train, std::span<const std::uint64_t> seeds,
                             unsigned threads) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  if (train && seeds.size() != batch.size()) throw InvalidArgument("one dropout seed per sequence required");
  const std::size_t n = model.layout().total();
  BatchGradient out;
  out.grads.assign(n, 0.0);
  double loss_sum = 0.0;
  threads = std::max(1u, threads);

  for (std::size_t start = 0; start < batch.size(); start += threads) {
    const std::size_t end = std::min(batch.size(), start + threads);
    std::vector<SeqGrad> results(end - start);
    if (end - start == 1) {
      results[0] = sequence_gradient(model, batch[start], train, train ? seeds[start] : 0);
    } else {
      std::vector<std::future<SeqGrad>> futs;
      for (std::size_t i = start; i < end; ++i) {
        futs.push_back(std::async(std::launch::async, sequence_gradient, std::cref(model), std::cref(batch[i]), train,
                                  train ? seeds[i] : 0));
      }
      for (std::size_t i = 0; i < futs.size(); ++i) results[i] = futs[i].get();
    }
    for (auto& r : results) {
      loss_sum += r.loss_sum;
      out.weight += r.weight;
      for (std::size_t i = 0; i < n; ++i) out.grads[i] += r.grads.params[i];
    }
  }
  if (out.weight == 0.0) throw InvalidArgument("no supervised positions");
  for (double& g : out.grads) g /= out.weight;
  out.loss = loss_sum / out.weight;
  return out;
}

BatchGradient data_parallel_step(const Model& model, std::span<const Batch> micro_batches, const TrainPlan& plan,
                                 bool train, std::int64_t step) {
  if (micro_batches.empty()) throw InvalidArgument("data_parallel_step: no micro-batches");
  const Batch& ref = micro_batches.front();
  for (const auto& mb : micro_batches) {
    bool same = mb.size() == ref.size();
    for (std::size_t i = 0; same && i < mb.size(); ++i) {
      same = mb[i].ids.size() == ref[i].ids.size() && mb[i].mask.size() == ref[i].mask.size();
    }
    if (!same) throw InvalidArgument("data_parallel_step: inconsistent micro-batch shapes");
  }

  std::vector<std::future<BatchGradient>> futs;
  std::vector<std::vector<std::uint64_t>> seeds(micro_batches.size());
  for (std::size_t m = 0; m < micro_batches.size(); ++m) {
    for (std::size_t i = 0; i < micro_batches[m].size(); ++i) {
      const std::uint64_t global = m * ref.size() + i;
      seeds[m].push_back(derive_seed(plan.seed, {static_cast<std::uint64_t>(step), global}));
    }
  }
  for (std::size_t m = 0; m < micro_batches.size(); ++m) {
    futs.push_back(std::async(std::launch::async, [&, m] {
      return batch_gradient(model, micro_batches[m], train, seeds[m], 1);
    }));
  }
  BatchGradient out;
  out.grads.assign(model.layout().total(), 0.0);
  for (auto& f : futs) {
    auto r = f.get();
    out.loss += r.loss;
    out.weight += r.weight;
    for (std::size_t i = 0; i < out.grads.size(); ++i) out.grads[i] += r.grads[i];
  }
  const double inv = 1.0 / static_cast<double>(micro_batches.size());
  for (double& g : out.grads) g *= inv;
  out.loss *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(Model& model, const PackedStream& stream, TrainPlan plan)
    : Trainer(model, stream, std::move(plan), OptimizerState(model.params().size()), 0) {}

Trainer::Trainer(Model& model, const PackedStream& stream, TrainPlan plan, OptimizerState state,
                 std::int64_t start_step)
    : model_(model), stream_(stream), plan_(std::move(plan)), state_(std::move(state)), step_(start_step) {
  plan_.validate();
  if (stream_.n_blocks() == 0) throw InvalidArgument("training stream is empty");
  if (stream_.block_length > static_cast<std::size_t>(model_.config().context_length)) {
    throw InvalidArgument("block length exceeds the model context");
  }
  if (state_.m.empty()) state_ = OptimizerState(model_.params().size());
  result_.n_params = count_params(model_.config());
  result_.tokens = static_cast<std::uint64_t>(start_step) * static_cast<std::uint64_t>(plan_.batch_size) *
                   stream_.block_length;
  result_.flop = 6.0 * static_cast<double>(result_.n_params) * static_cast<double>(result_.tokens);
}

Batch Trainer::batch_for(std::int64_t step) const {
  Batch b;
  const std::size_t nb = stream_.n_blocks();
  const auto B = static_cast<std::size_t>(plan_.batch_size);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t idx = (static_cast<std::size_t>(step) * B + i) % nb;
    const auto blk = stream_.block(idx);
    b.push_back(Sequence{std::vector<TokenId>(blk.begin(), blk.end()), {}});
  }
  return b;
}

void Trainer::run_until(std::int64_t end_step) {
  end_step = std::min(end_step, plan_.total_steps);
  const auto M = static_cast<std::size_t>(plan_.micro_batches);
  while (step_ < end_step) {
    Batch batch = batch_for(step_);
    const std::size_t per = batch.size() / M;
    std::vector<Batch> micro(M);
    for (std::size_t m = 0; m < M; ++m) {
      micro[m].assign(std::make_move_iterator(batch.begin() + static_cast<std::ptrdiff_t>(m * per)),
                      std::make_move_iterator(batch.begin() + static_cast<std::ptrdiff_t>((m + 1) * per)));
    }
    BatchGradient bg = data_parallel_step(model_, micro, plan_, true, step_);
    if (!std::isfinite(bg.loss)) throw NumericError("non-finite loss at step " + std::to_string(step_));
    clip_global_norm(bg.grads, plan_.grad_clip);
    const double lr = lr_at(step_, plan_);
    adam_step(model_, bg.grads, state_, lr, plan_);

    result_.tokens += static_cast<std::uint64_t>(plan_.batch_size) * stream_.block_length;
    result_.flop = 6.0 * static_cast<double>(result_.n_params) * static_cast<double>(result_.tokens);
    TraceRow row{step_, bg.loss, lr, result_.tokens, result_.flop};
    result_.trace.push_back(row);
    if (on_step) on_step(row);
    ++step_;
  }
}

TrainResult train(Model& model, const PackedStream& stream, const TrainPlan& plan) {
  if (plan.total_steps == 0) {
    TrainResult r;
    r.n_params = count_params(model.config());
    return r;
  }
  Trainer t(model, stream, plan);
  t.run();
  return t.result();
}

// ---------------------------------------------------------------------------
// Trace CSV

void write_trace_header(std::ostream& out) { out << "step,loss,lr,tokens,flop\n"; }

void write_trace_row(std::ostream& out, const TraceRow& r) {
  out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.lr) << ',' << r.tokens << ','
      << format_double(r.flop) << '\n';
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_trace_header(out);
  for (const auto& r : rows) write_trace_row(out, r);
}

TraceFile read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  TraceFile tf;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.starts_with("#")) {
      if (line.find("resumed") != std::string::npos) tf.restart_rows.push_back(tf.rows.size());
      continue;
    }
    if (!header) {
      if (line != "step,loss,lr,tokens,flop") throw IoError(path.string() + ": unexpected trace header");
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 5 columns");
    try {
      TraceRow r;
      r.step = parse_int<std::int64_t>("step", cells[0]);
      r.loss = parse_double("loss", cells[1]);
      r.lr = parse_double("lr", cells[2]);
      r.tokens = parse_int<std::uint64_t>("tokens", cells[3]);
      r.flop = parse_double("flop", cells[4]);
      tf.rows.push_back(r);
    } catch (const InvalidArgument& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) throw IoError(path.string() + ": missing trace header");
  return tf;
}

}  // namespace pagnol
