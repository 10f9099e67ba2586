#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pagnol/error.hpp"
#include "pagnol/matrix.hpp"
#include "pagnol/model.hpp"
#include "pagnol/tokenizer.hpp"

namespace pagnol {

struct TrainPlan {
  double lr_max = 5e-4;
  double lr_min = 5e-5;
  std::int64_t warmup_steps = 5000;
  std::int64_t decay_steps = 400000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  std::int64_t batch_size = 10;
  std::int64_t total_steps = 0;
  std::uint64_t seed = 0;
  // Equal-sized micro-batches per step, averaged as in data parallelism.
  std::int64_t micro_batches = 1;

  void validate() const;
  friend bool operator==(const TrainPlan&, const TrainPlan&) = default;
};

// Optimizer presets for the full-size models ("s", "m", "l", "xl",
// "s-oscar", "m-oscar") plus small-model plans for "xxs" and "xs".
TrainPlan plan_preset(std::string_view name);

// Flat key=value view of a plan; keys are the TrainPlan field names.
std::map<std::string, std::string> plan_to_map(const TrainPlan& plan);
// Applies every recognised key and erases it from `kv`; unknown keys stay.
void apply_plan_keys(TrainPlan& plan, std::map<std::string, std::string>& kv);

struct OptimizerState {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t n) : m(n, 0.0f), v(n, 0.0f) {}
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// ---------------------------------------------------------------------------
// Objective

// Mean cross-entropy over positions with mask 1. logits has one row per
// target; an empty mask supervises every position.
double lm_loss(const Matrix& logits, std::span<const TokenId> targets, std::span<const double> mask = {});

struct LossGrad {
  double loss_sum = 0.0;  // summed CE over supervised positions
  double weight = 0.0;    // number of supervised positions
  Matrix dlogits;         // d(loss_sum * grad_scale) / d logits
};

// Cross-entropy and its gradient. Rows of logits beyond targets.size() get
// zero gradient, so a full block can be passed with T-1 targets.
LossGrad lm_loss_grad(const Matrix& logits, std::span<const TokenId> targets, std::span<const double> mask,
                      double grad_scale);

// Next-token targets for a block: targets[t] = ids[t+1] for t < T-1.
std::vector<TokenId> next_token_targets(std::span<const TokenId> ids);

// ---------------------------------------------------------------------------
// Schedule and optimizer

// Linear warmup from 0 to lr_max, cosine decay to lr_min over decay_steps,
// then constant lr_min.
double lr_at(std::int64_t step, const TrainPlan& plan);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// Bias-corrected Adam with decoupled weight decay on a flat parameter
// vector. `step` is the 1-based index of this update.
template <class T>
void adam_update(std::span<T> params, std::span<const double> grads, std::span<T> m, std::span<T> v,
                 std::int64_t step, double lr, const AdamHyper& h) {
  if (params.size() != grads.size() || m.size() != params.size() || v.size() != params.size()) {
    throw InvalidArgument("adam_update: size mismatch");
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    double p = static_cast<double>(params[i]);
    double update = mhat / (std::sqrt(vhat) + h.epsilon);
    if (h.weight_decay > 0.0) update += h.weight_decay * p;
    p -= lr * update;
    params[i] = static_cast<T>(p);
  }
}

// One Adam step on the model; throws NumericError naming the tensor if any
// gradient is non-finite. Increments state.step.
void adam_step(Model& model, std::span<const double> grads, OptimizerState& state, double lr, const TrainPlan& plan);

struct ClipResult {
  double norm = 0.0;  // global L2 norm before clipping
  bool clipped = false;
};

ClipResult clip_global_norm(std::span<double> grads, double bound);

// ---------------------------------------------------------------------------
// Batches and gradients

struct Sequence {
  std::vector<TokenId> ids;
  std::vector<double> mask;  // per target position; empty = all supervised
};

using Batch = std::vector<Sequence>;

struct BatchGradient {
  double loss = 0.0;    // token-weighted mean CE
  double weight = 0.0;  // supervised positions
  std::vector<double> grads;
};

// Gradient of the token-weighted mean loss over the batch. Per-sequence
// gradients are reduced in index order, so the result does not depend on
// `threads`. seeds[i] drives sequence i's dropout when train is set.
BatchGradient batch_gradient(const Model& model, const Batch& batch, bool train, std::span<const std::uint64_t> seeds,
                             unsigned threads = 1);

// Computes each micro-batch's gradient independently (concurrently) and
// averages them in list order. All micro-batches must have identical shapes.
BatchGradient data_parallel_step(const Model& model, std::span<const Batch> micro_batches, const TrainPlan& plan,
                                 bool train = true, std::int64_t step = 0);

// ---------------------------------------------------------------------------
// Training loop

struct TraceRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::uint64_t tokens = 0;  // cumulative input tokens
  double flop = 0.0;         // cumulative 6 * N * tokens
  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  std::uint64_t n_params = 0;
  std::uint64_t tokens = 0;
  double flop = 0.0;
};

// Resumable trainer. Batch composition, dropout seeds and learning rate are
// all pure functions of (plan.seed, step), so stopping, checkpointing and
// resuming reproduces an uninterrupted run exactly.
class Trainer {
 public:
  Trainer(Model& model, const PackedStream& stream, TrainPlan plan);
  Trainer(Model& model, const PackedStream& stream, TrainPlan plan, OptimizerState state, std::int64_t start_step);

  // Runs until `end_step` (exclusive) or plan.total_steps, whichever is less.
  void run_until(std::int64_t end_step);
  void run() { run_until(plan_.total_steps); }

  std::int64_t step() const { return step_; }
  const OptimizerState& optimizer() const { return state_; }
  const TrainPlan& plan() const { return plan_; }
  const TrainResult& result() const { return result_; }

  std::function<void(const TraceRow&)> on_step;

  Batch batch_for(std::int64_t step) const;

 private:
  Model& model_;
  const PackedStream& stream_;
  TrainPlan plan_;
  OptimizerState state_;
  std::int64_t step_ = 0;
  TrainResult result_;
};

TrainResult train(Model& model, const PackedStream& stream, const TrainPlan& plan);

// Loss trace CSV: "step,loss,lr,tokens,flop". A "# resumed at step N" line
// marks a restart.
void write_trace_header(std::ostream& out);
void write_trace_row(std::ostream& out, const TraceRow& row);
void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);

struct TraceFile {
  std::vector<TraceRow> rows;
  std::vector<std::size_t> restart_rows;  // index of first row after each restart marker
};
TraceFile read_trace_csv(const std::filesystem::path& path);

}  // namespace pagnol
