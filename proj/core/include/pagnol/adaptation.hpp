#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pagnol/model.hpp"
#include "pagnol/tokenizer.hpp"
#include "pagnol/training.hpp"

namespace pagnol {

struct TaskExample {
  std::vector<TokenId> input_ids;
  // One entry per input token: 1 when that token is a supervised target.
  std::vector<double> loss_mask;
  int label = -1;  // classification only
  std::map<std::string, std::string> raw_fields;

  // Position of the single CLS token; throws if absent or repeated.
  std::size_t cls_position() const;
  // Next-token training view: ids plus the mask shifted onto targets.
  Sequence to_sequence() const;
  // Tokens ahead of the first supervised position (the decoding prompt).
  std::vector<TokenId> prompt_ids() const;
  // Supervised tokens, in order.
  std::vector<TokenId> target_ids() const;
};

enum class TruncateSide : std::uint8_t { KeepTail, KeepHead };

struct ClsOptions {
  int n_classes = 2;
  TruncateSide truncate = TruncateSide::KeepTail;
};

// encode(text) cut to max_len - 2 tokens, then CLS, then EOS.
TaskExample build_cls_example(std::string_view text, int label, const Vocabulary& vocab, std::size_t max_len,
                              const ClsOptions& options = {});

// "{d} Question: {q} Réponse: {a}" + EOS, supervised on the answer and EOS.
// An over-long context loses the end of the document; the template, the
// question and the answer are never cut.
TaskExample build_qa_example(std::string_view context, std::string_view question, std::string_view answer,
                             const Vocabulary& vocab, std::size_t max_len);
// "{n} Summary: {a}" + EOS, supervised on the summary and EOS.
TaskExample build_sum_example(std::string_view article, std::string_view summary, const Vocabulary& vocab,
                              std::size_t max_len);

// Linear layer [d_model -> n_classes] read from the CLS hidden state.
struct ClassifierHead {
  int n_classes = 2;
  int d_model = 0;
  std::vector<float> weight;  // [n_classes, d_model]
  std::vector<float> bias;    // [n_classes]

  static ClassifierHead zeros(int n_classes, int d_model);
  static ClassifierHead init(int n_classes, int d_model, std::uint64_t seed, double std = 0.02);
  std::size_t size() const { return weight.size() + bias.size(); }
  void validate() const;
};

std::vector<double> classify(const Model& model, const ClassifierHead& head, const TaskExample& example);
int predict_label(const Model& model, const ClassifierHead& head, const TaskExample& example);

struct FinetuneResult {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::int64_t steps = 0;
};

// Full-parameter fine-tuning for `epochs` passes. With a head, the loss is
// cross-entropy on the labels through the CLS state (head trained jointly);
// without, it is the masked next-token loss. The schedule is plan's
// warmup + cosine; dropout_p overrides the model's rate when set.
FinetuneResult finetune(Model& model, std::span<const TaskExample> examples, const TrainPlan& plan,
                        std::size_t epochs, ClassifierHead* head = nullptr,
                        std::optional<double> dropout_p = std::nullopt);

struct SoftPrompt {
  std::size_t prompt_k = 0;
  std::size_t d_model = 0;
  std::vector<float> vectors;  // [prompt_k, d_model]

  static SoftPrompt init(std::size_t prompt_k, std::size_t d_model, std::uint64_t seed, double std = 0.02);
  void validate() const;
};

struct PromptTuneOptions {
  std::int64_t steps = 100;
  bool rotate_prefix = true;
  std::optional<double> dropout_p;
};

struct PromptTuneResult {
  std::vector<double> step_loss;
};

// Trains only the soft prompt; the model is taken by const reference and
// is never modified. Each step uses plan.batch_size examples in cyclic order.
PromptTuneResult prompt_tune(const Model& model, std::span<const TaskExample> examples, SoftPrompt& soft,
                             const TrainPlan& plan, const PromptTuneOptions& options = {});

// Mean masked next-token loss of the examples, optionally behind a prompt.
double task_loss(const Model& model, std::span<const TaskExample> examples, const SoftPrompt* soft = nullptr,
                 bool rotate_prefix = true);

// Fraction of examples whose every supervised token is the argmax over the
// full vocabulary (teacher forced), optionally behind a soft prompt.
double task_accuracy(const Model& model, std::span<const TaskExample> examples, const SoftPrompt* soft = nullptr,
                     bool rotate_prefix = true);

struct HyperGrid {
  std::vector<double> lr{1e-3};
  std::vector<double> weight_decay{0.0};
  std::vector<double> dropout{0.0};
  std::vector<std::size_t> prompt_k{1};
  std::size_t epochs = 1;

  void validate() const;
  std::size_t size() const { return lr.size() * weight_decay.size() * dropout.size() * prompt_k.size(); }
};

struct GridCell {
  double lr = 0.0;
  double weight_decay = 0.0;
  double dropout = 0.0;
  std::size_t prompt_k = 0;
  std::size_t epochs = 0;
};

struct GridResult {
  std::vector<GridCell> cells;  // grid order: lr, weight_decay, dropout, prompt_k (innermost)
  std::vector<double> metric;
  std::size_t best = 0;

  std::string to_csv() const;
};

// Evaluates every cell; the best metric wins, ties go to the earliest cell.
// Cells may run concurrently, so `evaluate` must only read shared inputs.
GridResult grid_search(const HyperGrid& grid, const std::function<double(const GridCell&)>& evaluate,
                       bool higher_is_better = true, unsigned threads = 1);

// JSON-lines task files.
struct ClsRecord {
  std::string text;
  int label = 0;
};
struct QaRecord {
  std::string context, question, answer;
};
struct SumRecord {
  std::string article, summary;
};
std::vector<ClsRecord> load_cls_jsonl(const std::filesystem::path& path);
std::vector<QaRecord> load_qa_jsonl(const std::filesystem::path& path);
std::vector<SumRecord> load_sum_jsonl(const std::filesystem::path& path);

}  // namespace pagnol
