#include "pagnol/adaptation.hpp"
#include "pagnol/kv_config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <numeric>

#include <nlohmann/json.hpp>

#include "pagnol/error.hpp"
#include "pagnol/generation.hpp"
#include "pagnol/rng.hpp"

namespace pagnol {
namespace {

constexpr TokenId kEos = Vocabulary::special(SpecialToken::Eos);
constexpr TokenId kCls = Vocabulary::special(SpecialToken::Cls);

// Document tokens followed by template tokens and the supervised answer
// (which already ends in EOS). The document loses its end when too long.
TaskExample assemble(std::vector<TokenId> doc, const std::vector<TokenId>& tmpl, const std::vector<TokenId>& answer,
                     std::size_t max_len) {
  const std::size_t fixed = tmpl.size() + answer.size();
  if (fixed > max_len) {
    throw InvalidArgument("template and answer need " + std::to_string(fixed) + " tokens, more than max_len " +
                          std::to_string(max_len));
  }
  if (doc.size() + fixed > max_len) doc.resize(max_len - fixed);
  TaskExample ex;
  ex.input_ids = std::move(doc);
  ex.input_ids.insert(ex.input_ids.end(), tmpl.begin(), tmpl.end());
  ex.loss_mask.assign(ex.input_ids.size(), 0.0);
  ex.input_ids.insert(ex.input_ids.end(), answer.begin(), answer.end());
  ex.loss_mask.resize(ex.input_ids.size(), 1.0);
  return ex;
}

std::vector<TokenId> answer_tokens(std::string_view a, const Vocabulary& vocab) {
  auto ids = encode(a, vocab, true);
  ids.push_back(kEos);
  return ids;
}

void softmax_inplace(std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

std::vector<double> head_logits(const ClassifierHead& head, std::span<const double> h) {
  const auto d = static_cast<std::size_t>(head.d_model);
  std::vector<double> z(static_cast<std::size_t>(head.n_classes));
  for (std::size_t c = 0; c < z.size(); ++c) {
    double acc = head.bias[c];
    for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(head.weight[c * d + i]) * h[i];
    z[c] = acc;
  }
  return z;
}

// Next-token targets and mask for a sequence placed after k prefix rows.
// Row r predicts input token r - k + 1.
void prefixed_targets(const TaskExample& ex, std::size_t k, std::vector<TokenId>& targets, std::vector<double>& mask) {
  const std::size_t T = k + ex.input_ids.size();
  targets.assign(T - 1, 0);
  mask.assign(T - 1, 0.0);
  for (std::size_t r = k == 0 ? 0 : k - 1; r + 1 < T; ++r) {
    targets[r] = ex.input_ids[r + 1 - k];
    mask[r] = ex.loss_mask[r + 1 - k];
  }
}

void check_example(const TaskExample& ex) {
  if (ex.input_ids.empty()) throw InvalidArgument("empty task example");
  if (ex.loss_mask.size() != ex.input_ids.size()) throw InvalidArgument("loss_mask length does not match input_ids");
}

template <class Record, class Fill>
std::vector<Record> load_jsonl(const std::filesystem::path& path, Fill fill) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Record r;
      fill(j, r);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Examples

std::size_t TaskExample::cls_position() const {
  const auto n = std::count(input_ids.begin(), input_ids.end(), kCls);
  if (n != 1) throw InvalidArgument(n == 0 ? "example has no CLS token" : "example has more than one CLS token");
  return static_cast<std::size_t>(std::find(input_ids.begin(), input_ids.end(), kCls) - input_ids.begin());
}

Sequence TaskExample::to_sequence() const {
  check_example(*this);
  Sequence s;
  s.ids = input_ids;
  s.mask.assign(loss_mask.begin() + 1, loss_mask.end());
  return s;
}

std::vector<TokenId> TaskExample::prompt_ids() const {
  const auto it = std::find(loss_mask.begin(), loss_mask.end(), 1.0);
  return {input_ids.begin(), input_ids.begin() + (it - loss_mask.begin())};
}

std::vector<TokenId> TaskExample::target_ids() const {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < input_ids.size(); ++i) {
    if (loss_mask[i] == 1.0) out.push_back(input_ids[i]);
  }
  return out;
}

TaskExample build_cls_example(std::string_view text, int label, const Vocabulary& vocab, std::size_t max_len,
                              const ClsOptions& options) {
  if (text.empty()) throw InvalidArgument("classification text is empty");
  if (label < 0 || label >= options.n_classes) {
    throw InvalidArgument("label " + std::to_string(label) + " outside [0, " + std::to_string(options.n_classes) + ")");
  }
  if (max_len < 3) throw InvalidArgument("max_len must leave room for text, CLS and EOS");
  auto ids = encode(text, vocab, true);
  const std::size_t keep = max_len - 2;
  if (ids.size() > keep) {
    if (options.truncate == TruncateSide::KeepTail) {
      ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(keep));
    } else {
      ids.resize(keep);
    }
  }
  TaskExample ex;
  ex.input_ids = std::move(ids);
  ex.input_ids.push_back(kCls);
  ex.input_ids.push_back(kEos);
  ex.loss_mask.assign(ex.input_ids.size(), 0.0);
  ex.label = label;
  ex.raw_fields["text"] = std::string(text);
  return ex;
}

TaskExample build_qa_example(std::string_view context, std::string_view question, std::string_view answer,
                             const Vocabulary& vocab, std::size_t max_len) {
  if (context.empty() || question.empty() || answer.empty()) throw InvalidArgument("QA fields must be non-empty");
  const std::string tmpl = " Question: " + std::string(question) + " R\xC3\xA9ponse:";
  auto ex = assemble(encode(context, vocab, true), encode(tmpl, vocab, false), answer_tokens(answer, vocab), max_len);
  ex.raw_fields = {{"context", std::string(context)}, {"question", std::string(question)},
                   {"answer", std::string(answer)}};
  return ex;
}

TaskExample build_sum_example(std::string_view article, std::string_view summary, const Vocabulary& vocab,
                              std::size_t max_len) {
  if (article.empty() || summary.empty()) throw InvalidArgument("summarization fields must be non-empty");
  auto ex = assemble(encode(article, vocab, true), encode(" Summary:", vocab, false), answer_tokens(summary, vocab),
                     max_len);
  ex.raw_fields = {{"article", std::string(article)}, {"summary", std::string(summary)}};
  return ex;
}

// ---------------------------------------------------------------------------
// Classification

ClassifierHead ClassifierHead::zeros(int n_classes, int d_model) {
  ClassifierHead h;
  h.n_classes = n_classes;
  h.d_model = d_model;
  h.weight.assign(static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(d_model), 0.0f);
  h.bias.assign(static_cast<std::size_t>(n_classes), 0.0f);
  h.validate();
  return h;
}

ClassifierHead ClassifierHead::init(int n_classes, int d_model, std::uint64_t seed, double std) {
  auto h = zeros(n_classes, d_model);
  Rng rng(derive_seed(seed, "classifier_head"));
  std::normal_distribution<double> nd(0.0, std);
  for (auto& w : h.weight) w = static_cast<float>(nd(rng));
  return h;
}

void ClassifierHead::validate() const {
  if (n_classes < 2) throw InvalidArgument("classifier head needs at least 2 classes");
  if (d_model < 1) throw InvalidArgument("classifier head needs d_model >= 1");
  if (weight.size() != static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(d_model) ||
      bias.size() != static_cast<std::size_t>(n_classes)) {
    throw InvalidArgument("classifier head tensors have the wrong size");
  }
}

std::vector<double> classify(const Model& model, const ClassifierHead& head, const TaskExample& example) {
  head.validate();
  if (head.d_model != model.config().d_model) throw InvalidArgument("classifier head d_model mismatch");
  const std::size_t cls = example.cls_position();
  ForwardOptions opt;
  opt.compute_logits = false;
  opt.keep_cache = false;
  const auto fr = forward(model, example.input_ids, opt);
  auto z = head_logits(head, fr.hidden().row(cls));
  softmax_inplace(z);
  return z;
}

int predict_label(const Model& model, const ClassifierHead& head, const TaskExample& example) {
  return static_cast<int>(argmax_token(classify(model, head, example)));
}

// ---------------------------------------------------------------------------
// Fine-tuning

FinetuneResult finetune(Model& model, std::span<const TaskExample> examples, const TrainPlan& plan,
                        std::size_t epochs, ClassifierHead* head, std::optional<double> dropout_p) {
  if (examples.empty()) throw InvalidArgument("finetune: empty dataset");
  plan.validate();
  if (head) {
    head->validate();
    if (head->d_model != model.config().d_model) throw InvalidArgument("classifier head d_model mismatch");
  }
  for (const auto& ex : examples) {
    check_example(ex);
    if (head) {
      ex.cls_position();
      if (ex.label < 0 || ex.label >= head->n_classes) throw InvalidArgument("finetune: label out of range");
    }
  }

  const std::size_t n = examples.size();
  const auto B = static_cast<std::size_t>(plan.batch_size);
  const auto d = static_cast<std::size_t>(model.config().d_model);
  const std::size_t n_model = model.params().size();
  const std::size_t n_head = head ? head->size() : 0;

  OptimizerState state(n_model);
  std::vector<float> head_m(n_head, 0.0f), head_v(n_head, 0.0f);
  const AdamHyper hyper{plan.beta1, plan.beta2, plan.epsilon, plan.weight_decay};

  FinetuneResult result;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(plan.seed, {0x5eedULL, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    double epoch_weight = 0.0;

    for (std::size_t start = 0; start < n; start += B) {
      const std::size_t end = std::min(n, start + B);
      Gradients g(n_model);
      std::vector<double> head_grad(n_head, 0.0);
      double loss_sum = 0.0;
      double weight = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const TaskExample& ex = examples[order[bi]];
        ForwardOptions opt;
        opt.train = true;
        opt.seed = derive_seed(plan.seed, {static_cast<std::uint64_t>(result.steps), bi - start});
        opt.dropout_p = dropout_p;
        if (head) {
          opt.compute_logits = false;
          const auto fr = forward(model, ex.input_ids, opt);
          const std::size_t cls = ex.cls_position();
          const auto h = fr.hidden().row(cls);
          auto p = head_logits(*head, h);
          softmax_inplace(p);
          const auto label = static_cast<std::size_t>(ex.label);
          loss_sum += -std::log(std::max(p[label], 1e-300));
          weight += 1.0;
          p[label] -= 1.0;  // dL/dz
          Matrix dhidden(fr.hidden().rows, d);
          for (std::size_t c = 0; c < p.size(); ++c) {
            for (std::size_t i = 0; i < d; ++i) {
              head_grad[c * d + i] += p[c] * h[i];
              dhidden(cls, i) += p[c] * static_cast<double>(head->weight[c * d + i]);
            }
            head_grad[head->weight.size() + c] += p[c];
          }
          backward(model, fr.cache, nullptr, &dhidden, g);
        } else {
          const auto seq = ex.to_sequence();
          const auto fr = forward(model, seq.ids, opt);
          const auto lg = lm_loss_grad(fr.logits, next_token_targets(seq.ids), seq.mask, 1.0);
          loss_sum += lg.loss_sum;
          weight += lg.weight;
          backward(model, fr.cache, &lg.dlogits, nullptr, g);
        }
      }
      if (weight == 0.0) throw InvalidArgument("finetune: batch has no supervised positions");

      std::vector<double> all(n_model + n_head);
      for (std::size_t i = 0; i < n_model; ++i) all[i] = g.params[i] / weight;
      for (std::size_t i = 0; i < n_head; ++i) all[n_model + i] = head_grad[i] / weight;
      clip_global_norm(all, plan.grad_clip);
      const double lr = lr_at(result.steps, plan);
      adam_step(model, std::span<const double>(all).first(n_model), state, lr, plan);
      if (head) {
        const auto hg = std::span<const double>(all).subspan(n_model);
        for (double v : hg) {
          if (!std::isfinite(v)) throw NumericError("non-finite gradient in classifier head");
        }
        adam_update<float>(std::span<float>(head->weight), hg.first(head->weight.size()),
                           std::span<float>(head_m).first(head->weight.size()),
                           std::span<float>(head_v).first(head->weight.size()), state.step, lr, hyper);
        adam_update<float>(std::span<float>(head->bias), hg.subspan(head->weight.size()),
                           std::span<float>(head_m).subspan(head->weight.size()),
                           std::span<float>(head_v).subspan(head->weight.size()), state.step, lr, hyper);
      }
      ++result.steps;
      epoch_loss += loss_sum;
      epoch_weight += weight;
    }
    result.epoch_loss.push_back(epoch_loss / epoch_weight);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Prompt tuning

SoftPrompt SoftPrompt::init(std::size_t prompt_k, std::size_t d_model, std::uint64_t seed, double std) {
  SoftPrompt s;
  s.prompt_k = prompt_k;
  s.d_model = d_model;
  s.vectors.resize(prompt_k * d_model);
  Rng rng(derive_seed(seed, "soft_prompt"));
  std::normal_distribution<double> nd(0.0, std);
  for (auto& v : s.vectors) v = static_cast<float>(nd(rng));
  s.validate();
  return s;
}

void SoftPrompt::validate() const {
  if (prompt_k < 1) throw InvalidArgument("soft prompt needs prompt_k >= 1");
  if (vectors.size() != prompt_k * d_model) throw InvalidArgument("soft prompt has the wrong size");
  for (float v : vectors) {
    if (!std::isfinite(v)) throw NumericError("soft prompt contains non-finite values");
  }
}

PromptTuneResult prompt_tune(const Model& model, std::span<const TaskExample> examples, SoftPrompt& soft,
                             const TrainPlan& plan, const PromptTuneOptions& options) {
  if (examples.empty()) throw InvalidArgument("prompt_tune: empty dataset");
  plan.validate();
  soft.validate();
  const auto& cfg = model.config();
  if (soft.d_model != static_cast<std::size_t>(cfg.d_model)) throw InvalidArgument("soft prompt d_model mismatch");
  for (const auto& ex : examples) {
    check_example(ex);
    if (soft.prompt_k + ex.input_ids.size() > static_cast<std::size_t>(cfg.context_length)) {
      throw InvalidArgument("prompt_k + input length " + std::to_string(soft.prompt_k + ex.input_ids.size()) +
                            " exceeds context length " + std::to_string(cfg.context_length));
    }
  }

  const std::size_t n = examples.size();
  const auto B = static_cast<std::size_t>(plan.batch_size);
  std::vector<float> m(soft.vectors.size(), 0.0f), v(soft.vectors.size(), 0.0f);
  const AdamHyper hyper{plan.beta1, plan.beta2, plan.epsilon, plan.weight_decay};
  PromptTuneResult result;
  std::vector<TokenId> targets;
  std::vector<double> mask;

  for (std::int64_t step = 0; step < options.steps; ++step) {
    Gradients g(model.params().size(), soft.vectors.size());
    double loss_sum = 0.0;
    double weight = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
      const TaskExample& ex = examples[(static_cast<std::size_t>(step) * B + i) % n];
      ForwardOptions opt;
      opt.train = true;
      opt.seed = derive_seed(plan.seed, {static_cast<std::uint64_t>(step), i});
      opt.prefix = soft.vectors;
      opt.rotate_prefix = options.rotate_prefix;
      opt.dropout_p = options.dropout_p;
      const auto fr = forward(model, ex.input_ids, opt);
      prefixed_targets(ex, soft.prompt_k, targets, mask);
      const auto lg = lm_loss_grad(fr.logits, targets, mask, 1.0);
      loss_sum += lg.loss_sum;
      weight += lg.weight;
      backward(model, fr.cache, &lg.dlogits, nullptr, g);
    }
    if (weight == 0.0) throw InvalidArgument("prompt_tune: batch has no supervised positions");
    for (double& x : g.prefix) {
      x /= weight;
      if (!std::isfinite(x)) throw NumericError("non-finite soft prompt gradient");
    }
    clip_global_norm(g.prefix, plan.grad_clip);
    adam_update<float>(std::span<float>(soft.vectors), g.prefix, std::span<float>(m), std::span<float>(v), step + 1,
                       lr_at(step, plan), hyper);
    result.step_loss.push_back(loss_sum / weight);
  }
  return result;
}

double task_loss(const Model& model, std::span<const TaskExample> examples, const SoftPrompt* soft,
                 bool rotate_prefix) {
  double loss_sum = 0.0;
  double weight = 0.0;
  std::vector<TokenId> targets;
  std::vector<double> mask;
  for (const auto& ex : examples) {
    check_example(ex);
    ForwardOptions opt;
    opt.keep_cache = false;
    if (soft) opt.prefix = soft->vectors;
    opt.rotate_prefix = rotate_prefix;
    const auto fr = forward(model, ex.input_ids, opt);
    prefixed_targets(ex, soft ? soft->prompt_k : 0, targets, mask);
    const auto lg = lm_loss_grad(fr.logits, targets, mask, 0.0);
    loss_sum += lg.loss_sum;
    weight += lg.weight;
  }
  if (weight == 0.0) throw InvalidArgument("task_loss: no supervised positions");
  return loss_sum / weight;
}

double task_accuracy(const Model& model, std::span<const TaskExample> examples, const SoftPrompt* soft,
                     bool rotate_prefix) {
  if (examples.empty()) throw InvalidArgument("task_accuracy: no examples");
  const std::size_t k = soft ? soft->prompt_k : 0;
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    check_example(ex);
    ForwardOptions opt;
    opt.keep_cache = false;
    if (soft) opt.prefix = soft->vectors;
    opt.rotate_prefix = rotate_prefix;
    const auto fr = forward(model, ex.input_ids, opt);
    bool ok = true;
    for (std::size_t t = 1; t < ex.input_ids.size() && ok; ++t) {
      if (ex.loss_mask[t] != 1.0) continue;
      ok = argmax_token(fr.logits.row(k + t - 1)) == ex.input_ids[t];
    }
    correct += ok;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------------------
// Grid search

void HyperGrid::validate() const {
  if (lr.empty() || weight_decay.empty() || dropout.empty() || prompt_k.empty()) {
    throw InvalidArgument("hyper-parameter grid has an empty axis");
  }
}

std::string GridResult::to_csv() const {
  std::string out = "lr,weight_decay,dropout,prompt_k,epochs,metric\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    out += format_double(c.lr) + ',' + format_double(c.weight_decay) + ',' + format_double(c.dropout) + ',' +
           std::to_string(c.prompt_k) + ',' + std::to_string(c.epochs) + ',' + format_double(metric[i]) + '\n';
  }
  return out;
}

GridResult grid_search(const HyperGrid& grid, const std::function<double(const GridCell&)>& evaluate,
                       bool higher_is_better, unsigned threads) {
  grid.validate();
  GridResult r;
  for (double lr : grid.lr) {
    for (double wd : grid.weight_decay) {
      for (double dp : grid.dropout) {
        for (std::size_t k : grid.prompt_k) r.cells.push_back({lr, wd, dp, k, grid.epochs});
      }
    }
  }
  r.metric.assign(r.cells.size(), 0.0);
  threads = std::max(1u, threads);
  for (std::size_t start = 0; start < r.cells.size(); start += threads) {
    const std::size_t end = std::min(r.cells.size(), start + threads);
    if (end - start == 1) {
      r.metric[start] = evaluate(r.cells[start]);
      continue;
    }
    std::vector<std::future<double>> futs;
    for (std::size_t i = start; i < end; ++i) {
      futs.push_back(std::async(std::launch::async, [&evaluate, &cell = r.cells[i]] { return evaluate(cell); }));
    }
    for (std::size_t i = start; i < end; ++i) r.metric[i] = futs[i - start].get();
  }
  for (std::size_t i = 1; i < r.metric.size(); ++i) {
    const bool better = higher_is_better ? r.metric[i] > r.metric[r.best] : r.metric[i] < r.metric[r.best];
    if (better) r.best = i;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Task files

std::vector<ClsRecord> load_cls_jsonl(const std::filesystem::path& path) {
  return load_jsonl<ClsRecord>(path, [](const nlohmann::json& j, ClsRecord& r) {
    r.text = j.at("text").get<std::string>();
    r.label = j.at("label").get<int>();
  });
}

std::vector<QaRecord> load_qa_jsonl(const std::filesystem::path& path) {
  return load_jsonl<QaRecord>(path, [](const nlohmann::json& j, QaRecord& r) {
    r.context = j.at("context").get<std::string>();
    r.question = j.at("question").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
  });
}

std::vector<SumRecord> load_sum_jsonl(const std::filesystem::path& path) {
  return load_jsonl<SumRecord>(path, [](const nlohmann::json& j, SumRecord& r) {
    r.article = j.at("article").get<std::string>();
    r.summary = j.at("summary").get<std::string>();
  });
}

}  // namespace pagnol
