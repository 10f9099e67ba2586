// Task-file loading and checkpoint extras shared by the adaptation and
// evaluation subcommands.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pagnol/adaptation.hpp"
#include "pagnol/checkpoint.hpp"
#include "settings.hpp"

namespace pagnol::cli {

inline void check_task(const std::string& task, std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (task == a) return;
  }
  std::string msg = "unknown task '" + task + "'; expected one of:";
  for (const char* a : allowed) msg += std::string(" ") + a;
  throw UsageError(msg);
}

inline std::vector<TaskExample> load_examples(const std::string& task, const std::filesystem::path& path,
                                              const Vocabulary& vocab, std::size_t max_len, int n_classes) {
  std::vector<TaskExample> out;
  if (task == "cls") {
    ClsOptions opt;
    opt.n_classes = n_classes;
    for (const auto& r : load_cls_jsonl(path)) out.push_back(build_cls_example(r.text, r.label, vocab, max_len, opt));
  } else if (task == "qa") {
    for (const auto& r : load_qa_jsonl(path)) {
      out.push_back(build_qa_example(r.context, r.question, r.answer, vocab, max_len));
    }
  } else if (task == "sum") {
    for (const auto& r : load_sum_jsonl(path)) out.push_back(build_sum_example(r.article, r.summary, vocab, max_len));
  }
  if (out.empty()) throw InvalidArgument("no examples in " + path.string());
  return out;
}

// Classifier heads and soft prompts travel as checkpoint extras.
inline void store_head(const ClassifierHead& h, std::map<std::string, std::vector<float>>& extras) {
  extras["head.weight"] = h.weight;
  extras["head.bias"] = h.bias;
}

inline std::optional<ClassifierHead> stored_head(const Checkpoint& ck) {
  const auto w = ck.extras.find("head.weight");
  const auto b = ck.extras.find("head.bias");
  if (w == ck.extras.end() || b == ck.extras.end()) return std::nullopt;
  ClassifierHead h;
  h.n_classes = static_cast<int>(b->second.size());
  h.d_model = ck.model.config().d_model;
  h.weight = w->second;
  h.bias = b->second;
  h.validate();
  return h;
}

inline std::optional<SoftPrompt> stored_prompt(const Checkpoint& ck) {
  const auto it = ck.extras.find("soft_prompt");
  if (it == ck.extras.end()) return std::nullopt;
  SoftPrompt p;
  p.d_model = static_cast<std::size_t>(ck.model.config().d_model);
  p.prompt_k = it->second.size() / p.d_model;
  p.vectors = it->second;
  p.validate();
  return p;
}

inline std::size_t resolve_max_len(const Settings& s, const ModelConfig& cfg, std::size_t reserved = 0) {
  auto n = static_cast<std::size_t>(s.uinteger("max_len"));
  const auto ctx = static_cast<std::size_t>(cfg.context_length);
  if (n == 0) n = ctx - reserved;
  if (n + reserved > ctx) throw UsageError("max_len plus soft prompt exceeds the model context");
  return n;
}

}  // namespace pagnol::cli
