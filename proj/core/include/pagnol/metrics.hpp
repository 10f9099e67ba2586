#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pagnol/model.hpp"
#include "pagnol/tokenizer.hpp"

namespace pagnol {

struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::size_t support = 0;
  std::vector<double> per_example;
};

nlohmann::json to_json(const EvalReport& r);
// Aligned text table, one row per report.
std::string format_table(std::span<const EvalReport> reports);

// exp(mean next-token cross-entropy) over every block of the stream.
double perplexity(const Model& model, const PackedStream& stream);

// QA normalization: lowercase, drop the elided article l', strip punctuation,
// drop the articles le/la/les/un/une/des, collapse whitespace.
std::string normalize_answer(std::string_view s);
// ROUGE normalization: lowercase and punctuation removal only.
std::vector<std::string> rouge_tokens(std::string_view s);

double exact_match(std::string_view pred, std::string_view gold);
double token_f1(std::string_view pred, std::string_view gold);

enum class RougeVariant { R1, R2, RL };

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

RougeScore rouge(std::string_view pred, std::string_view gold, RougeVariant variant);
// Corpus ROUGE: mean of per-example F1.
double mean_rouge_f1(std::span<const std::string> preds, std::span<const std::string> golds, RougeVariant variant);

double accuracy(std::span<const int> preds, std::span<const int> labels);

}  // namespace pagnol
