#include "pagnol/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "pagnol/error.hpp"
#include "pagnol/training.hpp"

namespace pagnol {
namespace {

// Lowercases ASCII and the Latin-1 supplement capitals encoded as UTF-8
// (U+00C0..U+00DE except U+00D7).
std::string to_lower(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c >= 'A' && c <= 'Z') {
      out.push_back(static_cast<char>(c + 32));
    } else if (c == 0xC3 && i + 1 < s.size()) {
      auto n = static_cast<unsigned char>(s[i + 1]);
      if (n >= 0x80 && n <= 0x9E && n != 0x97) n = static_cast<unsigned char>(n + 0x20);
      out.push_back(static_cast<char>(c));
      out.push_back(static_cast<char>(n));
      ++i;
    } else {
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

bool is_ascii_punct(unsigned char c) {
  return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

// Punctuation code points outside ASCII that show up in French text.
constexpr std::string_view kUtf8Punct[] = {"\xE2\x80\x99", "\xE2\x80\x98", "\xC2\xAB", "\xC2\xBB",
                                           "\xE2\x80\x9C", "\xE2\x80\x9D", "\xE2\x80\xA6", "\xE2\x80\x93",
                                           "\xE2\x80\x94"};

std::string strip_punct(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    bool matched = false;
    for (auto p : kUtf8Punct) {
      if (s.substr(i).starts_with(p)) {
        i += p.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (!is_ascii_punct(static_cast<unsigned char>(s[i]))) out.push_back(s[i]);
    ++i;
  }
  return out;
}

std::vector<std::string> split_words(std::string_view s) {
  std::istringstream is{std::string(s)};
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::vector<std::string> answer_tokens(std::string_view s) { return split_words(normalize_answer(s)); }

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<std::vector<std::string>, int> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore from_overlap(double overlap, double pred_len, double gold_len) {
  RougeScore r;
  r.precision = pred_len > 0 ? overlap / pred_len : 0.0;
  r.recall = gold_len > 0 ? overlap / gold_len : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"metric", r.metric}, {"value", r.value}, {"support", r.support}};
  if (!r.per_example.empty()) j["per_example"] = r.per_example;
  return j;
}

std::string format_table(std::span<const EvalReport> reports) {
  std::size_t width = 6;
  for (const auto& r : reports) width = std::max(width, r.metric.size());
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-*s  %12s  %8s\n", static_cast<int>(width), "metric", "value", "support");
  os << buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-*s  %12.4f  %8zu\n", static_cast<int>(width), r.metric.c_str(), r.value,
                  r.support);
    os << buf;
  }
  return os.str();
}

double perplexity(const Model& model, const PackedStream& stream) {
  if (stream.n_blocks() == 0) throw InvalidArgument("perplexity: empty stream");
  double loss_sum = 0.0;
  double weight = 0.0;
  for (std::size_t b = 0; b < stream.n_blocks(); ++b) {
    const auto blk = stream.block(b);
    ForwardOptions opt;
    opt.keep_cache = false;
    const auto fr = forward(model, blk, opt);
    const auto targets = next_token_targets(blk);
    const auto lg = lm_loss_grad(fr.logits, targets, {}, 0.0);
    loss_sum += lg.loss_sum;
    weight += lg.weight;
  }
  if (weight == 0.0) throw InvalidArgument("perplexity: no predicted positions");
  return std::exp(loss_sum / weight);
}

std::string normalize_answer(std::string_view s) {
  std::string lower = to_lower(s);
  // Elided article: "l'" or "l’" at the start of a word.
  std::string elided;
  for (std::size_t i = 0; i < lower.size();) {
    const bool word_start = i == 0 || lower[i - 1] == ' ' || lower[i - 1] == '\t' || lower[i - 1] == '\n';
    if (word_start && lower[i] == 'l') {
      const std::string_view rest = std::string_view(lower).substr(i + 1);
      if (rest.starts_with("'")) {
        elided.push_back(' ');
        i += 2;
        continue;
      }
      if (rest.starts_with("\xE2\x80\x99")) {
        elided.push_back(' ');
        i += 4;
        continue;
      }
    }
    elided.push_back(lower[i++]);
  }
  const auto words = split_words(strip_punct(elided));
  std::string out;
  for (const auto& w : words) {
    if (w == "le" || w == "la" || w == "les" || w == "un" || w == "une" || w == "des") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::vector<std::string> rouge_tokens(std::string_view s) { return split_words(strip_punct(to_lower(s))); }

double exact_match(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1.0 : 0.0;
}

double token_f1(std::string_view pred, std::string_view gold) {
  const auto p = answer_tokens(pred);
  const auto g = answer_tokens(gold);
  if (p.empty() || g.empty()) return p == g ? 1.0 : 0.0;
  std::map<std::string, int> gc;
  for (const auto& w : g) ++gc[w];
  int common = 0;
  for (const auto& w : p) {
    auto it = gc.find(w);
    if (it != gc.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

RougeScore rouge(std::string_view pred, std::string_view gold, RougeVariant variant) {
  const auto p = rouge_tokens(pred);
  const auto g = rouge_tokens(gold);
  if (variant == RougeVariant::RL) {
    return from_overlap(static_cast<double>(lcs_length(p, g)), static_cast<double>(p.size()),
                        static_cast<double>(g.size()));
  }
  const std::size_t n = variant == RougeVariant::R1 ? 1 : 2;
  const auto pc = ngram_counts(p, n);
  const auto gc = ngram_counts(g, n);
  double overlap = 0.0;
  double pn = 0.0;
  double gn = 0.0;
  for (const auto& [gram, c] : pc) {
    pn += c;
    auto it = gc.find(gram);
    if (it != gc.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [gram, c] : gc) gn += c;
  return from_overlap(overlap, pn, gn);
}

double mean_rouge_f1(std::span<const std::string> preds, std::span<const std::string> golds, RougeVariant variant) {
  if (preds.size() != golds.size()) throw InvalidArgument("mean_rouge_f1: length mismatch");
  if (preds.empty()) throw InvalidArgument("mean_rouge_f1: no examples");
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += rouge(preds[i], golds[i], variant).f1;
  return sum / static_cast<double>(preds.size());
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw InvalidArgument("accuracy: length mismatch");
  if (preds.empty()) throw InvalidArgument("accuracy: no examples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

}  // namespace pagnol
