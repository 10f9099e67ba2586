#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "pagnol/generation.hpp"
#include "pagnol/metrics.hpp"
#include "tasks.hpp"

namespace pagnol::cli {
namespace {

constexpr TokenId kEos = Vocabulary::special(SpecialToken::Eos);

// Decoded continuation without the stop token and the leading space the
// answer template puts in front of every answer.
std::string answer_text(std::vector<TokenId> ids, const Vocabulary& vocab) {
  if (!ids.empty() && ids.back() == kEos) ids.pop_back();
  std::string s = decode(ids, vocab);
  if (!s.empty() && s.front() == ' ') s.erase(0, 1);
  return s;
}

}  // namespace

int eval(Context& ctx) {
  const auto L = ctx.layout();
  const Settings s({{"task", "lm"},
                    {"checkpoint", ""},
                    {"data", ""},
                    {"vocab", L.vocab().string()},
                    {"max_len", "0"},
                    {"max_new_tokens", "64"},
                    {"use_prompt", "true"},
                    {"n_classes", "2"},
                    {"name", ""},
                    {"seed", "0"}},
                   ctx.input.merged(), "eval");
  const std::string task = s.str("task");
  check_task(task, {"lm", "cls", "qa", "sum"});
  const std::string name = s.str("name").empty() ? "eval-" + task : s.str("name");
  const auto max_new = static_cast<std::size_t>(s.uinteger("max_new_tokens"));
  const bool use_prompt = s.flag("use_prompt");
  s.write(L.reports() / (name + ".resolved.cfg"));

  const auto ck = load_checkpoint(s.required("checkpoint"), false);
  const Model& model = ck.model;
  std::vector<EvalReport> reports;

  if (task == "lm") {
    const auto stream = load_packed(s.required("data"));
    reports.push_back({"perplexity", perplexity(model, stream), stream.n_blocks(), {}});
  } else {
    const auto vocab = load_vocabulary(s.str("vocab"));
    const auto soft = use_prompt ? stored_prompt(ck) : std::nullopt;
    const std::size_t k = soft ? soft->prompt_k : 0;
    const auto examples =
        load_examples(task, s.required("data"), vocab, resolve_max_len(s, model.config(), k),
                      static_cast<int>(s.integer("n_classes")));
    if (task == "cls") {
      const auto head = stored_head(ck);
      if (!head) throw InvalidArgument("checkpoint has no classifier head; fine-tune with --task cls first");
      std::vector<int> pred, gold;
      EvalReport acc{"accuracy", 0.0, examples.size(), {}};
      for (const auto& ex : examples) {
        pred.push_back(predict_label(model, *head, ex));
        gold.push_back(ex.label);
        acc.per_example.push_back(pred.back() == gold.back() ? 1.0 : 0.0);
      }
      acc.value = accuracy(pred, gold);
      reports.push_back(acc);
    } else {
      DecodeConfig dc;
      dc.max_new_tokens = max_new;
      dc.truncate_left = true;
      if (soft) {
        dc.prefix = soft->vectors;
        dc.rotate_prefix = ck.metadata.value("rotate_prefix", true);
      }
      const std::string gold_key = task == "qa" ? "answer" : "summary";
      std::vector<std::string> preds, golds;
      for (const auto& ex : examples) {
        preds.push_back(answer_text(pagnol::generate(model, ex.prompt_ids(), dc), vocab));
        golds.push_back(ex.raw_fields.at(gold_key));
      }
      const std::size_t n = examples.size();
      if (task == "qa") {
        EvalReport em{"exact_match", 0.0, n, {}}, f1{"f1", 0.0, n, {}};
        for (std::size_t i = 0; i < n; ++i) {
          em.per_example.push_back(exact_match(preds[i], golds[i]));
          f1.per_example.push_back(token_f1(preds[i], golds[i]));
          em.value += em.per_example.back() / static_cast<double>(n);
          f1.value += f1.per_example.back() / static_cast<double>(n);
        }
        reports.push_back(em);
        reports.push_back(f1);
      } else {
        const std::pair<const char*, RougeVariant> variants[] = {
            {"rouge-1", RougeVariant::R1}, {"rouge-2", RougeVariant::R2}, {"rouge-l", RougeVariant::RL}};
        for (const auto& [label, v] : variants) {
          EvalReport r{label, mean_rouge_f1(preds, golds, v), n, {}};
          for (std::size_t i = 0; i < n; ++i) r.per_example.push_back(rouge(preds[i], golds[i], v).f1);
          reports.push_back(r);
        }
      }
    }
  }

  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  write_text(L.reports() / (name + ".json"), j.dump(2) + "\n");
  ctx.out << format_table(reports);
  return 0;
}

int generate(Context& ctx) {
  const auto L = ctx.layout();
  const Settings s({{"checkpoint", ""},
                    {"vocab", L.vocab().string()},
                    {"prompt", ""},
                    {"max_new_tokens", "64"},
                    {"mode", "greedy"},
                    {"k", "10"},
                    {"temperature", "1"},
                    {"add_prefix_space", "true"},
                    {"use_prompt", "true"},
                    {"truncate_left", "true"},
                    {"seed", "0"}},
                   ctx.input.merged(), "generate");
  DecodeConfig dc;
  const std::string mode = s.str("mode");
  if (mode == "greedy") {
    dc.mode = DecodeMode::Greedy;
  } else if (mode == "topk") {
    dc.mode = DecodeMode::TopK;
  } else {
    throw UsageError("mode must be greedy or topk, got '" + mode + "'");
  }
  dc.max_new_tokens = static_cast<std::size_t>(s.uinteger("max_new_tokens"));
  dc.k = static_cast<std::size_t>(s.uinteger("k"));
  dc.temperature = s.num("temperature");
  dc.seed = s.uinteger("seed");
  dc.truncate_left = s.flag("truncate_left");
  as_usage([&] { dc.validate(); });
  s.write(L.reports() / "generate.resolved.cfg");

  const auto ck = load_checkpoint(s.required("checkpoint"), false);
  const auto vocab = load_vocabulary(s.str("vocab"));
  const auto soft = s.flag("use_prompt") ? stored_prompt(ck) : std::nullopt;
  if (soft) {
    dc.prefix = soft->vectors;
    dc.rotate_prefix = ck.metadata.value("rotate_prefix", true);
  }
  const auto prompt = encode(s.required("prompt"), vocab, s.flag("add_prefix_space"));
  auto out = pagnol::generate(ck.model, prompt, dc);
  if (!out.empty() && out.back() == kEos) out.pop_back();
  ctx.out << decode(out, vocab) << "\n";
  return 0;
}

}  // namespace pagnol::cli
