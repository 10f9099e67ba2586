#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "pagnol/metrics.hpp"
#include "pagnol/rng.hpp"
#include "tasks.hpp"

namespace pagnol::cli {
namespace {

KeyValues adaptation_defaults(const Layout& L, TrainPlan plan) {
  KeyValues kv = plan_to_map(plan);
  kv.insert({{"task", "qa"},
             {"data", ""},
             {"valid", ""},
             {"checkpoint", ""},
             {"vocab", L.vocab().string()},
             {"max_len", "0"},
             {"dropout", ""},
             {"name", ""},
             {"grid_lr", ""},
             {"grid_weight_decay", ""},
             {"grid_dropout", ""},
             {"threads", "1"}});
  return kv;
}

TrainPlan read_plan(const Settings& s) {
  TrainPlan plan;
  as_usage([&] {
    KeyValues kv = s.values();
    apply_plan_keys(plan, kv);
    plan.validate();
  });
  return plan;
}

std::optional<double> dropout_override(const Settings& s) {
  if (s.str("dropout").empty()) return std::nullopt;
  return s.num("dropout");
}

// Grid lists fall back to the single configured value.
HyperGrid read_grid(const Settings& s, const TrainPlan& plan, double dropout, std::size_t prompt_k, std::size_t epochs) {
  HyperGrid g;
  g.lr = s.num_list("grid_lr");
  if (g.lr.empty()) g.lr = {plan.lr_max};
  g.weight_decay = s.num_list("grid_weight_decay");
  if (g.weight_decay.empty()) g.weight_decay = {plan.weight_decay};
  g.dropout = s.num_list("grid_dropout");
  if (g.dropout.empty()) g.dropout = {dropout};
  g.epochs = epochs;
  g.prompt_k = {prompt_k};
  if (s.has("grid_prompt_k")) {
    g.prompt_k.clear();
    for (double k : s.num_list("grid_prompt_k")) g.prompt_k.push_back(static_cast<std::size_t>(k));
    if (g.prompt_k.empty()) g.prompt_k = {prompt_k};
  }
  return g;
}

TrainPlan cell_plan(TrainPlan plan, const GridCell& c) {
  plan.lr_min = plan.lr_max > 0 ? plan.lr_min * c.lr / plan.lr_max : 0.0;
  plan.lr_max = c.lr;
  plan.weight_decay = c.weight_decay;
  return plan;
}

}  // namespace

int finetune(Context& ctx) {
  const auto L = ctx.layout();
  TrainPlan base_plan = plan_preset("xxs");
  base_plan.lr_max = 1e-4;
  base_plan.lr_min = 1e-5;
  base_plan.warmup_steps = 0;
  base_plan.decay_steps = 1000;
  base_plan.total_steps = 0;
  KeyValues defaults = adaptation_defaults(L, base_plan);
  defaults["task"] = "cls";
  defaults.insert({{"epochs", "3"}, {"n_classes", "2"}});
  const Settings s(defaults, ctx.input.merged(), "finetune");
  const std::string task = s.str("task");
  check_task(task, {"cls", "qa", "sum"});
  const TrainPlan plan = read_plan(s);
  const auto epochs = static_cast<std::size_t>(s.uinteger("epochs"));
  const int n_classes = static_cast<int>(s.integer("n_classes"));
  const auto dropout = dropout_override(s);
  const std::string name = s.str("name").empty() ? "finetune-" + task : s.str("name");
  s.write(L.reports() / (name + ".resolved.cfg"));

  const auto ck = load_checkpoint(s.required("checkpoint"), false);
  const double base_dropout = dropout.value_or(ck.model.config().dropout_p);
  const auto grid = read_grid(s, plan, base_dropout, 1, epochs);
  as_usage([&] { grid.validate(); });
  const auto vocab = load_vocabulary(s.str("vocab"));
  const auto max_len = resolve_max_len(s, ck.model.config());
  const auto train = load_examples(task, s.required("data"), vocab, max_len, n_classes);
  std::vector<TaskExample> valid;
  if (!s.str("valid").empty()) valid = load_examples(task, s.str("valid"), vocab, max_len, n_classes);
  const int d = ck.model.config().d_model;
  const auto head_seed = derive_seed(plan.seed, "head");

  // Accuracy for classification, loss otherwise.
  auto score = [&](const Model& m, const ClassifierHead* h) {
    if (task != "cls") return task_loss(m, valid);
    std::vector<int> pred, gold;
    for (const auto& ex : valid) {
      pred.push_back(predict_label(m, *h, ex));
      gold.push_back(ex.label);
    }
    return accuracy(pred, gold);
  };

  GridCell chosen{plan.lr_max, plan.weight_decay, base_dropout, 1, epochs};
  nlohmann::json rep{{"kind", "finetune"}, {"task", task}, {"name", name}, {"train_examples", train.size()}};
  if (grid.size() > 1) {
    if (valid.empty()) throw UsageError("finetune: grid search needs --valid");
    const auto result = grid_search(
        grid,
        [&](const GridCell& c) {
          Model m = ck.model;
          auto h = ClassifierHead::init(n_classes, d, head_seed);
          finetune(m, train, cell_plan(plan, c), epochs, task == "cls" ? &h : nullptr, c.dropout);
          return score(m, &h);
        },
        task == "cls", static_cast<unsigned>(s.uinteger("threads")));
    chosen = result.cells[result.best];
    write_text(L.reports() / (name + "-grid.csv"), result.to_csv());
    rep["grid_best"] = {{"lr", chosen.lr}, {"weight_decay", chosen.weight_decay}, {"dropout", chosen.dropout}};
    ctx.out << "grid search over " << grid.size() << " cells; best lr " << format_double(chosen.lr) << "\n";
  }

  Model model = ck.model;
  auto head = ClassifierHead::init(n_classes, d, head_seed);
  const auto res = finetune(model, train, cell_plan(plan, chosen), epochs, task == "cls" ? &head : nullptr,
                            chosen.dropout);
  std::map<std::string, std::vector<float>> extras;
  if (task == "cls") store_head(head, extras);
  const auto out_path = L.checkpoints() / (name + ".ckpt");
  std::filesystem::create_directories(L.checkpoints());
  save_checkpoint(out_path, model, nullptr, plan, ck.step, extras, {{"task", task}, {"base", s.str("checkpoint")}});

  rep["epoch_loss"] = res.epoch_loss;
  rep["steps"] = res.steps;
  rep["checkpoint"] = out_path.string();
  if (!valid.empty()) rep[task == "cls" ? "valid_accuracy" : "valid_loss"] = score(model, &head);
  write_text(L.reports() / (name + ".json"), rep.dump(2) + "\n");
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
    ctx.out << "epoch " << e + 1 << " loss " << format_double(res.epoch_loss[e]) << "\n";
  }
  return 0;
}

int prompt_tune(Context& ctx) {
  const auto L = ctx.layout();
  TrainPlan base_plan = plan_preset("xxs");
  base_plan.lr_max = 1e-2;
  base_plan.lr_min = 1e-3;
  base_plan.warmup_steps = 0;
  base_plan.decay_steps = 100;
  base_plan.total_steps = 0;
  base_plan.batch_size = 4;
  KeyValues defaults = adaptation_defaults(L, base_plan);
  defaults.insert({{"steps", "100"},
                   {"prompt_k", "5"},
                   {"prompt_init_std", "0.02"},
                   {"rotate_prefix", "true"},
                   {"grid_prompt_k", ""}});
  const Settings s(defaults, ctx.input.merged(), "prompt-tune");
  const std::string task = s.str("task");
  check_task(task, {"qa", "sum"});
  const TrainPlan plan = read_plan(s);
  const auto prompt_k = static_cast<std::size_t>(s.uinteger("prompt_k"));
  const double init_std = s.num("prompt_init_std");
  PromptTuneOptions opt;
  opt.steps = s.integer("steps");
  opt.rotate_prefix = s.flag("rotate_prefix");
  opt.dropout_p = dropout_override(s);
  const std::string name = s.str("name").empty() ? "prompt-" + task : s.str("name");
  s.write(L.reports() / (name + ".resolved.cfg"));

  const auto ck = load_checkpoint(s.required("checkpoint"), false);
  const Model& model = ck.model;
  const double base_dropout = opt.dropout_p.value_or(model.config().dropout_p);
  const auto grid = read_grid(s, plan, base_dropout, prompt_k, 0);
  as_usage([&] { grid.validate(); });
  if (grid.weight_decay.size() > 1) throw UsageError("prompt-tune: weight decay is not searched");
  const auto vocab = load_vocabulary(s.str("vocab"));
  std::size_t k_max = prompt_k;
  for (auto k : grid.prompt_k) k_max = std::max(k_max, k);
  const auto max_len = resolve_max_len(s, model.config(), k_max);
  const auto train = load_examples(task, s.required("data"), vocab, max_len, 2);
  std::vector<TaskExample> valid;
  if (!s.str("valid").empty()) valid = load_examples(task, s.str("valid"), vocab, max_len, 2);
  const auto d = static_cast<std::size_t>(model.config().d_model);
  const auto prompt_seed = derive_seed(plan.seed, "prompt");

  GridCell chosen{plan.lr_max, plan.weight_decay, base_dropout, prompt_k, 0};
  nlohmann::json rep{{"kind", "prompt-tune"}, {"task", task}, {"name", name}, {"train_examples", train.size()}};
  auto run_cell = [&](const GridCell& c, SoftPrompt& soft) {
    PromptTuneOptions o = opt;
    o.dropout_p = c.dropout;
    soft = SoftPrompt::init(c.prompt_k, d, prompt_seed, init_std);
    return pagnol::prompt_tune(model, train, soft, cell_plan(plan, c), o);
  };
  if (grid.size() > 1) {
    if (valid.empty()) throw UsageError("prompt-tune: grid search needs --valid");
    const auto result = grid_search(
        grid,
        [&](const GridCell& c) {
          SoftPrompt soft;
          run_cell(c, soft);
          return task_loss(model, valid, &soft, opt.rotate_prefix);
        },
        false, static_cast<unsigned>(s.uinteger("threads")));
    chosen = result.cells[result.best];
    write_text(L.reports() / (name + "-grid.csv"), result.to_csv());
    rep["grid_best"] = {{"lr", chosen.lr}, {"dropout", chosen.dropout}, {"prompt_k", chosen.prompt_k}};
    ctx.out << "grid search over " << grid.size() << " cells; best lr " << format_double(chosen.lr) << ", k "
            << chosen.prompt_k << "\n";
  }

  SoftPrompt soft;
  const auto res = run_cell(chosen, soft);
  const auto out_path = L.checkpoints() / (name + ".ckpt");
  std::filesystem::create_directories(L.checkpoints());
  save_checkpoint(out_path, model, nullptr, plan, ck.step, {{"soft_prompt", soft.vectors}},
                  {{"task", task},
                   {"base", s.str("checkpoint")},
                   {"prompt_k", soft.prompt_k},
                   {"rotate_prefix", opt.rotate_prefix}});
  rep["step_loss_first"] = res.step_loss.empty() ? 0.0 : res.step_loss.front();
  rep["step_loss_last"] = res.step_loss.empty() ? 0.0 : res.step_loss.back();
  rep["prompt_k"] = soft.prompt_k;
  rep["base_hash"] = model.param_hash();
  rep["checkpoint"] = out_path.string();
  if (!valid.empty()) {
    rep["valid_loss"] = task_loss(model, valid, &soft, opt.rotate_prefix);
    rep["valid_accuracy"] = task_accuracy(model, valid, &soft, opt.rotate_prefix);
  }
  write_text(L.reports() / (name + ".json"), rep.dump(2) + "\n");
  ctx.out << "prompt tuned " << soft.prompt_k << " vectors for " << res.step_loss.size() << " steps; loss "
          << format_double(rep["step_loss_first"].get<double>()) << " -> "
          << format_double(rep["step_loss_last"].get<double>()) << "\n";
  return 0;
}

}  // namespace pagnol::cli
