#include <fstream>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "pagnol/checkpoint.hpp"
#include "pagnol/metrics.hpp"
#include "pagnol/rng.hpp"
#include "pagnol/scaling.hpp"
#include "pagnol/training.hpp"

namespace pagnol::cli {
namespace {

std::string lookup(const KeyValues& kv, const std::string& key, const std::string& fallback) {
  const auto it = kv.find(key);
  return it == kv.end() || it->second.empty() ? fallback : it->second;
}

}  // namespace

int pretrain(Context& ctx) {
  const auto L = ctx.layout();
  const KeyValues user = ctx.input.merged();

  // Presets pick the defaults for every model and optimizer key, so they
  // are read before the rest of the settings.
  const std::string preset = lookup(user, "preset", "xxs");
  const std::string plan_name = lookup(user, "plan_preset", preset);
  const std::string vocab_dir = lookup(user, "vocab", L.vocab().string());
  // Without a trained vocabulary the preset keeps its default vocab size,
  // so dry runs of the large configurations plan the real model.
  const bool have_vocab = std::filesystem::exists(vocab_dir);

  KeyValues defaults = as_usage([&] {
    auto kv = model_to_map(have_vocab ? model_preset(preset, static_cast<int>(load_vocabulary(vocab_dir).size()))
                                      : model_preset(preset));
    for (auto& [k, v] : plan_to_map(plan_preset(plan_name))) kv[k] = v;
    return kv;
  });
  defaults.insert({{"preset", preset},
                   {"plan_preset", plan_name},
                   {"vocab", vocab_dir},
                   {"data", (L.data() / "train.bin").string()},
                   {"valid", (L.data() / "valid.bin").string()},
                   {"name", preset},
                   {"resume", ""},
                   {"reset_optimizer", "false"},
                   {"checkpoint_every", "0"},
                   {"log_every", "50"}});
  const Settings s(defaults, user, "pretrain");

  ModelConfig cfg;
  TrainPlan plan;
  as_usage([&] {
    KeyValues kv = s.values();
    apply_model_keys(cfg, kv);
    apply_plan_keys(plan, kv);
    cfg.validate();
    plan.validate();
  });
  if (plan.total_steps <= 0) throw UsageError("pretrain: set total_steps (--steps) to a positive count");
  const std::string name = s.required("name");
  const auto checkpoint_every = s.integer("checkpoint_every");
  const auto log_every = s.integer("log_every");
  const std::uint64_t n_params = count_params(cfg);

  if (ctx.input.dry_run) {
    const double tokens = static_cast<double>(plan.total_steps) * static_cast<double>(plan.batch_size) *
                          static_cast<double>(cfg.context_length);
    const double c = pf_days(static_cast<double>(n_params), tokens);
    ctx.out << format_kv(s.values());
    ctx.out << "# parameters " << n_params << "\n# tokens " << format_double(tokens) << "\n# compute "
            << format_double(c) << " PF-days\n";
    // The planned budget is the only artifact of a dry run.
    const nlohmann::json rep{{"kind", "plan"},       {"name", name},   {"preset", preset},
                             {"n_params", n_params}, {"tokens", tokens}, {"pf_days", c}};
    write_text(L.reports() / (name + ".plan.json"), rep.dump(2) + "\n");
    s.write(L.reports() / (name + ".resolved.cfg"));
    return 0;
  }

  s.write(L.reports() / (name + ".resolved.cfg"));
  const auto stream = load_packed(s.required("data"));
  for (TokenId id : stream.token_ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw InvalidArgument("training data holds token id " + std::to_string(id) + " outside vocab_size " +
                            std::to_string(cfg.vocab_size));
    }
  }

  const auto ckpt_dir = L.checkpoints() / name;
  const auto trace_path = L.traces() / (name + ".csv");
  std::filesystem::path resume_from;
  if (s.str("resume") == "auto") {
    if (std::filesystem::exists(ckpt_dir / "last.ckpt")) resume_from = ckpt_dir / "last.ckpt";
  } else if (!s.str("resume").empty()) {
    resume_from = s.str("resume");
  }

  Model model(cfg);
  OptimizerState state;
  std::int64_t start = 0;
  if (!resume_from.empty()) {
    const bool reset = s.flag("reset_optimizer");
    auto ck = load_checkpoint(resume_from, !reset);
    if (!(ck.model.config() == cfg)) {
      throw InvalidArgument("checkpoint " + resume_from.string() + " was trained with a different model config");
    }
    if (!reset && !ck.optimizer) {
      throw InvalidArgument("checkpoint " + resume_from.string() + " has no optimizer state; pass --reset-optimizer");
    }
    model = std::move(ck.model);
    if (ck.optimizer) state = std::move(*ck.optimizer);
    start = ck.step;
    ctx.out << "resuming " << name << " at step " << start << (reset ? " with a fresh optimizer" : "") << "\n";
  } else {
    model = init_params(cfg, derive_seed(plan.seed, "init"));
  }

  std::filesystem::create_directories(L.traces());
  std::ofstream trace;
  if (start > 0 && std::filesystem::exists(trace_path)) {
    trace.open(trace_path, std::ios::app);
    trace << "# resumed at step " << start << "\n";
  } else {
    trace.open(trace_path, std::ios::trunc);
    write_trace_header(trace);
  }
  if (!trace) throw IoError("cannot write " + trace_path.string());

  Trainer trainer(model, stream, plan, std::move(state), start);
  trainer.on_step = [&](const TraceRow& row) {
    write_trace_row(trace, row);
    if (log_every > 0 && ((row.step + 1) % log_every == 0 || row.step + 1 == plan.total_steps)) {
      ctx.out << "step " << row.step + 1 << "/" << plan.total_steps << " loss " << format_double(row.loss) << "\n";
    }
  };
  std::filesystem::create_directories(ckpt_dir);
  auto save = [&](const std::filesystem::path& path) {
    save_checkpoint(path, model, &trainer.optimizer(), plan, trainer.step(), {}, {{"name", name}, {"preset", preset}});
  };
  while (trainer.step() < plan.total_steps) {
    std::int64_t next = plan.total_steps;
    if (checkpoint_every > 0) next = std::min(next, (trainer.step() / checkpoint_every + 1) * checkpoint_every);
    trainer.run_until(next);
    trace.flush();
    if (checkpoint_every > 0) save(ckpt_dir / ("step-" + std::to_string(trainer.step()) + ".ckpt"));
  }
  save(ckpt_dir / "last.ckpt");

  const auto& res = trainer.result();
  nlohmann::json rep{{"kind", "pretrain"},
                     {"name", name},
                     {"preset", preset},
                     {"n_params", n_params},
                     {"steps", trainer.step()},
                     {"tokens", res.tokens},
                     {"flop", res.flop},
                     {"pf_days", res.flop / kFlopsPerPfDay},
                     {"checkpoint", (ckpt_dir / "last.ckpt").string()},
                     {"trace", trace_path.string()}};
  if (!res.trace.empty()) rep["final_loss"] = res.trace.back().loss;
  if (!resume_from.empty()) rep["resumed_from"] = resume_from.string();
  const std::string valid = s.str("valid");
  if (!valid.empty() && std::filesystem::exists(valid)) {
    const double ppl = perplexity(model, load_packed(valid));
    rep["valid_perplexity"] = ppl;
    ctx.out << "validation perplexity " << format_double(ppl) << "\n";
  }
  write_text(L.reports() / (name + ".json"), rep.dump(2) + "\n");
  return 0;
}

}  // namespace pagnol::cli
