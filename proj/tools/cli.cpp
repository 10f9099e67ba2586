#include "cli.hpp"

#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "commands.hpp"
#include "pagnol/error.hpp"

namespace pagnol::cli {
namespace {

void key_option(CLI::App* app, UserInput& in, const std::string& flag, const std::string& key,
                const std::string& help) {
  app->add_option_function<std::string>(flag, [&in, key](const std::string& v) { in.flags[key] = v; }, help);
}

void key_flag(CLI::App* app, UserInput& in, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_flag_function(flag, [&in, key](std::int64_t) { in.flags[key] = "true"; }, help);
}

void common_options(CLI::App* app, UserInput& in) {
  app->add_option("-o,--out", in.out_dir, "Output directory (vocab/, data/, checkpoints/, traces/, reports/)")
      ->capture_default_str();
  app->add_option("-c,--config", in.config_file, "key = value settings file");
  app->add_option("-s,--set", in.overrides, "KEY=VALUE override, repeatable; applied last");
  key_option(app, in, "--seed", "seed", "Root seed for every stochastic component");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"pagnol: French GPT workbench (tokenizer, pretraining, scaling laws, adaptation)", "pagnol"};
  app.require_subcommand(1);
  UserInput in;
  std::map<CLI::App*, std::function<int(Context&)>> handlers;

  auto sub = [&](const std::string& name, const std::string& help, std::function<int(Context&)> fn) {
    CLI::App* s = app.add_subcommand(name, help);
    common_options(s, in);
    handlers[s] = std::move(fn);
    return s;
  };

  auto* bpe = sub("train-bpe", "Learn a byte-level BPE vocabulary", train_bpe);
  key_option(bpe, in, "--corpus", "corpus", "Text corpus (blank lines separate paragraphs)");
  key_option(bpe, in, "--merges", "merges", "Number of merges to learn");
  key_flag(bpe, in, "--one-doc-per-line", "one_doc_per_line", "Treat each line as a document");

  auto* pk = sub("pack", "Tokenize a corpus into fixed-length training blocks", pack);
  key_option(pk, in, "--corpus", "corpus", "Text corpus");
  key_option(pk, in, "--vocab", "vocab", "Vocabulary directory");
  key_option(pk, in, "--block-length", "block_length", "Tokens per block");
  key_option(pk, in, "--valid-fraction", "valid_fraction", "Fraction of documents held out");
  key_flag(pk, in, "--one-doc-per-line", "one_doc_per_line", "Treat each line as a document");

  auto* pt = sub("pretrain", "Train a language model from scratch or resume a run", pretrain);
  key_option(pt, in, "--preset", "preset", "Model/optimizer preset: xxs, xs, s, m, l, xl, s-oscar, m-oscar");
  key_option(pt, in, "--steps", "total_steps", "Total optimizer steps");
  key_option(pt, in, "--data", "data", "Packed training blocks");
  key_option(pt, in, "--valid", "valid", "Packed validation blocks (optional)");
  key_option(pt, in, "--name", "name", "Run name (checkpoint directory and trace file)");
  key_option(pt, in, "--resume", "resume", "Checkpoint to resume from, or 'auto' for the run's last one");
  key_flag(pt, in, "--reset-optimizer", "reset_optimizer", "Resume without the optimizer moments");
  key_option(pt, in, "--checkpoint-every", "checkpoint_every", "Steps between checkpoints (0: final only)");
  pt->add_flag("--dry-run", in.dry_run, "Print the resolved settings and compute budget, then stop");

  auto* fs = sub("fit-scaling", "Fit the compute-efficient frontier to loss traces", fit_scaling);
  fs->add_option_function<std::vector<std::string>>(
      "--traces",
      [&in](const std::vector<std::string>& v) {
        std::string joined;
        for (const auto& p : v) joined += (joined.empty() ? "" : ",") + p;
        in.flags["traces"] = joined;
      },
      "Trace CSV files");
  key_flag(fs, in, "--exclude-after-restart", "exclude_after_restart", "Drop points at or after a restart");
  key_option(fs, in, "--compare-alpha", "compare_alpha", "Reference exponent to compare against");

  auto* ft = sub("finetune", "Fine-tune a checkpoint on a classification, QA or summarization task", finetune);
  key_option(ft, in, "--task", "task", "cls, qa or sum");
  key_option(ft, in, "--data", "data", "Training JSON lines");
  key_option(ft, in, "--valid", "valid", "Validation JSON lines (needed for grid search)");
  key_option(ft, in, "--checkpoint", "checkpoint", "Base checkpoint");
  key_option(ft, in, "--epochs", "epochs", "Passes over the training set");
  key_option(ft, in, "--name", "name", "Output name");

  auto* ptu = sub("prompt-tune", "Train a soft prompt in front of a frozen checkpoint", prompt_tune);
  key_option(ptu, in, "--task", "task", "qa or sum");
  key_option(ptu, in, "--data", "data", "Training JSON lines");
  key_option(ptu, in, "--valid", "valid", "Validation JSON lines (needed for grid search)");
  key_option(ptu, in, "--checkpoint", "checkpoint", "Frozen base checkpoint");
  key_option(ptu, in, "--prompt-k", "prompt_k", "Number of soft prompt vectors");
  key_option(ptu, in, "--steps", "steps", "Optimizer steps");
  key_option(ptu, in, "--name", "name", "Output name");

  auto* ev = sub("eval", "Evaluate a checkpoint: perplexity, accuracy, EM/F1 or ROUGE", eval);
  key_option(ev, in, "--task", "task", "lm, cls, qa or sum");
  key_option(ev, in, "--data", "data", "Packed blocks (lm) or JSON lines");
  key_option(ev, in, "--checkpoint", "checkpoint", "Checkpoint to evaluate");
  key_option(ev, in, "--name", "name", "Report name");

  auto* gen = sub("generate", "Continue a text prompt", generate);
  key_option(gen, in, "--checkpoint", "checkpoint", "Checkpoint");
  key_option(gen, in, "--prompt", "prompt", "Prompt text");
  key_option(gen, in, "--max-new-tokens", "max_new_tokens", "Tokens to generate at most");
  key_option(gen, in, "--mode", "mode", "greedy or topk");
  key_option(gen, in, "--k", "k", "Candidates kept by top-k sampling");
  key_option(gen, in, "--temperature", "temperature", "Softmax temperature for sampling");

  auto* rep = sub("report", "Summarize pretraining runs: budgets table and log-log plot", report);
  key_option(rep, in, "--run-dir", "run_dir", "Output directory of the runs (default: --out)");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    err << "run 'pagnol --help' or 'pagnol <subcommand> --help' for usage\n";
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  Context ctx{out, err, in};
  try {
    return handlers.at(chosen)(ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << chosen->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace pagnol::cli
