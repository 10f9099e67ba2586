// Subcommand entry points and the artifact layout they share.
#pragma once

#include <filesystem>
#include <ostream>

#include "settings.hpp"

namespace pagnol::cli {

struct Layout {
  std::filesystem::path root;

  std::filesystem::path vocab() const { return root / "vocab"; }
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path traces() const { return root / "traces"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  UserInput input;

  Layout layout() const { return {input.out_dir}; }
};

int train_bpe(Context& ctx);
int pack(Context& ctx);
int pretrain(Context& ctx);
int fit_scaling(Context& ctx);
int finetune(Context& ctx);
int prompt_tune(Context& ctx);
int eval(Context& ctx);
int generate(Context& ctx);
int report(Context& ctx);

// Writes text to a file, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace pagnol::cli
