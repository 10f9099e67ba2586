// Key/value settings shared by every subcommand: defaults, config file,
// flag values and --set overrides are merged in that order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pagnol/kv_config.hpp"

namespace pagnol::cli {

// Bad flags, unknown keys or malformed values: reported with usage, exit 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct UserInput {
  std::filesystem::path out_dir = "out";
  std::string config_file;
  KeyValues flags;                   // from dedicated flags
  std::vector<std::string> overrides;  // raw --set KEY=VALUE
  bool dry_run = false;

  // Config file, then flags, then overrides. Throws UsageError.
  KeyValues merged() const;
};

class Settings {
 public:
  // Every key of `user` must appear in `defaults`.
  Settings(KeyValues defaults, const KeyValues& user, std::string context);

  const KeyValues& values() const { return values_; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& str(const std::string& key) const;
  // Non-empty string value; `what` names the missing input.
  const std::string& required(const std::string& key) const;
  double num(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::uint64_t uinteger(const std::string& key) const;
  bool flag(const std::string& key) const;
  // Comma-separated list; empty string gives an empty list.
  std::vector<std::string> list(const std::string& key) const;
  std::vector<double> num_list(const std::string& key) const;

  // Writes the resolved map as a config file that reproduces the run.
  void write(const std::filesystem::path& path) const;

 private:
  KeyValues values_;
  std::string context_;
};

// Runs `fn`, turning InvalidArgument raised while reading settings into a
// UsageError.
template <class Fn>
auto as_usage(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
}

}  // namespace pagnol::cli
