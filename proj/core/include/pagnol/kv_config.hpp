#pragma once

#include <charconv>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "pagnol/error.hpp"
#include "pagnol/model.hpp"

namespace pagnol {

using KeyValues = std::map<std::string, std::string>;

// Flat "key = value" file. Blank lines and lines starting with '#' are
// skipped; a repeated key is an error.
KeyValues read_kv_file(const std::filesystem::path& path);
KeyValues parse_kv_text(std::string_view text, std::string_view origin = "<text>");
// "key=value" as given on the command line.
std::pair<std::string, std::string> parse_kv_override(std::string_view arg);
std::string format_kv(const KeyValues& kv);

// Throws InvalidArgument naming every key left in `kv`.
void reject_unknown_keys(const KeyValues& kv, std::string_view context);

double parse_double(const std::string& key, const std::string& s);
bool parse_bool(const std::string& key, const std::string& s);
// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

template <class Int>
Int parse_int(const std::string& key, const std::string& s) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw InvalidArgument("bad integer value for " + key + ": '" + s + "'");
  }
  return v;
}

// Model keys: n_layers, d_model, n_heads, context_length, vocab_size,
// positional, tie_embeddings, dropout_p, init_std, rotary_base. Consumed keys
// are erased from `kv`.
void apply_model_keys(ModelConfig& config, KeyValues& kv);
KeyValues model_to_map(const ModelConfig& config);

}  // namespace pagnol
