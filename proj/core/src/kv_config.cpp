#include "pagnol/kv_config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace pagnol {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_kv_text(std::string_view text, std::string_view origin) {
  KeyValues kv;
  std::size_t lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    const std::string where = std::string(origin) + ":" + std::to_string(lineno);
    if (eq == std::string_view::npos) throw InvalidArgument(where + ": expected key = value");
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw InvalidArgument(where + ": empty key");
    if (!kv.emplace(key, value).second) throw InvalidArgument(where + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues read_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kv_text(ss.str(), path.string());
}

std::pair<std::string, std::string> parse_kv_override(std::string_view arg) {
  const auto eq = arg.find('=');
  if (eq == std::string_view::npos || trim(arg.substr(0, eq)).empty()) {
    throw InvalidArgument("override must look like key=value: '" + std::string(arg) + "'");
  }
  return {std::string(trim(arg.substr(0, eq))), std::string(trim(arg.substr(eq + 1)))};
}

std::string format_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

void reject_unknown_keys(const KeyValues& kv, std::string_view context) {
  if (kv.empty()) return;
  std::string msg = "unknown " + std::string(context) + " key(s):";
  for (const auto& [k, v] : kv) msg += " " + k;
  throw InvalidArgument(msg);
}

double parse_double(const std::string& key, const std::string& s) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw InvalidArgument("bad numeric value for " + key + ": '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw InvalidArgument("bad boolean value for " + key + ": '" + s + "'");
}

std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

void apply_model_keys(ModelConfig& c, KeyValues& kv) {
  auto take = [&](const char* key, auto apply) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    apply(it->first, it->second);
    kv.erase(it);
  };
  auto integer = [](int& f) { return [&f](const std::string& k, const std::string& v) { f = parse_int<int>(k, v); }; };
  auto real = [](double& f) { return [&f](const std::string& k, const std::string& v) { f = parse_double(k, v); }; };
  take("n_layers", integer(c.n_layers));
  take("d_model", integer(c.d_model));
  take("n_heads", integer(c.n_heads));
  take("context_length", integer(c.context_length));
  take("vocab_size", integer(c.vocab_size));
  take("positional", [&](const std::string&, const std::string& v) { c.positional = positional_mode_from_string(v); });
  take("tie_embeddings", [&](const std::string& k, const std::string& v) { c.tie_embeddings = parse_bool(k, v); });
  take("dropout_p", real(c.dropout_p));
  take("init_std", real(c.init_std));
  take("rotary_base", real(c.rotary_base));
}

KeyValues model_to_map(const ModelConfig& c) {
  return {{"n_layers", std::to_string(c.n_layers)},
          {"d_model", std::to_string(c.d_model)},
          {"n_heads", std::to_string(c.n_heads)},
          {"context_length", std::to_string(c.context_length)},
          {"vocab_size", std::to_string(c.vocab_size)},
          {"positional", std::string(to_string(c.positional))},
          {"tie_embeddings", c.tie_embeddings ? "true" : "false"},
          {"dropout_p", format_double(c.dropout_p)},
          {"init_std", format_double(c.init_std)},
          {"rotary_base", format_double(c.rotary_base)}};
}

}  // namespace pagnol
