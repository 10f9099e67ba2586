#include "settings.hpp"

#include <fstream>
#include <sstream>

namespace pagnol::cli {

KeyValues UserInput::merged() const {
  return as_usage([&] {
    KeyValues kv;
    if (!config_file.empty()) {
      try {
        kv = read_kv_file(config_file);
      } catch (const IoError& e) {
        throw UsageError(e.what());
      }
    }
    for (const auto& [k, v] : flags) kv[k] = v;
    for (const auto& o : overrides) {
      auto [k, v] = parse_kv_override(o);
      kv[k] = v;
    }
    return kv;
  });
}

Settings::Settings(KeyValues defaults, const KeyValues& user, std::string context)
    : values_(std::move(defaults)), context_(std::move(context)) {
  KeyValues unknown;
  for (const auto& [k, v] : user) {
    if (values_.count(k) == 0) {
      unknown.emplace(k, v);
    } else {
      values_[k] = v;
    }
  }
  as_usage([&] { reject_unknown_keys(unknown, context_); });
}

const std::string& Settings::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::logic_error("settings key not declared: " + key);
  return it->second;
}

const std::string& Settings::required(const std::string& key) const {
  const auto& v = str(key);
  if (v.empty()) throw UsageError(context_ + ": missing required value for '" + key + "'");
  return v;
}

double Settings::num(const std::string& key) const {
  return as_usage([&] { return parse_double(key, str(key)); });
}

std::int64_t Settings::integer(const std::string& key) const {
  return as_usage([&] { return parse_int<std::int64_t>(key, str(key)); });
}

std::uint64_t Settings::uinteger(const std::string& key) const {
  return as_usage([&] { return parse_int<std::uint64_t>(key, str(key)); });
}

bool Settings::flag(const std::string& key) const {
  return as_usage([&] { return parse_bool(key, str(key)); });
}

std::vector<std::string> Settings::list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

std::vector<double> Settings::num_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : list(key)) out.push_back(as_usage([&] { return parse_double(key, s); }));
  return out;
}

void Settings::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# resolved " << context_ << " settings\n" << format_kv(values_);
}

}  // namespace pagnol::cli
