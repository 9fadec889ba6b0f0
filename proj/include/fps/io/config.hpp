#pragma once

#include <charconv>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fps {

/// Invalid user input: bad flag value, unknown config key, unreachable
/// parameter combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigEntry {
  std::string key, value;
  int line = 0;
};

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// `key = value` lines; blank lines and lines starting with '#' are ignored.
inline std::vector<ConfigEntry> parse_key_values(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected 'key = value'");
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n};
    if (e.key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    for (const auto& prev : out)
      if (prev.key == e.key) throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + e.key + "'");
    out.push_back(std::move(e));
  }
  return out;
}

template <class V>
V parse_number(const ConfigEntry& e) {
  V v{};
  const char* first = e.value.data();
  const char* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw ConfigError("config line " + std::to_string(e.line) + ": '" + e.value + "' is not a valid value for " + e.key);
  return v;
}

inline bool parse_bool(const ConfigEntry& e) {
  if (e.value == "1" || e.value == "true" || e.value == "on") return true;
  if (e.value == "0" || e.value == "false" || e.value == "off") return false;
  throw ConfigError("config line " + std::to_string(e.line) + ": '" + e.value + "' is not a boolean for " + e.key);
}

/// Comma-separated integers, e.g. "1,2,2,1".
inline std::vector<int> parse_int_list(const ConfigEntry& e) {
  std::vector<int> out;
  std::stringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>({e.key, trim(item), e.line}));
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace fps
