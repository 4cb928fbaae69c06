#pragma once

// Flat `key = value` configuration files with command-line overrides.
//
//   # comment
//   layers = 2
//   pretrain_objectives = MLM,NCP,ULM
//
// Keys that are set but never read are reported by unused_keys().

#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cuglm/error.hpp"

namespace cuglm {

class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in, const std::string& origin = "<config>") {
    Config c;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(body.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      c.values_[key] = trim(body.substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    return parse(in, path);
  }

  /// Applies one `key=value` override.
  void set(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override must look like key=value: " + std::string(assignment));
    const std::string key = trim(std::string(assignment.substr(0, eq)));
    if (key.empty()) throw ConfigError("override has an empty key");
    values_[key] = trim(std::string(assignment.substr(eq + 1)));
  }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    const auto s = get_string(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t used = 0;
      if (s.front() == '-') throw std::invalid_argument(s);
      const auto v = std::stoull(s, &used, 10);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " needs a non-negative integer, got '" + s + "'");
    }
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    return static_cast<std::size_t>(get_uint(key, fallback));
  }

  double get_double(const std::string& key, double fallback) const {
    const auto s = get_string(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " needs a number, got '" + s + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto s = get_string(key, "");
    if (s.empty()) return fallback;
    if (s == "1" || s == "true" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "no") return false;
    throw ConfigError("config key " + key + " needs a boolean, got '" + s + "'");
  }

  /// Comma-separated list; empty entries are dropped.
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    std::vector<std::string> out;
    std::istringstream in(get_string(key, ""));
    for (std::string item; std::getline(in, item, ',');)
      if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
  }

  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace cuglm
