#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <string>
#include <string_view>

#include "vffgp/errors.hpp"

namespace vffgp {

// key=value configuration files.  Blank lines and lines starting with '#'
// are skipped; whitespace around keys and values is trimmed.  Values stay
// strings until a typed getter asks for them, so unknown keys ride along
// harmlessly and command-line overrides can be spliced in as plain strings.

class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("config: cannot open '" + path + "'");
    Config cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::string_view s = trim(line);
      if (s.empty() || s.front() == '#') continue;
      const std::size_t eq = s.find('=');
      if (eq == std::string_view::npos)
        throw config_error("config: line " + std::to_string(line_no) + " of '" + path +
                           "' is not key=value");
      std::string key(trim(s.substr(0, eq)));
      std::string value(trim(s.substr(eq + 1)));
      if (key.empty())
        throw config_error("config: empty key on line " + std::to_string(line_no) + " of '" +
                           path + "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }

  [[nodiscard]] std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw config_error("config: missing required key '" + key + "'");
    return it->second;
  }

  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  [[nodiscard]] double get_double(const std::string& key) const {
    return parse_double(key, get_string(key));
  }

  [[nodiscard]] double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(key, it->second);
  }

  [[nodiscard]] long get_int(const std::string& key) const {
    return parse_int(key, get_string(key));
  }

  [[nodiscard]] long get_int(const std::string& key, long fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_int(key, it->second);
  }

  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error("config: key '" + key + "' has non-boolean value '" + v + "'");
  }

  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
      s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
      s.remove_suffix(1);
    return s;
  }

  static double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw config_error("config: key '" + key + "' has non-numeric value '" + v + "'");
    return out;
  }

  static long parse_int(const std::string& key, const std::string& v) {
    long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw config_error("config: key '" + key + "' has non-integer value '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace vffgp
