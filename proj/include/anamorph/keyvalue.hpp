#pragma once

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "anamorph/errors.hpp"

namespace anamorph {

/// Flat `key = value` document. '#' starts a comment; blank lines are ignored.
/// Shared by scene descriptions and sampler configs.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "<string>") {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos)
        throw ParseError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      std::string key = trim(body.substr(0, eq));
      std::string value = trim(body.substr(eq + 1));
      if (key.empty()) throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) throw ParseError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      kv.values_.emplace(std::move(key), std::move(value));
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string string(const std::string& key, const std::string& fallback) const {
    mark(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    mark(key);
    auto it = values_.find(key);
    if (it == values_.end()) throw ParseError("missing required key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return mark(key), fallback;
    const std::string s = require(key);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE)
      throw ParseError("key '" + key + "': '" + s + "' is not a number");
    return v;
  }

  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return mark(key), fallback;
    const std::string s = require(key);
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
      throw ParseError("key '" + key + "': '" + s + "' is not an integer");
    return v;
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return mark(key), fallback;
    const std::string s = require(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ParseError("key '" + key + "': '" + s + "' is not a boolean");
  }

  /// Throws on keys that were never read, catching typos in input files.
  void reject_unused() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw ParseError("unknown key '" + k + "'");
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  void mark(const std::string& key) const { used_.insert(key); }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace anamorph
