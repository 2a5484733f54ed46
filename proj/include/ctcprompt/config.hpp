#pragma once

#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ctcprompt {

// Line-oriented `key = value` config. '#' starts a comment.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": expected key = value");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string val = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) +
                                                ": empty key");
      c.entries_[key] = val;
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& dflt) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? dflt : it->second;
  }

  double get_real(const std::string& key, double dflt) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return dflt;
    if (it->second == "inf") return std::numeric_limits<double>::infinity();
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' is not a number: " + it->second);
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t dflt) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return dflt;
    try {
      return std::stoll(it->second);
    } catch (const std::exception&) {
      throw std::runtime_error("config: key '" + key + "' is not an integer: " +
                               it->second);
    }
  }

  bool get_bool(const std::string& key, bool dflt) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::runtime_error("config: key '" + key + "' is not a boolean: " + it->second);
  }

  void set(const std::string& key, const std::string& val) { entries_[key] = val; }

  std::string serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : entries_) out << k << " = " << v << "\n";
    return out.str();
  }

  // FNV-1a over the canonical serialization, for reproducibility headers.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : serialize()) {
      h ^= std::uint64_t(static_cast<unsigned char>(c));
      h *= 1099511628211ull;
    }
    return h;
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> entries_;
};

}  // namespace ctcprompt
