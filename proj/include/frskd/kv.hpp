// SPDX-License-Identifier: Apache-2.0
#pragma once
// Flat key=value text files with '#' comments; insertion order preserved.

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "frskd/tensor.hpp"

namespace frskd {

class KvFile {
 public:
  void set(const std::string& key, const std::string& value) {
    auto it = index_.find(key);
    if (it == index_.end()) {
      index_.emplace(key, entries_.size());
      entries_.emplace_back(key, value);
    } else {
      entries_[it->second].second = value;
    }
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw ConfigError("missing key '" + key + "'");
    return entries_[it->second].second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  static KvFile parse_text(const std::string& text) {
    KvFile kv;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      const std::string trimmed = strip(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + trimmed + "'");
      }
      const std::string key = strip(trimmed.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      kv.set(key, strip(trimmed.substr(eq + 1)));
    }
    return kv;
  }

  static KvFile load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
  }

  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << serialize();
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace frskd
