#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "calib/errors.hpp"
#include "calib/strfmt.hpp"

namespace calib {

// Flat key=value text files: one pair per line, '#' comments, LF endings,
// insertion order preserved on write. Doubles round-trip bit-exactly.
class KvFile {
 public:
  KvFile() = default;

  static KvFile parse(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open '" + path.string() + "'");
    KvFile kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected key=value");
      kv.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path.string() + "'");
    for (const auto& [k, v] : entries_) out << k << '=' << v << '\n';
  }

  std::string to_string() const {
    std::ostringstream out;
    for (const auto& [k, v] : entries_) out << k << '=' << v << '\n';
    return out.str();
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  void set(const std::string& key, std::string value) {
    auto it = index_.find(key);
    if (it == index_.end()) {
      index_[key] = entries_.size();
      entries_.emplace_back(key, std::move(value));
    } else {
      entries_[it->second].second = std::move(value);
    }
  }

  void set_double(const std::string& key, double v) { set(key, format_double(v)); }
  void set_int(const std::string& key, long long v) { set(key, std::to_string(v)); }
  void set_uint(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }

  void set_doubles(const std::string& key, std::span<const double> vs) {
    std::string s;
    for (std::size_t i = 0; i < vs.size(); ++i) {
      if (i) s += ',';
      s += format_double(vs[i]);
    }
    set(key, std::move(s));
  }

  const std::string& get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw ParseError("missing key '" + key + "'");
    return entries_[it->second].second;
  }

  std::string get_or(const std::string& key, std::string fallback) const {
    auto it = index_.find(key);
    return it == index_.end() ? fallback : entries_[it->second].second;
  }

  double get_double(const std::string& key) const { return parse_double_tok(get(key), key); }

  double get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  long long get_int(const std::string& key) const {
    const auto& s = get(key);
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw ParseError("key '" + key + "': bad integer '" + s + "'");
    return v;
  }

  long long get_int_or(const std::string& key, long long fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  std::uint64_t get_uint(const std::string& key) const {
    const auto& s = get(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw ParseError("key '" + key + "': bad unsigned integer '" + s + "'");
    return v;
  }

  std::uint64_t get_uint_or(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_uint(key) : fallback;
  }

  std::vector<double> get_doubles(const std::string& key) const {
    const auto& s = get(key);
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= s.size()) {
      auto comma = s.find(',', start);
      const auto end = comma == std::string::npos ? s.size() : comma;
      out.push_back(parse_double_tok(s.substr(start, end - start), key));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  static double parse_double_tok(std::string_view tok, const std::string& key) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || p != tok.data() + tok.size())
      throw ParseError("key '" + key + "': bad number '" + std::string(tok) + "'");
    return v;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace calib
