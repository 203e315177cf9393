#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calib/errors.hpp"
#include "calib/mathkit.hpp"
#include "calib/rng.hpp"
#include "calib/strfmt.hpp"

namespace calib {

// N rows of (K logits, integer label), row-major. Immutable after load.
struct LogitDataset {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<double> logits;  // n * k
  std::vector<int> labels;
  std::string name;

  std::span<const double> row(std::size_t i) const { return {logits.data() + i * k, k}; }
};

struct TaskSplit {
  LogitDataset validation;
  LogitDataset test;
};

inline void validate(const LogitDataset& d) {
  if (d.n < 1) throw InvalidInputError("dataset '" + d.name + "': no rows");
  if (d.k < 2) throw InvalidInputError("dataset '" + d.name + "': need K >= 2");
  if (d.logits.size() != d.n * d.k || d.labels.size() != d.n)
    throw InvalidInputError("dataset '" + d.name + "': shape mismatch");
  for (double v : d.logits)
    if (!std::isfinite(v)) throw InvalidInputError("dataset '" + d.name + "': non-finite logit");
  for (int y : d.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= d.k)
      throw InvalidInputError("dataset '" + d.name + "': label out of range");
}

namespace detail {

inline double parse_double(std::string_view tok, std::size_t line_no) {
  double v = 0.0;
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e)
    throw ParseError("line " + std::to_string(line_no) + ": bad number '" + std::string(tok) + "'");
  return v;
}

inline int parse_label(std::string_view tok, std::size_t line_no) {
  int v = 0;
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e)
    throw ParseError("line " + std::to_string(line_no) + ": bad label '" + std::string(tok) + "'");
  return v;
}

}  // namespace detail

// Format: one row per line, comma-delimited, label first then K logits.
// Optional "# k=<K>" header. With from_probs, fields after the label are
// probabilities and are mapped to logits via z = log q (shift constant 0).
inline LogitDataset load_logits(const std::filesystem::path& path, bool from_probs = false) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");

  LogitDataset d;
  d.name = path.stem().string();

  std::string line;
  std::size_t line_no = 0;
  std::size_t declared_k = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("k=");
      if (pos != std::string::npos)
        declared_k = static_cast<std::size_t>(detail::parse_label(
            std::string_view(line).substr(pos + 2), line_no));
      continue;
    }

    std::vector<std::string_view> fields;
    std::string_view sv(line);
    std::size_t start = 0;
    for (;;) {
      const auto comma = sv.find(',', start);
      fields.push_back(sv.substr(start, comma == std::string_view::npos ? comma : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() < 3)
      throw ParseError("line " + std::to_string(line_no) + ": need a label and at least 2 values");

    const std::size_t row_k = fields.size() - 1;
    if (d.k == 0) {
      d.k = row_k;
      if (declared_k != 0 && declared_k != d.k)
        throw ParseError("line " + std::to_string(line_no) + ": row width " + std::to_string(row_k) +
                         " does not match header k=" + std::to_string(declared_k));
    } else if (row_k != d.k) {
      throw ParseError("line " + std::to_string(line_no) + ": inconsistent K (" +
                       std::to_string(row_k) + " vs " + std::to_string(d.k) + ")");
    }

    const int label = detail::parse_label(fields[0], line_no);
    if (label < 0 || static_cast<std::size_t>(label) >= d.k)
      throw ParseError("line " + std::to_string(line_no) + ": label " + std::to_string(label) +
                       " out of range for k=" + std::to_string(d.k));
    d.labels.push_back(label);

    for (std::size_t j = 1; j < fields.size(); ++j) {
      double v = detail::parse_double(fields[j], line_no);
      if (from_probs) v = std::log(v);
      if (!std::isfinite(v))
        throw ParseError("line " + std::to_string(line_no) + ": non-finite value");
      d.logits.push_back(v);
    }
    ++d.n;
  }
  if (d.n == 0) throw ParseError("'" + path.string() + "': no rows");
  validate(d);
  return d;
}

// Writer counterpart of load_logits: LF endings, no trailing delimiter,
// full-precision floats so a written file reloads bit-exactly.
inline void save_logits(const LogitDataset& d, const std::filesystem::path& path) {
  validate(d);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path.string() + "'");
  out << "# k=" << d.k << "\n";
  for (std::size_t i = 0; i < d.n; ++i) {
    out << d.labels[i];
    for (double v : d.row(i)) out << ',' << format_double(v);
    out << '\n';
  }
}

inline LogitDataset subsample(const LogitDataset& d, std::size_t n, std::uint64_t seed) {
  if (n < 1 || n > d.n)
    throw InvalidInputError("subsample: n=" + std::to_string(n) + " out of range for N=" +
                            std::to_string(d.n));
  Rng rng(seed);
  auto idx = rng.sample_without_replacement(n, d.n);
  // Emit rows in original order: n = N yields a permutation-free copy, and
  // the subset hash is order-independent across metric evaluation orders.
  std::sort(idx.begin(), idx.end());

  LogitDataset out;
  out.n = n;
  out.k = d.k;
  out.name = d.name;
  out.logits.reserve(n * d.k);
  out.labels.reserve(n);
  for (std::size_t i : idx) {
    const auto r = d.row(i);
    out.logits.insert(out.logits.end(), r.begin(), r.end());
    out.labels.push_back(d.labels[i]);
  }
  return out;
}

// Same selection as subsample, exposed so the harness can hash the indices.
inline std::vector<std::size_t> subsample_indices(const LogitDataset& d, std::size_t n,
                                                  std::uint64_t seed) {
  if (n < 1 || n > d.n) throw InvalidInputError("subsample: n out of range");
  Rng rng(seed);
  auto idx = rng.sample_without_replacement(n, d.n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline double accuracy(const LogitDataset& d) {
  if (d.n == 0) throw InvalidInputError("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.n; ++i)
    if (argmax(d.row(i)) == static_cast<std::size_t>(d.labels[i])) ++correct;
  return static_cast<double>(correct) / static_cast<double>(d.n);
}

}  // namespace calib
