#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "calib/dataset.hpp"
#include "calib/mathkit.hpp"

namespace calib {

// Equal-width confidence bins: bin i (1-based) covers ((i-1)/M, i/M], the
// first bin closed below at 0.
struct EceBinning {
  int m = 50;
};

struct MetricReport {
  double ece = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  double accuracy = 0.0;
  std::string method;
  std::size_t n_val = 0;
  int run_id = 0;
};

inline double top_confidence(std::span<const double> z) {
  const auto q = softmax(z);
  return q[argmax(z)];
}

// 0-based bin index for a confidence in (0, 1]. The candidate from ceil is
// nudged until it satisfies the interval predicate on edges i/m, so the
// result agrees exactly with a per-bin comparison scan.
inline int confidence_bin(double conf, int m) {
  int idx = static_cast<int>(std::ceil(conf * m)) - 1;
  idx = std::clamp(idx, 0, m - 1);
  const double dm = static_cast<double>(m);
  while (idx > 0 && conf <= static_cast<double>(idx) / dm) --idx;
  while (idx < m - 1 && conf > static_cast<double>(idx + 1) / dm) ++idx;
  return idx;
}

namespace detail {

struct BinStats {
  std::vector<std::size_t> count;
  std::vector<double> acc;   // per-bin accuracy
  std::vector<double> conf;  // per-bin mean top confidence
};

inline BinStats bin_stats(const LogitDataset& d, int m) {
  if (d.n == 0) throw InvalidInputError("metrics: empty dataset");
  BinStats s;
  s.count.assign(m, 0);
  s.acc.assign(m, 0.0);
  s.conf.assign(m, 0.0);
  for (std::size_t i = 0; i < d.n; ++i) {
    const auto z = d.row(i);
    const std::size_t pred = argmax(z);
    const double conf = softmax(z)[pred];
    const int b = confidence_bin(conf, m);
    s.count[b] += 1;
    s.acc[b] += pred == static_cast<std::size_t>(d.labels[i]) ? 1.0 : 0.0;
    s.conf[b] += conf;
  }
  for (int b = 0; b < m; ++b) {
    if (s.count[b] == 0) continue;
    s.acc[b] /= static_cast<double>(s.count[b]);
    s.conf[b] /= static_cast<double>(s.count[b]);
  }
  return s;
}

}  // namespace detail

inline double ece(const LogitDataset& d, EceBinning binning = {}) {
  const auto s = detail::bin_stats(d, binning.m);
  double out = 0.0;
  for (int b = 0; b < binning.m; ++b) {
    if (s.count[b] == 0) continue;
    out += static_cast<double>(s.count[b]) / static_cast<double>(d.n) *
           std::abs(s.acc[b] - s.conf[b]);
  }
  return out;
}

inline double nll(const LogitDataset& d) {
  if (d.n == 0) throw InvalidInputError("nll: empty dataset");
  double s = 0.0;
  for (std::size_t i = 0; i < d.n; ++i)
    s -= log_softmax(d.row(i))[static_cast<std::size_t>(d.labels[i])];
  return s / static_cast<double>(d.n);
}

inline double brier(const LogitDataset& d) {
  if (d.n == 0) throw InvalidInputError("brier: empty dataset");
  double s = 0.0;
  for (std::size_t i = 0; i < d.n; ++i) {
    const auto q = softmax(d.row(i));
    for (std::size_t kk = 0; kk < d.k; ++kk) {
      const double y = kk == static_cast<std::size_t>(d.labels[i]) ? 1.0 : 0.0;
      s += (q[kk] - y) * (q[kk] - y);
    }
  }
  return s / static_cast<double>(d.n);
}

// Training-loss flavour of ECE: per-bin 2-norm of the scalar gap. Identical
// in value to ece, kept distinct because training re-partitions bins at each
// evaluation and differentiates only through the confidence term.
inline double l_ece(const LogitDataset& d, EceBinning binning = {}) {
  const auto s = detail::bin_stats(d, binning.m);
  double out = 0.0;
  for (int b = 0; b < binning.m; ++b) {
    if (s.count[b] == 0) continue;
    const double gap = s.acc[b] - s.conf[b];
    out += static_cast<double>(s.count[b]) / static_cast<double>(d.n) * std::sqrt(gap * gap);
  }
  return out;
}

inline MetricReport evaluate(const LogitDataset& d, EceBinning binning = {}) {
  MetricReport r;
  r.ece = ece(d, binning);
  r.nll = nll(d);
  r.brier = brier(d);
  r.accuracy = accuracy(d);
  return r;
}

}  // namespace calib
