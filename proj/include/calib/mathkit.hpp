#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "calib/errors.hpp"

namespace calib {

using LogitVec = std::vector<double>;
using ProbVec = std::vector<double>;

// Floor for normalized entropy: a one-hot prediction has H = 0 and the
// entropy feature is log(H), so the clamp bounds the feature at ln(1e-12).
inline constexpr double kEntropyMin = 1e-12;

// Floor for every temperature in the toolkit; softplus alone can underflow
// to 0 in double precision for very negative pre-activations.
inline constexpr double kTempMin = 1e-4;

namespace detail {

inline void require_finite(std::span<const double> z, const char* who) {
  for (double v : z)
    if (!std::isfinite(v)) throw InvalidInputError(std::string(who) + ": non-finite input");
}

inline void require_logit_vector(std::span<const double> z, const char* who) {
  if (z.size() < 2) throw InvalidInputError(std::string(who) + ": need at least 2 classes");
  require_finite(z, who);
}

}  // namespace detail

// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> z) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = i;
  return best;
}

inline double logsumexp(std::span<const double> z) {
  const double m = z[argmax(z)];
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline ProbVec softmax(std::span<const double> z) {
  detail::require_logit_vector(z, "softmax");
  const double m = z[argmax(z)];
  ProbVec q(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    q[i] = std::exp(z[i] - m);
    s += q[i];
  }
  for (double& v : q) v /= s;
  return q;
}

inline std::vector<double> log_softmax(std::span<const double> z) {
  detail::require_logit_vector(z, "log_softmax");
  const double lse = logsumexp(z);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

// H(softmax(z)) / ln K, clamped to [kEntropyMin, 1].
inline double normalized_entropy(std::span<const double> z) {
  detail::require_logit_vector(z, "normalized_entropy");
  const auto ls = log_softmax(z);
  double h = 0.0;
  for (double l : ls) h -= std::exp(l) * l;
  const double hbar = h / std::log(static_cast<double>(z.size()));
  return std::clamp(hbar, kEntropyMin, 1.0);
}

inline double softplus(double a) {
  if (!std::isfinite(a)) throw InvalidInputError("softplus: non-finite input");
  return a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
}

// a such that softplus(a) = t.
inline double softplus_inverse(double t) {
  if (!(t > 0)) throw InvalidInputError("softplus_inverse: input must be > 0");
  return t > 0.693 ? t + std::log1p(-std::exp(-t)) : std::log(std::expm1(t));
}

}  // namespace calib
