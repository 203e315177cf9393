#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "calib/errors.hpp"
#include "calib/rng.hpp"

namespace calib {

struct FitConfig {
  enum class Objective { Nll, LEce };
  Objective objective = Objective::Nll;
  double lr0 = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 1000;
  double plateau_factor = 10.0;
  double lr_floor = 1e-7;
  int plateau_patience = 10;
  std::uint64_t seed = 0;
  long max_epochs = 100000;

  void validate() const {
    if (!(lr0 > lr_floor) || !(lr_floor > 0))
      throw InvalidInputError("FitConfig: need lr0 > lr_floor > 0");
    if (momentum < 0 || momentum >= 1) throw InvalidInputError("FitConfig: momentum in [0, 1)");
    if (batch_size < 1) throw InvalidInputError("FitConfig: batch_size >= 1");
    if (plateau_factor <= 1) throw InvalidInputError("FitConfig: plateau_factor > 1");
    if (plateau_patience < 1) throw InvalidInputError("FitConfig: plateau_patience >= 1");
  }
};

inline const char* objective_tag(FitConfig::Objective o) {
  return o == FitConfig::Objective::Nll ? "nll" : "lece";
}

inline FitConfig::Objective objective_from_tag(std::string_view tag) {
  if (tag == "nll") return FitConfig::Objective::Nll;
  if (tag == "lece") return FitConfig::Objective::LEce;
  throw InvalidInputError("unknown objective '" + std::string(tag) + "'");
}

// Full-data objective, used for plateau tracking and best-seen selection.
using ObjectiveFn = std::function<double(std::span<const double>)>;
// Mean gradient over the given rows, written to grad_out.
using BatchGradientFn = std::function<void(std::span<const double>, std::span<const std::size_t>,
                                           std::span<double>)>;

struct SgdResult {
  std::vector<double> params;
  double best_objective = 0.0;
  std::vector<double> epoch_objectives;   // objective after each epoch (index 0 = init)
  std::vector<long> plateau_epochs;       // epochs at which lr was reduced
  long epochs = 0;
};

// Minibatch SGD with Nesterov momentum: v <- mu*v - lr*grad(theta + mu*v),
// theta <- theta + v. Epochs are seeded shuffles of row indices; "plateau"
// means no improvement of the full objective by >= 1e-6 for plateau_patience
// consecutive epochs, upon which lr drops by plateau_factor until it would
// fall below lr_floor. Returns the best parameters seen, never worse than
// init.
inline SgdResult sgd_minimize(const ObjectiveFn& objective, const BatchGradientFn& batch_gradient,
                              std::size_t n_rows, std::vector<double> init, const FitConfig& cfg) {
  cfg.validate();
  constexpr double kImprove = 1e-6;
  const std::size_t p = init.size();

  SgdResult res;
  res.params = init;
  res.best_objective = objective(init);
  if (!std::isfinite(res.best_objective)) throw FitError("sgd: non-finite objective at init");
  res.epoch_objectives.push_back(res.best_objective);

  std::vector<double> theta = init;
  std::vector<double> velocity(p, 0.0);
  std::vector<double> lookahead(p), grad(p);
  std::vector<std::size_t> order(n_rows);
  for (std::size_t i = 0; i < n_rows; ++i) order[i] = i;

  double lr = cfg.lr0;
  double plateau_ref = res.best_objective;  // best seen since last reset
  int stall = 0;

  for (long epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order);

    for (std::size_t start = 0; start < n_rows; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n_rows - start);
      for (std::size_t i = 0; i < p; ++i) lookahead[i] = theta[i] + cfg.momentum * velocity[i];
      batch_gradient(lookahead, {order.data() + start, len}, grad);
      for (std::size_t i = 0; i < p; ++i) {
        if (!std::isfinite(grad[i]))
          throw FitError("sgd: non-finite gradient at epoch " + std::to_string(epoch));
        velocity[i] = cfg.momentum * velocity[i] - lr * grad[i];
        theta[i] += velocity[i];
      }
    }

    const double obj = objective(theta);
    if (!std::isfinite(obj)) throw FitError("sgd: non-finite objective at epoch " + std::to_string(epoch));
    res.epoch_objectives.push_back(obj);
    res.epochs = epoch;

    if (obj < res.best_objective) {
      res.best_objective = obj;
      res.params = theta;
    }
    if (plateau_ref - obj >= kImprove) {
      plateau_ref = obj;
      stall = 0;
    } else {
      if (++stall >= cfg.plateau_patience) {
        if (lr / cfg.plateau_factor < cfg.lr_floor) return res;
        lr /= cfg.plateau_factor;
        res.plateau_epochs.push_back(epoch);
        stall = 0;
      }
    }
  }
  return res;
}

// Brent's method (golden section with parabolic acceleration) on [lo, hi].
// f is assumed unimodal there; a monotone f returns the matching endpoint.
inline double scalar_minimize(const std::function<double(double)>& f, double lo, double hi,
                              double tol) {
  if (!(lo < hi)) throw InvalidInputError("scalar_minimize: need lo < hi");
  constexpr double kGold = 0.3819660112501051;  // 2 - phi
  constexpr int kMaxIter = 200;

  double a = lo, b = hi;
  double x = a + kGold * (b - a);
  double w = x, v = x;
  double fx = f(x);
  if (!std::isfinite(fx)) throw FitError("scalar_minimize: non-finite objective");
  double fw = fx, fv = fx;
  double d = 0.0, e = 0.0;

  for (int iter = 0; iter < kMaxIter; ++iter) {
    const double mid = 0.5 * (a + b);
    const double tol1 = tol * std::abs(x) + 1e-15;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - mid) <= tol2 - 0.5 * (b - a)) break;

    bool golden = true;
    if (std::abs(e) > tol1) {
      // parabolic fit through x, w, v
      const double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double pnum = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) pnum = -pnum;
      q = std::abs(q);
      const double e_prev = e;
      e = d;
      if (std::abs(pnum) < std::abs(0.5 * q * e_prev) && pnum > q * (a - x) &&
          pnum < q * (b - x)) {
        d = pnum / q;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = mid > x ? tol1 : -tol1;
        golden = false;
      }
    }
    if (golden) {
      e = (x < mid ? b : a) - x;
      d = kGold * e;
    }

    const double u = std::abs(d) >= tol1 ? x + d : x + (d > 0 ? tol1 : -tol1);
    const double fu = f(u);
    if (!std::isfinite(fu)) throw FitError("scalar_minimize: non-finite objective");

    if (fu <= fx) {
      if (u < x) b = x; else a = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) a = u; else b = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  return x;
}

using GradOracle = std::function<double(std::span<const double>, std::span<double>)>;

// Max relative error between the oracle's gradient and central differences.
inline double grad_check(const GradOracle& oracle, std::span<const double> point, double step) {
  if (!(step > 0)) throw InvalidInputError("grad_check: step must be > 0");
  std::vector<double> g(point.size());
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> scratch(point.size());
  oracle(x, g);

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = oracle(x, scratch);
    x[i] = orig - step;
    const double fm = oracle(x, scratch);
    x[i] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    const double rel = std::abs(g[i] - fd) / std::max(1e-8, std::abs(g[i]) + std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace calib
