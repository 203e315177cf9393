#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "calib/dataset.hpp"
#include "calib/errors.hpp"
#include "calib/kv.hpp"
#include "calib/mathkit.hpp"
#include "calib/metrics.hpp"
#include "calib/optim.hpp"
#include "calib/version.hpp"

namespace calib {

enum class Method { Ts, Lts, Hts, Hnlts, Pts, Bts, Ets };

inline constexpr std::array<std::pair<Method, std::string_view>, 7> kMethodTags{{
    {Method::Ts, "ts"},
    {Method::Lts, "lts"},
    {Method::Hts, "hts"},
    {Method::Hnlts, "hnlts"},
    {Method::Pts, "pts"},
    {Method::Bts, "bts"},
    {Method::Ets, "ets"},
}};

inline std::string_view method_tag(Method m) {
  for (const auto& [mm, tag] : kMethodTags)
    if (mm == m) return tag;
  return "?";
}

inline Method method_from_tag(std::string_view tag) {
  for (const auto& [m, t] : kMethodTags)
    if (t == tag) return m;
  throw InvalidInputError("unknown method '" + std::string(tag) + "'");
}

// ---------------------------------------------------------------------------
// Parameter sets

struct TsParams {
  double a = 0.0;  // T0 = softplus(a)
};

struct LtsParams {
  std::vector<double> w;  // K
  double b = 0.0;
};

struct HtsParams {
  double w_h = 0.0;
  double b = 0.0;
};

struct HnltsParams {
  std::vector<double> w;  // K
  double w_h = 0.0;
  double b = 0.0;
};

inline constexpr std::size_t kPtsHidden = 5;
inline constexpr std::size_t kPtsMaxInput = 10;

// input(d) -> 5 -> 5 -> 1 dense network on the sorted logit vector, rectifier
// hidden activations, softplus on the scalar output.
struct PtsParams {
  std::size_t input_dim = 0;       // min(K, 10)
  std::vector<double> w1;          // 5 x d, row-major
  std::vector<double> b1;          // 5
  std::vector<double> w2;          // 5 x 5
  std::vector<double> b2;          // 5
  std::vector<double> w3;          // 5
  double b3 = 0.0;
};

struct BtsParams {
  std::vector<double> edges;  // ascending cut points, edges.size() == temps.size() + 1
  std::vector<double> temps;  // per-bin temperature, each >= kTempMin
};

struct EtsParams {
  double w1 = 0.0, w2 = 1.0, w3 = 0.0;  // simplex weights
  double t = 1.0;                       // TS-component temperature
};

using CalibratorParams = std::variant<TsParams, LtsParams, HtsParams, HnltsParams, PtsParams,
                                      BtsParams, EtsParams>;

inline Method method_of(const CalibratorParams& p) {
  return std::visit(
      [](const auto& v) -> Method {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, TsParams>) return Method::Ts;
        else if constexpr (std::is_same_v<T, LtsParams>) return Method::Lts;
        else if constexpr (std::is_same_v<T, HtsParams>) return Method::Hts;
        else if constexpr (std::is_same_v<T, HnltsParams>) return Method::Hnlts;
        else if constexpr (std::is_same_v<T, PtsParams>) return Method::Pts;
        else if constexpr (std::is_same_v<T, BtsParams>) return Method::Bts;
        else return Method::Ets;
      },
      p);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double clamp_temp(double t) { return std::max(t, kTempMin); }

// Sorted-descending logits truncated to the network input width.
inline std::vector<double> pts_input(std::span<const double> z, std::size_t d) {
  std::vector<double> x(z.begin(), z.end());
  std::sort(x.begin(), x.end(), std::greater<double>());
  x.resize(d);
  return x;
}

struct PtsTrace {
  std::array<double, kPtsHidden> h1;
  std::array<double, kPtsHidden> h2;
  double u = 0.0;
};

inline PtsTrace pts_forward(const PtsParams& p, std::span<const double> x) {
  PtsTrace t;
  for (std::size_t j = 0; j < kPtsHidden; ++j) {
    double a = p.b1[j];
    for (std::size_t i = 0; i < p.input_dim; ++i) a += p.w1[j * p.input_dim + i] * x[i];
    t.h1[j] = a > 0 ? a : 0.0;
  }
  for (std::size_t j = 0; j < kPtsHidden; ++j) {
    double a = p.b2[j];
    for (std::size_t i = 0; i < kPtsHidden; ++i) a += p.w2[j * kPtsHidden + i] * t.h1[i];
    t.h2[j] = a > 0 ? a : 0.0;
  }
  t.u = p.b3;
  for (std::size_t j = 0; j < kPtsHidden; ++j) t.u += p.w3[j] * t.h2[j];
  return t;
}

inline std::size_t bts_bin(const BtsParams& p, double conf) {
  const auto it = std::lower_bound(p.edges.begin() + 1, p.edges.end(), conf);
  const std::size_t j = static_cast<std::size_t>(it - (p.edges.begin() + 1));
  return std::min(j, p.temps.size() - 1);
}

}  // namespace detail

// Pre-softplus activation of the temperature function; not defined for BTS/ETS.
inline double temperature_preactivation(const CalibratorParams& params, std::span<const double> z) {
  if (const auto* ts = std::get_if<TsParams>(&params)) return ts->a;
  if (const auto* lts = std::get_if<LtsParams>(&params)) {
    if (lts->w.size() != z.size()) throw InvalidInputError("lts: dimension mismatch");
    double u = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) u += lts->w[i] * z[i];
    return u + lts->b;
  }
  if (const auto* hts = std::get_if<HtsParams>(&params))
    return hts->w_h * std::log(normalized_entropy(z)) + hts->b;
  if (const auto* hn = std::get_if<HnltsParams>(&params)) {
    if (hn->w.size() != z.size()) throw InvalidInputError("hnlts: dimension mismatch");
    double u = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) u += hn->w[i] * z[i];
    return u + hn->w_h * std::log(normalized_entropy(z)) + hn->b;
  }
  if (const auto* pts = std::get_if<PtsParams>(&params)) {
    if (pts->input_dim != std::min(z.size(), kPtsMaxInput))
      throw InvalidInputError("pts: dimension mismatch");
    return detail::pts_forward(*pts, detail::pts_input(z, pts->input_dim)).u;
  }
  throw UnsupportedOperationError("temperature_preactivation: not a softplus-family calibrator");
}

// Scalar temperature factor for one logit vector. ETS has no scalar
// temperature and rejects the call.
inline double temperature(const CalibratorParams& params, std::span<const double> z) {
  detail::require_logit_vector(z, "temperature");
  if (const auto* bts = std::get_if<BtsParams>(&params))
    return bts->temps[detail::bts_bin(*bts, top_confidence(z))];
  if (std::holds_alternative<EtsParams>(params))
    throw UnsupportedOperationError("temperature: ETS has no scalar temperature function");
  return detail::clamp_temp(softplus(temperature_preactivation(params, z)));
}

inline std::vector<double> calibrate(const CalibratorParams& params, std::span<const double> z) {
  detail::require_logit_vector(z, "calibrate");
  std::vector<double> out(z.size());
  if (const auto* ets = std::get_if<EtsParams>(&params)) {
    const double uniform = 1.0 / static_cast<double>(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
      out[i] = ets->w1 * z[i] / ets->t + ets->w2 * z[i] + ets->w3 * uniform;
    return out;
  }
  const double t = temperature(params, z);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / t;
  return out;
}

inline LogitDataset calibrate_dataset(const CalibratorParams& params, const LogitDataset& d) {
  LogitDataset out;
  out.n = d.n;
  out.k = d.k;
  out.labels = d.labels;
  out.name = d.name;
  out.logits.reserve(d.n * d.k);
  for (std::size_t i = 0; i < d.n; ++i) {
    const auto zc = calibrate(params, d.row(i));
    out.logits.insert(out.logits.end(), zc.begin(), zc.end());
  }
  return out;
}

// True when fitted ETS weights degenerate to the constant prediction
// (w1 + w2 = 0), which is the one case that cannot preserve accuracy.
inline bool ets_degenerate(const EtsParams& p) { return p.w1 + p.w2 <= 1e-12; }

// ---------------------------------------------------------------------------
// Flat parameter vectors for the SGD family

namespace detail {

inline std::size_t flat_size(Method m, std::size_t k) {
  switch (m) {
    case Method::Ts: return 1;
    case Method::Lts: return k + 1;
    case Method::Hts: return 2;
    case Method::Hnlts: return k + 2;
    case Method::Pts: {
      const std::size_t d = std::min(k, kPtsMaxInput);
      return kPtsHidden * d + 3 * kPtsHidden + kPtsHidden * kPtsHidden + kPtsHidden + 1;
    }
    default: throw UnsupportedOperationError("flat parameters: gradient-free method");
  }
}

inline std::vector<double> flatten(const CalibratorParams& p) {
  if (const auto* ts = std::get_if<TsParams>(&p)) return {ts->a};
  if (const auto* lts = std::get_if<LtsParams>(&p)) {
    std::vector<double> f(lts->w);
    f.push_back(lts->b);
    return f;
  }
  if (const auto* hts = std::get_if<HtsParams>(&p)) return {hts->w_h, hts->b};
  if (const auto* hn = std::get_if<HnltsParams>(&p)) {
    std::vector<double> f(hn->w);
    f.push_back(hn->w_h);
    f.push_back(hn->b);
    return f;
  }
  if (const auto* pts = std::get_if<PtsParams>(&p)) {
    std::vector<double> f;
    f.reserve(flat_size(Method::Pts, pts->input_dim));
    f.insert(f.end(), pts->w1.begin(), pts->w1.end());
    f.insert(f.end(), pts->b1.begin(), pts->b1.end());
    f.insert(f.end(), pts->w2.begin(), pts->w2.end());
    f.insert(f.end(), pts->b2.begin(), pts->b2.end());
    f.insert(f.end(), pts->w3.begin(), pts->w3.end());
    f.push_back(pts->b3);
    return f;
  }
  throw UnsupportedOperationError("flatten: gradient-free method");
}

inline CalibratorParams unflatten(Method m, std::size_t k, std::span<const double> f) {
  switch (m) {
    case Method::Ts: return TsParams{f[0]};
    case Method::Lts: return LtsParams{{f.begin(), f.begin() + k}, f[k]};
    case Method::Hts: return HtsParams{f[0], f[1]};
    case Method::Hnlts: return HnltsParams{{f.begin(), f.begin() + k}, f[k], f[k + 1]};
    case Method::Pts: {
      PtsParams p;
      p.input_dim = std::min(k, kPtsMaxInput);
      auto it = f.begin();
      p.w1.assign(it, it + kPtsHidden * p.input_dim); it += kPtsHidden * p.input_dim;
      p.b1.assign(it, it + kPtsHidden); it += kPtsHidden;
      p.w2.assign(it, it + kPtsHidden * kPtsHidden); it += kPtsHidden * kPtsHidden;
      p.b2.assign(it, it + kPtsHidden); it += kPtsHidden;
      p.w3.assign(it, it + kPtsHidden); it += kPtsHidden;
      p.b3 = *it;
      return p;
    }
    default: throw UnsupportedOperationError("unflatten: gradient-free method");
  }
}

// Precomputed per-row features for fitting: the entropy feature and the
// sorted truncated network inputs depend on z only.
struct AtsContext {
  const LogitDataset& data;
  Method method;
  std::size_t d = 0;             // pts input width
  std::vector<double> ent_feat;  // hts / hnlts
  std::vector<double> pts_in;    // row-major n x d

  AtsContext(const LogitDataset& dd, Method m) : data(dd), method(m) {
    if (m == Method::Hts || m == Method::Hnlts) {
      ent_feat.resize(dd.n);
      for (std::size_t i = 0; i < dd.n; ++i)
        ent_feat[i] = std::log(normalized_entropy(dd.row(i)));
    }
    if (m == Method::Pts) {
      d = std::min(dd.k, kPtsMaxInput);
      pts_in.reserve(dd.n * d);
      for (std::size_t i = 0; i < dd.n; ++i) {
        const auto x = pts_input(dd.row(i), d);
        pts_in.insert(pts_in.end(), x.begin(), x.end());
      }
    }
  }

  // Pre-activation u for row i; PTS additionally yields the hidden trace.
  double preactivation(std::span<const double> flat, std::size_t i, PtsTrace* trace) const {
    const auto z = data.row(i);
    const std::size_t k = data.k;
    switch (method) {
      case Method::Ts: return flat[0];
      case Method::Lts: {
        double u = 0.0;
        for (std::size_t j = 0; j < k; ++j) u += flat[j] * z[j];
        return u + flat[k];
      }
      case Method::Hts: return flat[0] * ent_feat[i] + flat[1];
      case Method::Hnlts: {
        double u = 0.0;
        for (std::size_t j = 0; j < k; ++j) u += flat[j] * z[j];
        return u + flat[k] * ent_feat[i] + flat[k + 1];
      }
      case Method::Pts: {
        const auto p = std::get<PtsParams>(unflatten(Method::Pts, k, flat));
        auto t = pts_forward(p, {pts_in.data() + i * d, d});
        if (trace) *trace = t;
        return t.u;
      }
      default: throw UnsupportedOperationError("preactivation");
    }
  }

  // Scatter a per-row du (dObjective/du_i) into the flat gradient.
  void accumulate(std::span<const double> flat, std::size_t i, double du, const PtsTrace& trace,
                  std::span<double> grad) const {
    const auto z = data.row(i);
    const std::size_t k = data.k;
    switch (method) {
      case Method::Ts:
        grad[0] += du;
        return;
      case Method::Lts:
        for (std::size_t j = 0; j < k; ++j) grad[j] += du * z[j];
        grad[k] += du;
        return;
      case Method::Hts:
        grad[0] += du * ent_feat[i];
        grad[1] += du;
        return;
      case Method::Hnlts:
        for (std::size_t j = 0; j < k; ++j) grad[j] += du * z[j];
        grad[k] += du * ent_feat[i];
        grad[k + 1] += du;
        return;
      case Method::Pts: {
        const double* x = pts_in.data() + i * d;
        const std::size_t o_w1 = 0, o_b1 = kPtsHidden * d, o_w2 = o_b1 + kPtsHidden,
                          o_b2 = o_w2 + kPtsHidden * kPtsHidden, o_w3 = o_b2 + kPtsHidden,
                          o_b3 = o_w3 + kPtsHidden;
        grad[o_b3] += du;
        std::array<double, kPtsHidden> dpre2{};
        for (std::size_t j = 0; j < kPtsHidden; ++j) {
          grad[o_w3 + j] += du * trace.h2[j];
          dpre2[j] = trace.h2[j] > 0 ? du * flat[o_w3 + j] : 0.0;
        }
        std::array<double, kPtsHidden> dpre1{};
        for (std::size_t j = 0; j < kPtsHidden; ++j) {
          if (dpre2[j] == 0.0) continue;
          grad[o_b2 + j] += dpre2[j];
          for (std::size_t l = 0; l < kPtsHidden; ++l) {
            grad[o_w2 + j * kPtsHidden + l] += dpre2[j] * trace.h1[l];
            if (trace.h1[l] > 0) dpre1[l] += dpre2[j] * flat[o_w2 + j * kPtsHidden + l];
          }
        }
        for (std::size_t l = 0; l < kPtsHidden; ++l) {
          if (dpre1[l] == 0.0) continue;
          grad[o_b1 + l] += dpre1[l];
          for (std::size_t m = 0; m < d; ++m) grad[o_w1 + l * d + m] += dpre1[l] * x[m];
        }
        return;
      }
      default: throw UnsupportedOperationError("accumulate");
    }
  }
};

// Mean NLL of rows calibrated with per-row temperature softplus(u).
inline double ats_objective_nll(const AtsContext& ctx, std::span<const double> flat,
                                std::span<const std::size_t> rows) {
  double total = 0.0;
  for (std::size_t i : rows) {
    const auto z = ctx.data.row(i);
    const double t = clamp_temp(softplus(ctx.preactivation(flat, i, nullptr)));
    double m = z[argmax(z)] / t;
    double s = 0.0;
    for (double v : z) s += std::exp(v / t - m);
    total += std::log(s) + m - z[static_cast<std::size_t>(ctx.data.labels[i])] / t;
  }
  return total / static_cast<double>(rows.size());
}

inline void ats_gradient_nll(const AtsContext& ctx, std::span<const double> flat,
                             std::span<const std::size_t> rows, std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  std::vector<double> zc(ctx.data.k);
  for (std::size_t i : rows) {
    const auto z = ctx.data.row(i);
    PtsTrace trace;
    const double u = ctx.preactivation(flat, i, &trace);
    const double sp = softplus(u);
    if (sp < kTempMin) continue;  // clamped: dT/du = 0
    const double t = sp;
    for (std::size_t j = 0; j < z.size(); ++j) zc[j] = z[j] / t;
    const auto q = softmax(zc);
    double qz = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) qz += q[j] * z[j];
    const double dl_dt = (z[static_cast<std::size_t>(ctx.data.labels[i])] - qz) / (t * t);
    const double du = dl_dt * sigmoid(u) * inv_n;
    ctx.accumulate(flat, i, du, trace, grad);
  }
}

// ECE-shaped training loss over the given rows: bins are re-partitioned at
// each evaluation; gradient flows only through the mean-confidence term.
inline double ats_objective_lece(const AtsContext& ctx, std::span<const double> flat,
                                 std::span<const std::size_t> rows, int ece_bins) {
  std::vector<std::size_t> count(ece_bins, 0);
  std::vector<double> acc(ece_bins, 0.0), conf(ece_bins, 0.0);
  std::vector<double> zc(ctx.data.k);
  for (std::size_t i : rows) {
    const auto z = ctx.data.row(i);
    const double t = clamp_temp(softplus(ctx.preactivation(flat, i, nullptr)));
    for (std::size_t j = 0; j < z.size(); ++j) zc[j] = z[j] / t;
    const std::size_t pred = argmax(zc);
    const double c = softmax(zc)[pred];
    const int b = confidence_bin(c, ece_bins);
    count[b] += 1;
    acc[b] += pred == static_cast<std::size_t>(ctx.data.labels[i]) ? 1.0 : 0.0;
    conf[b] += c;
  }
  double loss = 0.0;
  const double n = static_cast<double>(rows.size());
  for (int b = 0; b < ece_bins; ++b) {
    if (count[b] == 0) continue;
    const double gap = acc[b] / count[b] - conf[b] / count[b];
    loss += static_cast<double>(count[b]) / n * std::abs(gap);
  }
  return loss;
}

inline void ats_gradient_lece(const AtsContext& ctx, std::span<const double> flat,
                              std::span<const std::size_t> rows, int ece_bins,
                              std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  const std::size_t n = rows.size();
  std::vector<double> us(n), ts(n), confs(n), qzs(n);
  std::vector<int> bins(n);
  std::vector<PtsTrace> traces(ctx.method == Method::Pts ? n : 0);
  std::vector<std::size_t> count(ece_bins, 0);
  std::vector<double> acc(ece_bins, 0.0), conf_sum(ece_bins, 0.0);
  std::vector<double> zc(ctx.data.k);

  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = rows[r];
    const auto z = ctx.data.row(i);
    PtsTrace trace;
    us[r] = ctx.preactivation(flat, i, &trace);
    if (!traces.empty()) traces[r] = trace;
    ts[r] = clamp_temp(softplus(us[r]));
    for (std::size_t j = 0; j < z.size(); ++j) zc[j] = z[j] / ts[r];
    const std::size_t pred = argmax(zc);
    const auto q = softmax(zc);
    confs[r] = q[pred];
    double qz = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) qz += q[j] * z[j];
    qzs[r] = qz;
    bins[r] = confidence_bin(confs[r], ece_bins);
    count[bins[r]] += 1;
    acc[bins[r]] += pred == static_cast<std::size_t>(ctx.data.labels[i]) ? 1.0 : 0.0;
    conf_sum[bins[r]] += confs[r];
  }

  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = rows[r];
    const auto z = ctx.data.row(i);
    const int b = bins[r];
    const double gap = conf_sum[b] / count[b] - acc[b] / count[b];
    const double sign = gap > 0 ? 1.0 : (gap < 0 ? -1.0 : 0.0);
    if (sign == 0.0) continue;
    if (softplus(us[r]) < kTempMin) continue;
    // d conf / d T = conf * (q.z - z_max) / T^2
    const double zmax = z[argmax(z)];
    const double dconf_dt = confs[r] * (qzs[r] - zmax) / (ts[r] * ts[r]);
    const double du = sign / static_cast<double>(n) * dconf_dt * sigmoid(us[r]);
    ctx.accumulate(flat, i, du, traces.empty() ? PtsTrace{} : traces[r], grad);
  }
}

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

// Mean NLL over a row subset at a constant temperature.
inline double nll_at_temperature(const LogitDataset& d, std::span<const std::size_t> rows,
                                 double t) {
  double total = 0.0;
  for (std::size_t i : rows) {
    const auto z = d.row(i);
    const double m = z[argmax(z)] / t;
    double s = 0.0;
    for (double v : z) s += std::exp(v / t - m);
    total += std::log(s) + m - z[static_cast<std::size_t>(d.labels[i])] / t;
  }
  return total / static_cast<double>(rows.size());
}

// Deterministic 1-D NLL minimization in the pre-softplus variable.
inline double fit_scalar_temp_preact(const LogitDataset& d, std::span<const std::size_t> rows) {
  const double lo = softplus_inverse(1e-2);
  const double hi = softplus_inverse(1e2);
  return scalar_minimize(
      [&](double a) { return nll_at_temperature(d, rows, detail::clamp_temp(softplus(a))); }, lo,
      hi, 1e-10);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient of the mean NLL over a batch, with respect to every parameter.
// Defined for the softplus-family calibrators; BTS fits per-bin scalars and
// ETS fits by projected search, so both reject this call.
inline std::vector<double> nll_gradient(const CalibratorParams& params, const LogitDataset& batch) {
  const Method m = method_of(params);
  if (m == Method::Bts || m == Method::Ets)
    throw UnsupportedOperationError("nll_gradient: unsupported for " + std::string(method_tag(m)));
  if (batch.n == 0) throw InvalidInputError("nll_gradient: empty batch");
  detail::AtsContext ctx(batch, m);
  const auto flat = detail::flatten(params);
  std::vector<double> grad(flat.size());
  detail::ats_gradient_nll(ctx, flat, detail::all_rows(batch.n), grad);
  return grad;
}

inline double nll_objective(const CalibratorParams& params, const LogitDataset& batch) {
  const Method m = method_of(params);
  if (m == Method::Bts || m == Method::Ets) return nll(calibrate_dataset(params, batch));
  detail::AtsContext ctx(batch, m);
  return detail::ats_objective_nll(ctx, detail::flatten(params), detail::all_rows(batch.n));
}

// ---------------------------------------------------------------------------
// Fitting

namespace detail {

inline std::vector<double> sgd_family_init(Method m, std::size_t k, std::uint64_t seed) {
  const double identity_b = softplus_inverse(1.0);
  std::vector<double> f(flat_size(m, k), 0.0);
  switch (m) {
    case Method::Lts: f[k] = identity_b; break;
    case Method::Hts: f[1] = identity_b; break;
    case Method::Hnlts: f[k + 1] = identity_b; break;
    case Method::Pts: {
      // Hidden weights random; output layer zeroed with identity bias so the
      // initial map is exactly T = 1 and best-seen tracking can never end
      // above the identity objective.
      const std::size_t d = std::min(k, kPtsMaxInput);
      Rng rng(seed);
      for (std::size_t i = 0; i < kPtsHidden * d; ++i) f[i] = rng.uniform_in(-0.1, 0.1);
      const std::size_t o_w2 = kPtsHidden * d + kPtsHidden;
      for (std::size_t i = 0; i < kPtsHidden * kPtsHidden; ++i)
        f[o_w2 + i] = rng.uniform_in(-0.1, 0.1);
      f[flat_size(m, k) - 1] = identity_b;
      break;
    }
    default: break;
  }
  return f;
}

inline CalibratorParams fit_sgd_family(Method m, const LogitDataset& val, const FitConfig& cfg,
                                       int ece_bins) {
  AtsContext ctx(val, m);
  const auto rows = all_rows(val.n);
  ObjectiveFn objective;
  BatchGradientFn gradient;
  if (cfg.objective == FitConfig::Objective::Nll) {
    objective = [&](std::span<const double> f) { return ats_objective_nll(ctx, f, rows); };
    gradient = [&](std::span<const double> f, std::span<const std::size_t> rr,
                   std::span<double> g) { ats_gradient_nll(ctx, f, rr, g); };
  } else {
    objective = [&](std::span<const double> f) {
      return ats_objective_lece(ctx, f, rows, ece_bins);
    };
    gradient = [&](std::span<const double> f, std::span<const std::size_t> rr,
                   std::span<double> g) { ats_gradient_lece(ctx, f, rr, ece_bins, g); };
  }
  const auto res =
      sgd_minimize(objective, gradient, val.n, sgd_family_init(m, val.k, cfg.seed), cfg);
  return unflatten(m, val.k, res.params);
}

inline CalibratorParams fit_bts(const LogitDataset& val, int n_bins) {
  if (n_bins < 2) throw InvalidInputError("bts: need at least 2 bins");
  const auto rows = all_rows(val.n);
  const double global_t = clamp_temp(softplus(fit_scalar_temp_preact(val, rows)));

  std::vector<std::pair<double, std::size_t>> low;  // (confidence, row)
  std::vector<std::size_t> high;
  for (std::size_t i = 0; i < val.n; ++i) {
    const double c = top_confidence(val.row(i));
    if (c > 0.999) high.push_back(i);
    else low.emplace_back(c, i);
  }
  std::sort(low.begin(), low.end());

  const std::size_t nlow_bins = static_cast<std::size_t>(n_bins) - 1;
  const std::size_t m = low.size();
  BtsParams p;
  p.edges.assign(static_cast<std::size_t>(n_bins) + 1, 0.0);
  p.temps.assign(static_cast<std::size_t>(n_bins), global_t);
  p.edges[0] = 0.0;
  p.edges[nlow_bins] = 0.999;
  p.edges[n_bins] = 1.0;

  std::vector<std::size_t> bin_rows;
  for (std::size_t j = 0; j < nlow_bins; ++j) {
    const std::size_t lo = j * m / nlow_bins;
    const std::size_t hi = (j + 1) * m / nlow_bins;
    if (j >= 1) {
      // Cut point between equal-mass neighbours; an empty neighbour keeps
      // the previous edge (zero-width bin, unreachable by lookup).
      p.edges[j] = lo == 0 || lo == m ? p.edges[j - 1]
                                      : 0.5 * (low[lo - 1].first + low[lo].first);
      p.edges[j] = std::max(p.edges[j], p.edges[j - 1]);
    }
    if (lo >= hi) continue;  // empty bin inherits the global temperature
    bin_rows.clear();
    for (std::size_t r = lo; r < hi; ++r) bin_rows.push_back(low[r].second);
    p.temps[j] = clamp_temp(softplus(fit_scalar_temp_preact(val, bin_rows)));
  }
  if (!high.empty()) p.temps[nlow_bins] = clamp_temp(softplus(fit_scalar_temp_preact(val, high)));
  return p;
}

inline CalibratorParams fit_ets(const LogitDataset& val, const FitConfig& cfg) {
  const auto rows = all_rows(val.n);
  const double t_ets = clamp_temp(softplus(fit_scalar_temp_preact(val, rows)));

  const auto weights_of = [](std::span<const double> v) {
    const double m = std::max({v[0], v[1], v[2]});
    std::array<double, 3> w{std::exp(v[0] - m), std::exp(v[1] - m), std::exp(v[2] - m)};
    const double s = w[0] + w[1] + w[2];
    for (auto& x : w) x /= s;
    return w;
  };

  const auto ets_nll = [&](const EtsParams& p, std::span<const std::size_t> rr) {
    double total = 0.0;
    std::vector<double> zc(val.k);
    for (std::size_t i : rr) {
      const auto z = val.row(i);
      const double uniform = 1.0 / static_cast<double>(val.k);
      for (std::size_t j = 0; j < val.k; ++j)
        zc[j] = p.w1 * z[j] / p.t + p.w2 * z[j] + p.w3 * uniform;
      total += -log_softmax(zc)[static_cast<std::size_t>(val.labels[i])];
    }
    return total / static_cast<double>(rr.size());
  };

  // Simplex weights via a 3-logit softmax reparametrization.
  ObjectiveFn objective = [&](std::span<const double> v) {
    const auto w = weights_of(v);
    return ets_nll(EtsParams{w[0], w[1], w[2], t_ets}, rows);
  };
  BatchGradientFn gradient = [&](std::span<const double> v, std::span<const std::size_t> rr,
                                 std::span<double> g) {
    const auto w = weights_of(v);
    std::array<double, 3> dw{};  // dNLL/dw
    std::vector<double> zc(val.k);
    for (std::size_t i : rr) {
      const auto z = val.row(i);
      const double uniform = 1.0 / static_cast<double>(val.k);
      for (std::size_t j = 0; j < val.k; ++j)
        zc[j] = w[0] * z[j] / t_ets + w[1] * z[j] + w[2] * uniform;
      const auto q = softmax(zc);
      double qz = 0.0;
      for (std::size_t j = 0; j < val.k; ++j) qz += q[j] * z[j];
      const double zy = z[static_cast<std::size_t>(val.labels[i])];
      dw[0] += (qz - zy) / t_ets;
      dw[1] += qz - zy;
      // the uniform term shifts all logits equally: zero gradient
    }
    for (auto& x : dw) x /= static_cast<double>(rr.size());
    for (std::size_t j = 0; j < 3; ++j) {
      g[j] = 0.0;
      for (std::size_t i = 0; i < 3; ++i)
        g[j] += dw[i] * w[i] * ((i == j ? 1.0 : 0.0) - w[j]);
    }
  };

  const auto res = sgd_minimize(objective, gradient, val.n, {0.0, 0.0, 0.0}, cfg);
  const auto wf = weights_of(res.params);

  // The vertices are representable but not reachable by the softmax
  // reparametrization; pick the exact-NLL argmin over them and the SGD fit.
  EtsParams best{wf[0], wf[1], wf[2], t_ets};
  double best_nll = ets_nll(best, rows);
  for (const auto& cand : {EtsParams{1, 0, 0, t_ets}, EtsParams{0, 1, 0, t_ets},
                           EtsParams{0, 0, 1, t_ets}}) {
    const double v = ets_nll(cand, rows);
    if (v < best_nll) {
      best = cand;
      best_nll = v;
    }
  }
  return best;
}

}  // namespace detail

// Fit a calibration method on a validation set. TS is fit by bracketed
// scalar minimization; LTS/HTS/HnLTS/PTS by minibatch SGD per cfg; BTS by a
// forced [0.999, 1] bin plus equal-mass bins with per-bin scalar fits; ETS
// by the TS temperature followed by simplex-reparametrized descent over the
// ensemble weights. Deterministic given cfg.seed.
inline CalibratorParams fit(Method method, const LogitDataset& val, const FitConfig& cfg = {},
                            int bts_bins = 50, int ece_bins = 50) {
  validate(val);
  cfg.validate();
  const bool sgd_family = method == Method::Lts || method == Method::Hts ||
                          method == Method::Hnlts || method == Method::Pts;
  if (cfg.objective == FitConfig::Objective::LEce && !sgd_family)
    throw InvalidInputError("fit: objective lece requires an SGD-family method (lts/hts/hnlts/pts)");
  switch (method) {
    case Method::Ts:
      return TsParams{detail::fit_scalar_temp_preact(val, detail::all_rows(val.n))};
    case Method::Lts:
    case Method::Hts:
    case Method::Hnlts:
    case Method::Pts:
      return detail::fit_sgd_family(method, val, cfg, ece_bins);
    case Method::Bts:
      return detail::fit_bts(val, bts_bins);
    case Method::Ets:
      return detail::fit_ets(val, cfg);
  }
  throw InvalidInputError("fit: unknown method");
}

// Per-group 1-D NLL minimization: group_ids[i] in [0, n_groups) assigns row i
// to a group, negative ids skip the row. Empty groups yield NaN markers.
inline std::vector<double> optimal_temperature_per_group(const LogitDataset& d,
                                                         std::span<const int> group_ids,
                                                         int n_groups) {
  if (group_ids.size() != d.n)
    throw InvalidInputError("optimal_temperature_per_group: group ids size mismatch");
  std::vector<std::vector<std::size_t>> groups(n_groups);
  for (std::size_t i = 0; i < d.n; ++i) {
    const int g = group_ids[i];
    if (g < 0) continue;
    if (g >= n_groups) throw InvalidInputError("optimal_temperature_per_group: group id out of range");
    groups[static_cast<std::size_t>(g)].push_back(i);
  }
  std::vector<double> out(n_groups, std::numeric_limits<double>::quiet_NaN());
  for (int g = 0; g < n_groups; ++g) {
    if (groups[static_cast<std::size_t>(g)].empty()) continue;
    out[static_cast<std::size_t>(g)] = detail::clamp_temp(
        softplus(detail::fit_scalar_temp_preact(d, groups[static_cast<std::size_t>(g)])));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Self-describing text serialization; round-trips bit-exactly.

inline KvFile params_to_kv(const CalibratorParams& p, std::size_t k, const FitConfig& cfg) {
  KvFile kv;
  kv.set("format", "calib-params-v1");
  kv.set("method", std::string(method_tag(method_of(p))));
  kv.set_uint("k", k);
  kv.set("rng", kRngId);
  kv.set("fit.objective", objective_tag(cfg.objective));
  kv.set_double("fit.lr0", cfg.lr0);
  kv.set_double("fit.momentum", cfg.momentum);
  kv.set_uint("fit.batch_size", cfg.batch_size);
  kv.set_double("fit.plateau_factor", cfg.plateau_factor);
  kv.set_double("fit.lr_floor", cfg.lr_floor);
  kv.set_int("fit.plateau_patience", cfg.plateau_patience);
  kv.set_uint("fit.seed", cfg.seed);
  kv.set_int("fit.max_epochs", cfg.max_epochs);
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, TsParams>) {
          kv.set_double("param.a", v.a);
        } else if constexpr (std::is_same_v<T, LtsParams>) {
          kv.set_doubles("param.w", v.w);
          kv.set_double("param.b", v.b);
        } else if constexpr (std::is_same_v<T, HtsParams>) {
          kv.set_double("param.w_h", v.w_h);
          kv.set_double("param.b", v.b);
        } else if constexpr (std::is_same_v<T, HnltsParams>) {
          kv.set_doubles("param.w", v.w);
          kv.set_double("param.w_h", v.w_h);
          kv.set_double("param.b", v.b);
        } else if constexpr (std::is_same_v<T, PtsParams>) {
          kv.set_uint("param.input_dim", v.input_dim);
          kv.set_doubles("param.w1", v.w1);
          kv.set_doubles("param.b1", v.b1);
          kv.set_doubles("param.w2", v.w2);
          kv.set_doubles("param.b2", v.b2);
          kv.set_doubles("param.w3", v.w3);
          kv.set_double("param.b3", v.b3);
        } else if constexpr (std::is_same_v<T, BtsParams>) {
          kv.set_doubles("param.edges", v.edges);
          kv.set_doubles("param.temps", v.temps);
        } else {
          kv.set_double("param.w1", v.w1);
          kv.set_double("param.w2", v.w2);
          kv.set_double("param.w3", v.w3);
          kv.set_double("param.t", v.t);
        }
      },
      p);
  return kv;
}

inline FitConfig fit_config_from_kv(const KvFile& kv) {
  FitConfig cfg;
  cfg.objective = objective_from_tag(kv.get_or("fit.objective", "nll"));
  cfg.lr0 = kv.get_double_or("fit.lr0", cfg.lr0);
  cfg.momentum = kv.get_double_or("fit.momentum", cfg.momentum);
  cfg.batch_size = static_cast<std::size_t>(kv.get_uint_or("fit.batch_size", cfg.batch_size));
  cfg.plateau_factor = kv.get_double_or("fit.plateau_factor", cfg.plateau_factor);
  cfg.lr_floor = kv.get_double_or("fit.lr_floor", cfg.lr_floor);
  cfg.plateau_patience = static_cast<int>(kv.get_int_or("fit.plateau_patience", cfg.plateau_patience));
  cfg.seed = kv.get_uint_or("fit.seed", cfg.seed);
  cfg.max_epochs = kv.get_int_or("fit.max_epochs", cfg.max_epochs);
  return cfg;
}

inline std::pair<CalibratorParams, std::size_t> params_from_kv(const KvFile& kv) {
  if (kv.get_or("format", "") != "calib-params-v1")
    throw ParseError("params file: unknown format");
  const Method m = method_from_tag(kv.get("method"));
  const std::size_t k = static_cast<std::size_t>(kv.get_uint("k"));
  switch (m) {
    case Method::Ts: return {TsParams{kv.get_double("param.a")}, k};
    case Method::Lts: return {LtsParams{kv.get_doubles("param.w"), kv.get_double("param.b")}, k};
    case Method::Hts:
      return {HtsParams{kv.get_double("param.w_h"), kv.get_double("param.b")}, k};
    case Method::Hnlts:
      return {HnltsParams{kv.get_doubles("param.w"), kv.get_double("param.w_h"),
                          kv.get_double("param.b")},
              k};
    case Method::Pts: {
      PtsParams p;
      p.input_dim = static_cast<std::size_t>(kv.get_uint("param.input_dim"));
      p.w1 = kv.get_doubles("param.w1");
      p.b1 = kv.get_doubles("param.b1");
      p.w2 = kv.get_doubles("param.w2");
      p.b2 = kv.get_doubles("param.b2");
      p.w3 = kv.get_doubles("param.w3");
      p.b3 = kv.get_double("param.b3");
      return {p, k};
    }
    case Method::Bts:
      return {BtsParams{kv.get_doubles("param.edges"), kv.get_doubles("param.temps")}, k};
    case Method::Ets:
      return {EtsParams{kv.get_double("param.w1"), kv.get_double("param.w2"),
                        kv.get_double("param.w3"), kv.get_double("param.t")},
              k};
  }
  throw ParseError("params file: unknown method");
}

}  // namespace calib
