#ifndef DEEPSRQ_EVAL_HPP
#define DEEPSRQ_EVAL_HPP

// Correlation protocol for objective quality scores: rank correlation on raw
// predictions; linear correlation and RMSE after a four-parameter logistic
// mapping onto the MOS scale.

#include "deepsrq/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsrq {

enum class EvalErrc { TooFewSamples, ZeroVariance, ConstantPredictions, DegenerateParams, LengthMismatch };

inline const char* to_string(EvalErrc c) {
  switch (c) {
    case EvalErrc::TooFewSamples: return "TooFewSamples";
    case EvalErrc::ZeroVariance: return "ZeroVariance";
    case EvalErrc::ConstantPredictions: return "ConstantPredictions";
    case EvalErrc::DegenerateParams: return "DegenerateParams";
    case EvalErrc::LengthMismatch: return "LengthMismatch";
  }
  return "Unknown";
}

class EvalError : public std::runtime_error {
 public:
  EvalError(EvalErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  EvalErrc code() const noexcept { return code_; }

 private:
  EvalErrc code_;
};

struct LogisticParams {
  double tau1 = 1, tau2 = 0, tau3 = 0, tau4 = 1;
  std::array<double, 4> as_array() const { return {tau1, tau2, tau3, tau4}; }
};

/// g(x) = (tau1 - tau2) / (1 + exp((x - tau3) / tau4)) + tau2
inline double logistic_eval(double x, const LogisticParams& p) {
  if (p.tau4 == 0 || !std::isfinite(p.tau4)) throw EvalError(EvalErrc::DegenerateParams, "tau4 must be nonzero");
  // Extended precision: near-linear data drives tau1, tau2 to large opposite
  // values and the final sum cancels most of their digits.
  using L = long double;
  const L z = (L(x) - L(p.tau3)) / L(p.tau4);
  // 1/(1+e^z) evaluated without overflow on either tail
  const L s = z > 0 ? std::exp(-z) / (1.0L + std::exp(-z)) : 1.0L / (1.0L + std::exp(z));
  return static_cast<double>((L(p.tau1) - L(p.tau2)) * s + L(p.tau2));
}

namespace detail {

inline void check_lengths(std::span<const double> a, std::span<const double> b, std::size_t min_n) {
  if (a.size() != b.size()) throw EvalError(EvalErrc::LengthMismatch, "inputs differ in length");
  if (a.size() < min_n)
    throw EvalError(EvalErrc::TooFewSamples, "need at least " + std::to_string(min_n) + " samples");
}

inline double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Population standard deviation.
inline double stddev(std::span<const double> v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

/// 1-based ranks; tied values share the mean of their rank span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i + 1;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

// Nelder-Mead on f: R^4 -> R. Standard reflection/expansion/contraction/
// shrink coefficients (1, 2, 1/2, 1/2).
template <typename F>
std::array<double, 4> nelder_mead(F&& f, std::array<double, 4> start, std::array<double, 4> step, int max_iter,
                                  double rel_diameter_tol) {
  constexpr int n = 4;
  std::array<std::array<double, 4>, n + 1> pts{};
  std::array<double, n + 1> val{};
  pts[0] = start;
  for (int i = 0; i < n; ++i) {
    pts[i + 1] = start;
    pts[i + 1][i] += step[i];
  }
  for (int i = 0; i <= n; ++i) val[i] = f(pts[i]);

  auto order = [&] {
    std::array<int, n + 1> idx;
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return val[a] < val[b]; });
    auto p2 = pts;
    auto v2 = val;
    for (int i = 0; i <= n; ++i) {
      pts[i] = p2[idx[i]];
      val[i] = v2[idx[i]];
    }
  };
  auto lerp = [](const std::array<double, 4>& a, const std::array<double, 4>& b, double t) {
    std::array<double, 4> r;
    for (int i = 0; i < n; ++i) r[i] = a[i] + t * (b[i] - a[i]);
    return r;
  };

  for (int iter = 0; iter < max_iter; ++iter) {
    order();
    double diam = 0, scale = 1;
    for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(pts[0][i]));
    for (int k = 1; k <= n; ++k)
      for (int i = 0; i < n; ++i) diam = std::max(diam, std::abs(pts[k][i] - pts[0][i]));
    if (diam / scale < rel_diameter_tol) break;

    std::array<double, 4> centroid{};
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i) centroid[i] += pts[k][i] / n;

    const auto reflected = lerp(centroid, pts[n], -1.0);
    const double fr = f(reflected);
    if (fr < val[0]) {
      const auto expanded = lerp(centroid, pts[n], -2.0);
      const double fe = f(expanded);
      if (fe < fr) {
        pts[n] = expanded;
        val[n] = fe;
      } else {
        pts[n] = reflected;
        val[n] = fr;
      }
      continue;
    }
    if (fr < val[n - 1]) {
      pts[n] = reflected;
      val[n] = fr;
      continue;
    }
    const bool outside = fr < val[n];
    const auto contracted = outside ? lerp(centroid, reflected, 0.5) : lerp(centroid, pts[n], 0.5);
    const double fc = f(contracted);
    if (fc < (outside ? fr : val[n])) {
      pts[n] = contracted;
      val[n] = fc;
      continue;
    }
    for (int k = 1; k <= n; ++k) {
      pts[k] = lerp(pts[0], pts[k], 0.5);
      val[k] = f(pts[k]);
    }
  }
  order();
  return pts[0];
}

}  // namespace detail

inline double pearson(std::span<const double> a, std::span<const double> b) {
  detail::check_lengths(a, b, 2);
  const double ma = detail::mean(a), mb = detail::mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw EvalError(EvalErrc::ZeroVariance, "correlation of a constant sequence");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double srocc(std::span<const double> a, std::span<const double> b) {
  detail::check_lengths(a, b, 2);
  const auto ra = detail::average_ranks(a);
  const auto rb = detail::average_ranks(b);
  return pearson(ra, rb);
}

inline double rmse(std::span<const double> a, std::span<const double> b) {
  detail::check_lengths(a, b, 1);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

inline double logistic_rmse(std::span<const double> pred, std::span<const double> mos, const LogisticParams& p) {
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = logistic_eval(pred[i], p) - mos[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

/// Least-squares fit of the logistic by Nelder-Mead. Predictions are
/// standardized internally, so the search runs in a unit-scale space; the
/// start point is tau1 = max(mos), tau2 = min(mos), tau3 = mean(pred),
/// |tau4| = std(pred)/4, with the sign of tau4 giving the curve the
/// direction of the rank correlation.
inline LogisticParams fit_logistic(std::span<const double> pred, std::span<const double> mos) {
  detail::check_lengths(pred, mos, 5);
  const double mu = detail::mean(pred);
  const double sd = detail::stddev(pred);
  if (!(sd > 0)) throw EvalError(EvalErrc::ConstantPredictions, "predictions are all equal");

  std::vector<double> z(pred.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (pred[i] - mu) / sd;

  double rho = 0;
  try {
    rho = srocc(pred, mos);
  } catch (const EvalError&) {
    rho = 0;  // constant MOS: direction is irrelevant
  }
  const auto [mos_lo, mos_hi] = std::minmax_element(mos.begin(), mos.end());
  // tau4 > 0 makes the curve decrease from tau1 to tau2 as x grows
  const double dir = rho >= 0 ? -1.0 : 1.0;
  const std::array<double, 4> start{*mos_hi, *mos_lo, 0.0, dir * 0.25};
  const double span = std::max(*mos_hi - *mos_lo, 1e-3);
  const std::array<double, 4> step{0.1 * span, 0.1 * span, 0.5, dir * 0.1};

  auto sse = [&](const std::array<double, 4>& t) {
    if (t[3] == 0) return std::numeric_limits<double>::infinity();
    const LogisticParams p{t[0], t[1], t[2], t[3]};
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = logistic_eval(z[i], p) - mos[i];
      s += d * d;
    }
    return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
  };
  auto best = detail::nelder_mead(sse, start, step, 1000, 1e-8);
  if (sse(best) > sse(start)) best = start;
  return {best[0], best[1], mu + sd * best[2], sd * best[3]};
}

struct PlccRmse {
  double plcc = 0;
  double rmse = 0;
  LogisticParams fitted;
};

inline PlccRmse plcc_rmse(std::span<const double> pred, std::span<const double> mos) {
  const auto p = fit_logistic(pred, mos);
  std::vector<double> mapped(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) mapped[i] = logistic_eval(pred[i], p);
  return {pearson(mapped, mos), rmse(mapped, mos), p};
}

struct EvalReport {
  double srocc = 0;
  double plcc = 0;
  double rmse = 0;
  LogisticParams fitted;
  std::size_t n = 0;
};

inline EvalReport evaluate_scores(std::span<const double> pred, std::span<const double> mos) {
  const double s = srocc(pred, mos);
  const auto pr = plcc_rmse(pred, mos);
  return {s, pr.plcc, pr.rmse, pr.fitted, pred.size()};
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"srocc", r.srocc},
          {"plcc", r.plcc},
          {"rmse", r.rmse},
          {"n", r.n},
          {"tau", {r.fitted.tau1, r.fitted.tau2, r.fitted.tau3, r.fitted.tau4}}};
}

inline std::string to_table(const EvalReport& r) {
  std::ostringstream out;
  out << std::left << std::setw(8) << "metric" << std::right << std::setw(14) << "value" << '\n';
  out << std::fixed << std::setprecision(6);
  out << std::left << std::setw(8) << "SROCC" << std::right << std::setw(14) << r.srocc << '\n';
  out << std::left << std::setw(8) << "PLCC" << std::right << std::setw(14) << r.plcc << '\n';
  out << std::left << std::setw(8) << "RMSE" << std::right << std::setw(14) << r.rmse << '\n';
  out << std::left << std::setw(8) << "n" << std::right << std::setw(14) << r.n << '\n';
  return out.str();
}

struct Evaluation {
  EvalReport report;
  std::vector<double> predictions;
};

/// Scores every record with image-level prediction and reports agreement
/// with MOS. The manifest may come from a different dataset than the one the
/// network was trained on.
inline Evaluation evaluate(TwoStreamNet<float>& net, const DatasetManifest& manifest, const TrainConfig& cfg) {
  Evaluation ev;
  std::vector<double> mos;
  for (const auto& r : manifest.records) {
    try {
      ev.predictions.push_back(predict_image(net, load_image(r.image_path), cfg, r.amp_factor));
    } catch (const std::exception& e) {
      throw TrainError(TrainErrc::Pipeline, r.image_path.string() + ": " + e.what());
    }
    mos.push_back(r.mos);
  }
  ev.report = evaluate_scores(ev.predictions, mos);
  return ev;
}

}  // namespace deepsrq

#endif  // DEEPSRQ_EVAL_HPP
