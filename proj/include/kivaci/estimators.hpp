#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "linear.hpp"
#include "nuisance.hpp"
#include "util.hpp"

namespace kivaci::estimators {

using Json = nlohmann::json;
using nuisance::NuisancePredictions;

enum class Method { naive, baseline, dse, dre, tmle };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::baseline: return "baseline";
    case Method::dse: return "dse";
    case Method::dre: return "dre";
    case Method::tmle: return "tmle";
  }
  return "naive";
}

inline Method parse_method(std::string_view s) {
  for (auto m : {Method::naive, Method::baseline, Method::dse, Method::dre, Method::tmle})
    if (to_string(m) == s) return m;
  throw Error("estimators", "config_invalid", "method " + std::string(s));
}

struct AteEstimate {
  Method method = Method::naive;
  double tau_hat = 0.0;
  double se = 0.0;
  std::pair<double, double> ci95{0.0, 0.0};
  std::size_t n_used = 0;
  std::size_t n_total = 0;
  std::map<std::string, double> diagnostics;

  bool covers(double tau) const { return ci95.first <= tau && tau <= ci95.second; }
};

inline AteEstimate make_estimate(Method m, double tau, double se, std::size_t n_used, std::size_t n_total) {
  AteEstimate est;
  est.method = m;
  est.tau_hat = tau;
  est.se = se;
  est.ci95 = {tau - kZ975 * se, tau + kZ975 * se};
  est.n_used = n_used;
  est.n_total = n_total;
  return est;
}

inline Json to_json(const AteEstimate& e) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  Json diag = Json::object();
  for (const auto& [k, v] : e.diagnostics) diag[k] = num(v);
  return {{"method", to_string(e.method)}, {"tau_hat", num(e.tau_hat)}, {"se", num(e.se)},
          {"ci95", {num(e.ci95.first), num(e.ci95.second)}}, {"n_used", e.n_used}, {"n_total", e.n_total},
          {"diagnostics", diag}};
}

namespace detail {

/// Sample variance with the (n - 1) convention; NaN below two values.
inline double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) return NAN;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline void check_lengths(const Eigen::VectorXd& y, const std::vector<int>& w) {
  if (static_cast<std::size_t>(y.size()) != w.size()) throw Error("estimators", "shape_mismatch");
  for (int v : w)
    if (v != 0 && v != 1) throw Error("estimators", "invalid_treatment");
}

/// Regression-imputation estimate shared by the baseline and double-selection
/// methods: mean of mu1 - mu0 over all units, se = sqrt(V1 + V0) with
/// V_w = var(residuals in arm w) / (n_w - 1).
inline AteEstimate imputation_estimate(Method method, const Eigen::VectorXd& y, const std::vector<int>& w,
                                       const Eigen::VectorXd& mu1, const Eigen::VectorXd& mu0) {
  check_lengths(y, w);
  if (mu1.size() != y.size() || mu0.size() != y.size()) throw Error("estimators", "shape_mismatch");
  std::vector<double> r1, r0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    if (w[i]) r1.push_back(y[k] - mu1[k]);
    else r0.push_back(y[k] - mu0[k]);
  }
  if (r1.empty() || r0.empty()) throw Error("estimators", "empty_arm");
  if (r1.size() < 2 || r0.size() < 2) throw Error("estimators", "too_few_units", "each arm needs two units");
  if (!mu1.allFinite() || !mu0.allFinite()) throw Error("estimators", "non_finite_prediction");
  const double tau = (mu1 - mu0).mean();
  const double v1 = sample_variance(r1) / static_cast<double>(r1.size() - 1);
  const double v0 = sample_variance(r0) / static_cast<double>(r0.size() - 1);
  auto est = make_estimate(method, tau, std::sqrt(v1 + v0), w.size(), w.size());
  est.diagnostics["n_treated"] = static_cast<double>(r1.size());
  est.diagnostics["n_control"] = static_cast<double>(r0.size());
  return est;
}

}  // namespace detail

/// Difference in arm means with se = sqrt(s1^2 / n_t + s0^2 / n_c). The se is
/// NaN when an arm holds a single unit.
inline AteEstimate naive_ate(const Eigen::VectorXd& y, const std::vector<int>& w) {
  detail::check_lengths(y, w);
  std::vector<double> y1, y0;
  for (std::size_t i = 0; i < w.size(); ++i) (w[i] ? y1 : y0).push_back(y[static_cast<Eigen::Index>(i)]);
  if (y1.empty() || y0.empty()) throw Error("estimators", "empty_arm");
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double n1 = static_cast<double>(y1.size()), n0 = static_cast<double>(y0.size());
  const double se = std::sqrt(detail::sample_variance(y1) / n1 + detail::sample_variance(y0) / n0);
  auto est = make_estimate(Method::naive, mean(y1) - mean(y0), se, w.size(), w.size());
  est.diagnostics["mean_treated"] = mean(y1);
  est.diagnostics["mean_control"] = mean(y0);
  est.diagnostics["n_treated"] = n1;
  est.diagnostics["n_control"] = n0;
  return est;
}

inline AteEstimate baseline_ate(const NuisancePredictions& p) {
  p.validate();
  return detail::imputation_estimate(Method::baseline, p.y, p.w, p.mu1, p.mu0);
}

struct Trim {
  double lo = 0.01;
  double hi = 0.99;
};

/// Units whose propensity lies in [lo, hi].
inline std::vector<std::size_t> retained_units(const Eigen::VectorXd& e, const Trim& trim) {
  if (!(trim.lo < trim.hi)) throw Error("estimators", "config_invalid", "trim lo must be < hi");
  std::vector<std::size_t> keep;
  for (Eigen::Index i = 0; i < e.size(); ++i)
    if (e[i] >= trim.lo && e[i] <= trim.hi) keep.push_back(static_cast<std::size_t>(i));
  return keep;
}

/// Augmented-IPW terms W(Y - m1)/e - (1 - W)(Y - m0)/(1 - e) + m1 - m0 for the
/// retained units.
inline Eigen::VectorXd aipw_terms(const Eigen::VectorXd& y, const std::vector<int>& w, const Eigen::VectorXd& m1,
                                  const Eigen::VectorXd& m0, const Eigen::VectorXd& e,
                                  const std::vector<std::size_t>& keep) {
  Eigen::VectorXd t(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(keep[k]);
    const double wi = w[keep[k]];
    t[static_cast<Eigen::Index>(k)] =
        wi * (y[i] - m1[i]) / e[i] - (1.0 - wi) * (y[i] - m0[i]) / (1.0 - e[i]) + m1[i] - m0[i];
  }
  return t;
}

namespace detail {

inline void check_predictions(const NuisancePredictions& p, const std::vector<std::size_t>& keep) {
  for (auto i : keep) {
    const auto k = static_cast<Eigen::Index>(i);
    if (!std::isfinite(p.mu1[k]) || !std::isfinite(p.mu0[k]) || !std::isfinite(p.e[k]) || !std::isfinite(p.y[k]))
      throw Error("estimators", "non_finite_prediction", "unit " + std::to_string(i));
    if (!(p.e[k] > 0.0 && p.e[k] < 1.0)) throw Error("estimators", "invalid_propensity", "unit " + std::to_string(i));
  }
}

/// tau = mean(terms); IC = terms - tau; se = sqrt(mean(IC^2) / n).
inline AteEstimate sandwich_estimate(Method m, const Eigen::VectorXd& terms, std::size_t n_total) {
  const double n = static_cast<double>(terms.size());
  const double tau = terms.mean();
  const double sigma2 = (terms.array() - tau).square().sum() / n;
  auto est = make_estimate(m, tau, std::sqrt(sigma2 / n), static_cast<std::size_t>(terms.size()), n_total);
  est.diagnostics["n_trimmed"] = static_cast<double>(n_total - static_cast<std::size_t>(terms.size()));
  return est;
}

}  // namespace detail

/// Doubly robust (augmented IPW) estimate over units with e in [lo, hi]; n in
/// the averages is the number of retained units.
inline AteEstimate dre_ate(const NuisancePredictions& p, const Trim& trim = {}) {
  p.validate();
  auto keep = retained_units(p.e, trim);
  if (keep.empty()) throw Error("estimators", "all_trimmed");
  detail::check_predictions(p, keep);
  auto est = detail::sandwich_estimate(Method::dre, aipw_terms(p.y, p.w, p.mu1, p.mu0, p.e, keep), p.size());
  est.diagnostics["trim_lo"] = trim.lo;
  est.diagnostics["trim_hi"] = trim.hi;
  return est;
}

/// Per-unit influence-curve values of the DRE over retained units.
inline Eigen::VectorXd dre_influence(const NuisancePredictions& p, const Trim& trim = {}) {
  auto keep = retained_units(p.e, trim);
  Eigen::VectorXd t = aipw_terms(p.y, p.w, p.mu1, p.mu0, p.e, keep);
  return t.array() - t.mean();
}

struct Fluctuation {
  double epsilon = 0.0;
  Eigen::VectorXd q1, q0;  // updated outcome predictions, all units
};

/// One-step targeting along H(w, x) = w/e - (1 - w)/(1 - e) fitted on the
/// retained units.
inline Fluctuation tmle_fluctuation(const NuisancePredictions& p, const std::vector<std::size_t>& keep) {
  double num = 0.0, den = 0.0;
  for (auto i : keep) {
    const auto k = static_cast<Eigen::Index>(i);
    const double wi = p.w[i];
    const double h = wi / p.e[k] - (1.0 - wi) / (1.0 - p.e[k]);
    const double mu_w = wi ? p.mu1[k] : p.mu0[k];
    num += h * (p.y[k] - mu_w);
    den += h * h;
  }
  if (den < 1e-12) throw Error("estimators", "degenerate_fluctuation");
  Fluctuation f;
  f.epsilon = num / den;
  f.q1 = p.mu1.array() + f.epsilon / p.e.array();
  f.q0 = p.mu0.array() - f.epsilon / (1.0 - p.e.array());
  return f;
}

/// Targeted maximum likelihood estimate: the DRE formula applied to the
/// fluctuated outcome predictions Q, with the IC computed from Q and tau_TMLE.
inline AteEstimate tmle_ate(const NuisancePredictions& p, const Trim& trim = {}) {
  p.validate();
  auto keep = retained_units(p.e, trim);
  if (keep.empty()) throw Error("estimators", "all_trimmed");
  detail::check_predictions(p, keep);
  auto fl = tmle_fluctuation(p, keep);
  auto est = detail::sandwich_estimate(Method::tmle, aipw_terms(p.y, p.w, fl.q1, fl.q0, p.e, keep), p.size());
  est.diagnostics["epsilon_hat"] = fl.epsilon;
  est.diagnostics["trim_lo"] = trim.lo;
  est.diagnostics["trim_hi"] = trim.hi;
  return est;
}

struct OlsFit {
  Eigen::VectorXd coefficients;  // intercept first
  Eigen::VectorXd standard_errors;
  Eigen::VectorXd t_stats;
  double r_squared = 0.0;
  double sigma2 = 0.0;
  std::size_t n = 0;
};

/// Least squares with intercept and homoskedastic standard errors
/// sigma^2 (Z'Z)^-1, sigma^2 = RSS / (n - p - 1).
inline OlsFit ols_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (y.size() != n) throw Error("estimators", "shape_mismatch");
  if (n <= p + 1) throw Error("estimators", "rank_deficient", "need n > p + 1");
  if (!x.allFinite() || !y.allFinite()) throw Error("estimators", "non_finite_input");
  Eigen::MatrixXd z(n, p + 1);
  z.col(0).setOnes();
  z.rightCols(p) = x;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(z);
  qr.setThreshold(1e-10);
  if (qr.rank() < p + 1) throw Error("estimators", "rank_deficient");
  OlsFit fit;
  fit.n = static_cast<std::size_t>(n);
  fit.coefficients = qr.solve(y);
  Eigen::VectorXd resid = y - z * fit.coefficients;
  const double rss = resid.squaredNorm();
  const double tss = (y.array() - y.mean()).square().sum();
  fit.r_squared = tss > 0 ? 1.0 - rss / tss : (rss == 0.0 ? 1.0 : 0.0);
  fit.sigma2 = rss / static_cast<double>(n - p - 1);
  // (Z'Z)^-1 = P R^-1 R^-T P' from the pivoted QR.
  Eigen::MatrixXd r = qr.matrixR().topLeftCorner(p + 1, p + 1).triangularView<Eigen::Upper>();
  Eigen::MatrixXd rinv = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p + 1, p + 1));
  Eigen::MatrixXd inv_perm = rinv * rinv.transpose();
  Eigen::MatrixXd inv = qr.colsPermutation() * inv_perm * qr.colsPermutation().transpose();
  fit.standard_errors = (fit.sigma2 * inv.diagonal().array()).sqrt();
  fit.t_stats.resize(p + 1);
  for (Eigen::Index j = 0; j <= p; ++j)
    fit.t_stats[j] = fit.standard_errors[j] > 0 ? fit.coefficients[j] / fit.standard_errors[j] : NAN;
  return fit;
}

struct DseOptions {
  linear::CvOptions outcome_cv{1.0};
  linear::CvOptions treatment_cv{1.0};
  /// Fixed lasso penalty for all three selections; cross-validated when unset.
  std::optional<double> lambda;
};

struct DseResult {
  AteEstimate estimate;
  std::vector<int> support;  // union of the three lasso supports
  std::vector<int> support_treated, support_control, support_treatment;
  Eigen::VectorXd mu1, mu0;
};

namespace detail {

/// Least-squares fit on the rows of one arm, predicting every unit. Columns
/// that are collinear within the arm get a zero coefficient.
inline Eigen::VectorXd arm_ols_predict(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<int>& w,
                                       int arm, bool* rank_deficient) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] == arm) rows.push_back(static_cast<Eigen::Index>(i));
  Eigen::MatrixXd z(static_cast<Eigen::Index>(rows.size()), x.cols() + 1);
  Eigen::VectorXd yy(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    z(kk, 0) = 1.0;
    z.row(kk).tail(x.cols()) = x.row(rows[k]);
    yy[kk] = y[rows[k]];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(z);
  qr.setThreshold(1e-10);
  if (qr.rank() < z.cols()) *rank_deficient = true;
  Eigen::VectorXd coef = qr.solve(yy);
  Eigen::MatrixXd all(x.rows(), x.cols() + 1);
  all.col(0).setOnes();
  all.rightCols(x.cols()) = x;
  return all * coef;
}

}  // namespace detail

/// Double selection: lasso supports of Y on X (treated), Y on X (control) and W
/// on X (logistic) are unioned; per-arm OLS on the union imputes both potential
/// outcomes for every unit. An empty union falls back to intercept-only OLS.
inline DseResult dse_ate(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<int>& w,
                         const DseOptions& opt = {}) {
  detail::check_lengths(y, w);
  if (x.rows() != y.size()) throw Error("estimators", "shape_mismatch");
  std::vector<Eigen::Index> t_rows, c_rows;
  for (std::size_t i = 0; i < w.size(); ++i) (w[i] ? t_rows : c_rows).push_back(static_cast<Eigen::Index>(i));
  if (t_rows.size() < 2 || c_rows.size() < 2) throw Error("estimators", "empty_arm");

  Eigen::VectorXd wv(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) wv[static_cast<Eigen::Index>(i)] = w[i];
  DseResult res;
  auto outcome_support = [&](const std::vector<Eigen::Index>& rows) {
    auto xs = linear::detail::take_rows(x, rows);
    auto ys = linear::detail::take(y, rows);
    if (opt.lambda) return linear::fit_elastic_net(xs, ys, *opt.lambda, 1.0).support();
    return linear::cv_elastic_net(xs, ys, opt.outcome_cv).fit.support();
  };
  res.support_treated = outcome_support(t_rows);
  res.support_control = outcome_support(c_rows);
  res.support_treatment = opt.lambda ? linear::fit_logistic_elastic_net(x, wv, *opt.lambda, 1.0).support()
                                     : linear::cv_logistic_elastic_net(x, wv, opt.treatment_cv).fit.support();

  std::vector<int> all = res.support_treated;
  all.insert(all.end(), res.support_control.begin(), res.support_control.end());
  all.insert(all.end(), res.support_treatment.begin(), res.support_treatment.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  res.support = all;

  Eigen::MatrixXd xs(x.rows(), static_cast<Eigen::Index>(all.size()));
  for (std::size_t k = 0; k < all.size(); ++k) xs.col(static_cast<Eigen::Index>(k)) = x.col(all[k]);
  bool deficient = false;
  res.mu1 = detail::arm_ols_predict(xs, y, w, 1, &deficient);
  res.mu0 = detail::arm_ols_predict(xs, y, w, 0, &deficient);
  res.estimate = detail::imputation_estimate(Method::dse, y, w, res.mu1, res.mu0);
  res.estimate.diagnostics["selected"] = static_cast<double>(all.size());
  res.estimate.diagnostics["empty_selection"] = all.empty() ? 1.0 : 0.0;
  res.estimate.diagnostics["rank_deficient_arm"] = deficient ? 1.0 : 0.0;
  return res;
}

struct RelatednessRegression {
  std::string name;
  std::size_t n = 0;
  std::size_t tested = 0;       // coefficients examined
  std::size_t significant = 0;  // |t| > 1.96 among them
  std::optional<double> treatment_t;
  std::string error;  // non-empty when the regression could not be run
};

namespace detail {

inline RelatednessRegression count_significant(std::string name, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                               Eigen::Index first, Eigen::Index count) {
  RelatednessRegression r;
  r.name = std::move(name);
  r.n = static_cast<std::size_t>(x.rows());
  r.tested = static_cast<std::size_t>(count);
  try {
    auto fit = ols_fit(x, y);
    for (Eigen::Index j = first; j < first + count; ++j)
      if (std::abs(fit.t_stats[j + 1]) > 1.96) ++r.significant;
  } catch (const Error& e) {
    r.error = e.code();
  }
  return r;
}

}  // namespace detail

/// Significance counts of text-embedding coefficients: Y on loan vectors per
/// arm, W on loan vectors and covariates, Y on W, loan vectors and covariates.
inline std::vector<RelatednessRegression> relatedness_report(const Eigen::MatrixXd& covariates,
                                                             const Eigen::MatrixXd& loan_vectors,
                                                             const Eigen::VectorXd& y, const std::vector<int>& w) {
  detail::check_lengths(y, w);
  const Eigen::Index n = y.size(), d = loan_vectors.cols(), p = covariates.cols();
  if (loan_vectors.rows() != n || covariates.rows() != n) throw Error("estimators", "shape_mismatch");
  std::vector<Eigen::Index> t_rows, c_rows;
  for (std::size_t i = 0; i < w.size(); ++i) (w[i] ? t_rows : c_rows).push_back(static_cast<Eigen::Index>(i));

  std::vector<RelatednessRegression> out;
  out.push_back(detail::count_significant("y_on_text_treated", linear::detail::take_rows(loan_vectors, t_rows),
                                          linear::detail::take(y, t_rows), 0, d));
  out.push_back(detail::count_significant("y_on_text_control", linear::detail::take_rows(loan_vectors, c_rows),
                                          linear::detail::take(y, c_rows), 0, d));
  Eigen::VectorXd wv(n);
  for (Eigen::Index i = 0; i < n; ++i) wv[i] = w[static_cast<std::size_t>(i)];
  Eigen::MatrixXd vx(n, d + p);
  vx << loan_vectors, covariates;
  out.push_back(detail::count_significant("w_on_text_and_covariates", vx, wv, 0, d));
  Eigen::MatrixXd wvx(n, 1 + d + p);
  wvx << wv, loan_vectors, covariates;
  auto joint = detail::count_significant("y_on_w_text_and_covariates", wvx, y, 1, d);
  if (joint.error.empty()) joint.treatment_t = ols_fit(wvx, y).t_stats[1];
  out.push_back(joint);
  return out;
}

}  // namespace kivaci::estimators
