#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "error.hpp"

namespace kivaci::linear {

enum class Link { identity, logistic };

inline constexpr double kProbabilityClip = 1e-12;

inline double sigmoid(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double clip_probability(double p) { return std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip); }

/// S(z, g) = sign(z) * max(|z| - g, 0)
inline double soft_threshold(double z, double g) {
  if (z > g) return z - g;
  if (z < -g) return z + g;
  return 0.0;
}

struct LinearFit {
  Eigen::VectorXd coefficients;
  double intercept = 0.0;
  double lambda = 0.0;
  double alpha = 1.0;
  Link link = Link::identity;
  bool converged = true;
  int iterations = 0;

  Eigen::VectorXd linear_predictor(const Eigen::MatrixXd& x) const {
    return (x * coefficients).array() + intercept;
  }

  /// Identity link returns the fitted mean; logistic link returns probabilities
  /// clipped to [1e-12, 1 - 1e-12].
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const {
    Eigen::VectorXd eta = linear_predictor(x);
    if (link == Link::logistic)
      for (auto& v : eta) v = clip_probability(sigmoid(v));
    return eta;
  }

  std::vector<int> support() const {
    std::vector<int> s;
    for (Eigen::Index j = 0; j < coefficients.size(); ++j)
      if (coefficients[j] != 0.0) s.push_back(static_cast<int>(j));
    return s;
  }

  nlohmann::json to_json() const {
    return {{"kind", "linear"},
            {"link", link == Link::identity ? "identity" : "logistic"},
            {"lambda", lambda},
            {"alpha", alpha},
            {"intercept", intercept},
            {"coefficients", std::vector<double>(coefficients.data(), coefficients.data() + coefficients.size())},
            {"converged", converged},
            {"iterations", iterations}};
  }

  static LinearFit from_json(const nlohmann::json& j) {
    LinearFit f;
    f.link = j.at("link").get<std::string>() == "logistic" ? Link::logistic : Link::identity;
    f.lambda = j.at("lambda").get<double>();
    f.alpha = j.at("alpha").get<double>();
    f.intercept = j.at("intercept").get<double>();
    auto c = j.at("coefficients").get<std::vector<double>>();
    f.coefficients = Eigen::Map<Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
    f.converged = j.value("converged", true);
    f.iterations = j.value("iterations", 0);
    return f;
  }
};

struct SolverOptions {
  double tol = 1e-7;  // max absolute coefficient change between sweeps
  int max_iters = 100000;
  /// When set, receives the penalized objective after every sweep (gaussian only).
  std::vector<double>* objective_trace = nullptr;
};

namespace detail {

inline void check_finite(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (!x.allFinite() || !y.allFinite()) throw Error("nuisance", "non_finite_input");
  if (x.rows() != y.size()) throw Error("nuisance", "shape_mismatch");
}

inline void check_penalty(double lambda, double alpha) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("nuisance", "invalid_lambda");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("nuisance", "invalid_alpha");
}

/// Weighted centered sufficient statistics of a least-squares problem.
struct Quadratic {
  Eigen::MatrixXd gram;  // Xc' V Xc / n
  Eigen::VectorXd cross;  // Xc' V (y - ybar) / n
  Eigen::VectorXd xbar;
  double ybar = 0.0;
  double yy = 0.0;  // (y - ybar)' V (y - ybar) / n
};

inline Quadratic make_quadratic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd* weights) {
  const double n = static_cast<double>(x.rows());
  Quadratic q;
  Eigen::VectorXd v = weights ? *weights : Eigen::VectorXd::Ones(x.rows());
  const double vsum = v.sum();
  q.xbar = (x.transpose() * v) / vsum;
  q.ybar = v.dot(y) / vsum;
  Eigen::MatrixXd xc = x.rowwise() - q.xbar.transpose();
  Eigen::VectorXd yc = y.array() - q.ybar;
  Eigen::MatrixXd vx = xc.array().colwise() * v.array();
  q.gram = (vx.transpose() * xc) / n;
  q.cross = (vx.transpose() * yc) / n;
  q.yy = (yc.array().square() * v.array()).sum() / n;
  return q;
}

inline double penalty(const Eigen::VectorXd& beta, double lambda, double alpha) {
  return lambda * (alpha * beta.lpNorm<1>() + 0.5 * (1.0 - alpha) * beta.squaredNorm());
}

/// Cyclic coordinate descent on 0.5 * (yy - 2 c'b + b'Gb) + penalty. `beta` is a
/// warm start and receives the solution. Returns {sweeps, converged}.
inline std::pair<int, bool> coordinate_descent(const Quadratic& q, double lambda, double alpha, Eigen::VectorXd& beta,
                                               const SolverOptions& opts) {
  const Eigen::Index p = q.gram.rows();
  if (beta.size() != p) beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd gb = q.gram * beta;
  const double l1 = lambda * alpha;
  const double l2 = lambda * (1.0 - alpha);
  for (int sweep = 1; sweep <= opts.max_iters; ++sweep) {
    double max_delta = 0.0;
    for (Eigen::Index j = 0; j < p; ++j) {
      const double gjj = q.gram(j, j);
      const double denom = gjj + l2;
      double updated = 0.0;
      if (denom > 0.0) {
        const double z = q.cross[j] - gb[j] + gjj * beta[j];
        updated = soft_threshold(z, l1) / denom;
      }
      const double delta = updated - beta[j];
      if (delta != 0.0) {
        gb += q.gram.col(j) * delta;
        beta[j] = updated;
        max_delta = std::max(max_delta, std::abs(delta));
      }
    }
    if (opts.objective_trace)
      opts.objective_trace->push_back(0.5 * (q.yy - 2.0 * q.cross.dot(beta) + beta.dot(gb)) +
                                      penalty(beta, lambda, alpha));
    if (max_delta < opts.tol) return {sweep, true};
  }
  return {opts.max_iters, false};
}

inline double logistic_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& w, double b0,
                                 const Eigen::VectorXd& beta, double lambda, double alpha) {
  Eigen::VectorXd eta = (x * beta).array() + b0;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double e = eta[i];
    // log(1 + exp(e)) computed stably
    const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    nll += softplus - w[i] * e;
  }
  return nll / static_cast<double>(eta.size()) + penalty(beta, lambda, alpha);
}

/// Relative slack on the all-zero test, absorbing rounding in max|X'y|/n.
inline constexpr double kNullSlack = 1e-12;

inline LinearFit fit_quadratic(const Quadratic& q, double lambda, double alpha, const SolverOptions& opts,
                               const Eigen::VectorXd* warm) {
  LinearFit fit;
  fit.lambda = lambda;
  fit.alpha = alpha;
  fit.link = Link::identity;
  fit.coefficients = warm ? *warm : Eigen::VectorXd::Zero(q.gram.rows());
  const double null_gap = q.cross.size() ? q.cross.cwiseAbs().maxCoeff() : 0.0;
  if (alpha > 0.0 && null_gap <= lambda * alpha * (1.0 + kNullSlack)) {
    fit.coefficients.setZero();
    fit.iterations = 0;
    fit.converged = true;
  } else {
    auto [iters, ok] = coordinate_descent(q, lambda, alpha, fit.coefficients, opts);
    fit.iterations = iters;
    fit.converged = ok;
  }
  fit.intercept = q.ybar - q.xbar.dot(fit.coefficients);
  return fit;
}

}  // namespace detail

/// Penalized least squares
///   (1/2n) sum (y_i - b0 - x_i'b)^2 + lambda * (alpha |b|_1 + (1 - alpha)/2 |b|_2^2)
/// with an unpenalized intercept. `warm` seeds the coefficients.
inline LinearFit fit_elastic_net(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, double alpha,
                                 const SolverOptions& opts = {}, const Eigen::VectorXd* warm = nullptr) {
  detail::check_finite(x, y);
  detail::check_penalty(lambda, alpha);
  if (x.rows() < 2) throw Error("nuisance", "too_few_rows");
  return detail::fit_quadratic(detail::make_quadratic(x, y, nullptr), lambda, alpha, opts, warm);
}

/// Penalized logistic regression, minimizing
///   -(1/n) loglik + lambda * (alpha |b|_1 + (1 - alpha)/2 |b|_2^2)
/// by iteratively reweighted coordinate descent with step halving.
inline LinearFit fit_logistic_elastic_net(const Eigen::MatrixXd& x, const Eigen::VectorXd& w, double lambda,
                                          double alpha, const SolverOptions& opts = {},
                                          const LinearFit* warm = nullptr) {
  detail::check_finite(x, w);
  detail::check_penalty(lambda, alpha);
  const double prevalence = w.mean();
  for (auto v : w)
    if (v != 0.0 && v != 1.0) throw Error("nuisance", "invalid_target", "treatment must be 0/1");
  if (prevalence <= 0.0 || prevalence >= 1.0) throw Error("nuisance", "single_class");

  LinearFit fit;
  fit.lambda = lambda;
  fit.alpha = alpha;
  fit.link = Link::logistic;
  if (warm && warm->coefficients.size() == x.cols()) {
    fit.coefficients = warm->coefficients;
    fit.intercept = warm->intercept;
  } else {
    fit.coefficients = Eigen::VectorXd::Zero(x.cols());
    fit.intercept = std::log(prevalence / (1.0 - prevalence));
  }

  double obj = detail::logistic_objective(x, w, fit.intercept, fit.coefficients, lambda, alpha);
  SolverOptions inner = opts;
  inner.objective_trace = nullptr;
  constexpr int kMaxOuter = 200;
  fit.converged = false;
  for (int outer = 1; outer <= kMaxOuter; ++outer) {
    Eigen::VectorXd eta = fit.linear_predictor(x);
    Eigen::VectorXd v(eta.size()), z(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double p = sigmoid(eta[i]);
      v[i] = std::max(p * (1.0 - p), 1e-5);
      z[i] = eta[i] + (w[i] - p) / v[i];
    }
    auto q = detail::make_quadratic(x, z, &v);
    Eigen::VectorXd beta = fit.coefficients;
    detail::coordinate_descent(q, lambda, alpha, beta, inner);
    double b0 = q.ybar - q.xbar.dot(beta);

    // Step halving keeps the penalized likelihood monotone.
    double t = 1.0;
    double new_obj = detail::logistic_objective(x, w, b0, beta, lambda, alpha);
    const Eigen::VectorXd old_beta = fit.coefficients;
    const double old_b0 = fit.intercept;
    for (int half = 0; half < 30 && new_obj > obj + 1e-12; ++half) {
      t *= 0.5;
      beta = old_beta + t * (beta - old_beta);
      b0 = old_b0 + t * (b0 - old_b0);
      new_obj = detail::logistic_objective(x, w, b0, beta, lambda, alpha);
    }
    const double change = std::max((beta - old_beta).lpNorm<Eigen::Infinity>(), std::abs(b0 - old_b0));
    fit.coefficients = beta;
    fit.intercept = b0;
    fit.iterations = outer;
    obj = std::min(obj, new_obj);
    if (change < opts.tol) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

/// Smallest lambda giving an all-zero solution (alpha floored at 1e-3 for ridge).
inline double lambda_max(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double alpha) {
  if (x.cols() == 0) return 0.0;
  Eigen::VectorXd xbar = x.colwise().mean();
  Eigen::VectorXd yc = y.array() - y.mean();
  Eigen::VectorXd c = ((x.rowwise() - xbar.transpose()).transpose() * yc) / static_cast<double>(x.rows());
  return c.lpNorm<Eigen::Infinity>() / std::max(alpha, 1e-3);
}

struct CvOptions {
  double alpha = 0.5;
  int folds = 5;
  int n_lambda = 50;
  double lambda_min_ratio = 1e-4;
  std::uint64_t seed = 1;
  SolverOptions solver{};
};

struct CvResult {
  LinearFit fit;
  std::vector<double> lambdas;
  std::vector<double> cv_error;
  std::size_t best = 0;
};

/// Log-spaced grid from lambda_max down to lambda_max * min_ratio.
inline std::vector<double> lambda_grid(double lmax, int n_lambda, double min_ratio) {
  std::vector<double> grid;
  if (lmax <= 0.0) return {0.0};
  for (int k = 0; k < n_lambda; ++k) {
    double frac = n_lambda == 1 ? 0.0 : static_cast<double>(k) / (n_lambda - 1);
    grid.push_back(lmax * std::pow(min_ratio, frac));
  }
  return grid;
}

namespace detail {

inline std::vector<int> fold_ids(Eigen::Index n, int folds, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < order.size(); ++k) ids[static_cast<std::size_t>(order[k])] = static_cast<int>(k % folds);
  return ids;
}

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(rows[k]);
  return out;
}

inline Eigen::VectorXd take(const Eigen::VectorXd& y, const std::vector<Eigen::Index>& rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) out[static_cast<Eigen::Index>(k)] = y[rows[k]];
  return out;
}

template <typename FitPath, typename Loss>
CvResult cross_validate(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const CvOptions& cv,
                        const std::vector<double>& grid, FitPath fit_path, Loss loss) {
  if (cv.folds < 2) throw Error("nuisance", "invalid_folds");
  auto ids = fold_ids(x.rows(), cv.folds, cv.seed);
  std::vector<double> err(grid.size(), 0.0);
  for (int f = 0; f < cv.folds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (Eigen::Index i = 0; i < x.rows(); ++i) (ids[static_cast<std::size_t>(i)] == f ? te : tr).push_back(i);
    if (te.empty() || tr.size() < 2) continue;
    auto xtr = take_rows(x, tr), xte = take_rows(x, te);
    auto ytr = take(y, tr), yte = take(y, te);
    auto fits = fit_path(xtr, ytr, grid.size());
    for (std::size_t k = 0; k < fits.size(); ++k) err[k] += loss(fits[k], xte, yte) * static_cast<double>(te.size());
    for (std::size_t k = fits.size(); k < grid.size(); ++k) err[k] = std::numeric_limits<double>::infinity();
  }
  for (auto& e : err) e /= static_cast<double>(x.rows());
  CvResult res;
  res.lambdas = grid;
  res.cv_error = err;
  res.best = static_cast<std::size_t>(std::min_element(err.begin(), err.end()) - err.begin());
  auto full = fit_path(x, y, res.best + 1);
  if (full.empty()) throw Error("nuisance", "cv_failed");
  res.fit = full.back();
  return res;
}

}  // namespace detail

/// Elastic net with lambda chosen by K-fold cross-validated mean squared error.
/// The response is divided by its standard deviation before fitting, so the
/// grid and the reported lambdas refer to the unit-variance response while the
/// returned coefficients, intercept and CV errors are on the original scale.
inline CvResult cv_elastic_net(const Eigen::MatrixXd& x, const Eigen::VectorXd& y_raw, const CvOptions& cv = {}) {
  detail::check_finite(x, y_raw);
  double scale = std::sqrt((y_raw.array() - y_raw.mean()).square().mean());
  if (!(scale > 0.0)) scale = 1.0;
  const Eigen::VectorXd y = y_raw / scale;
  auto grid = lambda_grid(lambda_max(x, y, cv.alpha), cv.n_lambda, cv.lambda_min_ratio);
  auto path = [&](const Eigen::MatrixXd& xs, const Eigen::VectorXd& ys, std::size_t count) {
    std::vector<LinearFit> fits;
    Eigen::VectorXd warm = Eigen::VectorXd::Zero(xs.cols());
    const auto q = detail::make_quadratic(xs, ys, nullptr);
    for (std::size_t k = 0; k < count; ++k) {
      fits.push_back(detail::fit_quadratic(q, grid[k], cv.alpha, cv.solver, &warm));
      warm = fits.back().coefficients;
    }
    return fits;
  };
  auto mse = [](const LinearFit& f, const Eigen::MatrixXd& xs, const Eigen::VectorXd& ys) {
    return (f.predict(xs) - ys).squaredNorm() / static_cast<double>(ys.size());
  };
  auto res = detail::cross_validate(x, y, cv, grid, path, mse);
  res.fit.coefficients *= scale;
  res.fit.intercept *= scale;
  for (auto& e : res.cv_error) e *= scale * scale;
  return res;
}

/// Logistic elastic net with lambda chosen by K-fold cross-validated deviance.
inline CvResult cv_logistic_elastic_net(const Eigen::MatrixXd& x, const Eigen::VectorXd& w, const CvOptions& cv = {}) {
  detail::check_finite(x, w);
  auto grid = lambda_grid(lambda_max(x, w, cv.alpha), cv.n_lambda, cv.lambda_min_ratio);
  auto path = [&](const Eigen::MatrixXd& xs, const Eigen::VectorXd& ws, std::size_t count) {
    std::vector<LinearFit> fits;
    const double prev = ws.mean();
    if (prev <= 0.0 || prev >= 1.0) return fits;  // fold without both classes contributes nothing
    for (std::size_t k = 0; k < count; ++k) {
      const LinearFit* warm = fits.empty() ? nullptr : &fits.back();
      fits.push_back(fit_logistic_elastic_net(xs, ws, grid[k], cv.alpha, cv.solver, warm));
    }
    return fits;
  };
  auto deviance = [](const LinearFit& f, const Eigen::MatrixXd& xs, const Eigen::VectorXd& ws) {
    Eigen::VectorXd p = f.predict(xs);
    double d = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) d -= 2.0 * (ws[i] * std::log(p[i]) + (1.0 - ws[i]) * std::log(1.0 - p[i]));
    return d / static_cast<double>(p.size());
  };
  return detail::cross_validate(x, w, cv, grid, path, deviance);
}

}  // namespace kivaci::linear
