#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "ingest.hpp"
#include "linear.hpp"
#include "neural.hpp"
#include "util.hpp"

namespace kivaci::nuisance {

using Json = nlohmann::json;
using ingest::Dataset;
using ingest::Split;

enum class Kind { linear, mlp, lstm };
enum class Features { without_text, with_text };

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::linear: return "linear";
    case Kind::mlp: return "mlp";
    case Kind::lstm: return "lstm";
  }
  return "linear";
}

inline std::string_view to_string(Features f) { return f == Features::with_text ? "with_text" : "without_text"; }

inline Kind parse_kind(std::string_view s) {
  if (s == "linear") return Kind::linear;
  if (s == "mlp") return Kind::mlp;
  if (s == "lstm") return Kind::lstm;
  throw Error("nuisance", "config_invalid", "nuisance kind " + std::string(s));
}

inline Features parse_features(std::string_view s) {
  if (s == "with_text") return Features::with_text;
  if (s == "without_text") return Features::without_text;
  throw Error("nuisance", "config_invalid", "features " + std::string(s));
}

/// Per-unit outcome and propensity predictions. This is the contract between
/// nuisance fitting and the estimators; it may also come from an external tool.
struct NuisancePredictions {
  std::vector<std::int64_t> unit_id;
  std::vector<int> w;
  Eigen::VectorXd y, mu1, mu0, e;
  std::string outcome_tag, propensity_tag;

  std::size_t size() const noexcept { return w.size(); }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(w.size());
    if (y.size() != n || mu1.size() != n || mu0.size() != n || e.size() != n || unit_id.size() != w.size())
      throw Error("nuisance", "shape_mismatch", "prediction vectors differ in length");
    for (int v : w)
      if (v != 0 && v != 1) throw Error("nuisance", "invalid_treatment");
  }

  std::string to_csv(const std::string& config_hash = {}) const {
    CsvWriter csv({"unit_id", "w", "y", "mu1", "mu0", "e"});
    if (!config_hash.empty()) csv.comment("config_hash=" + config_hash);
    if (!outcome_tag.empty() || !propensity_tag.empty())
      csv.comment("outcome_model=" + outcome_tag + " propensity_model=" + propensity_tag);
    for (std::size_t i = 0; i < size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      csv.row({std::to_string(unit_id[i]), std::to_string(w[i]), format_double(y[k]), format_double(mu1[k]),
               format_double(mu0[k]), format_double(e[k])});
    }
    return csv.str();
  }

  static NuisancePredictions from_csv(std::string_view text) {
    auto table = parse_csv(text, "nuisance");
    const auto c_id = table.column("unit_id", "nuisance"), c_w = table.column("w", "nuisance"),
               c_y = table.column("y", "nuisance"), c_mu1 = table.column("mu1", "nuisance"),
               c_mu0 = table.column("mu0", "nuisance"), c_e = table.column("e", "nuisance");
    NuisancePredictions p;
    const auto n = static_cast<Eigen::Index>(table.rows.size());
    p.y.resize(n);
    p.mu1.resize(n);
    p.mu0.resize(n);
    p.e.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& r = table.rows[static_cast<std::size_t>(i)];
      p.unit_id.push_back(std::stoll(r[c_id]));
      p.w.push_back(static_cast<int>(parse_double(r[c_w], "nuisance")));
      p.y[i] = parse_double(r[c_y], "nuisance");
      p.mu1[i] = parse_double(r[c_mu1], "nuisance");
      p.mu0[i] = parse_double(r[c_mu0], "nuisance");
      p.e[i] = parse_double(r[c_e], "nuisance");
    }
    p.validate();
    return p;
  }
};

/// Text inputs aligned with a Dataset: bag-of-embeddings vectors (n x d) and
/// per-unit token rows into a shared vocabulary (d x V) for sequence models.
struct TextFeatures {
  Eigen::MatrixXd loan_vectors;
  std::vector<std::vector<int>> sequences;
  std::shared_ptr<const Eigen::MatrixXd> vocabulary;

  bool has_vectors() const { return loan_vectors.cols() > 0; }
  bool has_sequences() const { return vocabulary && !sequences.empty(); }
};

struct FitOptions {
  linear::CvOptions outcome_cv{};     // alpha 0.5 elastic net
  linear::CvOptions propensity_cv{};  // alpha 0.5 logistic elastic net
  neural::TrainConfig train{};
  /// Overrides the default hidden sizes when set.
  std::optional<neural::Architecture> outcome_architecture, propensity_architecture;
};

struct NuisanceFit {
  NuisancePredictions predictions;
  Json models;  // {"mu1": ..., "mu0": ..., "e": ...}
  std::map<std::string, std::vector<neural::EpochLog>> logs;
};

namespace detail {

inline Eigen::MatrixXd design(const Dataset& ds, Features features, const TextFeatures* text) {
  if (features == Features::without_text) return ds.x;
  if (!text || !text->has_vectors()) throw Error("nuisance", "missing_text_features");
  if (text->loan_vectors.rows() != ds.x.rows()) throw Error("nuisance", "shape_mismatch", "loan vectors");
  Eigen::MatrixXd x(ds.x.rows(), ds.x.cols() + text->loan_vectors.cols());
  x << ds.x, text->loan_vectors;
  return x;
}

/// Column z-scoring with statistics from `rows`; zero-variance columns are left as is.
struct Standardizer {
  Eigen::VectorXd mean, scale;

  static Standardizer fit(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
    Standardizer s;
    s.mean = Eigen::VectorXd::Zero(x.cols());
    s.scale = Eigen::VectorXd::Ones(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double m = 0.0, v = 0.0;
      for (auto i : rows) m += x(static_cast<Eigen::Index>(i), j);
      m /= static_cast<double>(rows.size());
      for (auto i : rows) v += std::pow(x(static_cast<Eigen::Index>(i), j) - m, 2);
      v /= static_cast<double>(rows.size());
      if (v > 0.0) {
        s.mean[j] = m;
        s.scale[j] = std::sqrt(v);
      }
    }
    return s;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }

  Json to_json() const {
    return {{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
            {"scale", std::vector<double>(scale.data(), scale.data() + scale.size())}};
  }
};

inline std::vector<std::size_t> select(const Dataset& ds, Split split, int arm) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.split[i] == split && (arm < 0 || ds.w[i] == arm)) out.push_back(i);
  return out;
}

inline Eigen::MatrixXd rows_of(const Eigen::MatrixXd& x, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

inline Eigen::VectorXd entries_of(const Eigen::VectorXd& v, const std::vector<std::size_t>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[static_cast<Eigen::Index>(idx[k])];
  return out;
}

inline Eigen::VectorXd treatment_vector(const Dataset& ds) {
  Eigen::VectorXd w(static_cast<Eigen::Index>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) w[static_cast<Eigen::Index>(i)] = ds.w[i];
  return w;
}

inline NuisancePredictions skeleton(const Dataset& ds) {
  NuisancePredictions p;
  p.w = ds.w;
  p.y = ds.y;
  p.unit_id = ds.ids.size() == ds.size() ? ds.ids : std::vector<std::int64_t>{};
  if (p.unit_id.empty())
    for (std::size_t i = 0; i < ds.size(); ++i) p.unit_id.push_back(static_cast<std::int64_t>(i));
  return p;
}

inline NuisanceFit fit_linear(const Dataset& ds, Features features, const TextFeatures* text, const FitOptions& opt) {
  Eigen::MatrixXd raw = design(ds, features, text);
  auto train_all = select(ds, Split::train, -1);
  auto train_t = select(ds, Split::train, 1);
  auto train_c = select(ds, Split::train, 0);
  if (train_t.size() < 2 || train_c.size() < 2) throw Error("nuisance", "empty_arm", "training split");
  auto scaler = Standardizer::fit(raw, train_all);
  Eigen::MatrixXd x = scaler.apply(raw);

  auto mu1 = linear::cv_elastic_net(rows_of(x, train_t), entries_of(ds.y, train_t), opt.outcome_cv).fit;
  auto mu0 = linear::cv_elastic_net(rows_of(x, train_c), entries_of(ds.y, train_c), opt.outcome_cv).fit;
  auto e = linear::cv_logistic_elastic_net(rows_of(x, train_all), entries_of(treatment_vector(ds), train_all),
                                           opt.propensity_cv)
               .fit;

  NuisanceFit fit;
  fit.predictions = skeleton(ds);
  fit.predictions.mu1 = mu1.predict(x);
  fit.predictions.mu0 = mu0.predict(x);
  fit.predictions.e = e.predict(x);
  fit.predictions.outcome_tag = "elastic_net";
  fit.predictions.propensity_tag = "logistic_elastic_net";
  fit.models = {{"kind", "linear"},
                {"features", to_string(features)},
                {"standardization", scaler.to_json()},
                {"mu1", mu1.to_json()},
                {"mu0", mu0.to_json()},
                {"e", e.to_json()}};
  return fit;
}

inline neural::SampleSet samples(const Dataset& ds, Features features, const TextFeatures* text, Kind kind,
                                 const Eigen::VectorXd& targets) {
  neural::SampleSet s;
  s.covariates = ds.x;
  s.targets = targets;
  if (kind == Kind::lstm) {
    if (!text || !text->has_sequences()) throw Error("nuisance", "missing_text_features", "sequences");
    if (text->sequences.size() != ds.size()) throw Error("nuisance", "shape_mismatch", "sequences");
    s.tokens = text->sequences;
    s.vocabulary = text->vocabulary;
  } else if (features == Features::with_text) {
    if (!text || !text->has_vectors()) throw Error("nuisance", "missing_text_features", "loan vectors");
    if (text->loan_vectors.rows() != ds.x.rows()) throw Error("nuisance", "shape_mismatch", "loan vectors");
    s.text = text->loan_vectors;
  } else {
    s.text.resize(ds.x.rows(), 0);
  }
  return s;
}

inline NuisanceFit fit_neural(Kind kind, const Dataset& ds, Features features, const TextFeatures* text,
                              const FitOptions& opt) {
  if (kind == Kind::lstm && features == Features::without_text)
    throw Error("nuisance", "missing_text_features", "lstm requires with_text");
  const int cov_dim = static_cast<int>(ds.x.cols());
  int text_dim = 0;
  if (kind == Kind::lstm) text_dim = (text && text->vocabulary) ? static_cast<int>(text->vocabulary->rows()) : 0;
  else if (features == Features::with_text) text_dim = text ? static_cast<int>(text->loan_vectors.cols()) : 0;

  auto arch_for = [&](neural::Head head) {
    const auto& override_arch = head == neural::Head::outcome ? opt.outcome_architecture : opt.propensity_architecture;
    if (override_arch) return *override_arch;
    return kind == Kind::lstm ? neural::lstm_architecture(head, text_dim, cov_dim)
                              : neural::mlp_architecture(head, text_dim, cov_dim);
  };

  auto outcome_set = samples(ds, features, text, kind, ds.y);
  auto treat_set = samples(ds, features, text, kind, treatment_vector(ds));

  NuisanceFit fit;
  fit.predictions = skeleton(ds);
  fit.models = {{"kind", to_string(kind)}, {"features", to_string(features)}};

  for (int arm : {1, 0}) {
    auto tr = select(ds, Split::train, arm), va = select(ds, Split::validation, arm);
    if (tr.empty() || va.empty()) throw Error("nuisance", "empty_arm", "train/validation split");
    auto cfg = opt.train;
    cfg.seed = opt.train.seed + static_cast<std::uint64_t>(arm + 1);
    auto model = neural::train(arch_for(neural::Head::outcome), outcome_set.subset(tr), outcome_set.subset(va), cfg);
    Eigen::VectorXd pred = neural::predict(model.network, outcome_set).col(0);
    const char* name = arm == 1 ? "mu1" : "mu0";
    (arm == 1 ? fit.predictions.mu1 : fit.predictions.mu0) = pred;
    fit.models[name] = model.network.to_json();
    fit.logs[name] = model.log;
  }
  {
    auto tr = select(ds, Split::train, -1), va = select(ds, Split::validation, -1);
    if (tr.empty() || va.empty()) throw Error("nuisance", "empty_split");
    auto model = neural::train(arch_for(neural::Head::propensity), treat_set.subset(tr), treat_set.subset(va), opt.train);
    Eigen::MatrixXd probs = neural::predict(model.network, treat_set);
    fit.predictions.e = probs.col(1);
    for (auto& v : fit.predictions.e) v = linear::clip_probability(v);
    fit.models["e"] = model.network.to_json();
    fit.logs["e"] = model.log;
  }
  const std::string tag = kind == Kind::lstm ? "lstm" : "mlp";
  fit.predictions.outcome_tag = tag;
  fit.predictions.propensity_tag = tag;
  return fit;
}

}  // namespace detail

/// Fits mu(1, .) on treated training units, mu(0, .) on control training units
/// and e(.) on all training units, then predicts for every unit.
inline NuisanceFit fit_nuisances(Kind kind, const Dataset& ds, Features features, const TextFeatures* text = nullptr,
                                 const FitOptions& opt = {}) {
  if (ds.size() == 0) throw Error("nuisance", "empty_input");
  NuisanceFit fit = kind == Kind::linear ? detail::fit_linear(ds, features, text, opt)
                                         : detail::fit_neural(kind, ds, features, text, opt);
  fit.predictions.validate();
  return fit;
}

struct EvalMetrics {
  double f1 = 0, accuracy = 0;
  double rmse_treated = 0, rmse_control = 0;
  std::size_t n = 0, n_treated = 0, n_control = 0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// 2PR / (P + R), defined as 0 when P + R = 0.
inline double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
}

inline double rmse(const Eigen::VectorXd& pred, const Eigen::VectorXd& target) {
  if (pred.size() != target.size() || pred.size() == 0) throw Error("nuisance", "empty_split");
  return std::sqrt((pred - target).squaredNorm() / static_cast<double>(pred.size()));
}

/// Test-split metrics: propensity classified at 0.5 with treated as the positive
/// class; outcome RMSE separately on treated (mu1) and control (mu0) units.
inline EvalMetrics evaluate(const NuisancePredictions& p, const std::vector<Split>& split, Split which = Split::test) {
  p.validate();
  if (split.size() != p.size()) throw Error("nuisance", "shape_mismatch", "split labels");
  EvalMetrics m;
  double se_t = 0, se_c = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (split[i] != which) continue;
    const auto k = static_cast<Eigen::Index>(i);
    ++m.n;
    const bool pred = p.e[k] >= 0.5;
    const bool actual = p.w[i] == 1;
    if (pred && actual) ++m.tp;
    else if (pred) ++m.fp;
    else if (actual) ++m.fn;
    else ++m.tn;
    if (actual) {
      ++m.n_treated;
      se_t += std::pow(p.mu1[k] - p.y[k], 2);
    } else {
      ++m.n_control;
      se_c += std::pow(p.mu0[k] - p.y[k], 2);
    }
  }
  if (m.n == 0) throw Error("nuisance", "empty_split");
  m.f1 = f1_score(m.tp, m.fp, m.fn);
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.n);
  m.rmse_treated = m.n_treated ? std::sqrt(se_t / static_cast<double>(m.n_treated)) : NAN;
  m.rmse_control = m.n_control ? std::sqrt(se_c / static_cast<double>(m.n_control)) : NAN;
  return m;
}

inline Json to_json(const EvalMetrics& m) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  return {{"f1", m.f1},
          {"accuracy", m.accuracy},
          {"rmse_treated", num(m.rmse_treated)},
          {"rmse_control", num(m.rmse_control)},
          {"n", m.n},
          {"n_treated", m.n_treated},
          {"n_control", m.n_control},
          {"confusion", {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}}}};
}

}  // namespace kivaci::nuisance
