#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "embed.hpp"
#include "error.hpp"
#include "estimators.hpp"
#include "ingest.hpp"
#include "nuisance.hpp"
#include "util.hpp"

namespace kivaci::synthbench {

using Json = nlohmann::json;

enum class Effect { constant, linear_x1, square_x1 };
enum class TextMode { none, planted };

inline std::string_view to_string(Effect e) {
  switch (e) {
    case Effect::constant: return "constant";
    case Effect::linear_x1: return "linear_x1";
    case Effect::square_x1: return "square_x1";
  }
  return "constant";
}

inline Effect parse_effect(std::string_view s) {
  for (auto e : {Effect::constant, Effect::linear_x1, Effect::square_x1})
    if (to_string(e) == s) return e;
  throw Error("synthbench", "config_invalid", "effect " + std::string(s));
}

inline constexpr double kOverlapLo = 0.02;
inline constexpr double kOverlapHi = 0.98;

/// X ~ N(0, I_p), e(x) = sigmoid(gamma0 + x'gamma + gamma_u u),
/// Y(0) = x'beta + nonlinearity sin(2 x1) + beta_u u + N(0, noise_sd^2),
/// Y(1) = Y(0) + tau(x) with tau(x) = tau, tau + x1 or tau + x1^2.
/// In planted text mode u = 2k/m - 1 where k ~ Binomial(m, 1/2) is the count of
/// "pos" tokens among the m toy-vocabulary tokens of the unit, so u equals the
/// first coordinate of the unit's bag-of-embeddings vector.
struct DgpConfig {
  std::size_t n = 1000;
  int p = 5;
  double tau = 2.0;
  Effect effect = Effect::constant;
  std::vector<double> gamma;  // empty means zeros
  double gamma0 = 0.0;
  std::vector<double> beta;  // empty means zeros
  double noise_sd = 1.0;
  double nonlinearity = 1.0;
  TextMode text_mode = TextMode::none;
  int text_tokens = 20;
  double gamma_u = 0.0;
  double beta_u = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& field) { throw Error("synthbench", "config_invalid", field); };
    if (n < 4) fail("n");
    if (p < 1) fail("p");
    if (!gamma.empty() && gamma.size() != static_cast<std::size_t>(p)) fail("gamma");
    if (!beta.empty() && beta.size() != static_cast<std::size_t>(p)) fail("beta");
    if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) fail("noise_sd");
    if (text_mode == TextMode::planted && text_tokens < 1) fail("text_tokens");
  }

  double coef(const std::vector<double>& v, int j) const { return v.empty() ? 0.0 : v[static_cast<std::size_t>(j)]; }

  double effect_at(double x1) const {
    switch (effect) {
      case Effect::constant: return tau;
      case Effect::linear_x1: return tau + x1;
      case Effect::square_x1: return tau + x1 * x1;
    }
    return tau;
  }

  Json to_json() const {
    return {{"n", n},
            {"p", p},
            {"tau", tau},
            {"effect", to_string(effect)},
            {"gamma", gamma},
            {"gamma0", gamma0},
            {"beta", beta},
            {"noise_sd", noise_sd},
            {"nonlinearity", nonlinearity},
            {"text_mode", text_mode == TextMode::planted ? "planted" : "none"},
            {"text_tokens", text_tokens},
            {"gamma_u", gamma_u},
            {"beta_u", beta_u},
            {"seed", seed}};
  }

  static DgpConfig from_json(const Json& j) {
    DgpConfig c;
    try {
      c.n = j.value("n", c.n);
      c.p = j.value("p", c.p);
      c.tau = j.value("tau", c.tau);
      if (j.contains("effect")) c.effect = parse_effect(j.at("effect").get<std::string>());
      c.gamma = j.value("gamma", c.gamma);
      c.gamma0 = j.value("gamma0", c.gamma0);
      c.beta = j.value("beta", c.beta);
      c.noise_sd = j.value("noise_sd", c.noise_sd);
      c.nonlinearity = j.value("nonlinearity", c.nonlinearity);
      if (j.contains("text_mode")) {
        auto m = j.at("text_mode").get<std::string>();
        if (m == "planted") c.text_mode = TextMode::planted;
        else if (m == "none") c.text_mode = TextMode::none;
        else throw Error("synthbench", "config_invalid", "text_mode " + m);
      }
      c.text_tokens = j.value("text_tokens", c.text_tokens);
      c.gamma_u = j.value("gamma_u", c.gamma_u);
      c.beta_u = j.value("beta_u", c.beta_u);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw Error("synthbench", "config_invalid", e.what());
    }
    c.validate();
    return c;
  }
};

struct SynthData {
  Eigen::MatrixXd x;
  std::vector<int> w;
  Eigen::VectorXd y, y1, y0;
  Eigen::VectorXd propensity;  // true e(x)
  Eigen::VectorXd mu1, mu0;    // true conditional means
  Eigen::VectorXd latent;      // u, zeros without text
  std::vector<std::vector<std::string>> tokens;

  std::size_t size() const noexcept { return w.size(); }
  double sample_ate() const { return (y1 - y0).mean(); }
};

inline std::string toy_token(bool pos, int local) {
  std::string s = pos ? "pos" : "neg";
  if (local < 100) s += '0';
  if (local < 10) s += '0';
  return s + std::to_string(local);
}

inline SynthData generate(const DgpConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(cfg.n);
  SynthData d;
  d.x.resize(n, cfg.p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < cfg.p; ++j) d.x(i, j) = normal(rng);

  d.latent = Eigen::VectorXd::Zero(n);
  if (cfg.text_mode == TextMode::planted) {
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<int> pick(0, embed::kToyVocabSize / 2 - 1);
    d.tokens.resize(cfg.n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& toks = d.tokens[static_cast<std::size_t>(i)];
      int k = 0;
      for (int t = 0; t < cfg.text_tokens; ++t) {
        const bool pos = coin(rng);
        k += pos;
        toks.push_back(toy_token(pos, pick(rng)));
      }
      d.latent[i] = 2.0 * k / cfg.text_tokens - 1.0;
    }
  }

  d.w.resize(cfg.n);
  d.y.resize(n);
  d.y1.resize(n);
  d.y0.resize(n);
  d.propensity.resize(n);
  d.mu1.resize(n);
  d.mu0.resize(n);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double lin_w = cfg.gamma0 + cfg.gamma_u * d.latent[i];
    double lin_y = cfg.beta_u * d.latent[i] + cfg.nonlinearity * std::sin(2.0 * d.x(i, 0));
    for (int j = 0; j < cfg.p; ++j) {
      lin_w += cfg.coef(cfg.gamma, j) * d.x(i, j);
      lin_y += cfg.coef(cfg.beta, j) * d.x(i, j);
    }
    const double e = linear::sigmoid(lin_w);
    if (!(e > kOverlapLo && e < kOverlapHi))
      throw Error("synthbench", "overlap_violation", "unit " + std::to_string(i) + " e=" + format_double(e));
    d.propensity[i] = e;
    d.mu0[i] = lin_y;
    d.mu1[i] = lin_y + cfg.effect_at(d.x(i, 0));
    const double noise = cfg.noise_sd * normal(rng);
    d.y0[i] = d.mu0[i] + noise;
    d.y1[i] = d.mu1[i] + noise;
    d.w[static_cast<std::size_t>(i)] = unif(rng) < e ? 1 : 0;
    d.y[i] = d.w[static_cast<std::size_t>(i)] ? d.y1[i] : d.y0[i];
  }
  return d;
}

struct TrueAte {
  double value = 0.0;
  double mc_se = 0.0;  // zero when analytic
};

inline constexpr std::size_t kTruthDraws = 1000000;

inline TrueAte true_ate(const DgpConfig& cfg, std::size_t draws = kTruthDraws) {
  cfg.validate();
  if (cfg.effect == Effect::constant) return {cfg.tau, 0.0};
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t k = 1; k <= draws; ++k) {
    const double v = cfg.effect_at(normal(rng));
    const double delta = v - mean;
    mean += delta / static_cast<double>(k);
    m2 += delta * (v - mean);
  }
  const double var = m2 / static_cast<double>(draws - 1);
  return {mean, std::sqrt(var / static_cast<double>(draws))};
}

/// Wraps synthetic data as a pipeline Dataset. With `fractions` unset every
/// unit is a training unit.
inline ingest::Dataset to_dataset(const SynthData& d, std::optional<ingest::SplitFractions> fractions,
                                  std::uint64_t seed) {
  ingest::Dataset ds;
  ds.x = d.x;
  ds.y = d.y;
  ds.w = d.w;
  ds.tokens = d.tokens;
  for (Eigen::Index j = 0; j < d.x.cols(); ++j) ds.covariate_names.push_back("x" + std::to_string(j + 1));
  for (std::size_t i = 0; i < d.size(); ++i) ds.ids.push_back(static_cast<std::int64_t>(i));
  ds.split = fractions ? ingest::assign_splits(d.size(), *fractions, seed)
                       : std::vector<ingest::Split>(d.size(), ingest::Split::train);
  ds.split_seed = seed;
  return ds;
}

inline nuisance::TextFeatures toy_text_features(const SynthData& d) {
  static const embed::EmbeddingTable table = embed::toy_embedding_table();
  nuisance::TextFeatures tf;
  tf.loan_vectors.resize(static_cast<Eigen::Index>(d.size()), embed::kToyDim);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& toks = d.tokens.empty() ? std::vector<std::string>{} : d.tokens[i];
    tf.loan_vectors.row(static_cast<Eigen::Index>(i)) = embed::loan_vector(toks, table).values.transpose();
    tf.sequences.push_back(embed::matched_rows(toks, table, embed::kDefaultMaxLen));
  }
  tf.vocabulary = std::make_shared<const Eigen::MatrixXd>(table.matrix());
  return tf;
}

enum class NuisanceSource { oracle, linear, mlp, lstm };

inline NuisanceSource parse_nuisance_source(std::string_view s) {
  if (s == "oracle") return NuisanceSource::oracle;
  if (s == "linear") return NuisanceSource::linear;
  if (s == "mlp") return NuisanceSource::mlp;
  if (s == "lstm") return NuisanceSource::lstm;
  throw Error("synthbench", "config_invalid", "nuisance " + std::string(s));
}

inline std::string_view to_string(NuisanceSource s) {
  switch (s) {
    case NuisanceSource::oracle: return "oracle";
    case NuisanceSource::linear: return "linear";
    case NuisanceSource::mlp: return "mlp";
    case NuisanceSource::lstm: return "lstm";
  }
  return "oracle";
}

struct EstimatorSpec {
  std::vector<estimators::Method> methods{estimators::Method::naive, estimators::Method::baseline,
                                          estimators::Method::dse, estimators::Method::dre,
                                          estimators::Method::tmle};
  NuisanceSource nuisance = NuisanceSource::linear;
  nuisance::Features features = nuisance::Features::without_text;
  estimators::Trim trim{};
  nuisance::FitOptions fit{};
  estimators::DseOptions dse{};

  Json to_json() const {
    Json m = Json::array();
    for (auto v : methods) m.push_back(estimators::to_string(v));
    return {{"methods", m},
            {"nuisance", to_string(nuisance)},
            {"features", nuisance::to_string(features)},
            {"trim", {trim.lo, trim.hi}}};
  }
};

/// The nuisance predictions used by the prediction-based estimators for one
/// synthetic dataset.
inline nuisance::NuisancePredictions bench_predictions(const SynthData& d, const EstimatorSpec& spec,
                                                       std::uint64_t seed) {
  if (spec.nuisance == NuisanceSource::oracle) {
    nuisance::NuisancePredictions p;
    p.w = d.w;
    p.y = d.y;
    p.mu1 = d.mu1;
    p.mu0 = d.mu0;
    p.e = d.propensity;
    for (std::size_t i = 0; i < d.size(); ++i) p.unit_id.push_back(static_cast<std::int64_t>(i));
    p.outcome_tag = p.propensity_tag = "oracle";
    return p;
  }
  const bool neural = spec.nuisance != NuisanceSource::linear;
  auto ds = to_dataset(d, neural ? std::optional<ingest::SplitFractions>(ingest::SplitFractions{})
                                 : std::nullopt,
                       seed);
  std::optional<nuisance::TextFeatures> text;
  if (spec.features == nuisance::Features::with_text || spec.nuisance == NuisanceSource::lstm)
    text = toy_text_features(d);
  const auto kind = spec.nuisance == NuisanceSource::linear ? nuisance::Kind::linear
                    : spec.nuisance == NuisanceSource::mlp  ? nuisance::Kind::mlp
                                                            : nuisance::Kind::lstm;
  auto opt = spec.fit;
  opt.train.seed = seed;
  return nuisance::fit_nuisances(kind, ds, spec.features, text ? &*text : nullptr, opt).predictions;
}

inline estimators::AteEstimate run_method(estimators::Method m, const SynthData& d,
                                          const nuisance::NuisancePredictions* preds, const EstimatorSpec& spec) {
  using estimators::Method;
  switch (m) {
    case Method::naive: return estimators::naive_ate(d.y, d.w);
    case Method::baseline: return estimators::baseline_ate(*preds);
    case Method::dre: return estimators::dre_ate(*preds, spec.trim);
    case Method::tmle: return estimators::tmle_ate(*preds, spec.trim);
    case Method::dse: {
      Eigen::MatrixXd x = d.x;
      if (spec.features == nuisance::Features::with_text) {
        auto tf = toy_text_features(d);
        x.resize(d.x.rows(), d.x.cols() + tf.loan_vectors.cols());
        x << d.x, tf.loan_vectors;
      }
      return estimators::dse_ate(x, d.y, d.w, spec.dse).estimate;
    }
  }
  throw Error("synthbench", "config_invalid", "method");
}

struct Replication {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  estimators::Method method = estimators::Method::naive;
  double truth = 0.0;
  std::optional<estimators::AteEstimate> estimate;
  std::string error;  // "module: code" when the pipeline failed

  bool ok() const { return estimate.has_value(); }
  bool covered() const { return ok() && estimate->covers(truth); }
};

struct Aggregate {
  std::size_t n_ok = 0, n_failed = 0;
  double mean_tau_hat = NAN, bias = NAN, rmse = NAN, coverage = NAN, mean_se = NAN, empirical_sd = NAN;
  double bias_mc_se = NAN;  // empirical_sd / sqrt(n_ok)
};

struct BenchResult {
  double truth = 0.0;
  double truth_mc_se = 0.0;
  std::vector<Replication> replications;
  std::map<estimators::Method, Aggregate> aggregates;

  std::string to_csv(const std::string& config_hash = {}) const {
    CsvWriter csv({"replication", "seed", "method", "tau_true", "tau_hat", "se", "ci_lo", "ci_hi", "covered",
                   "n_used", "error"});
    if (!config_hash.empty()) csv.comment("config_hash=" + config_hash);
    for (const auto& r : replications) {
      std::vector<std::string> row{std::to_string(r.index), std::to_string(r.seed),
                                   std::string(estimators::to_string(r.method)), format_double(r.truth)};
      if (r.ok()) {
        const auto& e = *r.estimate;
        for (double v : {e.tau_hat, e.se, e.ci95.first, e.ci95.second}) row.push_back(format_double(v));
        row.push_back(r.covered() ? "1" : "0");
        row.push_back(std::to_string(e.n_used));
        row.push_back("");
      } else {
        for (int k = 0; k < 6; ++k) row.push_back("");
        row.push_back(r.error);
      }
      csv.row(row);
    }
    return csv.str();
  }

  Json summary() const {
    auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
    Json out = {{"tau_true", truth}, {"tau_true_mc_se", truth_mc_se}, {"methods", Json::object()}};
    for (const auto& [m, a] : aggregates)
      out["methods"][std::string(estimators::to_string(m))] = {
          {"n_ok", a.n_ok},         {"n_failed", a.n_failed},    {"mean_tau_hat", num(a.mean_tau_hat)},
          {"bias", num(a.bias)},    {"rmse", num(a.rmse)},       {"coverage", num(a.coverage)},
          {"mean_se", num(a.mean_se)}, {"empirical_sd", num(a.empirical_sd)}, {"bias_mc_se", num(a.bias_mc_se)}};
    return out;
  }
};

inline Aggregate aggregate(const std::vector<const Replication*>& reps) {
  Aggregate a;
  std::vector<double> est, se;
  std::size_t covered = 0;
  double truth = 0.0;
  for (const auto* r : reps) {
    if (!r->ok()) {
      ++a.n_failed;
      continue;
    }
    ++a.n_ok;
    est.push_back(r->estimate->tau_hat);
    se.push_back(r->estimate->se);
    covered += r->covered();
    truth = r->truth;
  }
  if (est.empty()) return a;
  const double k = static_cast<double>(est.size());
  double mean = 0.0, mse = 0.0, mse_se = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    mean += est[i];
    mse += (est[i] - truth) * (est[i] - truth);
    mse_se += se[i];
  }
  mean /= k;
  a.mean_tau_hat = mean;
  a.bias = mean - truth;
  a.rmse = std::sqrt(mse / k);
  a.coverage = static_cast<double>(covered) / k;
  a.mean_se = mse_se / k;
  if (est.size() > 1) {
    double ss = 0.0;
    for (double v : est) ss += (v - mean) * (v - mean);
    a.empirical_sd = std::sqrt(ss / (k - 1.0));
    a.bias_mc_se = a.empirical_sd / std::sqrt(k);
  } else {
    a.empirical_sd = 0.0;
    a.bias_mc_se = 0.0;
  }
  return a;
}

/// Replication r uses seed config.seed + r. Pipeline failures are recorded on
/// the replication and excluded from the aggregates.
inline BenchResult run_bench(const DgpConfig& config, const EstimatorSpec& spec, std::size_t replications) {
  if (replications < 1) throw Error("synthbench", "config_invalid", "replications");
  config.validate();
  BenchResult res;
  auto truth = true_ate(config);
  res.truth = truth.value;
  res.truth_mc_se = truth.mc_se;
  for (std::size_t r = 0; r < replications; ++r) {
    DgpConfig c = config;
    c.seed = config.seed + r;
    std::optional<SynthData> data;
    std::optional<nuisance::NuisancePredictions> preds;
    std::string data_error, pred_error;
    try {
      data = generate(c);
    } catch (const Error& e) {
      data_error = e.module() + ": " + e.code();
    }
    for (auto m : spec.methods) {
      Replication rep;
      rep.index = r;
      rep.seed = c.seed;
      rep.method = m;
      rep.truth = res.truth;
      if (!data) {
        rep.error = data_error;
      } else {
        try {
          const bool needs_preds = m == estimators::Method::baseline || m == estimators::Method::dre ||
                                   m == estimators::Method::tmle;
          if (needs_preds && !preds && pred_error.empty()) {
            try {
              preds = bench_predictions(*data, spec, c.seed);
            } catch (const Error& e) {
              pred_error = e.module() + ": " + e.code();
            }
          }
          if (needs_preds && !preds) rep.error = pred_error;
          else rep.estimate = run_method(m, *data, preds ? &*preds : nullptr, spec);
        } catch (const Error& e) {
          rep.error = e.module() + ": " + e.code();
        }
      }
      res.replications.push_back(std::move(rep));
    }
  }
  for (auto m : spec.methods) {
    std::vector<const Replication*> mine;
    for (const auto& r : res.replications)
      if (r.method == m) mine.push_back(&r);
    res.aggregates[m] = aggregate(mine);
  }
  return res;
}

}  // namespace kivaci::synthbench
