#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "embed.hpp"
#include "error.hpp"
#include "estimators.hpp"
#include "ingest.hpp"
#include "linear.hpp"
#include "neural.hpp"
#include "nuisance.hpp"
#include "synthbench.hpp"
#include "util.hpp"
#include "workspace.hpp"

namespace kivaci::cli {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  for (auto part : split_view(s, ',')) {
    auto b = part.find_first_not_of(' ');
    auto e = part.find_last_not_of(' ');
    if (b == std::string_view::npos) continue;
    out.emplace_back(part.substr(b, e - b + 1));
  }
  return out;
}

inline estimators::Trim parse_trim(std::string_view s) {
  auto parts = split_list(s);
  if (parts.size() != 2) throw Error("cli", "config_invalid", "trim");
  return {parse_double(parts[0], "cli"), parse_double(parts[1], "cli")};
}

/// Effective configuration of one CLI invocation. Every field has a default;
/// a JSON config file overrides defaults and command-line flags override both.
struct RunConfig {
  std::string workspace = "workspace";
  std::string input;
  std::string embeddings = "toy";  // pretrained-vector file, or "toy" for the built-in vocabulary
  int embedding_dim = embed::kDefaultDim;
  int max_len = embed::kDefaultMaxLen;
  ingest::SplitFractions split{};
  std::uint64_t split_seed = 1;
  nuisance::Features features = nuisance::Features::without_text;
  nuisance::Kind nuisance = nuisance::Kind::linear;
  std::vector<estimators::Method> methods{estimators::Method::naive, estimators::Method::baseline,
                                          estimators::Method::dse, estimators::Method::dre,
                                          estimators::Method::tmle};
  estimators::Trim trim{};
  neural::TrainConfig training{};
  linear::CvOptions cv{};
  std::string predictions;  // external NuisancePredictions CSV for `estimate`
  synthbench::DgpConfig dgp{};
  std::size_t replications = 100;
  synthbench::NuisanceSource bench_nuisance = synthbench::NuisanceSource::linear;

  void validate() const {
    auto fail = [](const std::string& f) { throw Error("cli", "config_invalid", f); };
    if (!(trim.lo > 0.0 && trim.hi < 1.0 && trim.lo < trim.hi)) fail("trim");
    if (!(split.train > 0 && split.validation > 0 && split.test > 0) ||
        std::abs(split.train + split.validation + split.test - 1.0) > 1e-9)
      fail("split");
    if (embedding_dim < 1) fail("embedding_dim");
    if (max_len < 1) fail("max_len");
    if (methods.empty()) fail("methods");
    if (replications < 1) fail("replications");
    if (cv.folds < 2) fail("cv.folds");
    if (cv.n_lambda < 1) fail("cv.n_lambda");
    if (!(cv.alpha >= 0.0 && cv.alpha <= 1.0)) fail("cv.alpha");
    try {
      training.validate();
      dgp.validate();
    } catch (const Error& e) {
      fail(e.detail().empty() ? e.code() : e.detail());
    }
  }

  Json to_json() const {
    Json m = Json::array();
    for (auto v : methods) m.push_back(estimators::to_string(v));
    return {{"workspace", workspace},
            {"input", input},
            {"embeddings", embeddings},
            {"embedding_dim", embedding_dim},
            {"max_len", max_len},
            {"split", {{"train", split.train}, {"validation", split.validation}, {"test", split.test}, {"seed", split_seed}}},
            {"features", nuisance::to_string(features)},
            {"nuisance", nuisance::to_string(nuisance)},
            {"methods", m},
            {"trim", {trim.lo, trim.hi}},
            {"training",
             {{"learning_rate", training.learning_rate},
              {"l2", training.l2_strength},
              {"dropout", training.dropout_rate},
              {"batch_size", training.batch_size},
              {"max_epochs", training.max_epochs},
              {"patience", training.patience},
              {"seed", training.seed}}},
            {"cv",
             {{"alpha", cv.alpha},
              {"folds", cv.folds},
              {"n_lambda", cv.n_lambda},
              {"lambda_min_ratio", cv.lambda_min_ratio},
              {"seed", cv.seed}}},
            {"predictions", predictions},
            {"bench", {{"dgp", dgp.to_json()}, {"replications", replications}, {"nuisance", synthbench::to_string(bench_nuisance)}}}};
  }

  void apply_seed(std::uint64_t seed) {
    split_seed = seed;
    training.seed = seed;
    cv.seed = seed;
    dgp.seed = seed;
  }

  void merge(const Json& j) {
    try {
      workspace = j.value("workspace", workspace);
      input = j.value("input", input);
      embeddings = j.value("embeddings", embeddings);
      embedding_dim = j.value("embedding_dim", embedding_dim);
      max_len = j.value("max_len", max_len);
      if (j.contains("seed")) apply_seed(j.at("seed").get<std::uint64_t>());
      if (j.contains("split")) {
        const auto& s = j.at("split");
        split.train = s.value("train", split.train);
        split.validation = s.value("validation", split.validation);
        split.test = s.value("test", split.test);
        split_seed = s.value("seed", split_seed);
      }
      if (j.contains("features")) features = nuisance::parse_features(j.at("features").get<std::string>());
      if (j.contains("nuisance")) nuisance = nuisance::parse_kind(j.at("nuisance").get<std::string>());
      if (j.contains("methods")) {
        methods.clear();
        for (const auto& m : j.at("methods")) methods.push_back(estimators::parse_method(m.get<std::string>()));
      }
      if (j.contains("trim")) {
        const auto& t = j.at("trim");
        if (!t.is_array() || t.size() != 2) throw Error("cli", "config_invalid", "trim");
        trim = {t[0].get<double>(), t[1].get<double>()};
      }
      if (j.contains("training")) {
        const auto& t = j.at("training");
        training.learning_rate = t.value("learning_rate", training.learning_rate);
        training.l2_strength = t.value("l2", training.l2_strength);
        training.dropout_rate = t.value("dropout", training.dropout_rate);
        training.batch_size = t.value("batch_size", training.batch_size);
        training.max_epochs = t.value("max_epochs", training.max_epochs);
        training.patience = t.value("patience", training.patience);
        training.seed = t.value("seed", training.seed);
      }
      if (j.contains("cv")) {
        const auto& c = j.at("cv");
        cv.alpha = c.value("alpha", cv.alpha);
        cv.folds = c.value("folds", cv.folds);
        cv.n_lambda = c.value("n_lambda", cv.n_lambda);
        cv.lambda_min_ratio = c.value("lambda_min_ratio", cv.lambda_min_ratio);
        cv.seed = c.value("seed", cv.seed);
      }
      predictions = j.value("predictions", predictions);
      if (j.contains("bench")) {
        const auto& b = j.at("bench");
        if (b.contains("dgp")) {
          Json merged = dgp.to_json();
          merged.update(b.at("dgp"));
          dgp = synthbench::DgpConfig::from_json(merged);
        }
        replications = b.value("replications", replications);
        if (b.contains("nuisance")) bench_nuisance = synthbench::parse_nuisance_source(b.at("nuisance").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("cli", "config_invalid", e.what());
    } catch (const Error& e) {
      if (e.code() == "config_invalid") throw Error("cli", "config_invalid", e.detail());
      throw;
    }
  }

  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
  fs::path root() const { return fs::path(workspace); }
  std::string tag() const {
    return std::string(nuisance::to_string(nuisance)) + "_" + std::string(nuisance::to_string(features));
  }
};

/// Command-line values that override the config file.
struct Overrides {
  std::string config, workspace, input, embeddings, predictions, features, nuisance, methods, trim;
  std::optional<std::uint64_t> seed;
  std::optional<int> dim;
  std::optional<std::size_t> replications;
  std::optional<int> max_epochs;

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config.empty()) {
      auto j = Json::parse(read_file(config, "cli"), nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw Error("cli", "config_invalid", "config file is not a JSON object");
      cfg.merge(j);
    }
    if (seed) cfg.apply_seed(*seed);
    if (!workspace.empty()) cfg.workspace = workspace;
    if (!input.empty()) cfg.input = input;
    if (!embeddings.empty()) cfg.embeddings = embeddings;
    if (!predictions.empty()) cfg.predictions = predictions;
    if (dim) cfg.embedding_dim = *dim;
    if (replications) cfg.replications = *replications;
    if (max_epochs) cfg.training.max_epochs = *max_epochs;
    try {
      if (!features.empty()) cfg.features = nuisance::parse_features(features);
      if (!nuisance.empty()) cfg.nuisance = nuisance::parse_kind(nuisance);
      if (!methods.empty()) {
        cfg.methods.clear();
        for (const auto& m : split_list(methods)) cfg.methods.push_back(estimators::parse_method(m));
      }
      if (!trim.empty()) cfg.trim = parse_trim(trim);
    } catch (const Error& e) {
      throw Error("cli", "config_invalid", e.detail());
    }
    cfg.validate();
    return cfg;
  }
};

namespace detail {

inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline embed::EmbeddingTable load_table(const RunConfig& cfg) {
  if (cfg.embeddings == "toy") return embed::toy_embedding_table();
  return embed::load_embeddings(cfg.embeddings, cfg.embedding_dim);
}

inline Eigen::MatrixXd design(const ingest::Dataset& ds, const RunConfig& cfg) {
  if (cfg.features == nuisance::Features::without_text) return ds.x;
  auto et = workspace::read_embedded(cfg.root());
  if (et.loan_vectors.rows() != ds.x.rows()) throw Error("cli", "shape_mismatch", "loan vectors");
  Eigen::MatrixXd x(ds.x.rows(), ds.x.cols() + et.loan_vectors.cols());
  x << ds.x, et.loan_vectors;
  return x;
}

}  // namespace detail

inline Json cmd_ingest(const RunConfig& cfg) {
  if (cfg.input.empty()) throw Error("cli", "config_invalid", "input");
  ingest::IngestResult res;
  ingest::ingest_text(read_file(cfg.input, "ingest"), res);
  Json meta = {{"config_hash", cfg.hash()},
               {"input_count", res.input_count},
               {"retained", res.records.size()},
               {"filtered", res.filtered},
               {"parse_errors", res.parse_errors},
               {"split_seed", cfg.split_seed},
               {"split_fractions", {cfg.split.train, cfg.split.validation, cfg.split.test}}};
  workspace::ensure_layout(cfg.root());
  if (res.records.empty()) {
    ingest::Dataset empty;
    empty.covariate_names = ingest::loan_covariate_names();
    workspace::write_dataset(cfg.root(), empty, meta, cfg.hash());
    throw Error("ingest", "empty_input", meta.dump());
  }
  auto ds = ingest::build_dataset(std::move(res.records), cfg.split, cfg.split_seed);
  meta["normalization"] = {{"mean", ds.normalization.mean}, {"std", ds.normalization.std}};
  meta["covariate_names"] = ds.covariate_names;
  meta["split_counts"] = {{"train", ds.indices(ingest::Split::train).size()},
                          {"validation", ds.indices(ingest::Split::validation).size()},
                          {"test", ds.indices(ingest::Split::test).size()}};
  workspace::write_dataset(cfg.root(), ds, meta, cfg.hash());
  return meta;
}

inline Json cmd_embed(const RunConfig& cfg) {
  auto ds = workspace::read_dataset(cfg.root());
  auto table = detail::load_table(cfg);
  auto et = workspace::embed_dataset(ds, table, cfg.max_len);
  workspace::ensure_layout(cfg.root());
  workspace::write_embedded(cfg.root(), et, cfg.hash());
  std::size_t oov = 0;
  for (int m : et.n_matched) oov += m == 0;
  return {{"config_hash", cfg.hash()}, {"n", ds.size()}, {"dim", table.dim()},
          {"vocabulary", et.vocab.size()}, {"all_oov_units", oov}};
}

inline Json cmd_fit(const RunConfig& cfg) {
  auto ds = workspace::read_dataset(cfg.root());
  std::optional<nuisance::TextFeatures> text;
  if (cfg.features == nuisance::Features::with_text || cfg.nuisance == nuisance::Kind::lstm)
    text = workspace::read_embedded(cfg.root()).features();
  nuisance::FitOptions opt;
  opt.outcome_cv = cfg.cv;
  opt.propensity_cv = cfg.cv;
  opt.train = cfg.training;
  auto fit = nuisance::fit_nuisances(cfg.nuisance, ds, cfg.features, text ? &*text : nullptr, opt);

  const auto root = cfg.root();
  workspace::ensure_layout(root);
  Json logs = Json::object();
  for (const auto& [name, log] : fit.logs) {
    Json rows = Json::array();
    for (const auto& e : log)
      rows.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"metric", e.metric}});
    logs[name] = rows;
  }
  workspace::write_json(root / "models" / (cfg.tag() + ".json"),
                        {{"config_hash", cfg.hash()}, {"models", fit.models}, {"training_log", logs}});
  write_file((root / "predictions" / (cfg.tag() + ".csv")).string(), fit.predictions.to_csv(cfg.hash()), "cli");
  Json metrics = {{"config_hash", cfg.hash()}, {"nuisance", nuisance::to_string(cfg.nuisance)},
                  {"features", nuisance::to_string(cfg.features)}};
  for (auto s : {ingest::Split::train, ingest::Split::validation, ingest::Split::test}) {
    try {
      metrics[std::string(ingest::to_string(s))] = nuisance::to_json(nuisance::evaluate(fit.predictions, ds.split, s));
    } catch (const Error&) {
      metrics[std::string(ingest::to_string(s))] = nullptr;
    }
  }
  workspace::write_json(root / "reports" / ("metrics_" + cfg.tag() + ".json"), metrics);
  return metrics;
}

inline Json cmd_estimate(const RunConfig& cfg) {
  const auto root = cfg.root();
  const std::string pred_path =
      cfg.predictions.empty() ? (root / "predictions" / (cfg.tag() + ".csv")).string() : cfg.predictions;
  std::optional<nuisance::NuisancePredictions> preds;
  auto need_preds = [&] {
    if (!preds) preds = nuisance::NuisancePredictions::from_csv(read_file(pred_path, "cli"));
    return &*preds;
  };

  CsvWriter csv({"method", "features", "nuisance", "tau_hat", "se", "ci_lo", "ci_hi", "n_used", "n_total",
                 "n_trimmed", "epsilon_hat"});
  csv.comment("config_hash=" + cfg.hash());
  Json rows = Json::array();
  for (auto m : cfg.methods) {
    estimators::AteEstimate est;
    switch (m) {
      case estimators::Method::naive: {
        if (!cfg.predictions.empty() || !fs::exists(root / "dataset" / "covariates.csv")) {
          auto* p = need_preds();
          est = estimators::naive_ate(p->y, p->w);
        } else {
          auto ds = workspace::read_dataset(root);
          est = estimators::naive_ate(ds.y, ds.w);
        }
        break;
      }
      case estimators::Method::baseline: est = estimators::baseline_ate(*need_preds()); break;
      case estimators::Method::dre: est = estimators::dre_ate(*need_preds(), cfg.trim); break;
      case estimators::Method::tmle: est = estimators::tmle_ate(*need_preds(), cfg.trim); break;
      case estimators::Method::dse: {
        auto ds = workspace::read_dataset(root);
        estimators::DseOptions opt;
        opt.outcome_cv.seed = opt.treatment_cv.seed = cfg.cv.seed;
        est = estimators::dse_ate(detail::design(ds, cfg), ds.y, ds.w, opt).estimate;
        break;
      }
    }
    auto diag = [&](const char* k) {
      auto it = est.diagnostics.find(k);
      return it == est.diagnostics.end() ? std::string() : format_double(it->second);
    };
    csv.row({std::string(estimators::to_string(m)), std::string(nuisance::to_string(cfg.features)),
             std::string(nuisance::to_string(cfg.nuisance)), format_double(est.tau_hat), format_double(est.se),
             format_double(est.ci95.first), format_double(est.ci95.second), std::to_string(est.n_used),
             std::to_string(est.n_total), diag("n_trimmed"), diag("epsilon_hat")});
    auto j = estimators::to_json(est);
    j["features"] = nuisance::to_string(cfg.features);
    j["nuisance"] = nuisance::to_string(cfg.nuisance);
    rows.push_back(j);
  }
  workspace::ensure_layout(root);
  write_file((root / "reports" / ("estimates_" + cfg.tag() + ".csv")).string(), csv.str(), "cli");
  Json report = {{"config_hash", cfg.hash()}, {"trim", {cfg.trim.lo, cfg.trim.hi}}, {"estimates", rows}};
  workspace::write_json(root / "reports" / ("estimates_" + cfg.tag() + ".json"), report);
  return report;
}

inline Json arm_json(const ingest::ArmStats& s) {
  return {{"n", s.n},
          {"mean", s.mean},
          {"median", s.median},
          {"min", s.min},
          {"max", s.max},
          {"mean_loan_amount", s.mean_loan_amount},
          {"mean_ratio", s.mean_ratio}};
}

inline Json cmd_report(const RunConfig& cfg) {
  const auto root = cfg.root();
  auto ds = workspace::read_dataset(root);
  auto rep = ingest::descriptive_stats(ds);
  const std::string hash = cfg.hash();

  Json sectors = Json::array();
  for (const auto& s : rep.sectors)
    sectors.push_back({{"sector", s.sector},
                       {"count_treated", s.count_treated},
                       {"count_control", s.count_control},
                       {"mean_y", s.mean_y},
                       {"mean_y_treated", detail::num(s.count_treated ? s.mean_y_treated : NAN)},
                       {"mean_y_control", detail::num(s.count_control ? s.mean_y_control : NAN)}});
  Json summary = {{"config_hash", hash},         {"n", rep.n},
                  {"treated_share", rep.treated_share}, {"overall", arm_json(rep.overall)},
                  {"treated", arm_json(rep.treated)},   {"control", arm_json(rep.control)},
                  {"sectors", sectors}};
  try {
    summary["naive"] = estimators::to_json(estimators::naive_ate(ds.y, ds.w));
  } catch (const Error& e) {
    summary["naive"] = {{"error", e.code()}};
  }

  CsvWriter ecdf({"arm", "ratio", "ecdf"});
  ecdf.comment("config_hash=" + hash);
  for (auto [arm, v] : {std::pair{"treated", &rep.ratio_treated}, std::pair{"control", &rep.ratio_control}})
    for (std::size_t k = 0; k < v->size(); ++k)
      ecdf.row({arm, format_double((*v)[k]),
                format_double(static_cast<double>(k + 1) / static_cast<double>(v->size()))});

  CsvWriter ols({"arm", "term", "coefficient", "std_error", "t_stat", "r_squared", "n", "error"});
  ols.comment("config_hash=" + hash);
  for (int arm : {1, 0}) {
    std::vector<double> a, y;
    for (const auto& r : ds.records)
      if (r.w == arm) {
        a.push_back(r.loan_amount);
        y.push_back(r.y);
      }
    const char* name = arm ? "treated" : "control";
    try {
      Eigen::MatrixXd x = Eigen::Map<Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
      auto fit = estimators::ols_fit(x, Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())));
      for (Eigen::Index j = 0; j < 2; ++j)
        ols.row({name, j == 0 ? "intercept" : "loan_amount", format_double(fit.coefficients[j]),
                 format_double(fit.standard_errors[j]), format_double(fit.t_stats[j]), format_double(fit.r_squared),
                 std::to_string(fit.n), ""});
    } catch (const Error& e) {
      ols.row({name, "", "", "", "", "", std::to_string(a.size()), e.code()});
    }
  }
  write_file((root / "reports" / "ratio_ecdf.csv").string(), ecdf.str(), "cli");
  write_file((root / "reports" / "ols_loan_amount.csv").string(), ols.str(), "cli");

  if (fs::exists(root / "embeddings" / "loan_vectors.csv")) {
    auto et = workspace::read_embedded(root);
    CsvWriter rel({"regression", "n", "tested", "significant", "treatment_t", "error"});
    rel.comment("config_hash=" + hash);
    Json rj = Json::array();
    for (const auto& r : estimators::relatedness_report(ds.x, et.loan_vectors, ds.y, ds.w)) {
      rel.row({r.name, std::to_string(r.n), std::to_string(r.tested), std::to_string(r.significant),
               r.treatment_t ? format_double(*r.treatment_t) : "", r.error});
      rj.push_back({{"regression", r.name}, {"significant", r.significant}, {"tested", r.tested}, {"error", r.error}});
    }
    write_file((root / "reports" / "relatedness.csv").string(), rel.str(), "cli");
    summary["relatedness"] = rj;
  }
  workspace::write_json(root / "reports" / "summary.json", summary);
  return summary;
}

inline Json cmd_bench(const RunConfig& cfg) {
  synthbench::EstimatorSpec spec;
  spec.methods = cfg.methods;
  spec.nuisance = cfg.bench_nuisance;
  spec.features = cfg.features;
  spec.trim = cfg.trim;
  spec.fit.outcome_cv = cfg.cv;
  spec.fit.propensity_cv = cfg.cv;
  spec.fit.train = cfg.training;
  auto res = synthbench::run_bench(cfg.dgp, spec, cfg.replications);
  const auto root = cfg.root();
  workspace::ensure_layout(root);
  write_file((root / "reports" / "bench_replications.csv").string(), res.to_csv(cfg.hash()), "cli");
  Json summary = res.summary();
  summary["config_hash"] = cfg.hash();
  summary["replications"] = cfg.replications;
  summary["spec"] = spec.to_json();
  summary["dgp"] = cfg.dgp.to_json();
  workspace::write_json(root / "reports" / "bench_summary.json", summary);
  return summary;
}

inline Json error_json(const Error& e) {
  Json j = {{"module", e.module()}, {"code", e.code()}};
  Json detail = Json::parse(e.detail(), nullptr, false);
  if (!detail.is_discarded() && detail.is_object()) j["summary"] = detail;
  else j["detail"] = e.detail();
  return {{"error", j}};
}

/// Parses argv, runs one command and returns the process exit status. Errors
/// are reported on `err` as a single JSON object.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Average treatment effect pipeline for crowdfunding loans", "kivaci"};
  app.require_subcommand(1);
  Overrides ov;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", ov.config, "JSON run configuration");
    sub->add_option("--workspace", ov.workspace, "workspace directory");
    sub->add_option("--seed", ov.seed, "seed for splits, cross-validation, training and data generation");
    sub->add_option("--features", ov.features, "with_text | without_text");
    sub->add_option("--nuisance", ov.nuisance, "linear | mlp | lstm");
    sub->add_option("--methods", ov.methods, "comma list of naive,baseline,dse,dre,tmle");
    sub->add_option("--trim", ov.trim, "propensity bounds lo,hi");
    sub->add_option("--input", ov.input, "raw loans (NDJSON or JSON array)");
    sub->add_option("--embeddings", ov.embeddings, "pretrained vectors file, or 'toy'");
    sub->add_option("--dim", ov.dim, "embedding dimension");
    sub->add_option("--predictions", ov.predictions, "nuisance predictions CSV");
    sub->add_option("--max-epochs", ov.max_epochs, "training epochs for neural models");
    sub->add_option("--replications", ov.replications, "bench replications");
  };
  auto* ingest_cmd = app.add_subcommand("ingest", "parse raw loans into a dataset");
  add_common(ingest_cmd);
  auto* embed_cmd = app.add_subcommand("embed", "compute loan vectors and token sequences");
  add_common(embed_cmd);
  auto* fit_cmd = app.add_subcommand("fit", "fit nuisance models and write predictions");
  add_common(fit_cmd);
  auto* est_cmd = app.add_subcommand("estimate", "estimate the average treatment effect");
  add_common(est_cmd);
  auto* report_cmd = app.add_subcommand("report", "descriptive statistics and regressions");
  add_common(report_cmd);
  auto* bench_cmd = app.add_subcommand("bench", "synthetic benchmark");
  add_common(bench_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << Json{{"error", {{"module", "cli"}, {"code", "config_invalid"}, {"detail", e.what()}}}}.dump() << "\n";
    return 2;
  }

  try {
    RunConfig cfg = ov.resolve();
    Json result;
    std::string name;
    if (app.got_subcommand(ingest_cmd)) result = cmd_ingest(cfg), name = "ingest";
    else if (app.got_subcommand(embed_cmd)) result = cmd_embed(cfg), name = "embed";
    else if (app.got_subcommand(fit_cmd)) result = cmd_fit(cfg), name = "fit";
    else if (app.got_subcommand(est_cmd)) result = cmd_estimate(cfg), name = "estimate";
    else if (app.got_subcommand(report_cmd)) result = cmd_report(cfg), name = "report";
    else result = cmd_bench(cfg), name = "bench";
    out << Json{{"command", name}, {"status", "ok"}, {"config_hash", cfg.hash()}}.dump() << "\n";
    return 0;
  } catch (const Error& e) {
    err << error_json(e).dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << Json{{"error", {{"module", "cli"}, {"code", "internal"}, {"detail", e.what()}}}}.dump() << "\n";
    return 1;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"kivaci"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace kivaci::cli
