#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "kivaci/nuisance.hpp"

using namespace kivaci;
using namespace kivaci::nuisance;
using ingest::Dataset;
using ingest::Split;

namespace {

Dataset make_dataset(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<int>& w,
                     std::uint64_t seed) {
  Dataset ds;
  ds.x = x;
  ds.y = y;
  ds.w = w;
  for (Eigen::Index j = 0; j < x.cols(); ++j) ds.covariate_names.push_back("x" + std::to_string(j));
  for (Eigen::Index i = 0; i < x.rows(); ++i) ds.ids.push_back(i);
  ds.tokens.resize(w.size());
  ds.split = ingest::assign_splits(w.size(), {}, seed);
  return ds;
}

struct Gaussian {
  std::mt19937_64 rng;
  std::normal_distribution<double> g{0.0, 1.0};
  explicit Gaussian(std::uint64_t seed) : rng(seed) {}
  Eigen::MatrixXd matrix(Eigen::Index n, Eigen::Index p) {
    Eigen::MatrixXd m(n, p);
    for (Eigen::Index k = 0; k < m.size(); ++k) m(k) = g(rng);
    return m;
  }
  std::vector<int> coin(std::size_t n, double p = 0.5) {
    std::bernoulli_distribution b(p);
    std::vector<int> w(n);
    for (auto& v : w) v = b(rng) ? 1 : 0;
    return w;
  }
};

NuisancePredictions four_units() {
  NuisancePredictions p;
  p.unit_id = {0, 1, 2, 3};
  p.w = {1, 0, 1, 0};
  p.y = Eigen::Vector4d(1, 1, 4, 2);
  p.mu1 = Eigen::Vector4d(1, 0, 2, 0);
  p.mu0 = Eigen::Vector4d(0, 1, 0, 2);
  // predicted treated: units 0 (TP) and 1 (FP); unit 2 is FN, unit 3 TN
  p.e = Eigen::Vector4d(0.9, 0.6, 0.2, 0.1);
  return p;
}

}  // namespace

TEST(FitNuisances, LinearRecoversExactLinearOutcomes) {
  Gaussian gen(11);
  const Eigen::Index n = 600;
  Eigen::MatrixXd x = gen.matrix(n, 4);
  auto w = gen.coin(static_cast<std::size_t>(n));
  Eigen::Vector4d beta(1.0, -2.0, 0.5, 0.0);
  Eigen::VectorXd m0 = (x * beta).array() + 1.0, m1 = m0.array() + 3.0 + x.col(0).array();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = w[static_cast<std::size_t>(i)] ? m1[i] : m0[i];
  auto ds = make_dataset(x, y, w, 5);

  FitOptions opt;
  opt.outcome_cv.lambda_min_ratio = 1e-9;
  opt.outcome_cv.solver.tol = 1e-12;
  opt.outcome_cv.solver.max_iters = 100000;
  auto fit = fit_nuisances(Kind::linear, ds, Features::without_text, nullptr, opt);
  auto test = ds.indices(Split::test);
  ASSERT_FALSE(test.empty());
  double s1 = 0, s0 = 0;
  for (auto i : test) {
    const auto k = static_cast<Eigen::Index>(i);
    s1 += std::pow(fit.predictions.mu1[k] - m1[k], 2);
    s0 += std::pow(fit.predictions.mu0[k] - m0[k], 2);
  }
  EXPECT_LT(std::sqrt(s1 / test.size()), 1e-6);
  EXPECT_LT(std::sqrt(s0 / test.size()), 1e-6);
}

TEST(FitNuisances, LinearUsesOnlyTrainingUnits) {
  Gaussian gen(12);
  Eigen::MatrixXd x = gen.matrix(300, 3);
  auto w = gen.coin(300);
  Eigen::VectorXd y = x.col(0) + 0.1 * gen.matrix(300, 1).col(0);
  auto ds = make_dataset(x, y, w, 6);
  auto a = fit_nuisances(Kind::linear, ds, Features::without_text);
  for (auto i : ds.indices(Split::test)) ds.y[static_cast<Eigen::Index>(i)] += 1000.0;
  for (auto i : ds.indices(Split::validation)) ds.w[i] = 1 - ds.w[i];
  auto b = fit_nuisances(Kind::linear, ds, Features::without_text);
  EXPECT_EQ(a.predictions.mu1, b.predictions.mu1);
  EXPECT_EQ(a.predictions.mu0, b.predictions.mu0);
  EXPECT_EQ(a.predictions.e, b.predictions.e);
}

TEST(FitNuisances, MlpOnWideShapes) {
  Gaussian gen(13);
  const Eigen::Index n = 200;
  Eigen::MatrixXd x = gen.matrix(n, 17);
  auto w = gen.coin(static_cast<std::size_t>(n));
  Eigen::VectorXd y = (x.col(0).array() + 5.0).matrix();
  auto ds = make_dataset(x, y, w, 7);
  TextFeatures text;
  text.loan_vectors = gen.matrix(n, 100);
  FitOptions opt;
  opt.train.max_epochs = 3;
  auto fit = fit_nuisances(Kind::mlp, ds, Features::with_text, &text, opt);
  ASSERT_EQ(fit.predictions.e.size(), n);
  EXPECT_GT(fit.predictions.e.minCoeff(), 0.0);
  EXPECT_LT(fit.predictions.e.maxCoeff(), 1.0);
  EXPECT_GE(fit.predictions.mu1.minCoeff(), 0.0);
  EXPECT_TRUE(fit.models.contains("mu1"));
  EXPECT_EQ(fit.logs.at("e").size(), 3u);
}

TEST(FitNuisances, LstmOnSequences) {
  Gaussian gen(14);
  const Eigen::Index n = 120;
  Eigen::MatrixXd x = gen.matrix(n, 3);
  auto w = gen.coin(static_cast<std::size_t>(n));
  Eigen::VectorXd y = (x.col(1).array().abs() + 1.0).matrix();
  auto ds = make_dataset(x, y, w, 8);
  TextFeatures text;
  text.vocabulary = std::make_shared<const Eigen::MatrixXd>(gen.matrix(4, 10));
  std::uniform_int_distribution<int> tok(0, 9), len(0, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<int> s(static_cast<std::size_t>(len(gen.rng)));
    for (auto& t : s) t = tok(gen.rng);
    text.sequences.push_back(s);
  }
  FitOptions opt;
  opt.train.max_epochs = 2;
  auto fit = fit_nuisances(Kind::lstm, ds, Features::with_text, &text, opt);
  EXPECT_GT(fit.predictions.e.minCoeff(), 0.0);
  EXPECT_LT(fit.predictions.e.maxCoeff(), 1.0);
  EXPECT_EQ(fit.predictions.outcome_tag, "lstm");
}

TEST(FitNuisances, ConstantPropensityHalf) {
  Gaussian gen(15);
  const Eigen::Index n = 2000;
  Eigen::MatrixXd x = gen.matrix(n, 5);
  auto w = gen.coin(static_cast<std::size_t>(n), 0.5);
  Eigen::VectorXd y = x.col(0);
  auto ds = make_dataset(x, y, w, 9);
  auto fit = fit_nuisances(Kind::linear, ds, Features::without_text);
  const double m = fit.predictions.e.mean();
  EXPECT_GT(m, 0.45);
  EXPECT_LT(m, 0.55);
}

TEST(FitNuisances, MissingTextFeatures) {
  Gaussian gen(16);
  Eigen::MatrixXd x = gen.matrix(50, 2);
  auto ds = make_dataset(x, x.col(0), gen.coin(50), 1);
  for (auto kind : {Kind::linear, Kind::mlp, Kind::lstm}) {
    try {
      fit_nuisances(kind, ds, Features::with_text, nullptr);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), "missing_text_features");
    }
  }
  EXPECT_THROW(fit_nuisances(Kind::lstm, ds, Features::without_text, nullptr), Error);
}

TEST(FitNuisances, WithTextAppendsLoanVectors) {
  Gaussian gen(17);
  const Eigen::Index n = 400;
  Eigen::MatrixXd x = gen.matrix(n, 2);
  TextFeatures text;
  text.loan_vectors = gen.matrix(n, 3);
  auto w = gen.coin(static_cast<std::size_t>(n));
  Eigen::VectorXd y = 2.0 * text.loan_vectors.col(2) + x.col(0);
  auto ds = make_dataset(x, y, w, 10);
  auto with = fit_nuisances(Kind::linear, ds, Features::with_text, &text);
  auto without = fit_nuisances(Kind::linear, ds, Features::without_text);
  auto m_with = evaluate(with.predictions, ds.split), m_without = evaluate(without.predictions, ds.split);
  EXPECT_LT(m_with.rmse_treated, 0.5 * m_without.rmse_treated);
  EXPECT_LT(m_with.rmse_control, 0.5 * m_without.rmse_control);
}

TEST(Metrics, ConfusionArithmetic) {
  EXPECT_DOUBLE_EQ(f1_score(1, 1, 1), 0.5);
  EXPECT_EQ(f1_score(0, 0, 3), 0.0);
  EXPECT_EQ(f1_score(0, 0, 0), 0.0);
  auto p = four_units();
  auto m = evaluate(p, std::vector<Split>(4, Split::test));
  EXPECT_EQ(m.tp, 1u);
  EXPECT_EQ(m.fp, 1u);
  EXPECT_EQ(m.fn, 1u);
  EXPECT_EQ(m.tn, 1u);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
  // treated residuals (0, 2), control residuals (0, 0)
  EXPECT_DOUBLE_EQ(m.rmse_treated, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(m.rmse_control, 0.0);
}

TEST(Metrics, RmseExample) { EXPECT_DOUBLE_EQ(rmse(Eigen::Vector2d(1, 2), Eigen::Vector2d(1, 4)), std::sqrt(2.0)); }

TEST(Metrics, AllCorrect) {
  auto p = four_units();
  p.e = Eigen::Vector4d(0.7, 0.2, 0.5, 0.3);
  auto m = evaluate(p, std::vector<Split>(4, Split::test));
  EXPECT_EQ(m.f1, 1.0);
  EXPECT_EQ(m.accuracy, 1.0);
}

TEST(Metrics, OnlySelectedSplit) {
  auto p = four_units();
  std::vector<Split> s{Split::test, Split::train, Split::train, Split::test};
  auto m = evaluate(p, s);
  EXPECT_EQ(m.n, 2u);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_THROW(evaluate(p, std::vector<Split>(4, Split::train)), Error);
}

TEST(Metrics, InvariantToUnitOrder) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::normal_distribution<double> g(0, 1);
  const std::size_t n = 60;
  NuisancePredictions p;
  std::vector<Split> split;
  p.y.resize(n);
  p.mu1.resize(n);
  p.mu0.resize(n);
  p.e.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    p.unit_id.push_back(static_cast<std::int64_t>(i));
    p.w.push_back(static_cast<int>(i % 3 == 0));
    p.y[k] = g(rng);
    p.mu1[k] = g(rng);
    p.mu0[k] = g(rng);
    p.e[k] = u(rng);
    split.push_back(i % 2 ? Split::test : Split::train);
  }
  auto base = evaluate(p, split);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    NuisancePredictions q = p;
    std::vector<Split> s2(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(perm[i]);
      q.unit_id[i] = p.unit_id[perm[i]];
      q.w[i] = p.w[perm[i]];
      q.y[a] = p.y[b];
      q.mu1[a] = p.mu1[b];
      q.mu0[a] = p.mu0[b];
      q.e[a] = p.e[b];
      s2[i] = split[perm[i]];
    }
    auto m = evaluate(q, s2);
    EXPECT_EQ(m.tp, base.tp);
    EXPECT_EQ(m.fp, base.fp);
    EXPECT_DOUBLE_EQ(m.f1, base.f1);
    EXPECT_DOUBLE_EQ(m.accuracy, base.accuracy);
    EXPECT_NEAR(m.rmse_treated, base.rmse_treated, 1e-12);
    EXPECT_NEAR(m.rmse_control, base.rmse_control, 1e-12);
  }
}

TEST(Predictions, CsvRoundTrip) {
  auto p = four_units();
  p.e[0] = 1.0 / 3.0;
  p.outcome_tag = "linear";
  auto text = p.to_csv("abc123");
  EXPECT_NE(text.find("config_hash=abc123"), std::string::npos);
  auto q = NuisancePredictions::from_csv(text);
  EXPECT_EQ(q.unit_id, p.unit_id);
  EXPECT_EQ(q.w, p.w);
  EXPECT_EQ(q.y, p.y);
  EXPECT_EQ(q.mu1, p.mu1);
  EXPECT_EQ(q.e, p.e);
}

TEST(Predictions, RejectsMalformedCsv) {
  EXPECT_THROW(NuisancePredictions::from_csv("unit_id,w,y,mu1,mu0\n0,1,1,1,1\n"), Error);
  EXPECT_THROW(NuisancePredictions::from_csv("unit_id,w,y,mu1,mu0,e\n0,2,1,1,1,0.5\n"), Error);
  EXPECT_THROW(NuisancePredictions::from_csv("unit_id,w,y,mu1,mu0,e\n0,1,abc,1,1,0.5\n"), Error);
}
