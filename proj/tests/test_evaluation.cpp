#include <gtest/gtest.h>

#include <cmath>

#include "attune/evaluation.hpp"
#include "test_util.hpp"

using namespace attune;
using namespace attune::testing;

namespace {

ModelSpec lr_spec(Eigen::Index d) { return {ModelKind::LogisticRegression, d, 0, 2}; }

TrainConfig exact_config(double wd = 5e-2) {
  TrainConfig cfg;
  cfg.weight_decay = wd;
  cfg.epochs = 2;
  cfg.batch_size = 0;
  cfg.learning_rate = 0.5;
  cfg.tolerance = 1e-10;
  cfg.init = InitMode::Warm;
  return cfg;
}

struct Exhaustive {
  Dataset data, test;
  Checkpoint full;
  SubsetOutputs outs;
};

Exhaustive exhaustive_instance(Eigen::Index n, Eigen::Index a, std::uint64_t seed) {
  Exhaustive e;
  e.data = blobs(n, 3, 2, seed, 1.5);
  e.test = blobs(3, 3, 2, seed + 1, 1.5);
  e.full = train(e.data, lr_spec(3), exact_config()).final;
  RetrainOptions opt;
  opt.warm_start = &e.full.theta;
  e.outs = retrain_subsets(e.data, lr_spec(3), exact_config(), exhaustive_plan(n, a), e.test, opt);
  return e;
}

AttributionMatrix scored(const Matrix& tau) {
  AttributionMatrix a;
  a.scores = tau;
  a.attributor = "synthetic";
  return a;
}

SubsetOutputs synthetic_outputs(const SubsetPlan& plan, const Matrix& outputs) {
  SubsetOutputs o;
  o.plan = plan;
  o.outputs = outputs;
  return o;
}

}  // namespace

TEST(Spearman, MonotoneAndReversed) {
  const Vector x = (Vector(5) << 1, 2, 3, 4, 5).finished();
  const Vector y = (Vector(5) << 0.1, 0.5, 2, 7, 100).finished();
  EXPECT_NEAR(spearman(x, y), 1.0, 1e-15);
  EXPECT_NEAR(spearman(x, x.reverse()), -1.0, 1e-15);
}

TEST(Spearman, TiesUseAverageRanks) {
  const Vector x = (Vector(4) << 1, 2, 2, 3).finished();
  const Vector y = (Vector(4) << 1, 2, 3, 4).finished();
  EXPECT_EQ(average_ranks(x), (Vector(4) << 1, 2.5, 2.5, 4).finished());
  EXPECT_NEAR(spearman(x, y), 0.9487, 1e-4);
  EXPECT_NEAR(spearman(x, y), pearson_reference(average_ranks(x), y), 1e-15);
}

TEST(Spearman, ConstantInputIsUndefined) {
  try {
    spearman(Vector::Ones(4), Vector::LinSpaced(4, 0, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
  EXPECT_THROW(spearman(Vector::LinSpaced(2, 0, 1), Vector::LinSpaced(2, 0, 1)), Error);
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Vector x = gaussian_vector(30, seed), y = gaussian_vector(30, seed + 50);
    const double base = spearman(x, y);
    EXPECT_DOUBLE_EQ(spearman(x.array().exp().matrix(), y), base);
    EXPECT_DOUBLE_EQ(spearman(x, (y.array() * 3.0 + y.array().cube()).matrix()), base);
    EXPECT_GE(base, -1.0);
    EXPECT_LE(base, 1.0);
  }
}

TEST(Lds, PerfectAdditivePredictor) {
  const auto plan = sample_subsets(10, 5, 30, 1);
  const Matrix tau = gaussian_matrix(2, 10, 2);
  const AttributionMatrix attr = scored(tau);
  const auto outs = synthetic_outputs(plan, aggregate_scores(tau, plan));
  const auto r = lds(attr, outs);
  EXPECT_NEAR(r.mean, 1.0, 1e-15);
  EXPECT_EQ(r.excluded_count(), 0u);
  EXPECT_EQ(r.s, 30u);
  EXPECT_EQ(r.a, 5);
}

TEST(Lds, PositiveScalingLeavesScoresUnchanged) {
  const auto plan = sample_subsets(12, 6, 20, 3);
  const Matrix tau = gaussian_matrix(4, 12, 4);
  const auto outs = synthetic_outputs(plan, gaussian_matrix(20, 4, 5));
  const auto a = lds(scored(tau), outs);
  const auto b = lds(scored(7.5 * tau), outs);
  for (Eigen::Index t = 0; t < 4; ++t) EXPECT_DOUBLE_EQ(a.scores(t), b.scores(t));
}

TEST(Lds, MonotoneOutputTransformInvariance) {
  const auto plan = sample_subsets(12, 6, 20, 6);
  const Matrix tau = gaussian_matrix(3, 12, 7);
  const Matrix f = gaussian_matrix(20, 3, 8);
  const auto a = lds(scored(tau), synthetic_outputs(plan, f));
  const auto b = lds(scored(tau), synthetic_outputs(plan, f.array().exp().matrix()));
  for (Eigen::Index t = 0; t < 3; ++t) EXPECT_DOUBLE_EQ(a.scores(t), b.scores(t));
}

TEST(Lds, RandomAttributionsAverageToZero) {
  const std::size_t s = 50;
  const Eigen::Index tests = 8;
  const auto plan = sample_subsets(40, 20, s, 9);
  const auto outs = synthetic_outputs(plan, gaussian_matrix(s, tests, 10));
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) total += lds(scored(gaussian_matrix(tests, 40, 1000 + seed)), outs).mean;
  const double mean = total / 100.0;
  const double sigma = 1.0 / std::sqrt(double(s - 1)) / std::sqrt(100.0 * tests);
  EXPECT_LT(std::abs(mean), 3 * sigma);
}

TEST(Lds, ConstantPredictionsAreExcludedAndCounted) {
  const auto plan = sample_subsets(10, 5, 10, 11);
  Matrix tau = gaussian_matrix(3, 10, 12);
  tau.row(1).setConstant(2.0);  // every subset sums to 10
  const auto r = lds(scored(tau), synthetic_outputs(plan, gaussian_matrix(10, 3, 13)));
  EXPECT_EQ(r.excluded_count(), 1u);
  EXPECT_TRUE(r.excluded[1]);
  EXPECT_TRUE(std::isnan(r.scores(1)));
  EXPECT_DOUBLE_EQ(r.mean, 0.5 * (r.scores(0) + r.scores(2)));
}

TEST(Lds, RequiresThreeSubsets) {
  const auto plan = sample_subsets(6, 3, 2, 1);
  EXPECT_THROW(lds(scored(gaussian_matrix(1, 6, 1)), synthetic_outputs(plan, gaussian_matrix(2, 1, 2))), Error);
}

TEST(PopulationOracle, CountsRetrains) {
  const Dataset data = blobs(4, 3, 2, 14);
  const Checkpoint full = train(data, lr_spec(3), exact_config()).final;
  RetrainOptions opt;
  opt.warm_start = &full.theta;
  counters().reset();
  const auto oracle = population_pearson_lds_oracle(data, lr_spec(3), exact_config(), 2,
                                                    scored(gaussian_matrix(2, 4, 15)), blobs(2, 3, 2, 16), opt);
  EXPECT_EQ(counters().retrains.load(), 6u);
  EXPECT_EQ(oracle.outputs.outputs.rows(), 6);
}

TEST(PopulationOracle, AdditiveExactAttributorScoresOne) {
  const auto plan = exhaustive_plan(6, 3);
  const Matrix tau = gaussian_matrix(2, 6, 17);
  const auto r = pearson_lds(scored(tau), synthetic_outputs(plan, aggregate_scores(tau, plan)));
  EXPECT_NEAR(r.scores(0), 1.0, 1e-14);
  EXPECT_NEAR(r.scores(1), 1.0, 1e-14);
}

TEST(PopulationOracle, RejectsLargeN) {
  const Dataset data = blobs(13, 3, 2, 18);
  try {
    population_pearson_lds_oracle(data, lr_spec(3), exact_config(), 6, scored(gaussian_matrix(1, 13, 1)), data);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Capability);
  }
}

TEST(PopulationOracle, SampledPearsonOverAllSubsetsIsExact) {
  const auto e = exhaustive_instance(7, 3, 19);
  const CurvatureContext ctx = fim_context(e.full, e.data);
  const auto attr = iffim(ctx, output_grads(e.full, e.test), 0.05);
  RetrainOptions opt;
  opt.warm_start = &e.full.theta;
  const auto oracle = population_pearson_lds_oracle(e.data, lr_spec(3), exact_config(), 3, attr, e.test, opt);
  const Matrix agg = aggregate_scores(attr.scores, e.outs.plan);
  for (Eigen::Index t = 0; t < e.test.size(); ++t)
    EXPECT_NEAR(oracle.cp(t), pearson_reference(e.outs.outputs.col(t), agg.col(t)), 1e-10);
}

TEST(Alpha, ConstantOutputsGiveZero) {
  const auto plan = exhaustive_plan(6, 3);
  const auto r = alpha_vector(synthetic_outputs(plan, Matrix::Constant(20, 1, 4.2)), 0);
  EXPECT_LT(r.alpha.cwiseAbs().maxCoeff(), 1e-14);
  for (auto c : r.counts) EXPECT_EQ(c, 10u);
}

TEST(Alpha, ExhaustiveSumIsZero) {
  const auto e = exhaustive_instance(6, 3, 20);
  for (Eigen::Index t = 0; t < e.test.size(); ++t) EXPECT_LT(std::abs(alpha_vector(e.outs, t).alpha.sum()), 1e-10);
}

TEST(Alpha, CoverageError) {
  SubsetPlan plan{5, 2, 0, false, {{0, 1}, {1, 2}, {0, 2}}};
  EXPECT_THROW(alpha_vector(synthetic_outputs(plan, gaussian_matrix(3, 1, 1)), 0), Error);
}

TEST(Oracle, GradientIdentityByEnumeration) {
  const auto e = exhaustive_instance(6, 3, 21);
  const Matrix j = per_example_grads(e.full, e.data);
  ASSERT_LT(j.colwise().sum().cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index t = 0; t < e.test.size(); ++t) {
    const Vector f = e.outs.outputs.col(t);
    Vector lhs = Vector::Zero(j.cols());
    for (std::size_t s = 0; s < e.outs.plan.size(); ++s) {
      Vector grad = Vector::Zero(j.cols());
      for (auto i : e.outs.plan.subsets[s]) grad += j.row(i).transpose();
      lhs += grad / 3.0 * (f(static_cast<Eigen::Index>(s)) - f.mean());
    }
    lhs /= double(e.outs.plan.size());
    const auto oq = oracle_lhs(j, alpha_vector(e.outs, t).alpha, output_grads(e.full, e.test).row(t).transpose(), 0.1);
    EXPECT_LT((lhs - oq.g).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Oracle, MatchesPrimalDenseRoute) {
  const Matrix j = gaussian_matrix(9, 14, 22);
  const Vector alpha = gaussian_vector(9, 23);
  const Vector grad = gaussian_vector(14, 24);
  const double lambda = 0.3;
  const auto oq = oracle_lhs(j, alpha, grad, lambda);
  Matrix f = j.transpose() * j / 9.0;
  const Matrix fl_inv = (f + lambda * Matrix::Identity(14, 14)).inverse();
  const Vector g = j.transpose() * alpha / 9.0;
  EXPECT_NEAR(oq.r, -grad.dot(fl_inv * g), 1e-12);
  EXPECT_NEAR(oq.q, -grad.dot(fl_inv * fl_inv * g), 1e-12);
  const Matrix k = j * j.transpose();
  EXPECT_NEAR(oq.o, alpha.dot((k + 9.0 * lambda * Matrix::Identity(9, 9)).inverse() * alpha), 1e-12);
  EXPECT_NEAR(oq.t1, grad.dot(fl_inv * f * grad), 1e-12);
}

TEST(Oracle, EqualityCaseGivesOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix j = gaussian_matrix(8, 12, 25 + seed);
    const Vector grad = gaussian_vector(12, 60 + seed);
    for (double lambda : {1e-3, 0.1, 10.0}) {
      const Vector alpha = -0.7 * (j * grad);
      EXPECT_NEAR(oracle_lhs(j, alpha, grad, lambda).lhs, 1.0, 1e-12);
    }
  }
}

TEST(Oracle, ResolventWeightedAlphaSaturatesSecondInequality) {
  // α ∝ −((1/n)JJᵀ+λI)⁻¹J∇f makes √(t₃·o) = q exactly.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix j = gaussian_matrix(8, 12, 90 + seed);
    const Vector grad = gaussian_vector(12, 120 + seed);
    const double lambda = 0.2;
    const Matrix k = j * j.transpose() / 8.0 + lambda * Matrix::Identity(8, 8);
    const Vector alpha = -(k.inverse() * (j * grad));
    const auto oq = oracle_lhs(j, alpha, grad, lambda);
    const CurvatureContext ctx(j, std::nullopt, SolveMode::Dual);
    const TValues t = t_values(ctx, grad, lambda);
    EXPECT_NEAR(std::sqrt(t.t3 * oq.o), oq.q, 1e-10 * std::abs(oq.q));
  }
}

TEST(Oracle, BoundsOnRandomInstances) {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 200; ++seed) {
    const Matrix j = gaussian_matrix(7, 10, 200 + seed);
    const Vector alpha = gaussian_vector(7, 5000 + seed);
    const Vector grad = gaussian_vector(10, 9000 + seed);
    const auto oq = oracle_lhs(j, alpha, grad, std::pow(10.0, -3.0 + double(seed % 7)));
    if (oq.r <= 0) continue;
    ++checked;
    EXPECT_GE(oq.lhs, -1e-12);
    EXPECT_LE(oq.lhs, 1.0 + 1e-12);
  }
}

TEST(Oracle, DegenerateTestPoint) {
  Matrix j = Matrix::Zero(4, 3);
  j.col(0) = gaussian_vector(4, 1);
  try {
    oracle_lhs(j, gaussian_vector(4, 2), Vector::Unit(3, 2), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(ClosedForm, PearsonComponentsMatchEnumeration) {
  const auto e = exhaustive_instance(8, 4, 26);
  const CurvatureContext ctx = fim_context(e.full, e.data);
  const Matrix grads = output_grads(e.full, e.test);
  for (double lambda : {1e-3, 1e-2, 0.1, 1.0}) {
    const auto attr = iffim(ctx, grads, lambda);
    const Matrix agg = aggregate_scores(attr.scores, e.outs.plan);
    const CurvatureContext dual(per_example_grads(e.full, e.data), std::nullopt, SolveMode::Dual);
    for (Eigen::Index t = 0; t < e.test.size(); ++t) {
      const auto oq = oracle_lhs(dual, alpha_vector(e.outs, t).alpha, grads.row(t).transpose(), lambda);
      const auto brute = brute_force_pearson(e.outs.outputs.col(t), agg.col(t));
      const auto closed = closed_form_pearson(oq, t_values(ctx, grads.row(t).transpose(), lambda),
                                              brute.output_variance, 8, 4);
      EXPECT_NEAR(closed.covariance, brute.covariance, 1e-6 * std::max(1.0, std::abs(brute.covariance)));
      EXPECT_NEAR(closed.prediction_variance, brute.prediction_variance, 1e-6 * std::max(1.0, brute.prediction_variance));
      EXPECT_NEAR(closed.correlation(), brute.covariance / std::sqrt(brute.prediction_variance * brute.output_variance),
                  1e-6);
    }
  }
}
