#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "mlab/data.hpp"
#include "mlab/rng.hpp"
#include "mlab/verify.hpp"

using namespace mlab;

TEST(Report, Bounds) {
  EXPECT_TRUE(make_report("a", 0.05, 0.05, Bound::at_most, "x").pass);
  EXPECT_FALSE(make_report("a", 0.05, 0.05, Bound::below, "x").pass);
  EXPECT_TRUE(make_report("a", 0.04, 0.05, Bound::below, "x").pass);
  EXPECT_TRUE(make_report("a", 1.5, 1.5, Bound::at_least, "x").pass);
  EXPECT_FALSE(make_report("a", 1.4, 1.5, Bound::at_least, "x").pass);
  EXPECT_FALSE(make_report("a", std::nan(""), 1.0, Bound::at_most, "x").pass);
  EXPECT_FALSE(make_report("a", std::nan(""), 1.0, Bound::at_least, "x").pass);
}

TEST(Report, ContextHash) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_NE(fnv1a_hex("gamma=0.01"), fnv1a_hex("gamma=0.02"));
}

TEST(Demo, IteratesStartAtRest) {
  const ModelSpec spec = quadratic_demo_spec();
  const auto it = mgd_iterates(spec, quadratic_demo_init(), 0.01, 0.9, 10);
  ASSERT_EQ(it.size(), 11u);
  EXPECT_EQ(it[0], quadratic_demo_init());
  const Mat& A = std::get<QuadraticModel>(spec.kind()).A;
  EXPECT_EQ(it[1], it[0]);
  EXPECT_LT((it[2] - (it[1] - 0.01 * A * it[1])).norm(), 1e-16);
  Eigen::SelfAdjointEigenSolver<Mat> eig(A);
  EXPECT_NEAR(eig.eigenvalues()(0), 0.1, 1e-15);
  EXPECT_NEAR(eig.eigenvalues()(1), 1.0, 1e-15);
}

TEST(Trajectory, CorrespondenceAndHalving) {
  const auto spec = quadratic_demo_spec();
  const auto init = quadratic_demo_init();
  const CheckReport c = check_discretization_correspondence(0.01, 0.9, spec, init, quadratic_demo_horizon);
  EXPECT_TRUE(c.pass) << c.measured;
  const CheckReport e = check_discretization_correspondence(1e-4, 0.0, spec, init, 20.0, LambdaMap::primary,
                                                            thresholds::euler_flow);
  EXPECT_TRUE(e.pass) << e.measured;
  const CheckReport h = check_epsilon_halving(0.01, 0.9, spec, init, quadratic_demo_horizon);
  EXPECT_TRUE(h.pass) << h.measured;
}

TEST(Trajectory, AccelerationRule) {
  const auto spec = quadratic_demo_spec();
  const auto init = quadratic_demo_init();
  EXPECT_EQ(check_acceleration_rule(0.01, 0.9, 1, spec, init, quadratic_demo_horizon).measured, 0.0);
  const CheckReport r = check_acceleration_rule(0.01, 0.9, 2, spec, init, quadratic_demo_horizon);
  EXPECT_TRUE(r.pass) << r.measured;
  const auto gd = check_gd_contrast(0.01, 2, spec, init, quadratic_demo_horizon);
  ASSERT_EQ(gd.size(), 2u);
  EXPECT_TRUE(gd[0].pass) << gd[0].measured;
  EXPECT_TRUE(gd[1].pass) << gd[1].measured;
  EXPECT_GT(gd[1].measured, gd[0].measured);
}

TEST(Trajectory, Deterministic) {
  const auto spec = quadratic_demo_spec();
  const auto init = quadratic_demo_init();
  const CheckReport a = check_discretization_correspondence(0.01, 0.9, spec, init, 30.0);
  const CheckReport b = check_discretization_correspondence(0.01, 0.9, spec, init, 30.0);
  EXPECT_EQ(a.measured, b.measured);
  EXPECT_EQ(a.context, b.context);
}

TEST(BasisPursuit, MatchesEnumeration) {
  // the l1 minimiser is attained at a basic solution: enumerate supports of size n
  CounterRng rng(4, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2, d = 5;
    Mat X(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
    Vec y(n);
    for (int i = 0; i < n; ++i) y(i) = rng.normal();
    double best = 1e300;
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        Mat S(n, 2);
        S << X.col(a), X.col(b);
        if (std::abs(S.determinant()) < 1e-12) continue;
        best = std::min(best, S.partialPivLu().solve(y).lpNorm<1>());
      }
    const Vec t = basis_pursuit(X, y);
    EXPECT_LT((X * t - y).norm(), 1e-10);
    EXPECT_NEAR(t.lpNorm<1>(), best, 1e-10 * best);
  }
}

TEST(Gradients, QuadraticProbe) {
  const CheckReport r = check_gradients(quadratic_demo_spec(), 20, 1, "quadratic");
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.measured, 1e-8);
}

TEST(SmallLambda, ThresholdRuns) {
  const auto ds = std::make_shared<const Dataset>(gen_sparse_regression({}));
  IntegratorConfig cfg;
  cfg.stop_loss = 1e-4;
  const double thr = small_lambda_threshold(*ds, Vec::Constant(30, 1e-4));
  const SmallLambdaResult r = check_small_lambda_regime(ds, {0.0, 0.5 * thr, thr}, 0.01, cfg);
  EXPECT_TRUE(r.report.pass);
  EXPECT_EQ(r.report.measured, 0.0);
  EXPECT_NEAR(r.threshold_lambda, thr, 1e-20);
  EXPECT_EQ(r.crossings, (std::vector<long>{0, 0, 0}));
  EXPECT_EQ(r.largest_crossing_free, thr);
}

TEST(Conservation, SuiteOnShortRuns) {
  const auto ds = std::make_shared<const Dataset>(gen_sparse_regression({}));
  ConservationConfig cfg;
  cfg.gf.stop_loss = 1e-8;
  cfg.mgf.stop_loss = 1e-8;
  cfg.mgf_lambdas = {0.1};
  DiscreteHyper h;
  h.stop_loss = 1e-8;
  h.gamma = 0.05;
  h.beta = 0.0;
  cfg.mgd_runs.push_back(h);
  h.gamma = 0.01;
  h.beta = 0.9;
  cfg.mgd_runs.push_back(h);
  const auto reports = check_conservation_suite(ds, cfg);
  EXPECT_GE(reports.size(), 4u);
  for (const auto& r : reports) EXPECT_TRUE(r.pass) << r.name << ' ' << r.measured << ' ' << r.detail;
}

TEST(CheckCsv, WritesOneRowPerReport) {
  const auto dir = std::filesystem::temp_directory_path() / "mlab_test_checks";
  std::filesystem::create_directories(dir);
  std::vector<CheckReport> reps{make_report("a", 1.0, 2.0, Bound::at_most, "c"),
                                make_report("b", 3.0, 2.0, Bound::at_most, "c", "with, comma")};
  write_check_csv(reps, dir / "checks.csv");
  std::ifstream in(dir / "checks.csv");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 3);
  std::filesystem::remove_all(dir);
}
