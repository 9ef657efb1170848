#include <gtest/gtest.h>

#include <cmath>

#include "mlab/bias.hpp"
#include "mlab/data.hpp"
#include "mlab/rng.hpp"
#include "mlab/verify.hpp"

using namespace mlab;

namespace {

std::shared_ptr<const Dataset> default_instance(std::uint64_t seed = 0) {
  SparseRegressionSpec s;
  s.seed = seed;
  return std::make_shared<const Dataset>(gen_sparse_regression(s));
}

Dataset tiny(Mat X, Vec y) {
  Dataset ds;
  ds.features = std::move(X);
  ds.targets = std::move(y);
  return ds;
}

long double psi_reference(long double theta, long double delta) {
  const long double x = 2.0L * theta / delta;
  if (std::abs(x) < 1e-3L) return 0.25L * delta * x * x * (0.5L - x * x / 24.0L + x * x * x * x / 80.0L);
  return 0.25L * delta * (x * std::asinh(x) - std::sqrt(1.0L + x * x) + 1.0L);
}

}  // namespace

TEST(Entropy, ZeroAndSymmetry) {
  const EntropyScale s = EntropyScale::uniform(3, 0.01);
  EXPECT_EQ(hyperbolic_entropy(Vec::Zero(3), s), 0.0);
  const Vec t{{0.3, -1.2, 5e-4}};
  EXPECT_EQ(hyperbolic_entropy(t, s), hyperbolic_entropy(-t, s));
}

TEST(Entropy, LargeRatioValue) {
  const EntropyScale s = EntropyScale::uniform(1, 1e-8);
  const double v = hyperbolic_entropy(Vec::Ones(1), s);
  EXPECT_NEAR(v, 0.5 * std::log(4e8) - 0.5 + 0.25e-8, 1e-14);
  EXPECT_NEAR(v, 9.4034875550361274, 1e-14);
  for (double theta : {1e-6, 0.01, 0.7, 3.0})
    for (double delta : {1e-10, 1e-4, 1.0, 1e3}) {
      const double ref = static_cast<double>(psi_reference(theta, delta));
      EXPECT_NEAR(hyperbolic_entropy(Vec::Constant(1, theta), EntropyScale::uniform(1, delta)), ref,
                  1e-13 * std::abs(ref) + 1e-300)
          << theta << ' ' << delta;
    }
}

TEST(Entropy, GradientAndHessianAtZero) {
  const Vec delta{{0.1, 2.0, 1e-6}};
  const EntropyScale s(delta);
  EXPECT_EQ(grad_hyperbolic_entropy(Vec::Zero(3), s), Vec::Zero(3));
  const Vec h = hess_diag(Vec::Zero(3), s);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(h(i), 1.0 / delta(i));
}

TEST(Entropy, GradientMatchesFiniteDifferences) {
  CounterRng rng(1, 0);
  Vec delta(8), theta(8);
  for (int i = 0; i < 8; ++i) {
    delta(i) = std::pow(10.0, -3.0 * rng.uniform());
    theta(i) = rng.normal() * 0.1;
  }
  const EntropyScale s(delta);
  const Vec g = grad_hyperbolic_entropy(theta, s);
  const Vec hd = hess_diag(theta, s);
  for (int i = 0; i < 8; ++i) {
    const double h = 1e-6 * std::max(std::abs(theta(i)), delta(i));
    Vec p = theta, m = theta;
    p(i) += h;
    m(i) -= h;
    const double fd = (hyperbolic_entropy(p, s) - hyperbolic_entropy(m, s)) / (2 * h);
    EXPECT_NEAR(fd, g(i), 1e-6 * std::max(1.0, std::abs(g(i))));
    const double fd2 = (grad_hyperbolic_entropy(p, s)(i) - grad_hyperbolic_entropy(m, s)(i)) / (2 * h);
    EXPECT_NEAR(fd2, hd(i), 1e-6 * hd(i));
  }
}

TEST(Entropy, GradientAsymptotics) {
  const double delta = 1e-9, theta = 1e-1;
  const double g = grad_hyperbolic_entropy(Vec::Constant(1, theta), EntropyScale::uniform(1, delta))(0);
  EXPECT_NEAR(g, 0.5 * std::log(4 * theta / delta), 1e-6 * g);
  const double gn = grad_hyperbolic_entropy(Vec::Constant(1, -theta), EntropyScale::uniform(1, delta))(0);
  EXPECT_EQ(gn, -g);
}

TEST(StableAsinh, AgreesWithStd) {
  for (double x : {-1e12, -3.0, -1e-9, 0.0, 1e-300, 0.5, 7.0, 1e7, 1e9, 1e200})
    EXPECT_NEAR(stable_asinh(x), std::asinh(x), 1e-15 * (1 + std::abs(std::asinh(x)))) << x;
}

TEST(Bregman, Basics) {
  const EntropyScale s = EntropyScale::uniform(3, 0.05);
  const Vec a{{0.2, -0.4, 1.0}};
  EXPECT_EQ(bregman_divergence(a, a, s), 0.0);
  EXPECT_NEAR(bregman_divergence(a, Vec::Zero(3), s), hyperbolic_entropy(a, s), 1e-14);
}

TEST(Bregman, NonNegativeSweep) {
  CounterRng rng(2, 0);
  for (int k = 0; k < 10000; ++k) {
    Vec delta(4), a(4), b(4);
    for (int i = 0; i < 4; ++i) {
      delta(i) = std::pow(10.0, -12.0 * rng.uniform());
      a(i) = rng.normal();
      b(i) = rng.normal();
    }
    ASSERT_GE(bregman_divergence(a, b, EntropyScale(delta)), 0.0);
  }
}

TEST(EntropyL1, GapShrinksWithScale) {
  const Vec theta{{1.0, 0.0}};
  EXPECT_LE(entropy_l1_asymptotic_gap(theta, EntropyScale::uniform(2, 1e-12)), 0.05);
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 4; k <= 14; ++k) {
    const double gap = entropy_l1_asymptotic_gap(theta, EntropyScale::uniform(2, std::pow(10.0, -k)));
    EXPECT_GT(gap, 0.0);
    EXPECT_LT(gap, prev) << k;
    prev = gap;
  }
  const Vec t2{{0.3, -0.8}};
  EXPECT_LT(std::abs(entropy_l1_asymptotic_gap(t2, EntropyScale::uniform(2, 1e-7))),
            std::abs(entropy_l1_asymptotic_gap(t2, EntropyScale::uniform(2, 1e-6))));
}

TEST(Threshold, Arithmetic) {
  Dataset ds = tiny(Mat::Identity(4, 4), Vec::Ones(4));
  EXPECT_DOUBLE_EQ(small_lambda_threshold(ds, Vec::Constant(4, 1e-4)), 1e-4);
  const auto inst = default_instance();
  const double thr = small_lambda_threshold(*inst, Vec::Constant(30, 1e-4));
  EXPECT_DOUBLE_EQ(thr, 20.0 * 1e-4 / inst->targets.squaredNorm());
  EXPECT_NEAR(thr, 1.966e-5, 1e-3 * thr);
}

TEST(DualSolver, SymmetricInstance) {
  const Dataset ds = tiny(Mat{{1.0, 1.0}}, Vec::Ones(1));
  const auto cert = solve_min_entropy_interpolator(ds, EntropyScale::uniform(2, 0.3), Vec::Zero(2));
  EXPECT_NEAR(cert.theta(0), 0.5, 1e-12);
  EXPECT_NEAR(cert.theta(1), 0.5, 1e-12);
}

TEST(DualSolver, LargeScaleIsMinimumNorm) {
  const Dataset ds = tiny(Mat{{1.0, 2.0}}, Vec::Constant(1, 2.0));
  const auto cert = solve_min_entropy_interpolator(ds, EntropyScale::uniform(2, 1e6), Vec::Zero(2));
  EXPECT_NEAR(cert.theta(0), 0.4, 1e-9);
  EXPECT_NEAR(cert.theta(1), 0.8, 1e-9);
}

TEST(DualSolver, SmallScaleIsMinimumL1) {
  const Dataset ds = tiny(Mat{{1.0, 2.0}}, Vec::Constant(1, 2.0));
  const auto cert = solve_min_entropy_interpolator(ds, EntropyScale::uniform(2, 1e-10), Vec::Zero(2));
  EXPECT_NEAR(cert.theta(0), 0.0, 1e-4);
  EXPECT_NEAR(cert.theta(1), 1.0, 1e-4);
  // brute-force scan of the one-dimensional dual: theta_i = Delta/2 sinh(2 x_i nu)
  double best_nu = 0.0, best_gap = 1e300;
  for (double nu = 5.0; nu < 7.0; nu += 1e-6) {
    const double gap = std::abs(0.5e-10 * std::sinh(2 * nu) + 2 * 0.5e-10 * std::sinh(4 * nu) - 2.0);
    if (gap < best_gap) best_gap = gap, best_nu = nu;
  }
  EXPECT_NEAR(cert.theta(0), 0.5e-10 * std::sinh(2 * best_nu), 1e-8);
}

TEST(DualSolver, RandomInstancesAndRowScaling) {
  CounterRng rng(77, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 2 + static_cast<int>(rng.below(29));
    const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(d - 1)));
    Mat X(n, d);
    Vec truth(d), delta(d), t0(d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
    for (int j = 0; j < d; ++j) {
      truth(j) = rng.uniform() < 0.3 ? rng.normal() : 0.0;
      delta(j) = std::pow(10.0, -4.0 * rng.uniform());
      t0(j) = 1e-3 * rng.normal();
    }
    Dataset ds = tiny(X, X * truth);
    if (ds.targets.norm() == 0.0) continue;
    const EntropyScale s(delta);
    const auto cert = solve_min_entropy_interpolator(ds, s, t0);
    EXPECT_LE(cert.feasibility, 1e-10) << trial;
    EXPECT_LE(kkt_residual(ds, cert.theta, s, t0), 1e-8) << trial;

    const Dataset scaled = tiny(3.5 * X, 3.5 * ds.targets);
    const auto cs = solve_min_entropy_interpolator(scaled, s, t0);
    EXPECT_LE((cs.theta - cert.theta).norm(), 1e-8 * std::max(1.0, cert.theta.norm())) << trial;
  }
}

TEST(DualSolver, SuiteChecksPass) {
  const DualSuiteResult r = check_dual_solver(30, 5);
  for (const auto& rep : r.reports) EXPECT_TRUE(rep.pass) << rep.name << ' ' << rep.measured;
  EXPECT_LE(r.l2_endpoint_error, 1e-3);
}

TEST(PerturbedInit, NoResiduesGivesInitialPredictor) {
  const PMState w{Vec{{0.3, 0.1}}, Vec{{0.1, -0.2}}};
  EXPECT_LT((perturbed_initialisation(w, Vec::Zero(2), Vec::Zero(2)) - predictor(w)).norm(), 1e-17);
  const Vec t = perturbed_initialisation(w, Vec::Constant(2, 0.5), Vec::Constant(2, 0.5));
  EXPECT_LT((t - std::exp(-1.0) * predictor(w)).norm(), 1e-16);
}

TEST(BiasReport, GradientFlowKeepsBalancedness) {
  const auto ds = default_instance();
  IntegratorConfig cfg;
  cfg.stop_loss = 1e-12;
  const ContinuousTrajectory tr = integrate_gf(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), cfg);
  const BiasReport r = bias_report(tr, *ds, 0.01);
  EXPECT_EQ(r.s_source, "conserved");
  EXPECT_EQ(r.s_plus, Vec::Zero(30));
  EXPECT_EQ(r.delta_inf, r.delta0);
  EXPECT_EQ(r.theta_tilde0, Vec::Zero(30));
  EXPECT_LE(r.kkt_residual, 1e-6);
  EXPECT_LT(normalized_distance(r, *ds), 1e-3);
}

TEST(BiasReport, CrossingFreeFlowContracts) {
  const auto ds = default_instance();
  IntegratorConfig cfg;
  cfg.stop_loss = 1e-12;
  const ContinuousTrajectory tr =
      integrate_mgf(ModelSpec::diagonal_net(ds), 0.05, {diagonal_init(30, 0.01), Vec::Zero(60), 0.0}, cfg);
  const BiasReport r = bias_report(tr, *ds, 0.01);
  ASSERT_TRUE(r.crossing_free());
  EXPECT_EQ(r.s_source, "quadrature");
  EXPECT_TRUE((r.delta_inf.array() < r.delta0.array()).all());
  EXPECT_LT(r.theta_tilde0.cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_LE(r.kkt_residual, 1e-3);
  EXPECT_LE(r.delta_terminal_gap, 1e-6);
  for (const auto& c : check_implicit_bias(r, *ds)) EXPECT_TRUE(c.pass) << c.name << ' ' << c.measured;
}

TEST(BiasReport, CrossingFreeMgd) {
  const auto ds = default_instance();
  DiscreteHyper h;
  h.gamma = 0.1;
  h.beta = 0.2;
  h.stop_loss = 1e-10;
  const TrajectoryLog log = run_mgd(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), h);
  const BiasReport r = bias_report(log, *ds, 0.01, h);
  ASSERT_TRUE(r.crossing_free());
  EXPECT_TRUE((r.s_plus.array() > 0.0).all());
  EXPECT_TRUE((r.s_minus.array() > 0.0).all());
  EXPECT_TRUE((r.delta_inf.array() < r.delta0.array()).all());
  EXPECT_LT(r.theta_tilde0.cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_LE(r.delta_terminal_gap, 1e-8);
  EXPECT_LE(r.identity_violation, 1e-8);
  for (const auto& c : check_implicit_bias(r, *ds)) EXPECT_TRUE(c.pass) << c.name << ' ' << c.measured;
}

TEST(BiasReport, UnconvergedRunRejected) {
  const auto ds = default_instance();
  DiscreteHyper h;
  h.gamma = 0.01;
  h.max_steps = 10;
  const TrajectoryLog log = run_mgd(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), h);
  EXPECT_THROW(bias_report(log, *ds, 0.01, h), ContractError);
  EXPECT_NO_THROW(bias_report(log, *ds, 0.01, h, false));
}

TEST(BiasCsv, HeaderMatchesRow) {
  const auto ds = default_instance();
  DiscreteHyper h;
  h.gamma = 0.05;
  h.max_steps = 100;
  const TrajectoryLog log = run_mgd(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), h);
  const BiasReport r = bias_report(log, *ds, 0.01, h, false);
  const auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(commas(bias_csv_header()), commas(bias_csv_row(r)));
}
