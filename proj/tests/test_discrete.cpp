#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <set>

#include "mlab/data.hpp"
#include "mlab/optim_discrete.hpp"
#include "mlab/verify.hpp"

using namespace mlab;

namespace {

std::shared_ptr<const Dataset> default_instance(std::uint64_t seed = 0) {
  SparseRegressionSpec s;
  s.seed = seed;
  return std::make_shared<const Dataset>(gen_sparse_regression(s));
}

DiscreteHyper hyper(double gamma, double beta, long steps, double stop = 0.0) {
  DiscreteHyper h;
  h.gamma = gamma;
  h.beta = beta;
  h.max_steps = steps;
  h.stop_loss = stop;
  return h;
}

}  // namespace

TEST(MgdStep, GradientStep) {
  const Vec one = Vec::Ones(1);
  EXPECT_DOUBLE_EQ(mgd_step(one, one, one, hyper(0.1, 0.0, 1))(0), 0.9);
  const Vec w{{0.3, -2.0}};
  EXPECT_EQ(mgd_step(w, w, Vec::Zero(2), hyper(0.1, 0.9, 1)), w);
  const Vec prev{{0.1, -1.0}};
  const Vec g{{1.0, 2.0}};
  const Vec next = mgd_step(w, prev, g, hyper(0.1, 0.5, 1));
  EXPECT_DOUBLE_EQ(next(0), 0.3 - 0.1 + 0.5 * 0.2);
  EXPECT_DOUBLE_EQ(next(1), -2.0 - 0.2 + 0.5 * -1.0);
}

TEST(MgdStep, MatchesLinearRecurrenceClosedForm) {
  // F = w^2 / 2: w_{k+1} = (1 + beta - gamma) w_k - beta w_{k-1}, w_0 = w_1 = 1.
  const double gamma = 0.01, beta = 0.9;
  const ModelSpec spec = ModelSpec::quadratic(Mat::Identity(1, 1), Vec::Zero(1));
  const auto it = mgd_iterates(spec, Vec::Ones(1), gamma, beta, 600);
  using C = std::complex<long double>;
  const long double tr = 1.0L + beta - gamma;
  const C disc = std::sqrt(C(tr * tr - 4.0L * beta));
  const C r1 = (tr + disc) / 2.0L, r2 = (tr - disc) / 2.0L;
  // a + b = 1, a r1 + b r2 = 1
  const C a = (1.0L - r2) / (r1 - r2), b = 1.0L - a;
  for (std::size_t k = 0; k < it.size(); ++k) {
    const long double kk = static_cast<long double>(k);
    const long double ref = (a * std::pow(r1, kk) + b * std::pow(r2, kk)).real();
    ASSERT_NEAR(it[k](0), static_cast<double>(ref), 1e-10) << k;
  }
}

TEST(Maps, LambdaAndEpsilon) {
  EXPECT_NEAR(lambda_of(0.01, 0.9), 1.0, 1e-12);
  EXPECT_NEAR(epsilon_of(0.01, 0.9), 0.1, 1e-14);
  EXPECT_EQ(lambda_of(0.3, 0.0), 0.3);
  EXPECT_EQ(epsilon_of(0.3, 0.0), 0.3);
  EXPECT_NEAR(lambda_of_central(0.01, 0.9) / lambda_of(0.01, 0.9), 0.95, 1e-14);
  EXPECT_EQ(lambda_of(0.01, 0.9, LambdaMap::central), lambda_of_central(0.01, 0.9));
  EXPECT_NEAR(epsilon_of(0.02, 0.6), std::sqrt(lambda_of(0.02, 0.6) * 0.02), 1e-15);
}

TEST(Maps, AccelerationPair) {
  const HyperPair p = acceleration_pair(0.01, 0.9, 2.0);
  EXPECT_NEAR(p.gamma, 0.04, 1e-16);
  EXPECT_NEAR(p.beta, 0.8, 1e-15);
  const HyperPair same = acceleration_pair(0.013, 0.7, 1.0);
  EXPECT_EQ(same.gamma, 0.013);
  EXPECT_EQ(same.beta, 0.7);
  for (double rho : {0.5, 1.5, 2.0})
    for (double beta : {0.7, 0.9, 0.95}) {
      const HyperPair q = acceleration_pair(0.002, beta, rho);
      EXPECT_NEAR(lambda_of(q.gamma, q.beta), lambda_of(0.002, beta), 1e-14 * lambda_of(0.002, beta));
    }
}

TEST(Maps, Validation) {
  EXPECT_THROW(lambda_of(0.1, 1.0), ContractError);
  EXPECT_THROW(validate(hyper(0.1, 1.0, 10)), ContractError);
  EXPECT_THROW(validate(hyper(0.0, 0.5, 10)), ContractError);
}

TEST(RunMgd, StopsImmediatelyWhenAlreadyConverged) {
  const ModelSpec spec = quadratic_demo_spec();
  const TrajectoryLog log = run_mgd(spec, quadratic_demo_init(), hyper(0.01, 0.9, 1000, 1e9));
  EXPECT_EQ(log.terminal_step, 1);
  EXPECT_EQ(log.steps.size(), 1u);
  EXPECT_EQ(log.stop_reason, StopReason::converged);
}

TEST(RunMgd, BetaZeroIsPlainGd) {
  const ModelSpec spec = quadratic_demo_spec();
  DiscreteHyper h = hyper(0.05, 0.0, 200);
  h.sample_every = 1;
  const TrajectoryLog log = run_mgd(spec, quadratic_demo_init(), h);
  Vec w = quadratic_demo_init();
  for (std::size_t k = 0; k < log.states.size(); ++k) {
    ASSERT_EQ(log.states[k], w) << k;
    w = w - 0.05 * network_value_and_grad(spec, w).second;
  }
}

TEST(RunMgd, DivergenceIsDetected) {
  const ModelSpec spec = ModelSpec::quadratic(Mat::Identity(2, 2), Vec::Zero(2));
  const TrajectoryLog log = run_mgd(spec, Vec::Ones(2), hyper(3.0, 0.0, 1000));
  EXPECT_EQ(log.stop_reason, StopReason::diverged);
  ASSERT_TRUE(log.diverged_at);
  EXPECT_LT(*log.diverged_at, 40);
}

TEST(RunMgd, ReplayIsBitIdentical) {
  const auto ds = default_instance();
  const ModelSpec spec = ModelSpec::diagonal_net(ds);
  const Vec init = diagonal_init(30, 0.01);
  const DiscreteHyper h = hyper(0.02, 0.6, 5000);
  const TrajectoryLog a = run_mgd(spec, init, h), b = run_mgd(spec, init, h);
  EXPECT_EQ(a.terminal_state, b.terminal_state);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.residues->s_plus(), b.residues->s_plus());
}

TEST(RunMgd, DiagonalNetConvergesToInterpolator) {
  // gamma = 1e-3 and 1e-2 at beta = 0 stall above 1e-8 within the cap
  const auto ds = default_instance();
  DiscreteHyper h = hyper(0.1, 0.0, 1'000'000, 1e-8);
  h.sample_every = 10000;
  const TrajectoryLog log = run_mgd(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), h);
  EXPECT_EQ(log.stop_reason, StopReason::converged);
  EXPECT_LT(log.final_loss, 1e-8);
}

TEST(RunMgd, CrossingsMatchBruteForceRescan) {
  const auto ds = default_instance();
  DiscreteHyper h = hyper(0.05, 0.9, 3000);
  h.sample_every = 1;
  const TrajectoryLog log = run_mgd(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), h);
  ASSERT_EQ(log.states.size(), 3001u);
  Eigen::VectorXi plus = Eigen::VectorXi::Zero(30), minus = Eigen::VectorXi::Zero(30);
  for (std::size_t k = 1; k < log.states.size(); ++k) {
    const Vec& a = log.states[k - 1];
    const Vec& b = log.states[k];
    for (int i = 0; i < 30; ++i) {
      const double pa = a(i) + a(30 + i), pb = b(i) + b(30 + i);
      const double ma = a(i) - a(30 + i), mb = b(i) - b(30 + i);
      plus(i) += (pa > 0) != (pb > 0);
      minus(i) += (ma > 0) != (mb > 0);
    }
  }
  EXPECT_GT(log.total_crossings(), 0);
  EXPECT_EQ(plus, log.crossings_plus);
  EXPECT_EQ(minus, log.crossings_minus);
}

TEST(Smgd, FullBatchEqualsMgd) {
  const auto ds = default_instance();
  DiscreteHyper h = hyper(0.02, 0.5, 2000);
  h.batch_size = 20;
  const WeightState ws{Vec::Constant(30, 0.01), Vec::Zero(30)};
  const TrajectoryLog s = run_smgd(ds, ws, h, 7);
  const TrajectoryLog m = run_mgd(ModelSpec::diagonal_net(ds), diagonal_init(30, 0.01), h);
  EXPECT_EQ(s.terminal_state, m.terminal_state);
}

TEST(Smgd, DeterministicUnderSeed) {
  const auto ds = default_instance();
  DiscreteHyper h = hyper(0.01, 0.5, 3000);
  h.batch_size = 5;
  const WeightState ws{Vec::Constant(30, 0.01), Vec::Zero(30)};
  const TrajectoryLog a = run_smgd(ds, ws, h, 3), b = run_smgd(ds, ws, h, 3), c = run_smgd(ds, ws, h, 4);
  EXPECT_EQ(a.terminal_state, b.terminal_state);
  EXPECT_NE(a.terminal_state, c.terminal_state);
  h.sampler = Sampler::with_replacement;
  EXPECT_EQ(run_smgd(ds, ws, h, 3).terminal_state, run_smgd(ds, ws, h, 3).terminal_state);
}

TEST(Smgd, CyclicSamplerCoversEachEpoch) {
  for (int b : {1, 4, 5, 20}) {
    BatchSampler s(20, b, Sampler::without_replacement_cyclic, 11);
    for (int epoch = 0; epoch < 3; ++epoch) {
      std::multiset<int> seen;
      for (int k = 0; k < 20 / b; ++k)
        for (int i : s.next()) seen.insert(i);
      ASSERT_EQ(seen.size(), 20u);
      for (int i = 0; i < 20; ++i) EXPECT_EQ(seen.count(i), 1u) << b;
    }
  }
}

TEST(Smgd, SingleSampleBatchesInterpolate) {
  const auto ds = default_instance();
  DiscreteHyper h = hyper(0.05, 0.5, 1'000'000, 1e-10);
  h.batch_size = 1;
  h.sample_every = 100000;
  const WeightState ws{Vec::Constant(30, 0.01), Vec::Zero(30)};
  const TrajectoryLog log = run_smgd(ds, ws, h, 0);
  EXPECT_NE(log.stop_reason, StopReason::diverged);
  const Vec theta = predictor(log.terminal_pm);
  EXPECT_LE((ds->features * theta - ds->targets).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(RunMgd, ExactZeroIsNudged) {
  // x = 1, y = -1, theta_0 = 0: g = 1 and w+ (1 - gamma g) hits 0 at gamma = 1
  Dataset ds;
  ds.features = Mat::Ones(1, 1);
  ds.targets = Vec::Constant(1, -1.0);
  Vec init(2);
  init << 0.5, 0.0;
  const TrajectoryLog log =
      run_mgd(ModelSpec::diagonal_net(std::make_shared<const Dataset>(ds)), init, hyper(1.0, 0.0, 1));
  EXPECT_EQ(log.zero_perturbations, 1);
  EXPECT_GT(log.terminal_pm.w_plus(0), 0.0);
}
