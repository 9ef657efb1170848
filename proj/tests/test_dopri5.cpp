#include <gtest/gtest.h>

#include <cmath>

#include "mlab/dopri5.hpp"

using namespace mlab;

namespace {

void decay(double, const Vec& y, Vec& dy) { dy = -y; }

void oscillator(double, const Vec& y, Vec& dy) {
  dy.resize(2);
  dy(0) = y(1);
  dy(1) = -y(0);
}

Vec integrate_to(const Dopri5::Rhs& f, const Vec& y0, double t_end, Dopri5::Options opt) {
  Dopri5 s(f, 0.0, y0, opt);
  s.set_step_limit(t_end);
  while (s.t() < t_end) s.step();
  return s.y();
}

double oscillator_error(Dopri5::Options opt) {
  const Vec y = integrate_to(oscillator, Vec{{1.0, 0.0}}, 10.0, opt);
  return std::hypot(y(0) - std::cos(10.0), y(1) + std::sin(10.0));
}

}  // namespace

TEST(Dopri5, ExponentialDecay) {
  Dopri5::Options opt;
  const Vec y = integrate_to(decay, Vec::Ones(3), 2.0, opt);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y(i), std::exp(-2.0), 1e-10);
}

TEST(Dopri5, HarmonicOscillator) {
  Dopri5::Options opt;
  EXPECT_LT(oscillator_error(opt), 1e-9);
}

TEST(Dopri5, StepLimitIsExact) {
  Dopri5::Options opt;
  Dopri5 s(decay, 0.0, Vec::Ones(1), opt);
  s.set_step_limit(0.75);
  while (s.t() < 0.75) s.step();
  EXPECT_EQ(s.t(), 0.75);
}

TEST(Dopri5, DenseOutputWithinStep) {
  Dopri5::Options opt;
  opt.rel_tol = 1e-8;
  opt.abs_tol = 1e-10;
  Dopri5 s(oscillator, 0.0, Vec{{1.0, 0.0}}, opt);
  double worst = 0.0;
  while (s.t() < 6.0) {
    s.step();
    for (int j = 0; j <= 10; ++j) {
      const double t = s.t_prev() + (s.t() - s.t_prev()) * j / 10.0;
      const Vec y = s.dense(t);
      worst = std::max(worst, std::hypot(y(0) - std::cos(t), y(1) + std::sin(t)));
      EXPECT_EQ(s.dense(t, 0), y(0));
    }
    EXPECT_LT((s.dense(s.t()) - s.y()).norm(), 1e-14);
    EXPECT_LT((s.dense(s.t_prev()) - s.y_prev()).norm(), 1e-14);
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Dopri5, FifthOrderUnderStepHalving) {
  // loose tolerances so that every step is capped by max_step
  Dopri5::Options opt;
  opt.rel_tol = 1.0;
  opt.abs_tol = 1.0;
  opt.max_step = 0.2;
  opt.initial_step = 0.2;
  const double coarse = oscillator_error(opt);
  opt.max_step = opt.initial_step = 0.1;
  const double fine = oscillator_error(opt);
  EXPECT_GT(coarse / fine, 20.0);
}

TEST(Dopri5, ToleranceReductionReducesError) {
  Dopri5::Options opt;
  opt.rel_tol = 1e-6;
  opt.abs_tol = 1e-8;
  const double loose = oscillator_error(opt);
  opt.rel_tol /= 16;
  opt.abs_tol /= 16;
  const double tight = oscillator_error(opt);
  EXPECT_GE(loose / tight, 4.0);
}

TEST(Dopri5, BlowUpThrows) {
  Dopri5::Options opt;
  Dopri5 s([](double, const Vec& y, Vec& dy) { dy = y.array().square(); }, 0.0, Vec::Ones(1), opt);
  EXPECT_THROW(
      {
        for (int i = 0; i < 100000; ++i) s.step();
      },
      std::exception);
}
