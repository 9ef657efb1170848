#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>

#include "mlab/model.hpp"
#include "mlab/rng.hpp"

namespace mlab {

struct SparseRegressionSpec {
  int n = 20;
  int d = 30;
  int s = 5;
  double mean = 1.0;
  double stddev = 1.0;
  std::uint64_t seed = 0;
};

/// x_i ~ N(mean * 1, stddev^2 I_d), theta* supported on the first s
/// coordinates with entries 1/sqrt(s), y = X theta* (noiseless).
Dataset gen_sparse_regression(const SparseRegressionSpec& spec);

struct TeacherStudentSpec {
  int input_dim = 2;
  int teacher_width = 5;
  int student_width = 20;
  int n_samples = 15;
  int n_test = 2000;
  std::uint64_t seed = 0;
};

struct TeacherStudentInstance {
  std::shared_ptr<const Dataset> train;
  Dataset test;
  MlpModel teacher;  // architecture; teacher.data points at `train`
  Vec teacher_weights;
  ModelSpec student;
  Vec student_init;
};

/// Inputs are standard normal; targets are the outputs of a one-hidden-layer
/// ReLU teacher whose weights are N(0, 1/fan_in). The student initialisation
/// is drawn from its own stream, so every grid cell shares it.
TeacherStudentInstance gen_teacher_student(const TeacherStudentSpec& spec);

/// Every weight and bias of layer l drawn from N(0, 1 / widths[l - 1]).
Vec draw_mlp_weights(const MlpModel& m, CounterRng& rng);

/// Targets of `inputs` under a given network.
Dataset label_with(const MlpModel& net, const Vec& weights, Mat inputs);

/// Expected squared-loss risk 1/2 E[(<x, theta - theta*>)^2] for
/// x ~ N(mean * 1, stddev^2 I):  1/2 [ stddev^2 ||e||^2 + mean^2 (1^T e)^2 ].
double population_test_loss(const Vec& theta, const Vec& theta_star, double mean, double stddev);

/// Writes `<stem>.csv` (header x_1..x_d,y) and `<stem>.json` (spec + theta*).
void write_dataset(const Dataset& ds, const std::filesystem::path& stem);
Dataset read_dataset(const std::filesystem::path& stem);

}  // namespace mlab
