#include "mlab/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mlab/rng.hpp"

namespace mlab {

Dataset gen_sparse_regression(const SparseRegressionSpec& spec) {
  require(spec.n >= 1 && spec.d >= 1, "gen_sparse_regression: need n, d >= 1");
  require(spec.s >= 1 && spec.s <= spec.d, "gen_sparse_regression: need 1 <= s <= d");
  require(spec.stddev > 0.0, "gen_sparse_regression: stddev must be positive");

  Dataset ds;
  ds.features.resize(spec.n, spec.d);
  CounterRng rng(spec.seed, stream::features);
  // Row-major draw order so that the instance does not depend on storage order.
  for (int i = 0; i < spec.n; ++i)
    for (int j = 0; j < spec.d; ++j) ds.features(i, j) = spec.mean + spec.stddev * rng.normal();

  Vec theta_star = Vec::Zero(spec.d);
  theta_star.head(spec.s).setConstant(1.0 / std::sqrt(static_cast<double>(spec.s)));
  ds.targets = ds.features * theta_star;
  ds.ground_truth = std::move(theta_star);
  ds.mean = spec.mean;
  ds.stddev = spec.stddev;
  ds.sparsity = spec.s;
  return ds;
}

Vec draw_mlp_weights(const MlpModel& m, CounterRng& rng) {
  Vec w(mlp_parameter_count(m));
  Eigen::Index k = 0;
  for (std::size_t l = 1; l < m.widths.size(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(m.widths[l - 1]));
    for (int i = 0; i < m.widths[l] * m.widths[l - 1]; ++i) w(k++) = scale * rng.normal();
    if (m.bias)
      for (int i = 0; i < m.widths[l]; ++i) w(k++) = scale * rng.normal();
  }
  return w;
}

namespace {

Mat standard_normal_inputs(int rows, int cols, CounterRng& rng) {
  Mat X(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) X(i, j) = rng.normal();
  return X;
}

}  // namespace

Dataset label_with(const MlpModel& net, const Vec& weights, Mat inputs) {
  Dataset ds;
  ds.targets = mlp_forward(net, weights, inputs);
  ds.features = std::move(inputs);
  ds.mean = 0.0;
  ds.stddev = 1.0;
  return ds;
}

TeacherStudentInstance gen_teacher_student(const TeacherStudentSpec& spec) {
  require(spec.input_dim >= 1 && spec.teacher_width >= 1 && spec.student_width >= 1 &&
              spec.n_samples >= 1 && spec.n_test >= 1,
          "gen_teacher_student: widths and sample counts must be >= 1");

  CounterRng input_rng(spec.seed, stream::features);
  CounterRng teacher_rng(spec.seed, stream::teacher);
  CounterRng student_rng(spec.seed, stream::student);
  CounterRng test_rng(spec.seed, stream::test_inputs);

  // Placeholder dataset so that the teacher architecture validates; the
  // teacher's data pointer is rebound to the generated training set below.
  auto scratch = std::make_shared<Dataset>();
  scratch->features = standard_normal_inputs(spec.n_samples, spec.input_dim, input_rng);
  scratch->targets = Vec::Zero(spec.n_samples);

  MlpModel teacher{{spec.input_dim, spec.teacher_width, 1}, Activation::relu, true, scratch};
  const Vec teacher_w = draw_mlp_weights(teacher, teacher_rng);

  auto train = std::make_shared<Dataset>(label_with(teacher, teacher_w, scratch->features));
  teacher.data = train;
  Dataset test = label_with(teacher, teacher_w, standard_normal_inputs(spec.n_test, spec.input_dim, test_rng));

  ModelSpec student = ModelSpec::relu_mlp({spec.input_dim, spec.student_width, 1}, train);
  const Vec student_init = draw_mlp_weights(std::get<MlpModel>(student.kind()), student_rng);

  return {train, std::move(test), std::move(teacher), teacher_w, std::move(student), student_init};
}

double population_test_loss(const Vec& theta, const Vec& theta_star, double mean, double stddev) {
  require(theta.size() == theta_star.size(), "population_test_loss: dimension mismatch");
  const Vec e = theta - theta_star;
  const double s = e.sum();
  return 0.5 * (stddev * stddev * e.squaredNorm() + mean * mean * s * s);
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<double> parse_row(const std::string& line) {
  std::vector<double> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& stem) {
  auto csv_path = stem;
  csv_path += ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  for (Eigen::Index j = 0; j < ds.d(); ++j) csv << "x_" << (j + 1) << ',';
  csv << "y\n";
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    for (Eigen::Index j = 0; j < ds.d(); ++j) csv << fmt_double(ds.features(i, j)) << ',';
    csv << fmt_double(ds.targets(i)) << '\n';
  }

  nlohmann::json meta;
  meta["n"] = ds.n();
  meta["d"] = ds.d();
  meta["mean"] = ds.mean;
  meta["stddev"] = ds.stddev;
  meta["sparsity"] = ds.sparsity;
  if (ds.ground_truth) meta["ground_truth"] = std::vector<double>(ds.ground_truth->begin(), ds.ground_truth->end());
  auto json_path = stem;
  json_path += ".json";
  std::ofstream js(json_path);
  if (!js) throw std::runtime_error("cannot write " + json_path.string());
  js << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& stem) {
  auto csv_path = stem;
  csv_path += ".csv";
  auto json_path = stem;
  json_path += ".json";
  std::ifstream csv(csv_path);
  std::ifstream js(json_path);
  if (!csv || !js) throw std::runtime_error("cannot open dataset " + stem.string());

  const auto meta = nlohmann::json::parse(js);
  const auto n = meta.at("n").get<Eigen::Index>();
  const auto d = meta.at("d").get<Eigen::Index>();

  std::string line;
  std::getline(csv, line);  // header
  Dataset ds;
  ds.features.resize(n, d);
  ds.targets.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::getline(csv, line)) throw std::runtime_error("dataset csv: too few rows");
    const auto row = parse_row(line);
    if (static_cast<Eigen::Index>(row.size()) != d + 1) throw std::runtime_error("dataset csv: bad row width");
    for (Eigen::Index j = 0; j < d; ++j) ds.features(i, j) = row[static_cast<std::size_t>(j)];
    ds.targets(i) = row.back();
  }
  ds.mean = meta.value("mean", 0.0);
  ds.stddev = meta.value("stddev", 1.0);
  ds.sparsity = meta.value("sparsity", 0);
  if (meta.contains("ground_truth")) {
    const auto gt = meta["ground_truth"].get<std::vector<double>>();
    ds.ground_truth = Eigen::Map<const Vec>(gt.data(), static_cast<Eigen::Index>(gt.size()));
  }
  validate(ds);
  return ds;
}

}  // namespace mlab
