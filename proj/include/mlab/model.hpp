#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace mlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Raised when a caller breaks a documented precondition (dimension mismatch,
/// empty batch, invalid hyperparameter, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an intermediate value becomes NaN or infinite.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& where)
      : std::runtime_error("non-finite value in " + where), where_(where) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

inline void require(bool cond, const char* what) {
  if (!cond) throw ContractError(what);
}
void require(bool cond, const std::string& what);

/// A noiseless regression instance. Row i of `features` is x_i.
struct Dataset {
  Mat features;
  Vec targets;
  std::optional<Vec> ground_truth;
  double mean = 0.0;
  double stddev = 1.0;
  int sparsity = 0;

  Eigen::Index n() const { return features.rows(); }
  Eigen::Index d() const { return features.cols(); }
};

void validate(const Dataset& ds);

/// (1/2n) * ||y - X theta||^2
double loss(const Dataset& ds, const Vec& theta);

/// (1/n) * X^T (X theta - y)
Vec grad_loss(const Dataset& ds, const Vec& theta);

/// Loss and gradient in one pass over the data.
std::pair<double, Vec> loss_and_grad(const Dataset& ds, const Vec& theta);

/// Unchecked loss-and-gradient kernel writing into caller-owned buffers
/// (residual: n, grad: d). Used by the inner loops of the drivers.
double loss_and_grad_into(const Dataset& ds, const Vec& theta, Vec& residual, Vec& grad);

/// Gradient of the partial loss (1/2B) sum_{i in batch} (y_i - <x_i, theta>)^2.
/// Repeated indices count with multiplicity.
Vec batch_grad(const Dataset& ds, std::span<const int> batch, const Vec& theta);

// Diagonal linear network weights and their (w+, w-) reparametrisation.

struct WeightState {
  Vec u;
  Vec v;
};

struct PMState {
  Vec w_plus;
  Vec w_minus;
};

PMState pm_of(const WeightState& ws);
WeightState ws_of(const PMState& pm);
/// theta = (w+^2 - w-^2) / 4
Vec predictor(const PMState& pm);
/// Delta = |w+ * w-|
Vec balancedness(const PMState& pm);
/// max(||u||_inf, ||v||_inf)
double init_scale(const WeightState& ws);
/// Throws unless |u^2 - v^2| > 0 in every coordinate.
void check_nondegenerate(const WeightState& ws);

// Model families.

/// F(w) = 1/2 w^T A w - b^T w
struct QuadraticModel {
  Mat A;
  Vec b;
};

/// F(u, v) = L(u * v); parameters are laid out as [u; v].
struct DiagonalNetModel {
  std::shared_ptr<const Dataset> data;
};

enum class Activation { relu, identity };

/// Fully connected network with scalar output trained on the squared loss.
/// `widths` lists layer sizes from input to output, e.g. {2, 20, 1}. Parameters
/// are packed layer by layer as row-major W_l (out x in) followed by b_l when
/// `bias` is set. The activation is applied to every hidden layer.
struct MlpModel {
  std::vector<int> widths;
  Activation activation = Activation::relu;
  bool bias = true;
  std::shared_ptr<const Dataset> data;
};

class ModelSpec {
 public:
  using Kind = std::variant<QuadraticModel, DiagonalNetModel, MlpModel>;

  static ModelSpec quadratic(Mat A, Vec b);
  static ModelSpec diagonal_net(std::shared_ptr<const Dataset> data);
  static ModelSpec relu_mlp(std::vector<int> widths, std::shared_ptr<const Dataset> data,
                            Activation activation = Activation::relu, bool bias = true);
  /// Deep linear network: identity activations, no biases.
  static ModelSpec deep_linear(std::vector<int> widths, std::shared_ptr<const Dataset> data);

  const Kind& kind() const { return kind_; }
  Eigen::Index parameter_dim() const { return dim_; }

  bool is_diagonal_net() const { return std::holds_alternative<DiagonalNetModel>(kind_); }
  bool is_quadratic() const { return std::holds_alternative<QuadraticModel>(kind_); }
  bool is_mlp() const { return std::holds_alternative<MlpModel>(kind_); }

  const Dataset& dataset() const;
  std::shared_ptr<const Dataset> dataset_ptr() const;

 private:
  explicit ModelSpec(Kind k);
  Kind kind_;
  Eigen::Index dim_ = 0;
};

std::pair<double, Vec> network_value_and_grad(const ModelSpec& spec, const Vec& w);
double network_value(const ModelSpec& spec, const Vec& w);

Eigen::Index mlp_parameter_count(const MlpModel& m);
/// Network outputs for every row of `inputs`.
Vec mlp_forward(const MlpModel& m, const Vec& w, const Mat& inputs);
/// Smallest |pre-activation| over all hidden units and all training samples.
double mlp_min_abs_preactivation(const MlpModel& m, const Vec& w);
/// End-to-end linear map of a deep linear network (identity activations).
Vec deep_linear_effective(const MlpModel& m, const Vec& w);

}  // namespace mlab
