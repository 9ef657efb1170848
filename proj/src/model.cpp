#include "mlab/model.hpp"

#include <cmath>
#include <limits>

namespace mlab {

namespace {

using RowMajorMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_theta(const Dataset& ds, const Vec& theta, const char* op) {
  if (theta.size() != ds.d()) {
    throw ContractError(std::string(op) + ": theta has dimension " + std::to_string(theta.size()) +
                        ", dataset has d = " + std::to_string(ds.d()));
  }
}

void check_finite(const Vec& v, const std::string& where) {
  if (!v.allFinite()) throw NonFiniteError(where);
}

}  // namespace

void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

void validate(const Dataset& ds) {
  require(ds.n() >= 1 && ds.d() >= 1, "dataset: need n >= 1 and d >= 1");
  require(ds.targets.size() == ds.n(), "dataset: targets size does not match n");
  require(ds.features.allFinite(), "dataset: features must be finite");
  if (ds.ground_truth) require(ds.ground_truth->size() == ds.d(), "dataset: ground truth size != d");
}

double loss(const Dataset& ds, const Vec& theta) {
  check_theta(ds, theta, "loss");
  const Vec r = ds.features * theta - ds.targets;
  return 0.5 * r.squaredNorm() / static_cast<double>(ds.n());
}

Vec grad_loss(const Dataset& ds, const Vec& theta) {
  return loss_and_grad(ds, theta).second;
}

std::pair<double, Vec> loss_and_grad(const Dataset& ds, const Vec& theta) {
  check_theta(ds, theta, "grad_loss");
  const double inv_n = 1.0 / static_cast<double>(ds.n());
  const Vec r = ds.features * theta - ds.targets;
  Vec g = ds.features.transpose() * r;
  g *= inv_n;
  return {0.5 * r.squaredNorm() * inv_n, std::move(g)};
}

double loss_and_grad_into(const Dataset& ds, const Vec& theta, Vec& residual, Vec& grad) {
  const double inv_n = 1.0 / static_cast<double>(ds.n());
  residual.noalias() = ds.features * theta;
  residual -= ds.targets;
  grad.noalias() = ds.features.transpose() * residual;
  grad *= inv_n;
  return 0.5 * residual.squaredNorm() * inv_n;
}

Vec batch_grad(const Dataset& ds, std::span<const int> batch, const Vec& theta) {
  check_theta(ds, theta, "batch_grad");
  require(!batch.empty(), "batch_grad: empty batch");
  Vec g = Vec::Zero(ds.d());
  for (int i : batch) {
    require(i >= 0 && i < ds.n(), "batch_grad: index " + std::to_string(i) + " out of range");
    const double resid = ds.features.row(i).dot(theta) - ds.targets(i);
    g.noalias() += resid * ds.features.row(i).transpose();
  }
  g /= static_cast<double>(batch.size());
  return g;
}

PMState pm_of(const WeightState& ws) {
  require(ws.u.size() == ws.v.size(), "pm_of: u and v differ in size");
  return {ws.u + ws.v, ws.u - ws.v};
}

WeightState ws_of(const PMState& pm) {
  require(pm.w_plus.size() == pm.w_minus.size(), "ws_of: w+ and w- differ in size");
  return {0.5 * (pm.w_plus + pm.w_minus), 0.5 * (pm.w_plus - pm.w_minus)};
}

Vec predictor(const PMState& pm) {
  require(pm.w_plus.size() == pm.w_minus.size(), "predictor: w+ and w- differ in size");
  return 0.25 * (pm.w_plus.array().square() - pm.w_minus.array().square()).matrix();
}

Vec balancedness(const PMState& pm) {
  require(pm.w_plus.size() == pm.w_minus.size(), "balancedness: w+ and w- differ in size");
  return (pm.w_plus.array() * pm.w_minus.array()).abs().matrix();
}

double init_scale(const WeightState& ws) {
  return std::max(ws.u.cwiseAbs().maxCoeff(), ws.v.cwiseAbs().maxCoeff());
}

void check_nondegenerate(const WeightState& ws) {
  require(ws.u.size() == ws.v.size(), "weight state: u and v differ in size");
  const Vec delta = (ws.u.array().square() - ws.v.array().square()).abs().matrix();
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    if (!(delta(i) > 0.0)) {
      throw ContractError("weight state: |u^2 - v^2| vanishes at coordinate " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------

ModelSpec::ModelSpec(Kind k) : kind_(std::move(k)) {
  if (auto* q = std::get_if<QuadraticModel>(&kind_)) {
    require(q->A.rows() == q->A.cols(), "quadratic: A must be square");
    require(q->b.size() == q->A.rows(), "quadratic: b has wrong size");
    dim_ = q->A.rows();
  } else if (auto* dn = std::get_if<DiagonalNetModel>(&kind_)) {
    require(dn->data != nullptr, "diagonal_net: missing dataset");
    validate(*dn->data);
    dim_ = 2 * dn->data->d();
  } else {
    auto& m = std::get<MlpModel>(kind_);
    require(m.data != nullptr, "mlp: missing dataset");
    require(m.widths.size() >= 2, "mlp: need at least input and output widths");
    for (int w : m.widths) require(w >= 1, "mlp: widths must be >= 1");
    require(m.widths.back() == 1, "mlp: output width must be 1");
    require(m.widths.front() == m.data->d(), "mlp: input width must equal dataset d");
    validate(*m.data);
    dim_ = mlp_parameter_count(m);
  }
}

ModelSpec ModelSpec::quadratic(Mat A, Vec b) {
  return ModelSpec(QuadraticModel{std::move(A), std::move(b)});
}

ModelSpec ModelSpec::diagonal_net(std::shared_ptr<const Dataset> data) {
  return ModelSpec(DiagonalNetModel{std::move(data)});
}

ModelSpec ModelSpec::relu_mlp(std::vector<int> widths, std::shared_ptr<const Dataset> data,
                              Activation activation, bool bias) {
  return ModelSpec(MlpModel{std::move(widths), activation, bias, std::move(data)});
}

ModelSpec ModelSpec::deep_linear(std::vector<int> widths, std::shared_ptr<const Dataset> data) {
  return ModelSpec(MlpModel{std::move(widths), Activation::identity, false, std::move(data)});
}

std::shared_ptr<const Dataset> ModelSpec::dataset_ptr() const {
  if (auto* dn = std::get_if<DiagonalNetModel>(&kind_)) return dn->data;
  if (auto* m = std::get_if<MlpModel>(&kind_)) return m->data;
  return nullptr;
}

const Dataset& ModelSpec::dataset() const {
  auto p = dataset_ptr();
  if (!p) throw ContractError("model has no dataset");
  return *p;
}

// ---------------------------------------------------------------------------

Eigen::Index mlp_parameter_count(const MlpModel& m) {
  Eigen::Index count = 0;
  for (std::size_t l = 1; l < m.widths.size(); ++l) {
    count += static_cast<Eigen::Index>(m.widths[l]) * m.widths[l - 1];
    if (m.bias) count += m.widths[l];
  }
  return count;
}

namespace {

struct LayerView {
  Eigen::Map<const RowMajorMat> W;
  const double* b;  // null when the network has no biases
};

std::vector<LayerView> unpack(const MlpModel& m, const Vec& w) {
  std::vector<LayerView> layers;
  const double* p = w.data();
  for (std::size_t l = 1; l < m.widths.size(); ++l) {
    const int out = m.widths[l], in = m.widths[l - 1];
    Eigen::Map<const RowMajorMat> W(p, out, in);
    p += static_cast<std::ptrdiff_t>(out) * in;
    const double* b = nullptr;
    if (m.bias) {
      b = p;
      p += out;
    }
    layers.push_back({W, b});
  }
  return layers;
}

Mat affine(const Mat& H, const LayerView& layer) {
  Mat Z = H * layer.W.transpose();
  if (layer.b) {
    Eigen::Map<const Eigen::RowVectorXd> b(layer.b, layer.W.rows());
    Z.rowwise() += b;
  }
  return Z;
}

Mat activate(const Mat& Z, Activation a) {
  if (a == Activation::identity) return Z;
  return Z.cwiseMax(0.0);
}

// Forward pass keeping pre-activations for backprop.
std::vector<Mat> forward_all(const MlpModel& m, const std::vector<LayerView>& layers, const Mat& X) {
  std::vector<Mat> pre;
  Mat H = X;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    pre.push_back(affine(H, layers[l]));
    if (l + 1 < layers.size()) H = activate(pre.back(), m.activation);
  }
  return pre;
}

}  // namespace

Vec mlp_forward(const MlpModel& m, const Vec& w, const Mat& inputs) {
  require(w.size() == mlp_parameter_count(m), "mlp_forward: parameter dimension mismatch");
  require(inputs.cols() == m.widths.front(), "mlp_forward: input width mismatch");
  auto layers = unpack(m, w);
  auto pre = forward_all(m, layers, inputs);
  return pre.back().col(0);
}

double mlp_min_abs_preactivation(const MlpModel& m, const Vec& w) {
  auto layers = unpack(m, w);
  auto pre = forward_all(m, layers, m.data->features);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l + 1 < pre.size(); ++l) best = std::min(best, pre[l].cwiseAbs().minCoeff());
  return best;
}

Vec deep_linear_effective(const MlpModel& m, const Vec& w) {
  require(m.activation == Activation::identity && !m.bias,
          "deep_linear_effective: network must be linear without biases");
  auto layers = unpack(m, w);
  Mat P = layers.front().W;
  for (std::size_t l = 1; l < layers.size(); ++l) P = layers[l].W * P;
  return P.row(0).transpose();
}

namespace {

std::pair<double, Vec> mlp_value_and_grad(const MlpModel& m, const Vec& w) {
  const Dataset& ds = *m.data;
  const double inv_n = 1.0 / static_cast<double>(ds.n());
  auto layers = unpack(m, w);
  auto pre = forward_all(m, layers, ds.features);

  const Vec resid = pre.back().col(0) - ds.targets;
  const double value = 0.5 * resid.squaredNorm() * inv_n;
  if (!std::isfinite(value)) throw NonFiniteError("mlp forward pass (loss)");

  Vec grad(w.size());
  // Offsets of each layer's block in the packed parameter vector.
  std::vector<Eigen::Index> offset(layers.size());
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    offset[l] = off;
    off += layers[l].W.size() + (m.bias ? layers[l].W.rows() : 0);
  }

  Mat delta = resid * inv_n;  // n x 1
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Mat H = li == 0 ? ds.features : activate(pre[li - 1], m.activation);
    const int out = static_cast<int>(layers[li].W.rows());
    const int in = static_cast<int>(layers[li].W.cols());
    Eigen::Map<RowMajorMat> dW(grad.data() + offset[li], out, in);
    dW.noalias() = delta.transpose() * H;
    if (m.bias) {
      Eigen::Map<Eigen::RowVectorXd> db(grad.data() + offset[li] + dW.size(), out);
      db = delta.colwise().sum();
    }
    if (li > 0) {
      Mat back = delta * layers[li].W;
      if (m.activation == Activation::relu) {
        back.array() *= (pre[li - 1].array() > 0.0).cast<double>();
      }
      delta = std::move(back);
    }
  }
  check_finite(grad, "mlp backward pass");
  return {value, std::move(grad)};
}

}  // namespace

std::pair<double, Vec> network_value_and_grad(const ModelSpec& spec, const Vec& w) {
  if (w.size() != spec.parameter_dim()) {
    throw ContractError("network_value_and_grad: expected " + std::to_string(spec.parameter_dim()) +
                        " parameters, got " + std::to_string(w.size()));
  }
  return std::visit(
      [&](const auto& model) -> std::pair<double, Vec> {
        using T = std::decay_t<decltype(model)>;
        if constexpr (std::is_same_v<T, QuadraticModel>) {
          const Vec Aw = model.A * w;
          const double value = 0.5 * w.dot(Aw) - model.b.dot(w);
          if (!std::isfinite(value)) throw NonFiniteError("quadratic value");
          return {value, Aw - model.b};
        } else if constexpr (std::is_same_v<T, DiagonalNetModel>) {
          const Eigen::Index d = model.data->d();
          const auto u = w.head(d);
          const auto v = w.tail(d);
          const Vec theta = u.cwiseProduct(v);
          auto [value, g] = loss_and_grad(*model.data, theta);
          if (!std::isfinite(value)) throw NonFiniteError("diagonal net loss");
          Vec grad(2 * d);
          grad.head(d) = g.cwiseProduct(v);
          grad.tail(d) = g.cwiseProduct(u);
          return {value, std::move(grad)};
        } else {
          return mlp_value_and_grad(model, w);
        }
      },
      spec.kind());
}

double network_value(const ModelSpec& spec, const Vec& w) {
  if (auto* dn = std::get_if<DiagonalNetModel>(&spec.kind())) {
    const Eigen::Index d = dn->data->d();
    return loss(*dn->data, w.head(d).cwiseProduct(w.tail(d)));
  }
  return network_value_and_grad(spec, w).first;
}

}  // namespace mlab
