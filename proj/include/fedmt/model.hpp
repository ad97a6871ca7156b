#pragma once

#include <cstddef>
#include <cstdint>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fedmt/linalg.hpp"
#include "fedmt/losses.hpp"
#include "fedmt/rng.hpp"

namespace fedmt {

/// f_k(u, x) = (1/sqrt(M)) sum_m a_km relu(u_m . x).
///
/// Hidden weights u are trainable and stored as a d x M matrix whose columns
/// are u_m. The output signs a (K x M, entries +-1) are fixed at
/// initialization: there is no setter and no gradient for them.
class TwoLayerReluNet {
 public:
  /// u ~ N(0, I) column-wise, a uniform on {-1, +1}.
  static TwoLayerReluNet init(std::size_t d, std::size_t m, std::size_t k, std::uint64_t seed);

  /// Rebuilds a network from stored weights; `signs` must contain only +-1.
  static TwoLayerReluNet from_weights(Matrix u, Matrix signs);

  std::size_t input_dim() const { return static_cast<std::size_t>(u_.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(u_.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(a_.rows()); }

  const Matrix& hidden() const { return u_; }
  const Matrix& signs() const { return a_; }

  std::size_t parameter_count() const { return static_cast<std::size_t>(u_.size()); }
  Eigen::Map<Vector> parameters() { return {u_.data(), u_.size()}; }
  Eigen::Map<const Vector> parameters() const { return {u_.data(), u_.size()}; }

  Matrix forward(const Matrix& x) const;

  /// Gradient with respect to u of sum_{i,k} grad_logits(i, k) * f_k(u, x_i),
  /// laid out like `hidden()`. relu'(0) = 0.
  Matrix backward(const Matrix& x, const Matrix& grad_logits) const;

 private:
  TwoLayerReluNet(Matrix u, Matrix a) : u_(std::move(u)), a_(std::move(a)) {}

  Matrix u_;
  Matrix a_;
};

/// Fully connected relu network. All weights and biases live in one flat
/// vector ordered W0, b0, W1, b1, ...; W_l is in x out and column-major, so
/// every layer except the last forms a prefix ("backbone") of the vector.
class MlpNet {
 public:
  /// He-normal weights, zero biases.
  static MlpNet init(std::vector<std::size_t> dims, std::uint64_t seed);

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t classes() const { return dims_.back(); }

  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }
  std::size_t backbone_size() const { return offsets_.back(); }
  Vector& parameters() { return params_; }
  const Vector& parameters() const { return params_; }

  /// Copy with the last layer replaced by a freshly initialised one of width
  /// `classes`. The backbone weights are kept.
  MlpNet with_new_head(std::size_t classes, std::uint64_t seed) const;

  Matrix forward(const Matrix& x) const;

  /// Flat gradient of sum_{i,k} grad_logits(i, k) * f_k(x_i).
  Vector backward(const Matrix& x, const Matrix& grad_logits) const;

 private:
  MlpNet(std::vector<std::size_t> dims, Vector params);

  Eigen::Map<const Matrix> weight(std::size_t layer) const;
  Eigen::Map<const Vector> bias(std::size_t layer) const;

  std::vector<std::size_t> dims_;
  std::vector<std::size_t> offsets_;  // start of W_l for each layer
  Vector params_;
};

using Network = std::variant<TwoLayerReluNet, MlpNet>;

Matrix forward(const Network& net, const Matrix& x);
std::size_t parameter_count(const Network& net);
Vector flat_parameters(const Network& net);
void set_parameters(Network& net, const Vector& params);
std::size_t input_dim(const Network& net);
std::size_t output_dim(const Network& net);

/// Number of leading parameters shared in aggregation when heads are private.
std::size_t backbone_size(const Network& net);

struct SgdConfig {
  double eta_sgd = 0.1;
  std::size_t batch_size = 0;   // 0 means full batch
  std::size_t local_steps = 1;  // t
};

/// Loss at the current parameters and its gradient with respect to the flat
/// parameter vector.
struct LossGradient {
  double loss = 0.0;
  Vector grad;
};
LossGradient loss_gradient(const Network& net, const LabeledBatch& batch, const LossKind& kind);

/// One plain SGD step on `batch`; returns the pre-step loss.
double sgd_step(Network& net, const LabeledBatch& batch, const LossKind& kind, const SgdConfig& cfg);

/// Mini-batches drawn without replacement; the order is reshuffled at the
/// start of every epoch from a private stream. A batch size of 0 (or >= n)
/// yields the whole set in its stored order.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::size_t> next();

 private:
  void reshuffle();

  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

nlohmann::json checkpoint_to_json(const TwoLayerReluNet& net);
TwoLayerReluNet checkpoint_from_json(const nlohmann::json& j);

}  // namespace fedmt
