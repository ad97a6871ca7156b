#include "fedmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedmt/error.hpp"

namespace fedmt {

TwoLayerReluNet TwoLayerReluNet::init(std::size_t d, std::size_t m, std::size_t k, std::uint64_t seed) {
  require(d >= 1 && m >= 1 && k >= 1, ErrorCode::InvalidArgument, "d, M and K must be positive");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix u(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = normal(rng);
  Matrix a(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
  std::bernoulli_distribution coin(0.5);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = coin(rng) ? 1.0 : -1.0;
  return TwoLayerReluNet(std::move(u), std::move(a));
}

TwoLayerReluNet TwoLayerReluNet::from_weights(Matrix u, Matrix signs) {
  require(u.cols() == signs.cols(), ErrorCode::ShapeMismatch, "u and a disagree on the width M");
  require(u.size() > 0 && signs.size() > 0, ErrorCode::ShapeMismatch, "empty network");
  for (Eigen::Index i = 0; i < signs.size(); ++i) {
    const double s = signs.data()[i];
    require(s == 1.0 || s == -1.0, ErrorCode::InvalidArgument, "output signs must be +-1");
  }
  return TwoLayerReluNet(std::move(u), std::move(signs));
}

Matrix TwoLayerReluNet::forward(const Matrix& x) const {
  require(static_cast<std::size_t>(x.cols()) == input_dim(), ErrorCode::ShapeMismatch,
          "input dimension " + std::to_string(x.cols()) + " != " + std::to_string(input_dim()));
  const Matrix h = (x * u_).cwiseMax(0.0);
  return (h * a_.transpose()) / std::sqrt(static_cast<double>(width()));
}

Matrix TwoLayerReluNet::backward(const Matrix& x, const Matrix& grad_logits) const {
  require(static_cast<std::size_t>(x.cols()) == input_dim(), ErrorCode::ShapeMismatch, "input dimension mismatch");
  require(grad_logits.rows() == x.rows() && static_cast<std::size_t>(grad_logits.cols()) == classes(),
          ErrorCode::ShapeMismatch, "grad_logits must be N x K");
  const Matrix z = x * u_;
  Matrix dh = (grad_logits * a_) / std::sqrt(static_cast<double>(width()));
  for (Eigen::Index i = 0; i < dh.size(); ++i)
    if (!(z.data()[i] > 0.0)) dh.data()[i] = 0.0;
  return x.transpose() * dh;
}

MlpNet::MlpNet(std::vector<std::size_t> dims, Vector params) : dims_(std::move(dims)), params_(std::move(params)) {
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    offsets_.push_back(off);
    off += dims_[l] * dims_[l + 1] + dims_[l + 1];
  }
  require(static_cast<std::size_t>(params_.size()) == off, ErrorCode::ShapeMismatch, "parameter vector size");
}

MlpNet MlpNet::init(std::vector<std::size_t> dims, std::uint64_t seed) {
  require(dims.size() >= 2, ErrorCode::InvalidArgument, "an MLP needs at least input and output sizes");
  for (auto v : dims) require(v >= 1, ErrorCode::InvalidArgument, "layer sizes must be positive");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) total += dims[l] * dims[l + 1] + dims[l + 1];
  Vector params = Vector::Zero(static_cast<Eigen::Index>(total));
  Rng rng(seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(dims[l])));
    for (std::size_t i = 0; i < dims[l] * dims[l + 1]; ++i) params(static_cast<Eigen::Index>(off + i)) = normal(rng);
    off += dims[l] * dims[l + 1] + dims[l + 1];
  }
  return MlpNet(std::move(dims), std::move(params));
}

MlpNet MlpNet::with_new_head(std::size_t classes, std::uint64_t seed) const {
  std::vector<std::size_t> dims = dims_;
  dims.back() = classes;
  MlpNet fresh = init(dims, seed);
  const auto keep = static_cast<Eigen::Index>(backbone_size());
  fresh.params_.head(keep) = params_.head(keep);
  return fresh;
}

Eigen::Map<const Matrix> MlpNet::weight(std::size_t layer) const {
  return {params_.data() + offsets_[layer], static_cast<Eigen::Index>(dims_[layer]),
          static_cast<Eigen::Index>(dims_[layer + 1])};
}

Eigen::Map<const Vector> MlpNet::bias(std::size_t layer) const {
  return {params_.data() + offsets_[layer] + dims_[layer] * dims_[layer + 1],
          static_cast<Eigen::Index>(dims_[layer + 1])};
}

Matrix MlpNet::forward(const Matrix& x) const {
  require(static_cast<std::size_t>(x.cols()) == input_dim(), ErrorCode::ShapeMismatch, "input dimension mismatch");
  Matrix h = x;
  const std::size_t layers = dims_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = h * weight(l);
    z.rowwise() += bias(l).transpose();
    h = l + 1 < layers ? Matrix(z.cwiseMax(0.0)) : z;
  }
  return h;
}

Vector MlpNet::backward(const Matrix& x, const Matrix& grad_logits) const {
  require(static_cast<std::size_t>(x.cols()) == input_dim(), ErrorCode::ShapeMismatch, "input dimension mismatch");
  require(grad_logits.rows() == x.rows() && static_cast<std::size_t>(grad_logits.cols()) == classes(),
          ErrorCode::ShapeMismatch, "grad_logits must be N x K");
  const std::size_t layers = dims_.size() - 1;
  std::vector<Matrix> acts{x};  // inputs to each layer
  std::vector<Matrix> pre;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = acts.back() * weight(l);
    z.rowwise() += bias(l).transpose();
    pre.push_back(z);
    if (l + 1 < layers) acts.push_back(z.cwiseMax(0.0));
  }
  Vector grad = Vector::Zero(params_.size());
  Matrix delta = grad_logits;
  for (std::size_t l = layers; l-- > 0;) {
    if (l + 1 < layers) {
      for (Eigen::Index i = 0; i < delta.size(); ++i)
        if (!(pre[l].data()[i] > 0.0)) delta.data()[i] = 0.0;
    }
    const auto in = static_cast<Eigen::Index>(dims_[l]);
    const auto out = static_cast<Eigen::Index>(dims_[l + 1]);
    Eigen::Map<Matrix>(grad.data() + offsets_[l], in, out) = acts[l].transpose() * delta;
    Eigen::Map<Vector>(grad.data() + offsets_[l] + dims_[l] * dims_[l + 1], out) = delta.colwise().sum().transpose();
    if (l > 0) delta = delta * weight(l).transpose();
  }
  return grad;
}

Matrix forward(const Network& net, const Matrix& x) {
  return std::visit([&](const auto& n) { return n.forward(x); }, net);
}

std::size_t parameter_count(const Network& net) {
  return std::visit([](const auto& n) { return n.parameter_count(); }, net);
}

Vector flat_parameters(const Network& net) {
  return std::visit([](const auto& n) { return Vector(n.parameters()); }, net);
}

void set_parameters(Network& net, const Vector& params) {
  require(static_cast<std::size_t>(params.size()) == parameter_count(net), ErrorCode::ShapeMismatch,
          "parameter vector has the wrong length");
  std::visit([&](auto& n) { n.parameters() = params; }, net);
}

std::size_t input_dim(const Network& net) {
  return std::visit([](const auto& n) { return n.input_dim(); }, net);
}

std::size_t output_dim(const Network& net) {
  return std::visit([](const auto& n) { return n.classes(); }, net);
}

std::size_t backbone_size(const Network& net) {
  if (const auto* mlp = std::get_if<MlpNet>(&net)) return mlp->backbone_size();
  return parameter_count(net);
}

LossGradient loss_gradient(const Network& net, const LabeledBatch& batch, const LossKind& kind) {
  return std::visit(
      [&](const auto& n) {
        const Matrix logits = n.forward(batch.inputs);
        LossValue v = evaluate_loss(kind, logits, batch);
        require(std::isfinite(v.loss), ErrorCode::NonfiniteLoss, "loss is not finite");
        LossGradient out;
        out.loss = v.loss;
        if constexpr (std::is_same_v<std::decay_t<decltype(n)>, TwoLayerReluNet>) {
          const Matrix g = n.backward(batch.inputs, v.grad);
          out.grad = Eigen::Map<const Vector>(g.data(), g.size());
        } else {
          out.grad = n.backward(batch.inputs, v.grad);
        }
        return out;
      },
      net);
}

double sgd_step(Network& net, const LabeledBatch& batch, const LossKind& kind, const SgdConfig& cfg) {
  require(batch.size() > 0, ErrorCode::InvalidArgument, "empty batch");
  require(cfg.eta_sgd >= 0.0, ErrorCode::InvalidArgument, "negative step size");
  const LossGradient lg = loss_gradient(net, batch, kind);
  std::visit([&](auto& n) { n.parameters() -= cfg.eta_sgd * lg.grad; }, net);
  return lg.loss;
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_(batch_size == 0 || batch_size >= n ? n : batch_size), rng_(seed), order_(n) {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (batch_ < n_) reshuffle();
}

void BatchSampler::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  if (batch_ == n_) return order_;
  if (cursor_ + batch_ > n_) reshuffle();
  std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
  cursor_ += batch_;
  return out;
}

nlohmann::json checkpoint_to_json(const TwoLayerReluNet& net) {
  nlohmann::json u = nlohmann::json::array();
  for (Eigen::Index r = 0; r < net.hidden().rows(); ++r)
    for (Eigen::Index c = 0; c < net.hidden().cols(); ++c) u.push_back(net.hidden()(r, c));
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index r = 0; r < net.signs().rows(); ++r)
    for (Eigen::Index c = 0; c < net.signs().cols(); ++c) a.push_back(static_cast<int>(net.signs()(r, c)));
  return {{"d", net.input_dim()}, {"M", net.width()}, {"K", net.classes()}, {"u", std::move(u)}, {"a", std::move(a)}};
}

TwoLayerReluNet checkpoint_from_json(const nlohmann::json& j) {
  const auto d = static_cast<Eigen::Index>(j.at("d").get<std::size_t>());
  const auto m = static_cast<Eigen::Index>(j.at("M").get<std::size_t>());
  const auto k = static_cast<Eigen::Index>(j.at("K").get<std::size_t>());
  const auto& ju = j.at("u");
  const auto& ja = j.at("a");
  require(ju.size() == static_cast<std::size_t>(d * m) && ja.size() == static_cast<std::size_t>(k * m),
          ErrorCode::ShapeMismatch, "checkpoint arrays do not match d, M, K");
  Matrix u(d, m);
  Matrix a(k, m);
  std::size_t idx = 0;
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < m; ++c) u(r, c) = ju[idx++].get<double>();
  idx = 0;
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < m; ++c) a(r, c) = static_cast<double>(ja[idx++].get<int>());
  return TwoLayerReluNet::from_weights(std::move(u), std::move(a));
}

}  // namespace fedmt
