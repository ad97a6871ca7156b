#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"

#include "fedmt/error.hpp"
#include "fedmt/model.hpp"

using namespace fedmt;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

LabeledBatch random_batch(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d, std::size_t classes, LabelSpace space) {
  LabeledBatch b;
  b.inputs = random_matrix(rng, n, d);
  b.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : b.labels) l = rng() % classes;
  b.ids.resize(b.labels.size());
  std::iota(b.ids.begin(), b.ids.end(), 0);
  b.classes = classes;
  b.space = space;
  return b;
}

double loss_at(const Network& net, const Vector& params, const LabeledBatch& b, const LossKind& kind) {
  Network copy = net;
  set_parameters(copy, params);
  return loss_gradient(copy, b, kind).loss;
}

void check_parameter_gradient(const Network& net, const LabeledBatch& b, const LossKind& kind) {
  const auto an = loss_gradient(net, b, kind).grad;
  const Vector fd = oracle::gradient([&](const Vector& p) { return loss_at(net, p, b, kind); }, flat_parameters(net));
  CHECK(oracle::relative_error(an, fd) < 1e-5);
}

}  // namespace

TEST_CASE("initialization is deterministic") {
  const auto a = TwoLayerReluNet::init(2, 4, 2, 7);
  const auto b = TwoLayerReluNet::init(2, 4, 2, 7);
  CHECK((a.hidden().array() == b.hidden().array()).all());
  CHECK((a.signs().array() == b.signs().array()).all());
  const auto c = TwoLayerReluNet::init(2, 4, 2, 8);
  CHECK((a.hidden().array() != c.hidden().array()).any());
}

TEST_CASE("hidden weights are standard normal") {
  const auto net = TwoLayerReluNet::init(3, 10000, 2, 1);
  for (Eigen::Index i = 0; i < 3; ++i) {
    const auto row = net.hidden().row(i).array();
    const double mean = row.mean();
    const double var = (row - mean).square().sum() / static_cast<double>(row.size() - 1);
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
  }
}

TEST_CASE("output signs are fair coins") {
  const auto net = TwoLayerReluNet::init(2, 10000, 4, 3);
  CHECK(((net.signs().array() == 1.0) || (net.signs().array() == -1.0)).all());
  const double plus = (net.signs().array() == 1.0).cast<double>().mean();
  CHECK(std::abs(plus - 0.5) < 0.02);
}

TEST_CASE("forward examples") {
  const auto net = TwoLayerReluNet::init(3, 16, 4, 2);
  CHECK((net.forward(Matrix::Zero(2, 3)).array() == 0.0).all());
  Matrix u(2, 1);
  u << 1, 0;
  Matrix a(1, 1);
  a << 1;
  const auto one = TwoLayerReluNet::from_weights(u, a);
  Matrix x(1, 2);
  x << 2, 3;
  CHECK(one.forward(x)(0, 0) == 2.0);
}

TEST_CASE("property: forward is positively homogeneous") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto net = TwoLayerReluNet::init(4, 32, 3, rng());
    const Matrix x = random_matrix(rng, 5, 4);
    const double c = std::exp(random_matrix(rng, 1, 1)(0, 0));
    CHECK((net.forward(c * x) - c * net.forward(x)).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + c));
  }
}

TEST_CASE("forward matches the definition term by term") {
  std::mt19937_64 rng(5);
  const auto net = TwoLayerReluNet::init(3, 20, 4, 9);
  const Matrix x = random_matrix(rng, 3, 3);
  const Matrix f = net.forward(x);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index k = 0; k < 4; ++k) {
      double s = 0.0;
      for (Eigen::Index m = 0; m < 20; ++m) s += net.signs()(k, m) * std::max(0.0, net.hidden().col(m).dot(x.row(i)));
      CHECK(f(i, k) == doctest::Approx(s / std::sqrt(20.0)).epsilon(1e-13));
    }
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(6);
  const auto net = TwoLayerReluNet::init(3, 8, 2, 1);
  const Matrix x = random_matrix(rng, 4, 3);
  CHECK((net.backward(x, Matrix::Zero(4, 2)).array() == 0.0).all());
  const Matrix gl = random_matrix(rng, 4, 2);
  const Matrix g = net.backward(x, gl);
  CHECK(g.rows() == 3);
  CHECK(g.cols() == 8);
  // Linear functional sum(gl .* f) differentiated numerically.
  auto value = [&](const Vector& p) {
    auto copy = net;
    copy.parameters() = p;
    return (copy.forward(x).array() * gl.array()).sum();
  };
  const Vector fd = oracle::gradient(value, net.parameters());
  CHECK(oracle::relative_error(Eigen::Map<const Vector>(g.data(), g.size()), fd) < 1e-5);
}

TEST_CASE("property: parameter gradients for every loss kind match finite differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = static_cast<Eigen::Index>(1 + rng() % 5);
    const std::size_t m = 1 + rng() % 64;
    const std::size_t k = 2 + rng() % 4;
    const Network net = TwoLayerReluNet::init(static_cast<std::size_t>(d), m, k, rng());
    const auto q = build_hierarchical_q(LabelSpaceSpec::hierarchical(k, balanced_partition(k, 1 + rng() % k)));
    const auto t = build_symmetric_noise_t(k, 0.25);
    const auto bd = random_batch(rng, 4, d, k, LabelSpace::Desired);
    const auto bo = random_batch(rng, 4, d, q.rows(), LabelSpace::Other);
    check_parameter_gradient(net, bd, PlainCE{});
    check_parameter_gradient(net, bo, ForwardCorrected{q});
    check_parameter_gradient(net, bd, BackwardCorrected{t});
    check_parameter_gradient(net, bo, WeightedMSE{q});
  }
}

TEST_CASE("MLP gradients match finite differences") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    // Zero biases put whole samples exactly on a relu kink; move off it.
    Network net = MlpNet::init({3, 7, 5, 4}, rng());
    const Vector p = flat_parameters(net);
    set_parameters(net, p + 0.1 * random_matrix(rng, p.size(), 1));
    const auto b = random_batch(rng, 6, 3, 4, LabelSpace::Desired);
    check_parameter_gradient(net, b, PlainCE{});
    check_parameter_gradient(net, b, WeightedMSE{build_symmetric_noise_t(4, 0.2)});
  }
}

TEST_CASE("MLP head replacement keeps the backbone") {
  const auto net = MlpNet::init({4, 6, 3}, 1);
  const auto swapped = net.with_new_head(5, 2);
  CHECK(swapped.classes() == 5);
  CHECK(swapped.backbone_size() == net.backbone_size());
  CHECK(net.backbone_size() == 4 * 6 + 6);
  CHECK((swapped.parameters().head(net.backbone_size()).array() == net.parameters().head(net.backbone_size()).array()).all());
  CHECK(swapped.parameter_count() == net.backbone_size() + 6 * 5 + 5);
}

TEST_CASE("SGD steps") {
  std::mt19937_64 rng(9);
  const auto b = random_batch(rng, 8, 2, 3, LabelSpace::Desired);
  Network net = TwoLayerReluNet::init(2, 32, 3, 4);
  const Vector before = flat_parameters(net);
  SgdConfig frozen;
  frozen.eta_sgd = 0.0;
  sgd_step(net, b, PlainCE{}, frozen);
  CHECK((flat_parameters(net).array() == before.array()).all());

  SgdConfig cfg;
  cfg.eta_sgd = 1e-3;
  const double l0 = sgd_step(net, b, PlainCE{}, cfg);
  CHECK(loss_gradient(net, b, PlainCE{}).loss < l0);

  Network a = TwoLayerReluNet::init(2, 32, 3, 4), c = a;
  for (int s = 0; s < 2; ++s) sgd_step(a, b, PlainCE{}, cfg), sgd_step(c, b, PlainCE{}, cfg);
  CHECK((flat_parameters(a).array() == flat_parameters(c).array()).all());
}

TEST_CASE("one-dimensional descent on a convex toy") {
  // d = 1, inputs of one sign, one neuron per class: logits linear in u.
  Matrix u(1, 2);
  u << 0.5, 0.5;
  Matrix a(2, 2);
  a << 1, -1, -1, 1;
  Network net = TwoLayerReluNet::from_weights(u, a);
  LabeledBatch b;
  b.inputs = Matrix::Constant(3, 1, 1.0);
  b.labels = {0, 0, 0};
  b.ids = {0, 1, 2};
  b.classes = 2;
  SgdConfig cfg;
  cfg.eta_sgd = 0.01;
  double prev = loss_gradient(net, b, PlainCE{}).loss;
  for (int s = 0; s < 5; ++s) {
    sgd_step(net, b, PlainCE{}, cfg);
    const double now = loss_gradient(net, b, PlainCE{}).loss;
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("training never touches the output signs") {
  std::mt19937_64 rng(10);
  Network net = TwoLayerReluNet::init(3, 16, 3, 5);
  const Matrix signs = std::get<TwoLayerReluNet>(net).signs();
  const auto b = random_batch(rng, 10, 3, 3, LabelSpace::Desired);
  SgdConfig cfg;
  cfg.eta_sgd = 0.5;
  for (int s = 0; s < 20; ++s) sgd_step(net, b, PlainCE{}, cfg);
  CHECK((std::get<TwoLayerReluNet>(net).signs().array() == signs.array()).all());
  CHECK(parameter_count(net) == 3 * 16);
}

TEST_CASE("from_weights validates signs and shapes") {
  CHECK_THROWS_AS(TwoLayerReluNet::from_weights(Matrix::Ones(2, 3), Matrix::Constant(2, 3, 0.5)), Error);
  CHECK_THROWS_AS(TwoLayerReluNet::from_weights(Matrix::Ones(2, 3), Matrix::Ones(2, 4)), Error);
  const auto net = TwoLayerReluNet::init(2, 3, 2, 1);
  CHECK_THROWS_AS(net.forward(Matrix::Zero(1, 3)), Error);
}

TEST_CASE("batch sampler draws without replacement per epoch") {
  // Full batches only: an epoch of n = 10, b = 3 is three disjoint batches.
  BatchSampler s(10, 3, 42);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (int i = 0; i < 3; ++i) {
      const auto b = s.next();
      CHECK(b.size() == 3);
      for (auto v : b) seen.insert(v);
    }
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 9);
    CHECK(*seen.rbegin() < 10);
  }
  BatchSampler even(12, 4, 3);
  std::set<std::size_t> all;
  for (int i = 0; i < 3; ++i)
    for (auto v : even.next()) all.insert(v);
  CHECK(all.size() == 12);
  BatchSampler full(5, 0, 1);
  CHECK(full.next() == std::vector<std::size_t>{0, 1, 2, 3, 4});
  BatchSampler x(20, 4, 9), y(20, 4, 9);
  for (int i = 0; i < 12; ++i) CHECK(x.next() == y.next());
}

TEST_CASE("checkpoint round trip") {
  const auto net = TwoLayerReluNet::init(3, 5, 2, 11);
  const auto j = checkpoint_to_json(net);
  CHECK(j.at("d") == 3);
  CHECK(j.at("M") == 5);
  CHECK(j.at("K") == 2);
  CHECK(j.at("u").size() == 15);
  CHECK(j.at("u")[1].get<double>() == net.hidden()(0, 1));
  const auto back = checkpoint_from_json(nlohmann::json::parse(j.dump()));
  CHECK((back.hidden().array() == net.hidden().array()).all());
  CHECK((back.signs().array() == net.signs().array()).all());
}
