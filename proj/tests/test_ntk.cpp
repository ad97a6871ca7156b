#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"

#include "fedmt/error.hpp"
#include "fedmt/ntk.hpp"

using namespace fedmt;

namespace {

// Keeps the softmax at init away from saturation so small eigenvalues are
// resolvable in double precision.
FederatedDataset shrink(FederatedDataset data, double scale = 0.1) {
  for (auto* sets : {&data.client_sets, &data.server_sets})
    for (auto& b : *sets) b.inputs *= scale;
  return data;
}

FederatedDataset tiny(std::size_t k, std::vector<std::size_t> partition, double xi, std::size_t per_client,
                      std::uint64_t seed) {
  SyntheticTaskSpec s;
  s.d = 3;
  s.k = k;
  s.space = LabelSpaceSpec::hierarchical(k, std::move(partition));
  s.n_server_per_class = 1;
  s.clients = 2;
  s.per_client = per_client;
  s.test_per_class = 1;
  s.xi = xi;
  s.seed = seed;
  return shrink(gen_gaussian_clusters(s));
}

Matrix stacked_inputs(const FederatedDataset& data) {
  std::vector<const LabeledBatch*> parts;
  for (const auto& b : data.client_sets) parts.push_back(&b);
  for (const auto& b : data.server_sets) parts.push_back(&b);
  Eigen::Index rows = 0;
  for (auto* b : parts) rows += b->inputs.rows();
  Matrix x(rows, parts.front()->inputs.cols());
  Eigen::Index r = 0;
  for (auto* b : parts) x.middleRows(r, b->inputs.rows()) = b->inputs, r += b->inputs.rows();
  return x;
}

}  // namespace

TEST_CASE("identity projections give the plain kernel") {
  const auto data = tiny(3, {1, 1, 1}, 0.0, 4, 1);
  const auto net = TwoLayerReluNet::init(3, 64, 3, 2);
  const auto g = build_gram(net, data, data.q, data.t);
  CHECK((g.prefactors.array() == 1.0).all());
  const Matrix ref = oracle::plain_kernel(net, stacked_inputs(data));
  CHECK((g.dense - ref).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(g.samples == 11);
  CHECK(g.dense.rows() == 33);
  CHECK(g.participant_sizes == std::vector<std::size_t>{4, 4, 3});
  CHECK(g.dense.allFinite());
}

TEST_CASE("weighted Gram is the plain kernel with column prefactors") {
  const auto data = tiny(4, {3, 1}, 0.3, 3, 2);
  const auto net = TwoLayerReluNet::init(3, 32, 4, 3);
  const auto g = build_gram(net, data, data.q, data.t);
  const Matrix ref = oracle::plain_kernel(net, stacked_inputs(data));
  const Vector wq = data.q.pinv().rowwise().sum();
  const Vector wt = data.t.pinv().rowwise().sum();
  const auto n = static_cast<Eigen::Index>(g.samples);
  for (Eigen::Index col = 0; col < g.dense.cols(); ++col) {
    const Eigen::Index m = col / n, q = col % n;
    const double w = q < 6 ? wq(m) : wt(m);
    CHECK((g.dense.col(col) - w * ref.col(col)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  CHECK(wq(0) == doctest::Approx(1.0 / 3));
  CHECK(asymmetry_norm(g.dense) > 0.0);
}

TEST_CASE("single class collapses to a zero kernel") {
  const auto data = tiny(1, {1}, 0.0, 3, 3);
  const auto net = TwoLayerReluNet::init(3, 16, 1, 4);
  const auto g = build_gram(net, data, data.q, data.t);
  const Matrix ref = oracle::plain_kernel(net, stacked_inputs(data));
  CHECK((g.dense - g.prefactors(0, 0) * ref).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(g.dense.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax Jacobian matches finite differences") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  auto net = TwoLayerReluNet::init(2, 32, 3, 6);
  for (int trial = 0; trial < 10; ++trial) {
    Vector x(2);
    x << n(rng), n(rng);
    const Matrix jac = softmax_jacobian(net, x);
    CHECK((jac - oracle::softmax_jacobian(net, x)).cwiseAbs().maxCoeff() <= 1e-14);
    for (Eigen::Index l = 0; l < 3; ++l) {
      auto gl = [&](const Vector& p) {
        auto copy = net;
        copy.parameters() = p;
        return softmax_rows(copy.forward(x.transpose()))(0, l);
      };
      const Vector fd = oracle::gradient(gl, net.parameters(), 1e-6);
      CHECK(oracle::relative_error(jac.row(l).transpose(), fd) < 1e-4);
    }
  }
}

TEST_CASE("min eigenvalue examples") {
  CHECK(min_eigenvalue(Matrix::Identity(4, 4)) == doctest::Approx(1.0));
  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 3, 1, 2;
  CHECK(min_eigenvalue(d) == doctest::Approx(1.0));
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix b(5, 5);
    for (Eigen::Index i = 0; i < 25; ++i) b.data()[i] = n(rng);
    const Matrix a = b * b.transpose();
    CHECK(std::abs(min_eigenvalue(a) - oracle::min_eigenvalue_by_charpoly(a)) <= 1e-8 * std::max(1.0, a.norm()));
  }
  Matrix bad = Matrix::Identity(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(min_eigenvalue(bad), Error);
}

TEST_CASE("identifiable eigenvalue is the spectrum of G on the identifiable subspace") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto data = tiny(3, {2, 1}, 0.2, 1, seed);
    const auto net = TwoLayerReluNet::init(3, 256, 3, seed + 10);
    const auto g = build_gram(net, data, data.q, data.t);
    REQUIRE(g.samples == 5);
    const Matrix v = identifiable_basis(3, g.samples);
    CHECK((v.transpose() * v - Matrix::Identity(v.cols(), v.cols())).cwiseAbs().maxCoeff() < 1e-14);
    // Range of G lies in the identifiable subspace.
    CHECK((g.dense - v * v.transpose() * g.dense).cwiseAbs().maxCoeff() < 1e-12);
    const Matrix restricted = v.transpose() * g.dense * v;
    const double ref = oracle::smallest_eigenvalue_by_inverse_iteration(restricted);
    const double lam = identifiable_min_eigenvalue(g);
    CHECK(std::abs(lam - ref) <= 1e-6 * ref);
    CHECK(lam > 0.0);
  }
}

TEST_CASE("property: identifiable eigenvalue is non-negative for positive prefactors") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = tiny(4, {2, 2}, 0.1 * static_cast<double>(seed % 4), 3, seed);
    const auto net = TwoLayerReluNet::init(3, 128, 4, seed);
    CHECK(identifiable_min_eigenvalue(build_gram(net, data, data.q, data.t)) >= -1e-12);
  }
}

TEST_CASE("Gram side cap") {
  const auto data = tiny(3, {1, 1, 1}, 0.0, 4, 1);
  const auto net = TwoLayerReluNet::init(3, 8, 3, 2);
  try {
    build_gram(net, data, data.q, data.t, 32);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooLarge);
  }
}

TEST_CASE("rate envelope counterexamples") {
  // rho = 1 - 1 * 0.02 * 1 * 1 / 2 = 0.99.
  const std::vector<double> flat(30, 1.0);
  const auto env = rate_envelope(flat, 1.0, 0.02, 1, 1, 1.0, 0.1);
  CHECK(env.rho_theory == doctest::Approx(0.99));
  CHECK_FALSE(env.holds);
  std::size_t first = 0;
  while (std::pow(0.99, first) * 1.1 >= 1.0) ++first;
  CHECK(env.first_violation == first);
  CHECK(env.fitted_rate == doctest::Approx(1.0));

  std::vector<double> fast;
  for (int r = 0; r < 30; ++r) fast.push_back(std::pow(0.5, r));
  const auto ok = rate_envelope(fast, 1.0, 0.2, 1, 1, 1.0);
  CHECK(ok.rho_theory == doctest::Approx(0.9));
  CHECK(ok.holds);
  CHECK(ok.fitted_rate == doctest::Approx(0.5));
  CHECK(ok.worst_ratio == doctest::Approx(1.0));

  CHECK_THROWS_AS(rate_envelope(fast, 1.0, 0.0, 1, 1, 1.0), Error);
  CHECK_THROWS_AS(rate_envelope(fast, 1.0, 4.0, 1, 1, 1.0), Error);
  CHECK_THROWS_AS(rate_envelope({1.0}, 1.0, 0.2, 1, 1, 1.0), Error);
}

TEST_CASE("corollary checks on K=8") {
  SyntheticTaskSpec s;
  s.d = 10;
  s.k = 8;
  s.space = LabelSpaceSpec::hierarchical(8, {4, 4});
  s.n_server_per_class = 1;
  s.clients = 2;
  s.per_client = 2;
  s.seed = 3;
  const auto data = shrink(gen_gaussian_clusters(s));
  const auto net = TwoLayerReluNet::init(10, 256, 8, 4);
  const auto rep = corollary_checks(net, data, 8, {{8}, std::vector<std::size_t>(8, 1)}, {0.0, 0.2, 0.4});
  REQUIRE(rep.bound_by_j.size() == 2);
  CHECK(rep.bound_by_j[1].second == doctest::Approx(8.0 * rep.bound_by_j[0].second));
  CHECK(rep.bound_by_j[0].second == doctest::Approx(rep.lambda0 / 8));
  CHECK(rep.lambda0 == doctest::Approx(unweighted_lambda0(net, data)));
  for (const auto& c : rep.bound_checks) {
    INFO(c.name << ": " << c.lhs << " vs " << c.rhs);
    CHECK(c.pass);
  }
  CHECK(rep.all_pass());
  const auto j = to_json(rep);
  for (const char* key : {"lambda_by_J", "lambda_by_xi", "asymmetry_norm", "bound_checks", "lambda0"})
    CHECK(j.contains(key));
  CHECK(j.at("lambda_by_xi").size() == 3);
}

TEST_CASE("trivial partition reproduces the identity Gram") {
  const auto data = tiny(4, {2, 2}, 0.0, 3, 9);
  const auto net = TwoLayerReluNet::init(3, 64, 4, 9);
  const auto q = build_hierarchical_q(LabelSpaceSpec::hierarchical(4, {1, 1, 1, 1}));
  const auto id = ProjectionMatrix::identity(4, MatrixRole::LabelSpaceMap);
  const auto a = build_gram(net, data, q, data.t);
  const auto b = build_gram(net, data, id, data.t);
  CHECK((a.dense.array() == b.dense.array()).all());
}

TEST_CASE("server prefactors ignore the noise level") {
  const auto data = tiny(5, {3, 2}, 0.0, 3, 10);
  const auto net = TwoLayerReluNet::init(3, 64, 5, 10);
  double lo = 1e300, hi = -1e300;
  for (double xi : {0.0, 0.2, 0.4, 0.7}) {
    const auto t = build_symmetric_noise_t(5, xi);
    CHECK((t.class_weights().array() - 1.0).abs().maxCoeff() <= 1e-12);
    const double lam = identifiable_min_eigenvalue(build_gram(net, data, data.q, t));
    lo = std::min(lo, lam), hi = std::max(hi, lam);
  }
  CHECK((hi - lo) / hi <= 1e-9);
}
