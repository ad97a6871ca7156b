#include "fedmt/ntk.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/Eigenvalues>

#include "fedmt/error.hpp"

namespace fedmt {
namespace {

// B(l, n) = 1[u_n . x > 0] g_l (a_ln - sum_k g_k a_kn); grad_u g_l(x) is
// x B(l, :) / sqrt(M).
Matrix jacobian_factor(const TwoLayerReluNet& net, const Vector& x) {
  const Matrix logits = net.forward(x.transpose());
  const Vector g = softmax_rows(logits).row(0).transpose();
  const Matrix& a = net.signs();
  const Vector pre = net.hidden().transpose() * x;
  const Eigen::RowVectorXd mean_sign = g.transpose() * a;  // sum_k g_k a_kn
  Matrix b(a.rows(), a.cols());
  for (Eigen::Index n = 0; n < a.cols(); ++n) {
    const bool active = pre(n) > 0.0;
    for (Eigen::Index l = 0; l < a.rows(); ++l) b(l, n) = active ? g(l) * (a(l, n) - mean_sign(n)) : 0.0;
  }
  return b;
}

Matrix stack_inputs(const FederatedDataset& data, std::vector<std::size_t>& sizes) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto& b : data.client_sets) rows += b.inputs.rows(), cols = b.inputs.cols();
  for (const auto& b : data.server_sets) rows += b.inputs.rows(), cols = b.inputs.cols();
  Matrix x(rows, cols);
  Eigen::Index r = 0;
  auto append = [&](const LabeledBatch& b) {
    x.middleRows(r, b.inputs.rows()) = b.inputs;
    r += b.inputs.rows();
    sizes.push_back(b.size());
  };
  for (const auto& b : data.client_sets) append(b);
  for (const auto& b : data.server_sets) append(b);
  return x;
}

std::string key(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Matrix softmax_jacobian(const TwoLayerReluNet& net, const Vector& x) {
  const Matrix b = jacobian_factor(net, x);
  const auto d = x.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(net.width()));
  Matrix out(b.rows(), d * b.cols());
  for (Eigen::Index l = 0; l < b.rows(); ++l)
    for (Eigen::Index n = 0; n < b.cols(); ++n)
      for (Eigen::Index i = 0; i < d; ++i) out(l, i + d * n) = x(i) * b(l, n) * scale;
  return out;
}

Matrix jacobian_gram(const TwoLayerReluNet& net, const Matrix& x, const Matrix& prefactors) {
  const auto n = x.rows();
  const auto k = static_cast<Eigen::Index>(net.classes());
  require(prefactors.rows() == n && prefactors.cols() == k, ErrorCode::ShapeMismatch, "prefactors must be N x K");
  Matrix stacked(k * n, static_cast<Eigen::Index>(net.width()));
  for (Eigen::Index p = 0; p < n; ++p) {
    const Matrix b = jacobian_factor(net, x.row(p).transpose());
    for (Eigen::Index l = 0; l < k; ++l) stacked.row(l * n + p) = b.row(l);
  }
  const Matrix inner = x * x.transpose() / static_cast<double>(net.width());
  Matrix g = stacked * stacked.transpose();
  for (Eigen::Index col = 0; col < k * n; ++col) {
    const Eigen::Index m = col / n, q = col % n;
    for (Eigen::Index row = 0; row < k * n; ++row) g(row, col) *= inner(row % n, q) * prefactors(q, m);
  }
  return g;
}

GramMatrix build_gram(const TwoLayerReluNet& net, const FederatedDataset& data, const ProjectionMatrix& q,
                      const ProjectionMatrix& t, std::size_t max_side) {
  const std::size_t k = net.classes();
  require(q.cols() == k && t.cols() == k, ErrorCode::ShapeMismatch, "Q and T must have K columns");
  GramMatrix out;
  const Matrix x = stack_inputs(data, out.participant_sizes);
  out.classes = k;
  out.samples = static_cast<std::size_t>(x.rows());
  require(out.samples * k <= max_side, ErrorCode::TooLarge,
          "Gram side " + std::to_string(out.samples * k) + " exceeds the cap " + std::to_string(max_side));
  const Vector wq = q.class_weights();
  const Vector wt = t.class_weights();
  std::size_t client_rows = 0;
  for (const auto& b : data.client_sets) client_rows += b.size();
  out.prefactors.resize(x.rows(), static_cast<Eigen::Index>(k));
  for (Eigen::Index p = 0; p < x.rows(); ++p)
    out.prefactors.row(p) = static_cast<std::size_t>(p) < client_rows ? wq.transpose() : wt.transpose();
  out.dense = jacobian_gram(net, x, out.prefactors);
  return out;
}

double min_eigenvalue(const Matrix& g) {
  require(g.rows() == g.cols() && g.rows() > 0, ErrorCode::ShapeMismatch, "eigenvalues need a square matrix");
  require(g.allFinite(), ErrorCode::InvalidArgument, "matrix has non-finite entries");
  const Matrix sym = 0.5 * (g + g.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym, Eigen::EigenvaluesOnly);
  require(solver.info() == Eigen::Success, ErrorCode::ConvergenceFailure, "eigensolver did not converge");
  return solver.eigenvalues().minCoeff();
}

Matrix identifiable_basis(std::size_t classes, std::size_t samples) {
  const auto k = static_cast<Eigen::Index>(classes);
  const auto n = static_cast<Eigen::Index>(samples);
  Matrix v = Matrix::Zero(k * n, (k - 1) * n);
  // Helmert contrasts over the class index, one block per sample.
  for (Eigen::Index r = 1; r < k; ++r) {
    const double norm = std::sqrt(static_cast<double>(r * (r + 1)));
    for (Eigen::Index p = 0; p < n; ++p) {
      const Eigen::Index col = (r - 1) * n + p;
      for (Eigen::Index l = 0; l < r; ++l) v(l * n + p, col) = 1.0 / norm;
      v(r * n + p, col) = -static_cast<double>(r) / norm;
    }
  }
  return v;
}

double identifiable_min_eigenvalue(const GramMatrix& g) {
  if (g.classes < 2) return 0.0;
  const Matrix v = identifiable_basis(g.classes, g.samples);
  const auto n = static_cast<Eigen::Index>(g.samples);
  const auto side = g.dense.rows();
  Vector d(side);
  for (Eigen::Index col = 0; col < side; ++col) d(col) = g.prefactors(col % n, col / n);
  if (d.minCoeff() > 0.0) {
    // G = K D with K the unweighted kernel, whose range lies in the
    // identifiable subspace. On that subspace G acts as K_s D_s, which is
    // similar to D_s^{1/2} K_s D_s^{1/2}.
    const Matrix kernel = g.dense * d.cwiseInverse().asDiagonal();
    const Matrix ks = v.transpose() * (0.5 * (kernel + kernel.transpose())) * v;
    const Matrix ds = v.transpose() * d.asDiagonal() * v;
    Eigen::SelfAdjointEigenSolver<Matrix> dsolve(ds);
    require(dsolve.info() == Eigen::Success, ErrorCode::ConvergenceFailure, "eigensolver did not converge");
    const Matrix root = dsolve.operatorSqrt();
    return min_eigenvalue(Matrix(root * ks * root));
  }
  // Mixed-sign prefactors: fall back to the spectrum of V^T G V itself.
  Eigen::EigenSolver<Matrix> solver(v.transpose() * g.dense * v, false);
  require(solver.info() == Eigen::Success, ErrorCode::ConvergenceFailure, "eigensolver did not converge");
  return solver.eigenvalues().real().minCoeff();
}

double asymmetry_norm(const Matrix& g) { return (g - g.transpose()).norm(); }

RateEnvelope rate_envelope(const std::vector<double>& losses, double eta_agg, double eta_sgd, std::size_t t,
                           std::size_t c, double lambda, double slack) {
  require(losses.size() >= 2, ErrorCode::InvalidArgument, "need at least two rounds");
  require(c >= 1, ErrorCode::InvalidArgument, "C must be positive");
  RateEnvelope out;
  out.rho_theory = 1.0 - eta_agg * eta_sgd * lambda * static_cast<double>(t) / (2.0 * static_cast<double>(c));
  require(out.rho_theory > 0.0 && out.rho_theory < 1.0, ErrorCode::InvalidRate,
          "theoretical rate " + key(out.rho_theory) + " is outside (0, 1)");
  out.holds = true;
  double bound = losses.front();
  for (std::size_t r = 0; r < losses.size(); ++r) {
    if (r > 0) bound *= out.rho_theory;
    const double ratio = losses[r] / bound;
    out.worst_ratio = std::max(out.worst_ratio, ratio);
    if (out.holds && !(losses[r] <= bound * (1.0 + slack))) {
      out.holds = false;
      out.first_violation = r;
    }
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0, m = 0;
  for (std::size_t r = 0; r < losses.size(); ++r) {
    if (!(losses[r] > 0.0)) continue;
    const double xr = static_cast<double>(r), yr = std::log(losses[r]);
    sx += xr, sy += yr, sxx += xr * xr, sxy += xr * yr, m += 1;
  }
  const double denom = m * sxx - sx * sx;
  out.fitted_rate = m >= 2 && denom > 0 ? std::exp((m * sxy - sx * sy) / denom) : 1.0;
  return out;
}

bool CorollaryReport::all_pass() const {
  return std::all_of(bound_checks.begin(), bound_checks.end(), [](const BoundCheck& b) { return b.pass; });
}

double unweighted_lambda0(const TwoLayerReluNet& net, const FederatedDataset& data) {
  require(!data.client_sets.empty(), ErrorCode::InvalidArgument, "lambda_0 needs client data");
  const auto k = static_cast<Eigen::Index>(net.classes());
  double best = std::numeric_limits<double>::infinity();
  for (const auto& b : data.client_sets) {
    GramMatrix g;
    g.classes = net.classes();
    g.samples = b.size();
    g.prefactors = Matrix::Ones(b.inputs.rows(), k);
    g.dense = jacobian_gram(net, b.inputs, g.prefactors);
    best = std::min(best, identifiable_min_eigenvalue(g));
  }
  return best;
}

CorollaryReport corollary_checks(const TwoLayerReluNet& net, const FederatedDataset& data, std::size_t k,
                                 const std::vector<std::vector<std::size_t>>& partitions,
                                 const std::vector<double>& xis, double xi_for_partitions, std::size_t max_side) {
  require(net.classes() == k, ErrorCode::ShapeMismatch, "network outputs must equal K");
  CorollaryReport rep;
  rep.lambda0 = unweighted_lambda0(net, data);

  const ProjectionMatrix t0 = build_symmetric_noise_t(k, xi_for_partitions);
  struct Balanced {
    std::size_t j;
    double bound;
  };
  std::vector<Balanced> balanced;
  for (const auto& sizes : partitions) {
    const auto spec = LabelSpaceSpec::hierarchical(k, sizes);
    const auto q = build_hierarchical_q(spec);
    const GramMatrix g = build_gram(net, data, q, t0, max_side);
    const double lambda = identifiable_min_eigenvalue(g);
    const std::size_t j = sizes.size();
    const std::size_t widest = *std::max_element(sizes.begin(), sizes.end());
    const double bound = rep.lambda0 / static_cast<double>(widest);
    rep.lambda_by_j.emplace_back(j, lambda);
    rep.bound_by_j.emplace_back(j, bound);
    rep.asymmetry_norm = std::max(rep.asymmetry_norm, asymmetry_norm(g.dense));
    rep.bound_checks.push_back({"lambda(J=" + std::to_string(j) + ") <= lambda0 / max_j k_j", lambda, bound + 1e-8,
                                lambda <= bound + 1e-8});
    if (std::all_of(sizes.begin(), sizes.end(), [&](std::size_t s) { return s == sizes.front(); }))
      balanced.push_back({j, bound});
  }
  std::sort(balanced.begin(), balanced.end(), [](const Balanced& a, const Balanced& b) { return a.j < b.j; });
  for (std::size_t i = 1; i < balanced.size(); ++i) {
    rep.bound_checks.push_back({"bound(J=" + std::to_string(balanced[i - 1].j) + ") <= bound(J=" +
                                    std::to_string(balanced[i].j) + ")",
                                balanced[i - 1].bound, balanced[i].bound, balanced[i - 1].bound <= balanced[i].bound});
  }

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double xi : xis) {
    const ProjectionMatrix t = build_symmetric_noise_t(k, xi);
    const double prefactor_err = (t.class_weights().array() - 1.0).abs().maxCoeff();
    rep.bound_checks.push_back({"server prefactor at xi=" + key(xi) + " equals 1", prefactor_err, 1e-12,
                                prefactor_err <= 1e-12});
    const GramMatrix g = build_gram(net, data, data.q, t, max_side);
    const double lambda = identifiable_min_eigenvalue(g);
    rep.lambda_by_xi.emplace_back(xi, lambda);
    rep.asymmetry_norm = std::max(rep.asymmetry_norm, asymmetry_norm(g.dense));
    lo = std::min(lo, lambda);
    hi = std::max(hi, lambda);
  }
  if (xis.size() >= 2) {
    const double spread = (hi - lo) / std::max(std::abs(hi), std::numeric_limits<double>::min());
    rep.bound_checks.push_back({"relative lambda spread over xi", spread, 1e-9, spread <= 1e-9});
  }
  return rep;
}

nlohmann::json to_json(const CorollaryReport& report) {
  nlohmann::json by_j = nlohmann::json::object();
  for (const auto& [j, l] : report.lambda_by_j) by_j[std::to_string(j)] = l;
  nlohmann::json bound_j = nlohmann::json::object();
  for (const auto& [j, b] : report.bound_by_j) bound_j[std::to_string(j)] = b;
  nlohmann::json by_xi = nlohmann::json::object();
  for (const auto& [xi, l] : report.lambda_by_xi) by_xi[key(xi)] = l;
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : report.bound_checks)
    checks.push_back({{"name", c.name}, {"lhs", c.lhs}, {"rhs", c.rhs}, {"pass", c.pass}});
  return {{"lambda_by_J", by_j},
          {"bound_by_J", bound_j},
          {"lambda_by_xi", by_xi},
          {"lambda0", report.lambda0},
          {"asymmetry_norm", report.asymmetry_norm},
          {"bound_checks", checks}};
}

}  // namespace fedmt
