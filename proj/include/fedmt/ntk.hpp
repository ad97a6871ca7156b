#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedmt/datagen.hpp"
#include "fedmt/linalg.hpp"
#include "fedmt/model.hpp"

namespace fedmt {

/// Dense Gram matrix of g = softmax(f) at initialization.
///
/// Samples are ordered clients first, then servers; row and column index
/// (l, p) = l * samples + p for output class l and sample p. Entry
/// ((l, p), (m, q)) is w_q(m) * <grad_u g_l(x_p), grad_u g_m(x_q)>, where the
/// prefactor w_q(m) is the class weight of Q for client samples and of T for
/// server samples.
struct GramMatrix {
  Matrix dense;
  Matrix prefactors;  // samples x K
  std::vector<std::size_t> participant_sizes;
  std::size_t classes = 0;
  std::size_t samples = 0;
};

/// Raw Jacobian Gram <grad g_l(x_p), grad g_m(x_q)> over the rows of `x`,
/// multiplied column-wise by `prefactors` (samples x K).
Matrix jacobian_gram(const TwoLayerReluNet& net, const Matrix& x, const Matrix& prefactors);

/// Gradient of g_l(x) with respect to u for every class l, each laid out like
/// net.hidden() and flattened: a K x (d*M) matrix.
Matrix softmax_jacobian(const TwoLayerReluNet& net, const Vector& x);

GramMatrix build_gram(const TwoLayerReluNet& net, const FederatedDataset& data, const ProjectionMatrix& q,
                      const ProjectionMatrix& t, std::size_t max_side = 5000);

/// Smallest eigenvalue of (G + G^T)/2.
double min_eigenvalue(const Matrix& g);
inline double min_eigenvalue(const GramMatrix& g) { return min_eigenvalue(g.dense); }

/// Orthonormal basis of {v : sum_l v_(l,p) = 0 for every sample p}. The
/// softmax outputs sum to one, so every Jacobian row sum vanishes and the
/// Gram matrix is singular on the complement of this subspace.
Matrix identifiable_basis(std::size_t classes, std::size_t samples);

/// Smallest eigenvalue of G acting on the identifiable subspace; this is the
/// lambda used for the rate envelope and the corollary checks. With positive
/// prefactors G = K D is similar to D^{1/2} K D^{1/2} there, so the spectrum
/// is real and non-negative without symmetrizing.
double identifiable_min_eigenvalue(const GramMatrix& g);

/// ||G - G^T||_F.
double asymmetry_norm(const Matrix& g);

struct RateEnvelope {
  double rho_theory = 0.0;
  double fitted_rate = 0.0;  // least-squares geometric rate of the trace
  bool holds = false;
  std::size_t first_violation = 0;  // round index, meaningful when !holds
  double worst_ratio = 0.0;         // max_r L_r / (rho^r L_0)
};

/// rho = 1 - eta_agg * eta_sgd * lambda * t / (2 C) and the check
/// L_r <= rho^r L_0 (1 + slack) for every r.
RateEnvelope rate_envelope(const std::vector<double>& losses, double eta_agg, double eta_sgd, std::size_t t,
                           std::size_t c, double lambda, double slack = 0.1);

struct BoundCheck {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  bool pass = false;
};

struct CorollaryReport {
  std::vector<std::pair<std::size_t, double>> lambda_by_j;   // (J, lambda)
  std::vector<std::pair<double, double>> lambda_by_xi;       // (xi, lambda)
  std::vector<std::pair<std::size_t, double>> bound_by_j;    // (J, min_j(1/k_j) * lambda0)
  double lambda0 = 0.0;
  double asymmetry_norm = 0.0;
  std::vector<BoundCheck> bound_checks;
  bool all_pass() const;
};

/// Sweeps hierarchical partitions of K and symmetric noise levels on a fixed
/// net and dataset. The dataset's own Q and T are replaced by each sweep
/// value; lambda is the identifiable-subspace eigenvalue throughout.
CorollaryReport corollary_checks(const TwoLayerReluNet& net, const FederatedDataset& data, std::size_t k,
                                 const std::vector<std::vector<std::size_t>>& partitions,
                                 const std::vector<double>& xis, double xi_for_partitions = 0.0,
                                 std::size_t max_side = 5000);

/// lambda_0: per client, the identifiable min eigenvalue of the unweighted
/// Gram over that client's samples; the minimum over clients.
double unweighted_lambda0(const TwoLayerReluNet& net, const FederatedDataset& data);

nlohmann::json to_json(const CorollaryReport& report);

}  // namespace fedmt
