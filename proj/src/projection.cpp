#include "fedmt/projection.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "fedmt/error.hpp"

namespace fedmt {
namespace {

constexpr double kRowSumTol = 1e-9;
constexpr double kPenroseTol = 1e-8;
constexpr double kSingularTol = 1e-12;
constexpr double kPinvCutoff = 1e-10;

bool is_zero_one(const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    if (v != 0.0 && v != 1.0) return false;
  }
  return true;
}

void validate(const Matrix& m, MatrixRole role) {
  require(m.rows() > 0 && m.cols() > 0, ErrorCode::InvalidMatrix, "empty projection matrix");
  require(m.allFinite(), ErrorCode::InvalidMatrix, "non-finite entry");
  require(m.minCoeff() >= 0.0 && m.maxCoeff() <= 1.0, ErrorCode::InvalidMatrix,
          "entries must lie in [0, 1]");

  // Hierarchical Q is kept in its 0/1 block form, whose rows sum to k_j.
  const bool block_form = role == MatrixRole::LabelSpaceMap && is_zero_one(m);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double s = m.row(r).sum();
    const bool ok = block_form ? s >= 1.0 : std::abs(s - 1.0) <= kRowSumTol;
    require(ok, ErrorCode::InvalidMatrix, "row " + std::to_string(r) + " sums to " + std::to_string(s));
  }

  if (role == MatrixRole::NoiseMap) {
    require(m.rows() == m.cols(), ErrorCode::InvalidMatrix, "noise matrix must be square");
    Eigen::JacobiSVD<Matrix> svd(m);
    require(svd.singularValues().minCoeff() > kSingularTol, ErrorCode::SingularNoise,
            "noise matrix is singular");
  }
}

}  // namespace

ProjectionMatrix::ProjectionMatrix(Matrix entries, Matrix pinv, MatrixRole role)
    : entries_(std::move(entries)), pinv_(std::move(pinv)), role_(role) {
  require(pinv_.rows() == entries_.cols() && pinv_.cols() == entries_.rows(), ErrorCode::ShapeMismatch,
          "pseudo-inverse must be cols x rows");
  const double residual = (entries_ * pinv_ * entries_ - entries_).cwiseAbs().maxCoeff();
  require(residual <= kPenroseTol, ErrorCode::InvalidMatrix,
          "Q * pinv * Q deviates from Q by " + std::to_string(residual));
}

ProjectionMatrix ProjectionMatrix::from_entries(Matrix entries, MatrixRole role) {
  validate(entries, role);
  Matrix pinv = pseudo_inverse(entries);
  return ProjectionMatrix(std::move(entries), std::move(pinv), role);
}

ProjectionMatrix ProjectionMatrix::with_pinv(Matrix entries, Matrix pinv, MatrixRole role) {
  validate(entries, role);
  return ProjectionMatrix(std::move(entries), std::move(pinv), role);
}

ProjectionMatrix ProjectionMatrix::identity(std::size_t k, MatrixRole role) {
  require(k > 0, ErrorCode::InvalidArgument, "identity of size 0");
  const auto n = static_cast<Eigen::Index>(k);
  return with_pinv(Matrix::Identity(n, n), Matrix::Identity(n, n), role);
}

LabelSpaceSpec LabelSpaceSpec::hierarchical(std::size_t k, std::vector<std::size_t> sizes) {
  require(!sizes.empty(), ErrorCode::PartitionMismatch, "empty partition");
  std::size_t total = 0;
  for (auto s : sizes) {
    require(s >= 1, ErrorCode::PartitionMismatch, "partition block of size 0");
    total += s;
  }
  require(total == k, ErrorCode::PartitionMismatch,
          "partition sums to " + std::to_string(total) + ", expected K = " + std::to_string(k));
  const auto j = sizes.size();
  return LabelSpaceSpec(k, j, HierarchicalPartition{std::move(sizes)});
}

LabelSpaceSpec LabelSpaceSpec::overlapping(Matrix q) {
  // Validates shape and entries through the projection constructor.
  const auto checked = ProjectionMatrix::from_entries(q, MatrixRole::LabelSpaceMap);
  return LabelSpaceSpec(checked.cols(), checked.rows(), OverlappingMap{std::move(q)});
}

ProjectionMatrix build_hierarchical_q(const LabelSpaceSpec& spec, bool row_stochastic) {
  const auto* part = std::get_if<HierarchicalPartition>(&spec.kind());
  require(part != nullptr, ErrorCode::InvalidArgument, "label space is not hierarchical");
  const auto j = static_cast<Eigen::Index>(spec.other_classes());
  const auto k = static_cast<Eigen::Index>(spec.desired_classes());
  Matrix q = Matrix::Zero(j, k);
  Matrix pinv = Matrix::Zero(k, j);
  Eigen::Index col = 0;
  for (Eigen::Index b = 0; b < j; ++b) {
    const auto width = static_cast<double>(part->sizes[static_cast<std::size_t>(b)]);
    for (std::size_t i = 0; i < part->sizes[static_cast<std::size_t>(b)]; ++i, ++col) {
      q(b, col) = row_stochastic ? 1.0 / width : 1.0;
      pinv(col, b) = row_stochastic ? 1.0 : 1.0 / width;
    }
  }
  return ProjectionMatrix::with_pinv(std::move(q), std::move(pinv), MatrixRole::LabelSpaceMap);
}

ProjectionMatrix build_symmetric_noise_t(std::size_t k, double xi) {
  require(k >= 1, ErrorCode::InvalidArgument, "K must be positive");
  if (k == 1) {
    require(xi == 0.0, ErrorCode::SingularNoise, "a single class admits only xi = 0");
    return ProjectionMatrix::identity(1, MatrixRole::NoiseMap);
  }
  const double kd = static_cast<double>(k);
  const double denom = kd - 1.0 - kd * xi;
  require(std::abs(denom) >= 1e-12, ErrorCode::SingularNoise, "K - 1 - K*xi vanishes");
  require(xi >= 0.0 && xi < (kd - 1.0) / kd, ErrorCode::InvalidArgument,
          "xi must lie in [0, (K-1)/K), got " + std::to_string(xi));

  const auto n = static_cast<Eigen::Index>(k);
  const double off = xi / (kd - 1.0);
  const double inv_diag = (kd - 1.0) / denom;
  const double inv_off = xi / denom;
  Matrix t(n, n);
  Matrix pinv(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) {
      t(r, c) = r == c ? 1.0 - xi : off;
      pinv(r, c) = (r == c ? inv_diag - inv_off : -inv_off) + 0.0;
    }
  }
  return ProjectionMatrix::with_pinv(std::move(t), std::move(pinv), MatrixRole::NoiseMap);
}

ProjectionMatrix build_semg_q(std::size_t k) {
  Matrix q;
  if (k == 5) {
    q.resize(3, 5);
    q << 3.0 / 5, 2.0 / 5, 0, 0, 0,
         0, 1.0 / 5, 3.0 / 5, 1.0 / 5, 0,
         0, 0, 0, 2.0 / 5, 3.0 / 5;
  } else if (k == 10) {
    q.resize(3, 10);
    q << 3.0 / 10, 3.0 / 10, 3.0 / 10, 1.0 / 10, 0, 0, 0, 0, 0, 0,
         0, 0, 0, 1.0 / 5, 3.0 / 10, 3.0 / 10, 1.0 / 5, 0, 0, 0,
         0, 0, 0, 0, 0, 0, 1.0 / 10, 3.0 / 10, 3.0 / 10, 3.0 / 10;
  } else {
    fail(ErrorCode::UnsupportedK, "severity map exists for K = 5 or 10, got " + std::to_string(k));
  }
  return ProjectionMatrix::from_entries(std::move(q), MatrixRole::LabelSpaceMap);
}

Matrix pseudo_inverse(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sigma = svd.singularValues();
  const double cutoff = sigma.size() > 0 ? kPinvCutoff * sigma(0) : 0.0;
  Vector inv = Vector::Zero(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > cutoff) inv(i) = 1.0 / sigma(i);
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

double penrose_residual(const Matrix& a, const Matrix& p) {
  const double r1 = (a * p * a - a).cwiseAbs().maxCoeff();
  const double r2 = (p * a * p - p).cwiseAbs().maxCoeff();
  const Matrix ap = a * p;
  const Matrix pa = p * a;
  const double r3 = (ap - ap.transpose()).cwiseAbs().maxCoeff();
  const double r4 = (pa - pa.transpose()).cwiseAbs().maxCoeff();
  return std::max({r1, r2, r3, r4});
}

std::vector<std::size_t> balanced_partition(std::size_t k, std::size_t j) {
  require(j >= 1 && j <= k, ErrorCode::PartitionMismatch, "need 1 <= J <= K");
  std::vector<std::size_t> sizes(j, k / j);
  for (std::size_t i = 0; i < k % j; ++i) ++sizes[i];
  return sizes;
}

nlohmann::json to_json(const ProjectionMatrix& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.entries().rows(); ++r)
    for (Eigen::Index c = 0; c < m.entries().cols(); ++c) entries.push_back(m.entries()(r, c));
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"role", m.role() == MatrixRole::NoiseMap ? "NoiseMap" : "LabelSpaceMap"},
          {"entries", std::move(entries)}};
}

ProjectionMatrix projection_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const auto role_name = j.at("role").get<std::string>();
  require(role_name == "NoiseMap" || role_name == "LabelSpaceMap", ErrorCode::InvalidMatrix,
          "unknown role " + role_name);
  const auto& entries = j.at("entries");
  require(entries.size() == rows * cols, ErrorCode::ShapeMismatch, "entries length != rows * cols");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::size_t idx = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = entries[idx++].get<double>();
  return ProjectionMatrix::from_entries(std::move(m),
                                        role_name == "NoiseMap" ? MatrixRole::NoiseMap : MatrixRole::LabelSpaceMap);
}

}  // namespace fedmt
