#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fedmt/linalg.hpp"

namespace fedmt {

enum class MatrixRole { LabelSpaceMap, NoiseMap };

/// A label-space correspondence Q (J x K) or a noise transition T (K x K)
/// together with its Moore-Penrose pseudo-inverse (K x J, or K x K).
///
/// Rows index the observed label space and columns the desired space, so
/// entry (j, k) is the mixing weight of desired class k for observed class j.
/// The pseudo-inverse is laid out desired x observed.
///
/// Construction validates the entries and checks Q * pinv * Q == Q; after
/// that the object is immutable and safe to share between threads.
class ProjectionMatrix {
 public:
  /// Validates `entries` for `role` and computes the pseudo-inverse by SVD.
  static ProjectionMatrix from_entries(Matrix entries, MatrixRole role);

  /// Same as from_entries but with a known closed-form pseudo-inverse, which
  /// is still checked against the Penrose identity.
  static ProjectionMatrix with_pinv(Matrix entries, Matrix pinv, MatrixRole role);

  static ProjectionMatrix identity(std::size_t k, MatrixRole role);

  std::size_t rows() const { return static_cast<std::size_t>(entries_.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(entries_.cols()); }
  MatrixRole role() const { return role_; }
  const Matrix& entries() const { return entries_; }
  const Matrix& pinv() const { return pinv_; }

  /// Per desired-class weight sum_j pinv(k, j): the prefactor that the
  /// weighted-MSE loss and the NTK Gram blocks attach to class k.
  Vector class_weights() const { return pinv_.rowwise().sum(); }

 private:
  ProjectionMatrix(Matrix entries, Matrix pinv, MatrixRole role);

  Matrix entries_;
  Matrix pinv_;
  MatrixRole role_;
};

struct HierarchicalPartition {
  std::vector<std::size_t> sizes;  // k_1..k_J
};

struct OverlappingMap {
  Matrix q;  // J x K
};

/// Desired space with K classes, other space with J classes and the way the
/// two correspond.
class LabelSpaceSpec {
 public:
  static LabelSpaceSpec hierarchical(std::size_t k, std::vector<std::size_t> sizes);
  static LabelSpaceSpec overlapping(Matrix q);

  std::size_t desired_classes() const { return k_; }
  std::size_t other_classes() const { return j_; }
  bool is_hierarchical() const { return std::holds_alternative<HierarchicalPartition>(kind_); }
  const std::variant<HierarchicalPartition, OverlappingMap>& kind() const { return kind_; }

 private:
  LabelSpaceSpec(std::size_t k, std::size_t j, std::variant<HierarchicalPartition, OverlappingMap> kind)
      : k_(k), j_(j), kind_(std::move(kind)) {}

  std::size_t k_;
  std::size_t j_;
  std::variant<HierarchicalPartition, OverlappingMap> kind_;
};

/// Block 0/1 matrix with closed-form pinv: column j of the pinv holds 1/k_j
/// on block j. With `row_stochastic` the rows are normalised to sum to one
/// instead (pinv then holds ones on the blocks).
ProjectionMatrix build_hierarchical_q(const LabelSpaceSpec& spec, bool row_stochastic = false);

/// T = (1 - xi) on the diagonal and xi/(K-1) elsewhere; inverse by Woodbury.
ProjectionMatrix build_symmetric_noise_t(std::size_t k, double xi);

/// The two overlapping severity maps used for the tremor task (K = 5 or 10).
ProjectionMatrix build_semg_q(std::size_t k);

/// Generic Moore-Penrose inverse through SVD, relative cutoff 1e-10.
Matrix pseudo_inverse(const Matrix& m);
inline Matrix pseudo_inverse(const ProjectionMatrix& m) { return pseudo_inverse(m.entries()); }

/// Largest violation of the four Penrose identities.
double penrose_residual(const Matrix& a, const Matrix& pinv);

/// Balanced partition of K classes into J consecutive blocks.
std::vector<std::size_t> balanced_partition(std::size_t k, std::size_t j);

nlohmann::json to_json(const ProjectionMatrix& m);
ProjectionMatrix projection_from_json(const nlohmann::json& j);

}  // namespace fedmt
