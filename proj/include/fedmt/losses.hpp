#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "fedmt/linalg.hpp"
#include "fedmt/projection.hpp"

namespace fedmt {

enum class LabelSpace { Desired, Other };

/// Inputs (one row per sample) with class labels drawn from either the
/// desired space (K classes) or the other space (J classes).
struct LabeledBatch {
  Matrix inputs;                   // N x d
  std::vector<std::size_t> labels;
  LabelSpace space = LabelSpace::Desired;
  std::size_t classes = 0;         // cardinality of `space`
  std::vector<std::size_t> ids;    // global sample ids, used to check disjointness

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }
};

/// Throws ShapeMismatch unless rows/labels/ids agree and labels < classes.
void validate_batch(const LabeledBatch& batch);

/// Rows `idx` of `batch` as a new batch.
LabeledBatch select(const LabeledBatch& batch, const std::vector<std::size_t>& idx);

struct PlainCE {};
struct ForwardCorrected {
  ProjectionMatrix m;
};
struct BackwardCorrected {
  ProjectionMatrix m;
};
struct WeightedMSE {
  ProjectionMatrix m;
};
using LossKind = std::variant<PlainCE, ForwardCorrected, BackwardCorrected, WeightedMSE>;

struct LossValue {
  double loss = 0.0;
  Matrix grad;  // same shape as the argument the loss was taken of
};

/// Mean cross-entropy of softmax(logits) against desired-space labels.
LossValue plain_ce(const Matrix& logits, const LabeledBatch& batch);

/// Mean of -log sum_k M(y, k) softmax(logits)_k.
LossValue forward_corrected_ce(const Matrix& logits, const LabeledBatch& batch, const ProjectionMatrix& m);

/// Mean of -sum_k pinv(k, y) log softmax(logits)_k. May be negative.
LossValue backward_corrected_ce(const Matrix& logits, const LabeledBatch& batch, const ProjectionMatrix& m);

/// Mean over samples of sum_k w_k (target_k - g_k)^2 where g are the softmax
/// outputs, w = m.class_weights() and the target of observed label j is
/// column j of the pseudo-inverse (for a noise map: the one-hot vector e_j).
/// The gradient is taken with respect to `outputs`.
LossValue weighted_mse(const Matrix& outputs, const LabeledBatch& batch, const ProjectionMatrix& m);

/// Target vector that weighted_mse regresses sample label `label` onto.
Vector mse_target(const ProjectionMatrix& m, std::size_t label);

/// Pulls a gradient with respect to softmax outputs back to the logits.
Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs);

/// Loss and logit gradient for any LossKind; WeightedMSE is composed with the
/// softmax here.
LossValue evaluate_loss(const LossKind& kind, const Matrix& logits, const LabeledBatch& batch);

}  // namespace fedmt
