#include "fedmt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <type_traits>

#include "fedmt/error.hpp"

namespace fedmt {
namespace {

constexpr double kLogFloor = 1e-300;

void check_logits(const Matrix& logits, const LabeledBatch& batch) {
  require(static_cast<std::size_t>(logits.rows()) == batch.size(), ErrorCode::ShapeMismatch,
          "logits have " + std::to_string(logits.rows()) + " rows for a batch of " + std::to_string(batch.size()));
  require(batch.size() > 0, ErrorCode::ShapeMismatch, "empty batch");
  for (auto y : batch.labels)
    require(y < batch.classes, ErrorCode::ShapeMismatch, "label out of range");
}

void check_projection(const Matrix& logits, const LabeledBatch& batch, const ProjectionMatrix& m) {
  check_logits(logits, batch);
  require(m.rows() == batch.classes, ErrorCode::ShapeMismatch,
          "projection has " + std::to_string(m.rows()) + " rows, labels have " + std::to_string(batch.classes) +
              " classes");
  require(m.cols() == static_cast<std::size_t>(logits.cols()), ErrorCode::ShapeMismatch,
          "projection has " + std::to_string(m.cols()) + " columns, model has " + std::to_string(logits.cols()) +
              " outputs");
}

}  // namespace

void validate_batch(const LabeledBatch& batch) {
  require(static_cast<std::size_t>(batch.inputs.rows()) == batch.labels.size(), ErrorCode::ShapeMismatch,
          "inputs and labels differ in length");
  require(batch.ids.empty() || batch.ids.size() == batch.labels.size(), ErrorCode::ShapeMismatch,
          "ids and labels differ in length");
  for (auto y : batch.labels) require(y < batch.classes, ErrorCode::ShapeMismatch, "label out of range");
}

LabeledBatch select(const LabeledBatch& batch, const std::vector<std::size_t>& idx) {
  LabeledBatch out;
  out.space = batch.space;
  out.classes = batch.classes;
  out.inputs.resize(static_cast<Eigen::Index>(idx.size()), batch.inputs.cols());
  out.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = batch.inputs.row(static_cast<Eigen::Index>(idx[i]));
    out.labels.push_back(batch.labels[idx[i]]);
    if (!batch.ids.empty()) out.ids.push_back(batch.ids[idx[i]]);
  }
  return out;
}

LossValue plain_ce(const Matrix& logits, const LabeledBatch& batch) {
  check_logits(logits, batch);
  require(batch.classes == static_cast<std::size_t>(logits.cols()), ErrorCode::ShapeMismatch,
          "label classes differ from model outputs");
  const Matrix p = softmax_rows(logits);
  LossValue out{0.0, p};
  const auto n = static_cast<double>(batch.size());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto y = static_cast<Eigen::Index>(batch.labels[static_cast<std::size_t>(i)]);
    out.loss += -std::log(std::max(p(i, y), kLogFloor));
    out.grad(i, y) = p(i, y) - 1.0;
  }
  out.loss /= n;
  out.grad /= n;
  return out;
}

LossValue forward_corrected_ce(const Matrix& logits, const LabeledBatch& batch, const ProjectionMatrix& m) {
  check_projection(logits, batch, m);
  const Matrix p = softmax_rows(logits);
  const Matrix& q = m.entries();
  LossValue out{0.0, Matrix(p.rows(), p.cols())};
  const auto n = static_cast<double>(batch.size());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto y = static_cast<Eigen::Index>(batch.labels[static_cast<std::size_t>(i)]);
    double projected = 0.0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) projected += q(y, k) * p(i, k);
    require(projected > kLogFloor && std::isfinite(projected), ErrorCode::NonfiniteLoss,
            "projected probability vanished for sample " + std::to_string(i));
    out.loss += -std::log(projected);
    // d/dz_j of -log(sum_k q_yk p_k) = p_j - q_yj p_j / projected.
    for (Eigen::Index j = 0; j < p.cols(); ++j) out.grad(i, j) = p(i, j) - q(y, j) * p(i, j) / projected;
  }
  out.loss /= n;
  out.grad /= n;
  return out;
}

LossValue backward_corrected_ce(const Matrix& logits, const LabeledBatch& batch, const ProjectionMatrix& m) {
  check_projection(logits, batch, m);
  const Matrix p = softmax_rows(logits);
  const Matrix& pinv = m.pinv();
  LossValue out{0.0, Matrix(p.rows(), p.cols())};
  const auto n = static_cast<double>(batch.size());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto y = static_cast<Eigen::Index>(batch.labels[static_cast<std::size_t>(i)]);
    double weighted_log = 0.0;
    double weight_sum = 0.0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      weighted_log += pinv(k, y) * std::log(std::max(p(i, k), kLogFloor));
      weight_sum += pinv(k, y);
    }
    out.loss += -weighted_log;
    for (Eigen::Index j = 0; j < p.cols(); ++j) out.grad(i, j) = p(i, j) * weight_sum - pinv(j, y);
  }
  require(std::isfinite(out.loss), ErrorCode::NonfiniteLoss, "backward-corrected loss is not finite");
  out.loss /= n;
  out.grad /= n;
  return out;
}

Vector mse_target(const ProjectionMatrix& m, std::size_t label) {
  const auto j = static_cast<Eigen::Index>(label);
  if (m.role() == MatrixRole::NoiseMap) return Vector::Unit(static_cast<Eigen::Index>(m.cols()), j);
  return m.pinv().col(j);
}

LossValue weighted_mse(const Matrix& outputs, const LabeledBatch& batch, const ProjectionMatrix& m) {
  check_projection(outputs, batch, m);
  const Vector w = m.class_weights();
  LossValue out{0.0, Matrix(outputs.rows(), outputs.cols())};
  const auto n = static_cast<double>(batch.size());
  for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
    const Vector target = mse_target(m, batch.labels[static_cast<std::size_t>(i)]);
    for (Eigen::Index k = 0; k < outputs.cols(); ++k) {
      const double r = outputs(i, k) - target(k);
      out.loss += w(k) * r * r;
      out.grad(i, k) = 2.0 * w(k) * r;
    }
  }
  out.loss /= n;
  out.grad /= n;
  return out;
}

Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs) {
  Matrix out(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const double inner = probs.row(i).dot(grad_probs.row(i));
    for (Eigen::Index j = 0; j < probs.cols(); ++j) out(i, j) = probs(i, j) * (grad_probs(i, j) - inner);
  }
  return out;
}

LossValue evaluate_loss(const LossKind& kind, const Matrix& logits, const LabeledBatch& batch) {
  return std::visit(
      [&](const auto& k) -> LossValue {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, PlainCE>) {
          return plain_ce(logits, batch);
        } else if constexpr (std::is_same_v<T, ForwardCorrected>) {
          return forward_corrected_ce(logits, batch, k.m);
        } else if constexpr (std::is_same_v<T, BackwardCorrected>) {
          return backward_corrected_ce(logits, batch, k.m);
        } else {
          const Matrix g = softmax_rows(logits);
          LossValue v = weighted_mse(g, batch, k.m);
          v.grad = softmax_backward(g, v.grad);
          return v;
        }
      },
      kind);
}

}  // namespace fedmt
