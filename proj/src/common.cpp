#include <cmath>
#include <vector>

#include "fedmt/error.hpp"
#include "fedmt/linalg.hpp"
#include "fedmt/rng.hpp"

namespace fedmt {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidMatrix: return "InvalidMatrix";
    case ErrorCode::PartitionMismatch: return "PartitionMismatch";
    case ErrorCode::SingularNoise: return "SingularNoise";
    case ErrorCode::UnsupportedK: return "UnsupportedK";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonfiniteLoss: return "NonfiniteLoss";
    case ErrorCode::DegenerateSpec: return "DegenerateSpec";
    case ErrorCode::DegenerateSignal: return "DegenerateSignal";
    case ErrorCode::InfeasibleSplit: return "InfeasibleSplit";
    case ErrorCode::BadWeights: return "BadWeights";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::InvalidRate: return "InvalidRate";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
  }
  return "Unknown";
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    double total = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      out(i, k) = std::exp(logits(i, k) - top);
      total += out(i, k);
    }
    for (Eigen::Index k = 0; k < logits.cols(); ++k) out(i, k) /= total;
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                          std::initializer_list<std::uint64_t> indices) {
  // FNV-1a over the stream name, then std::seed_seq over everything.
  std::uint64_t tag = 1469598103934665603ULL;
  for (unsigned char c : name) {
    tag ^= c;
    tag *= 1099511628211ULL;
  }
  std::vector<std::uint32_t> words;
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(root);
  push(tag);
  for (auto v : indices) push(v);
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

}  // namespace fedmt
