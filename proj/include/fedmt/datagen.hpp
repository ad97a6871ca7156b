#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"

#include "fedmt/losses.hpp"
#include "fedmt/projection.hpp"
#include "fedmt/rng.hpp"

namespace fedmt {

enum class SplitKind { Iid, NonIid };

/// Gaussian-cluster task: K clusters in R^d, server sets labelled in the
/// desired space (with symmetric noise xi), clients labelled in the other
/// space through Q.
struct SyntheticTaskSpec {
  std::size_t d = 2;
  std::size_t k = 3;
  LabelSpaceSpec space = LabelSpaceSpec::hierarchical(3, {1, 1, 1});
  std::size_t n_server_per_class = 5;  // n, per server
  std::size_t servers = 1;             // S
  std::size_t clients = 2;             // C
  std::size_t per_client = 100;        // N_c
  std::size_t test_per_class = 200;
  double xi = 0.0;
  double separation = 3.0;
  SplitKind split = SplitKind::Iid;
  std::uint64_t seed = 0;
};

/// Tremor-severity task with synthetic signals and the 12 summary features.
struct SemgTaskSpec {
  std::size_t k = 5;
  std::size_t n_server_per_class = 5;
  std::size_t servers = 1;
  std::size_t clients = 2;
  std::size_t per_client = 100;
  std::size_t test_per_class = 50;
  double xi = 0.0;
  SplitKind split = SplitKind::Iid;
  std::size_t signal_length = 2048;
  double sample_rate = 1000.0;
  std::uint64_t seed = 0;
};

struct FederatedDataset {
  std::vector<LabeledBatch> server_sets;  // desired space
  std::vector<LabeledBatch> client_sets;  // other space
  LabeledBatch test_set;                  // desired space, clean labels
  ProjectionMatrix q;
  ProjectionMatrix t;
  nlohmann::json spec;
};

FederatedDataset gen_gaussian_clusters(const SyntheticTaskSpec& spec);

/// Resamples each label from its row of `t`.
std::vector<std::size_t> flip_labels(const std::vector<std::size_t>& labels, const ProjectionMatrix& t,
                                     std::uint64_t seed);

/// Other-space label for desired class k drawn with P(j | k) proportional to
/// Q(j, k).
std::vector<std::size_t> sample_other_labels(const std::vector<std::size_t>& desired, const ProjectionMatrix& q,
                                             Rng& rng);

/// Stratified split into C nearly equal parts.
std::vector<LabeledBatch> split_iid(const LabeledBatch& pool, std::size_t clients, std::uint64_t seed);

/// Each client gets two majority classes holding [0.15, 0.25] of its data and
/// every other class below 0.08. Throws InfeasibleSplit when the pool cannot
/// satisfy the quotas.
std::vector<LabeledBatch> split_noniid(const LabeledBatch& pool, std::size_t clients, std::uint64_t seed);

/// Desired bin and three-way interval of a severity in [0, 5].
struct SeverityLabels {
  std::size_t desired;
  std::size_t other;
};
SeverityLabels severity_labels(double severity, std::size_t k);

/// Synthetic tremor recording of the given severity.
std::vector<double> synth_semg_signal(double severity, std::size_t length, double sample_rate, Rng& rng);

inline constexpr std::size_t kSemgFeatureCount = 12;

/// MAV, MSV, RMS, VAR, STD, WL, WAMP, LOG, SSC, ZC, MSF, MF with threshold 1.
std::array<double, kSemgFeatureCount> extract_semg_features(const std::vector<double>& signal,
                                                            double sample_rate = 1000.0);

FederatedDataset gen_semg_like(const SemgTaskSpec& spec);

/// True when no sample id occurs in two partitions of the dataset.
bool partitions_disjoint(const FederatedDataset& data);

nlohmann::json batch_to_json(const LabeledBatch& batch);
LabeledBatch batch_from_json(const nlohmann::json& j);
nlohmann::json dataset_to_json(const FederatedDataset& data);
FederatedDataset dataset_from_json(const nlohmann::json& j);

}  // namespace fedmt
