#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fedmt/datagen.hpp"
#include "fedmt/federation.hpp"
#include "fedmt/model.hpp"
#include "fedmt/ntk.hpp"

namespace fedmt {

inline constexpr int kConfigSchemaVersion = 1;

struct ModelConfig {
  enum class Kind { Ntk, Mlp };
  Kind kind = Kind::Mlp;
  std::size_t width = 256;                 // ntk
  std::vector<std::size_t> hidden{64};     // mlp
};

struct NtkCheckConfig {
  std::vector<std::vector<std::size_t>> partitions;
  std::vector<double> xis;
  double xi_for_partitions = 0.0;
  std::size_t max_side = 5000;
  double input_scale = 1.0;  // multiplies training inputs before the kernel is built
};

struct ExperimentConfig {
  nlohmann::json raw;
  std::variant<SyntheticTaskSpec, SemgTaskSpec> task;
  ModelConfig model;
  FederationConfig federation;
  std::optional<NtkCheckConfig> ntk_checks;
  std::string output_dir = "runs";
  std::string run_id = "run";
  std::uint64_t seed = 0;
};

/// Parses and validates a config document. Errors are ConfigInvalid and
/// name the offending field, e.g. "federation.rounds: must be >= 1".
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunSummary {
  double final_test_acc = 0.0;
  double best_test_acc = 0.0;
  std::optional<std::size_t> rounds_to_loss_fraction;  // first r with L_r <= 0.1 L_0
};

RunSummary summarize(const std::vector<RoundTrace>& trace, double fraction = 0.1);
nlohmann::json to_json(const RunSummary& s);

/// Append-only record of one run; the summary is always derived from the
/// stored traces.
class MetricsStore {
 public:
  explicit MetricsStore(std::string run_id) : run_id_(std::move(run_id)) {}

  void append(RoundTrace row) { traces_.push_back(std::move(row)); }
  const std::string& run_id() const { return run_id_; }
  const std::vector<RoundTrace>& traces() const { return traces_; }
  RunSummary summary() const { return summarize(traces_); }

  /// Writes trace.csv, trace.jsonl and summary.json into `dir`.
  void write(const std::filesystem::path& dir) const;

 private:
  std::string run_id_;
  std::vector<RoundTrace> traces_;
};

FederatedDataset make_dataset(const ExperimentConfig& cfg);
Network make_network(const ExperimentConfig& cfg, std::size_t input_dim, std::size_t classes);

/// Generates the dataset, runs the configured strategy and, when `persist`,
/// writes the run into output_dir/run_id.
MetricsStore run_experiment(const ExperimentConfig& cfg, bool persist = true);

struct SweepEntry {
  std::string value;
  std::optional<MetricsStore> store;
  std::string error;
};

/// One run per value of `axis` (n, xi, C, J, local_steps or batch). Run i
/// uses seed derive_seed(base seed, "sweep", {i}) and writes to
/// output_dir/<run_id>_<axis>_<i>; failures are recorded and the sweep goes
/// on. Writes sweep_summary.csv into output_dir unless `values` is empty.
std::vector<SweepEntry> run_sweep(const nlohmann::json& base, const std::string& axis,
                                  const std::vector<std::string>& values);

/// Corollary checks on the config's task with an NTK network at init.
CorollaryReport run_ntk_check(const ExperimentConfig& cfg);

/// --out beats the FEDMT_OUTPUT_DIR environment variable, which beats the
/// config value.
std::string resolve_output_dir(const std::optional<std::string>& cli, const std::string& from_config);

}  // namespace fedmt
