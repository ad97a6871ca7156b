#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedmt/datagen.hpp"
#include "fedmt/losses.hpp"
#include "fedmt/model.hpp"

namespace fedmt {

enum class Strategy { FedAvg, FedMT_P, FedMT_L, Single, FedTrans, FedRep };
enum class Weighting { Equal, ServerHalf, Custom };
enum class Objective { CrossEntropy, WeightedMse };

/// Mean: global + eta_agg * sum_l w_l delta_l.
/// Literal: global - eta_agg * sum_l delta_l (the unweighted rule as written
/// in the classical FedAvg pseudo-code; kept for ablation only).
enum class AggregationRule { Mean, Literal };

struct FederationConfig {
  std::size_t rounds = 10;  // R
  double eta_agg = 1.0;
  SgdConfig sgd;
  Strategy strategy = Strategy::FedMT_P;
  Weighting weighting = Weighting::Equal;
  std::vector<double> custom_weights;  // used with Weighting::Custom
  Objective objective = Objective::CrossEntropy;
  AggregationRule rule = AggregationRule::Mean;
  std::size_t pretrain_rounds = 10;  // FedTrans
  std::size_t finetune_epochs = 10;  // FedTrans, rounds of t server steps
};

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct RoundTrace {
  std::size_t round = 0;
  double overall_loss = 0.0;
  std::vector<double> participant_losses;
  double test_accuracy = 0.0;  // NaN while the model cannot predict the desired space
  std::size_t wall_steps = 0;
};

/// One participant of a round: its data and the loss it minimises locally.
struct Participant {
  const LabeledBatch* data;
  LossKind loss;
};

/// Participants are ordered clients first, then servers. `models[l]` is the
/// model of participant l; all of them agree with `global` on the shared
/// prefix after every broadcast. Outside split-head training the shared
/// prefix is the whole parameter vector.
struct FederationState {
  Vector global;
  std::size_t shared = 0;
  std::vector<Network> models;
  std::size_t eval_index = 0;
  std::uint64_t seed = 0;
  std::vector<BatchSampler> samplers;  // created on the first round
  std::size_t round = 0;
  std::size_t wall_steps = 0;
  std::vector<RoundTrace> trace;

  const Network& global_model() const { return models.at(eval_index); }
};

/// Fresh state with every participant holding a copy of `init`.
FederationState make_state(const Network& init, std::size_t participants, std::uint64_t seed,
                           std::size_t eval_index = 0);

/// Equal: 1/(C+S) each. ServerHalf: 0.5 shared by the servers, 0.5 by the
/// clients. Custom: `custom`, which must sum to 1.
std::vector<double> participant_weights(Weighting w, std::size_t clients, std::size_t servers,
                                        const std::vector<double>& custom = {});

/// global + eta_agg * sum_l weights_l * deltas_l, summed in participant order.
Vector aggregate(const Vector& global, const std::vector<Vector>& deltas, const std::vector<double>& weights,
                 double eta_agg);

/// Loss kinds for the FedMT participants of `data`, clients then servers.
std::vector<Participant> fedmt_participants(const FederatedDataset& data, Strategy strategy, Objective objective);

/// Plain cross-entropy participants over `sets`.
std::vector<Participant> fedavg_participants(const std::vector<LabeledBatch>& sets);

/// Runs t local steps per participant, aggregates, broadcasts and appends a
/// trace row. Returns the aggregated update global' - global.
Vector run_round(FederationState& state, const std::vector<Participant>& participants,
                 const std::vector<double>& weights, const FederationConfig& cfg, const LabeledBatch* test);

/// Evaluates participant losses at the current models and test accuracy.
RoundTrace evaluate(const FederationState& state, const std::vector<Participant>& participants,
                    const std::vector<double>& weights, const LabeledBatch* test);

/// Appends the evaluation of the current state to its trace.
void record(FederationState& state, const std::vector<Participant>& participants,
            const std::vector<double>& weights, const LabeledBatch* test);

/// One FedAvg round over `sets` with equal weights and plain cross-entropy.
Vector run_round_fedavg(FederationState& state, const std::vector<LabeledBatch>& sets, const FederationConfig& cfg,
                        const LabeledBatch* test = nullptr);

/// One FedMT round over clients and all servers of `data`.
Vector run_round_fedmt(FederationState& state, const FederatedDataset& data, const FederationConfig& cfg);

/// One FedMT round that requires at least two servers.
Vector run_multi_server(FederationState& state, const FederatedDataset& data, const FederationConfig& cfg);

/// Full training run for any strategy: round 0 is the evaluation at `init`.
std::vector<RoundTrace> run_federation(const FederatedDataset& data, const FederationConfig& cfg,
                                       const Network& init, std::uint64_t seed);

/// Single, FedTrans or FedRep.
std::vector<RoundTrace> run_baseline(Strategy strategy, const FederatedDataset& data, const FederationConfig& cfg,
                                     const Network& init, std::uint64_t seed);

/// Fraction of `test` predicted correctly by argmax of the model outputs.
double accuracy(const Network& net, const LabeledBatch& test);

void write_trace_csv(std::ostream& os, const std::vector<RoundTrace>& trace);
void write_trace_jsonl(std::ostream& os, const std::vector<RoundTrace>& trace);
nlohmann::json trace_row_to_json(const RoundTrace& row);

}  // namespace fedmt
