#include "fedmt/federation.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>

#include "fedmt/error.hpp"

namespace fedmt {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

LossKind server_loss(const FederatedDataset& data, Objective objective) {
  if (objective == Objective::WeightedMse) return WeightedMSE{data.t};
  return ForwardCorrected{data.t};
}

std::vector<Participant> single_participants(const FederatedDataset& data, Objective objective) {
  std::vector<Participant> out;
  for (const auto& s : data.server_sets) out.push_back({&s, server_loss(data, objective)});
  return out;
}

const MlpNet& require_mlp(const Network& net, const char* strategy) {
  const auto* mlp = std::get_if<MlpNet>(&net);
  require(mlp != nullptr, ErrorCode::InvalidArgument,
          std::string(strategy) + " replaces the output layer and needs the mlp model");
  return *mlp;
}

// Widens a trace row over a subset of participants to all C + S columns.
RoundTrace place(RoundTrace row, std::size_t total, std::size_t offset) {
  std::vector<double> losses(total, kNaN);
  for (std::size_t i = 0; i < row.participant_losses.size(); ++i) losses[offset + i] = row.participant_losses[i];
  row.participant_losses = std::move(losses);
  return row;
}

FederationConfig local_training(FederationConfig cfg) {
  cfg.eta_agg = 1.0;
  cfg.rule = AggregationRule::Mean;
  return cfg;
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::FedAvg: return "fedavg";
    case Strategy::FedMT_P: return "fedmt_p";
    case Strategy::FedMT_L: return "fedmt_l";
    case Strategy::Single: return "single";
    case Strategy::FedTrans: return "fedtrans";
    case Strategy::FedRep: return "fedrep";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  for (auto v : {Strategy::FedAvg, Strategy::FedMT_P, Strategy::FedMT_L, Strategy::Single, Strategy::FedTrans,
                 Strategy::FedRep})
    if (to_string(v) == s) return v;
  fail(ErrorCode::ConfigInvalid, "unknown strategy '" + s + "'");
}

FederationState make_state(const Network& init, std::size_t participants, std::uint64_t seed,
                           std::size_t eval_index) {
  require(participants >= 1, ErrorCode::InvalidArgument, "need at least one participant");
  require(eval_index < participants, ErrorCode::InvalidArgument, "evaluation index out of range");
  FederationState st;
  st.global = flat_parameters(init);
  st.shared = parameter_count(init);
  st.models.assign(participants, init);
  st.eval_index = eval_index;
  st.seed = seed;
  return st;
}

std::vector<double> participant_weights(Weighting w, std::size_t clients, std::size_t servers,
                                        const std::vector<double>& custom) {
  const std::size_t total = clients + servers;
  require(total >= 1, ErrorCode::BadWeights, "no participants");
  std::vector<double> out(total);
  switch (w) {
    case Weighting::Equal:
      for (auto& v : out) v = 1.0 / static_cast<double>(total);
      break;
    case Weighting::ServerHalf:
      require(clients >= 1 && servers >= 1, ErrorCode::BadWeights, "server-half weighting needs clients and servers");
      for (std::size_t i = 0; i < clients; ++i) out[i] = 0.5 / static_cast<double>(clients);
      for (std::size_t i = clients; i < total; ++i) out[i] = 0.5 / static_cast<double>(servers);
      break;
    case Weighting::Custom:
      require(custom.size() == total, ErrorCode::BadWeights, "custom weights need one entry per participant");
      require(std::abs(std::accumulate(custom.begin(), custom.end(), 0.0) - 1.0) <= 1e-9, ErrorCode::BadWeights,
              "custom weights must sum to 1");
      out = custom;
      break;
  }
  return out;
}

Vector aggregate(const Vector& global, const std::vector<Vector>& deltas, const std::vector<double>& weights,
                 double eta_agg) {
  require(deltas.size() == weights.size(), ErrorCode::ShapeMismatch, "one weight per delta is required");
  double total = 0.0;
  for (double w : weights) {
    require(std::isfinite(w), ErrorCode::BadWeights, "non-finite weight");
    total += w;
  }
  require(std::abs(total - 1.0) <= 1e-9, ErrorCode::BadWeights, "weights sum to " + format_double(total));
  Vector step = Vector::Zero(global.size());
  for (std::size_t l = 0; l < deltas.size(); ++l) {
    require(deltas[l].size() == global.size(), ErrorCode::ShapeMismatch, "delta length differs from the model");
    step += weights[l] * deltas[l];
  }
  return global + eta_agg * step;
}

std::vector<Participant> fedmt_participants(const FederatedDataset& data, Strategy strategy, Objective objective) {
  std::vector<Participant> out;
  for (const auto& c : data.client_sets) {
    if (objective == Objective::WeightedMse) {
      out.push_back({&c, WeightedMSE{data.q}});
    } else if (strategy == Strategy::FedMT_P) {
      out.push_back({&c, ForwardCorrected{data.q}});
    } else if (strategy == Strategy::FedMT_L) {
      out.push_back({&c, BackwardCorrected{data.q}});
    } else {
      fail(ErrorCode::InvalidArgument, "strategy " + to_string(strategy) + " is not a FedMT variant");
    }
  }
  for (const auto& s : data.server_sets) {
    if (objective == Objective::WeightedMse) {
      out.push_back({&s, WeightedMSE{data.t}});
    } else if (strategy == Strategy::FedMT_P) {
      out.push_back({&s, ForwardCorrected{data.t}});
    } else {
      out.push_back({&s, BackwardCorrected{data.t}});
    }
  }
  return out;
}

std::vector<Participant> fedavg_participants(const std::vector<LabeledBatch>& sets) {
  std::vector<Participant> out;
  for (const auto& s : sets) out.push_back({&s, PlainCE{}});
  return out;
}

double accuracy(const Network& net, const LabeledBatch& test) {
  require(test.size() > 0, ErrorCode::InvalidArgument, "empty test set");
  const Matrix out = forward(net, test.inputs);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    Eigen::Index best = 0;
    out.row(i).maxCoeff(&best);
    if (static_cast<std::size_t>(best) == test.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

RoundTrace evaluate(const FederationState& state, const std::vector<Participant>& participants,
                    const std::vector<double>& weights, const LabeledBatch* test) {
  require(participants.size() == state.models.size() && weights.size() == participants.size(),
          ErrorCode::ShapeMismatch, "participants, models and weights must align");
  RoundTrace row;
  row.round = state.round;
  row.wall_steps = state.wall_steps;
  for (std::size_t l = 0; l < participants.size(); ++l) {
    const auto& p = participants[l];
    const Matrix logits = forward(state.models[l], p.data->inputs);
    const double loss = evaluate_loss(p.loss, logits, *p.data).loss;
    row.participant_losses.push_back(loss);
    row.overall_loss += weights[l] * loss;
  }
  const Network& net = state.global_model();
  row.test_accuracy = test != nullptr && output_dim(net) == test->classes ? accuracy(net, *test) : kNaN;
  return row;
}

void record(FederationState& state, const std::vector<Participant>& participants,
            const std::vector<double>& weights, const LabeledBatch* test) {
  state.trace.push_back(evaluate(state, participants, weights, test));
}

Vector run_round(FederationState& state, const std::vector<Participant>& participants,
                 const std::vector<double>& weights, const FederationConfig& cfg, const LabeledBatch* test) {
  require(participants.size() == state.models.size() && weights.size() == participants.size(),
          ErrorCode::ShapeMismatch, "participants, models and weights must align");
  if (state.samplers.size() != participants.size()) {
    state.samplers.clear();
    for (std::size_t l = 0; l < participants.size(); ++l)
      state.samplers.emplace_back(participants[l].data->size(), cfg.sgd.batch_size,
                                  derive_seed(state.seed, "batch", {l}));
  }

  const auto shared = static_cast<Eigen::Index>(state.shared);
  std::vector<Vector> deltas;
  for (std::size_t l = 0; l < participants.size(); ++l) {
    const auto& p = participants[l];
    Network work = state.models[l];
    const bool full = cfg.sgd.batch_size == 0 || cfg.sgd.batch_size >= p.data->size();
    for (std::size_t step = 0; step < cfg.sgd.local_steps; ++step) {
      if (full) {
        sgd_step(work, *p.data, p.loss, cfg.sgd);
      } else {
        sgd_step(work, select(*p.data, state.samplers[l].next()), p.loss, cfg.sgd);
      }
    }
    deltas.push_back(flat_parameters(work).head(shared) - state.global);
    if (state.shared < parameter_count(work)) state.models[l] = std::move(work);
  }

  Vector next;
  if (cfg.rule == AggregationRule::Literal) {
    Vector sum = Vector::Zero(state.global.size());
    for (const auto& d : deltas) sum += d;
    next = state.global - cfg.eta_agg * sum;
  } else {
    next = aggregate(state.global, deltas, weights, cfg.eta_agg);
  }
  Vector update = next - state.global;
  state.global = std::move(next);
  for (auto& m : state.models) {
    Vector params = flat_parameters(m);
    params.head(shared) = state.global;
    set_parameters(m, params);
  }
  ++state.round;
  state.wall_steps += cfg.sgd.local_steps;
  record(state, participants, weights, test);
  return update;
}

Vector run_round_fedavg(FederationState& state, const std::vector<LabeledBatch>& sets, const FederationConfig& cfg,
                        const LabeledBatch* test) {
  const auto participants = fedavg_participants(sets);
  return run_round(state, participants, participant_weights(Weighting::Equal, sets.size(), 0), cfg, test);
}

Vector run_round_fedmt(FederationState& state, const FederatedDataset& data, const FederationConfig& cfg) {
  const auto participants = fedmt_participants(data, cfg.strategy, cfg.objective);
  const auto weights =
      participant_weights(cfg.weighting, data.client_sets.size(), data.server_sets.size(), cfg.custom_weights);
  return run_round(state, participants, weights, cfg, &data.test_set);
}

Vector run_multi_server(FederationState& state, const FederatedDataset& data, const FederationConfig& cfg) {
  require(data.server_sets.size() >= 2, ErrorCode::InvalidArgument, "multi-server rounds need S >= 2");
  return run_round_fedmt(state, data, cfg);
}

std::vector<RoundTrace> run_federation(const FederatedDataset& data, const FederationConfig& cfg,
                                       const Network& init, std::uint64_t seed) {
  require(cfg.rounds >= 1, ErrorCode::InvalidArgument, "R must be at least 1");
  require(cfg.eta_agg > 0.0, ErrorCode::InvalidArgument, "eta_agg must be positive");
  require(output_dim(init) == data.test_set.classes, ErrorCode::ShapeMismatch, "model outputs must equal K");
  const std::size_t c = data.client_sets.size(), s = data.server_sets.size();
  std::vector<Participant> participants;
  switch (cfg.strategy) {
    case Strategy::FedAvg: {
      require(data.q.rows() == data.q.cols(), ErrorCode::InvalidArgument, "FedAvg needs one shared label space (J == K)");
      for (const auto& b : data.client_sets) participants.push_back({&b, PlainCE{}});
      for (const auto& b : data.server_sets) participants.push_back({&b, PlainCE{}});
      break;
    }
    case Strategy::FedMT_P:
    case Strategy::FedMT_L:
      participants = fedmt_participants(data, cfg.strategy, cfg.objective);
      break;
    default:
      return run_baseline(cfg.strategy, data, cfg, init, seed);
  }
  const auto weights = participant_weights(cfg.weighting, c, s, cfg.custom_weights);
  FederationState st = make_state(init, c + s, seed, c);
  record(st, participants, weights, &data.test_set);
  for (std::size_t r = 0; r < cfg.rounds; ++r) run_round(st, participants, weights, cfg, &data.test_set);
  return st.trace;
}

std::vector<RoundTrace> run_baseline(Strategy strategy, const FederatedDataset& data, const FederationConfig& cfg,
                                     const Network& init, std::uint64_t seed) {
  const std::size_t c = data.client_sets.size(), s = data.server_sets.size();
  switch (strategy) {
    case Strategy::Single: {
      const auto participants = single_participants(data, cfg.objective);
      const auto weights = participant_weights(Weighting::Equal, 0, s);
      const auto local = local_training(cfg);
      FederationState st = make_state(init, s, seed, 0);
      record(st, participants, weights, &data.test_set);
      for (std::size_t r = 0; r < cfg.rounds; ++r) run_round(st, participants, weights, local, &data.test_set);
      std::vector<RoundTrace> out;
      for (auto& row : st.trace) out.push_back(place(row, c + s, c));
      return out;
    }
    case Strategy::FedTrans: {
      const MlpNet& base = require_mlp(init, "FedTrans");
      const Network coarse = base.with_new_head(data.q.rows(), derive_seed(seed, "fedtrans_coarse_head"));
      const auto clients = fedavg_participants(data.client_sets);
      const auto client_weights = participant_weights(Weighting::Equal, c, 0);
      FederationState pre = make_state(coarse, c, seed, 0);
      record(pre, clients, client_weights, &data.test_set);
      for (std::size_t r = 0; r < cfg.pretrain_rounds; ++r)
        run_round(pre, clients, client_weights, cfg, &data.test_set);
      std::vector<RoundTrace> out;
      for (auto& row : pre.trace) out.push_back(place(row, c + s, 0));

      const Network fine =
          std::get<MlpNet>(pre.global_model()).with_new_head(data.test_set.classes, derive_seed(seed, "fedtrans_head"));
      const auto servers = single_participants(data, cfg.objective);
      const auto server_weights = participant_weights(Weighting::Equal, 0, s);
      FederationState ft = make_state(fine, s, derive_seed(seed, "fedtrans_finetune"), 0);
      ft.round = pre.round;
      ft.wall_steps = pre.wall_steps;
      const auto local = local_training(cfg);
      for (std::size_t r = 0; r < cfg.finetune_epochs; ++r) {
        run_round(ft, servers, server_weights, local, &data.test_set);
        out.push_back(place(ft.trace.back(), c + s, c));
      }
      return out;
    }
    case Strategy::FedRep: {
      const MlpNet& base = require_mlp(init, "FedRep");
      std::vector<Participant> participants = fedavg_participants(data.client_sets);
      for (const auto& p : single_participants(data, cfg.objective)) participants.push_back(p);
      FederationState st;
      st.shared = base.backbone_size();
      st.global = base.parameters().head(static_cast<Eigen::Index>(st.shared));
      for (std::size_t i = 0; i < c; ++i)
        st.models.push_back(base.with_new_head(data.q.rows(), derive_seed(seed, "fedrep_head", {i})));
      for (std::size_t i = 0; i < s; ++i) st.models.push_back(base);
      st.eval_index = c;
      st.seed = seed;
      const auto weights = participant_weights(cfg.weighting, c, s, cfg.custom_weights);
      record(st, participants, weights, &data.test_set);
      for (std::size_t r = 0; r < cfg.rounds; ++r) run_round(st, participants, weights, cfg, &data.test_set);
      return st.trace;
    }
    default:
      fail(ErrorCode::InvalidArgument, "strategy " + to_string(strategy) + " is not a baseline");
  }
}

nlohmann::json trace_row_to_json(const RoundTrace& row) {
  nlohmann::json losses = nlohmann::json::array();
  for (double v : row.participant_losses) losses.push_back(json_number(v));
  return {{"round", row.round},
          {"overall_loss", json_number(row.overall_loss)},
          {"losses", std::move(losses)},
          {"test_acc", json_number(row.test_accuracy)},
          {"wall_steps", row.wall_steps}};
}

void write_trace_csv(std::ostream& os, const std::vector<RoundTrace>& trace) {
  const std::size_t width = trace.empty() ? 0 : trace.front().participant_losses.size();
  os << "round,overall_loss";
  for (std::size_t i = 0; i < width; ++i) os << ",loss_p" << i;
  os << ",test_acc\n";
  for (const auto& row : trace) {
    os << row.round << ',' << format_double(row.overall_loss);
    for (double v : row.participant_losses) os << ',' << format_double(v);
    os << ',' << format_double(row.test_accuracy) << '\n';
  }
}

void write_trace_jsonl(std::ostream& os, const std::vector<RoundTrace>& trace) {
  for (const auto& row : trace) os << trace_row_to_json(row).dump() << '\n';
}

}  // namespace fedmt
