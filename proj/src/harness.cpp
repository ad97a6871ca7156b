#include "fedmt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "fedmt/error.hpp"

namespace fedmt {
namespace {

// Typed access to one JSON object with "path.key: problem" diagnostics.
class Fields {
 public:
  Fields(const nlohmann::json& obj, std::string path, std::set<std::string> allowed)
      : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) bad("", "must be an object");
    for (const auto& [k, v] : obj_.items())
      if (!allowed.count(k)) bad(k, "unknown field");
  }

  bool has(const std::string& key) const { return obj_.contains(key) && !obj_.at(key).is_null(); }

  template <class T>
  T need(const std::string& key) const {
    if (!has(key)) bad(key, "is required");
    return read<T>(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    return has(key) ? read<T>(key) : fallback;
  }

  const nlohmann::json& raw(const std::string& key) const { return obj_.at(key); }
  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] void bad(const std::string& key, const std::string& what) const {
    fail(ErrorCode::ConfigInvalid, (key.empty() ? (path_.empty() ? "config" : path_) : path(key)) + ": " + what);
  }

 private:
  template <class T>
  T read(const std::string& key) const {
    const auto& v = obj_.at(key);
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        bad(key, "must be a non-negative integer");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) bad(key, "must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) bad(key, "must be a string");
    }
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      bad(key, std::string("has the wrong type (") + e.what() + ")");
    }
  }

  const nlohmann::json& obj_;
  std::string path_;
};

SplitKind parse_split(const Fields& f) {
  const auto s = f.get<std::string>("split", "iid");
  if (s == "iid") return SplitKind::Iid;
  if (s == "noniid") return SplitKind::NonIid;
  f.bad("split", "must be \"iid\" or \"noniid\"");
}

SyntheticTaskSpec parse_gaussian(const Fields& f, std::uint64_t seed) {
  SyntheticTaskSpec t;
  t.d = f.need<std::size_t>("d");
  t.k = f.need<std::size_t>("K");
  if (t.d < 1) f.bad("d", "must be >= 1");
  if (t.k < 1) f.bad("K", "must be >= 1");
  const int ways = static_cast<int>(f.has("partition")) + static_cast<int>(f.has("J")) + static_cast<int>(f.has("q"));
  if (ways > 1) f.bad("partition", "give only one of partition, J and q");
  try {
    if (f.has("partition")) {
      t.space = LabelSpaceSpec::hierarchical(t.k, f.need<std::vector<std::size_t>>("partition"));
    } else if (f.has("q")) {
      const auto rows = f.need<std::vector<std::vector<double>>>("q");
      if (rows.empty()) f.bad("q", "must have at least one row");
      Matrix q(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.front().size()) f.bad("q", "rows differ in length");
        for (std::size_t c = 0; c < rows[r].size(); ++c)
          q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      }
      if (static_cast<std::size_t>(q.cols()) != t.k) f.bad("q", "must have K columns");
      t.space = LabelSpaceSpec::overlapping(q);
    } else {
      t.space = LabelSpaceSpec::hierarchical(t.k, balanced_partition(t.k, f.get<std::size_t>("J", t.k)));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigInvalid) throw;
    f.bad(f.has("q") ? "q" : (f.has("partition") ? "partition" : "J"), e.what());
  }
  t.n_server_per_class = f.get<std::size_t>("n", t.n_server_per_class);
  t.servers = f.get<std::size_t>("servers", t.servers);
  t.clients = f.get<std::size_t>("clients", t.clients);
  t.per_client = f.get<std::size_t>("per_client", t.per_client);
  t.test_per_class = f.get<std::size_t>("test_per_class", t.test_per_class);
  t.xi = f.get<double>("xi", t.xi);
  t.separation = f.get<double>("separation", t.separation);
  t.split = parse_split(f);
  t.seed = derive_seed(seed, "dataset");
  if (t.separation <= 0.0) f.bad("separation", "must be > 0");
  return t;
}

SemgTaskSpec parse_semg(const Fields& f, std::uint64_t seed) {
  SemgTaskSpec t;
  t.k = f.need<std::size_t>("K");
  if (t.k != 5 && t.k != 10) f.bad("K", "must be 5 or 10");
  t.n_server_per_class = f.get<std::size_t>("n", t.n_server_per_class);
  t.servers = f.get<std::size_t>("servers", t.servers);
  t.clients = f.get<std::size_t>("clients", t.clients);
  t.per_client = f.get<std::size_t>("per_client", t.per_client);
  t.test_per_class = f.get<std::size_t>("test_per_class", t.test_per_class);
  t.xi = f.get<double>("xi", t.xi);
  t.signal_length = f.get<std::size_t>("signal_length", t.signal_length);
  t.sample_rate = f.get<double>("sample_rate", t.sample_rate);
  t.split = parse_split(f);
  t.seed = derive_seed(seed, "dataset");
  if (t.signal_length < 3) f.bad("signal_length", "must be >= 3");
  if (!(t.sample_rate > 0.0)) f.bad("sample_rate", "must be > 0");
  return t;
}

template <class Task>
void check_task_common(const Fields& f, const Task& t) {
  if (t.n_server_per_class < 1) f.bad("n", "must be >= 1");
  if (t.servers < 1) f.bad("servers", "must be >= 1");
  if (t.clients < 1) f.bad("clients", "must be >= 1");
  if (t.per_client < 1) f.bad("per_client", "must be >= 1");
  if (t.test_per_class < 1) f.bad("test_per_class", "must be >= 1");
  const double k = static_cast<double>(t.k);
  if (t.xi < 0.0 || (t.k > 1 && t.xi >= (k - 1.0) / k) || (t.k == 1 && t.xi != 0.0))
    f.bad("xi", "must lie in [0, (K-1)/K)");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t task_k(const ExperimentConfig& cfg) {
  return std::visit([](const auto& t) { return t.k; }, cfg.task);
}

std::size_t task_j(const ExperimentConfig& cfg) {
  if (const auto* g = std::get_if<SyntheticTaskSpec>(&cfg.task)) return g->space.other_classes();
  return 3;
}

}  // namespace

ExperimentConfig parse_config(const nlohmann::json& doc) {
  const Fields top(doc, "", {"schema_version", "run_id", "seed", "output_dir", "task", "model", "federation",
                             "ntk_checks", "comment"});
  const auto version = top.need<std::size_t>("schema_version");
  if (version != static_cast<std::size_t>(kConfigSchemaVersion))
    top.bad("schema_version", "unsupported version " + std::to_string(version));
  ExperimentConfig cfg;
  cfg.raw = doc;
  cfg.seed = top.get<std::uint64_t>("seed", 0);
  cfg.output_dir = top.get<std::string>("output_dir", cfg.output_dir);
  cfg.run_id = top.get<std::string>("run_id", cfg.run_id);
  if (cfg.run_id.empty() || cfg.run_id.find('/') != std::string::npos) top.bad("run_id", "must be a plain name");

  if (!top.has("task")) top.bad("task", "is required");
  const auto& task = top.raw("task");
  if (!task.is_object()) top.bad("task", "must be an object");
  const auto kind = task.value("kind", std::string("gaussian"));
  if (kind == "gaussian") {
    const Fields f(task, "task", {"kind", "d", "K", "partition", "J", "q", "n", "servers", "clients", "per_client",
                                  "test_per_class", "xi", "separation", "split"});
    auto t = parse_gaussian(f, cfg.seed);
    check_task_common(f, t);
    cfg.task = std::move(t);
  } else if (kind == "semg") {
    const Fields f(task, "task", {"kind", "K", "n", "servers", "clients", "per_client", "test_per_class", "xi",
                                  "signal_length", "sample_rate", "split"});
    auto t = parse_semg(f, cfg.seed);
    check_task_common(f, t);
    cfg.task = std::move(t);
  } else {
    fail(ErrorCode::ConfigInvalid, "task.kind: must be \"gaussian\" or \"semg\"");
  }

  if (top.has("model")) {
    const Fields m(top.raw("model"), "model", {"kind", "width", "hidden"});
    const auto k = m.get<std::string>("kind", "mlp");
    if (k == "ntk") {
      cfg.model.kind = ModelConfig::Kind::Ntk;
    } else if (k != "mlp") {
      m.bad("kind", "must be \"ntk\" or \"mlp\"");
    }
    cfg.model.width = m.get<std::size_t>("width", cfg.model.width);
    cfg.model.hidden = m.get<std::vector<std::size_t>>("hidden", cfg.model.hidden);
    if (cfg.model.width < 1) m.bad("width", "must be >= 1");
    if (std::any_of(cfg.model.hidden.begin(), cfg.model.hidden.end(), [](std::size_t h) { return h == 0; }))
      m.bad("hidden", "layer sizes must be >= 1");
    if (cfg.model.kind == ModelConfig::Kind::Mlp && cfg.model.hidden.empty())
      m.bad("hidden", "needs at least one hidden layer");
  }

  if (!top.has("federation")) top.bad("federation", "is required");
  const Fields f(top.raw("federation"), "federation",
                 {"strategy", "rounds", "eta_agg", "eta_sgd", "batch_size", "local_steps", "weighting", "weights",
                  "objective", "aggregation", "pretrain_rounds", "finetune_epochs"});
  auto& fed = cfg.federation;
  try {
    fed.strategy = strategy_from_string(f.get<std::string>("strategy", "fedmt_p"));
  } catch (const Error&) {
    f.bad("strategy", "must be one of fedavg, fedmt_p, fedmt_l, single, fedtrans, fedrep");
  }
  fed.rounds = f.get<std::size_t>("rounds", fed.rounds);
  fed.eta_agg = f.get<double>("eta_agg", fed.eta_agg);
  fed.sgd.eta_sgd = f.get<double>("eta_sgd", fed.sgd.eta_sgd);
  fed.sgd.batch_size = f.get<std::size_t>("batch_size", fed.sgd.batch_size);
  fed.sgd.local_steps = f.get<std::size_t>("local_steps", fed.sgd.local_steps);
  fed.pretrain_rounds = f.get<std::size_t>("pretrain_rounds", fed.pretrain_rounds);
  fed.finetune_epochs = f.get<std::size_t>("finetune_epochs", fed.finetune_epochs);
  if (fed.rounds < 1) f.bad("rounds", "must be >= 1");
  if (!(fed.eta_agg > 0.0)) f.bad("eta_agg", "must be > 0");
  if (!(fed.sgd.eta_sgd > 0.0)) f.bad("eta_sgd", "must be > 0");
  if (fed.sgd.local_steps < 1) f.bad("local_steps", "must be >= 1");

  const auto weighting = f.get<std::string>("weighting", "equal");
  if (weighting == "equal") {
    fed.weighting = Weighting::Equal;
  } else if (weighting == "server_half") {
    fed.weighting = Weighting::ServerHalf;
  } else if (weighting == "custom") {
    fed.weighting = Weighting::Custom;
    fed.custom_weights = f.need<std::vector<double>>("weights");
  } else {
    f.bad("weighting", "must be equal, server_half or custom");
  }
  const auto objective = f.get<std::string>("objective", "cross_entropy");
  if (objective == "cross_entropy") {
    fed.objective = Objective::CrossEntropy;
  } else if (objective == "weighted_mse") {
    fed.objective = Objective::WeightedMse;
  } else {
    f.bad("objective", "must be cross_entropy or weighted_mse");
  }
  const auto rule = f.get<std::string>("aggregation", "mean");
  if (rule == "mean") {
    fed.rule = AggregationRule::Mean;
  } else if (rule == "literal") {
    fed.rule = AggregationRule::Literal;
  } else {
    f.bad("aggregation", "must be mean or literal");
  }

  const bool mlp = cfg.model.kind == ModelConfig::Kind::Mlp;
  if ((fed.strategy == Strategy::FedTrans || fed.strategy == Strategy::FedRep) && !mlp)
    f.bad("strategy", to_string(fed.strategy) + " replaces the output layer and needs model.kind = mlp");
  if (fed.strategy == Strategy::FedAvg && task_j(cfg) != task_k(cfg))
    f.bad("strategy", "fedavg needs one shared label space (J == K); use fedmt_p or fedmt_l");
  if (fed.objective == Objective::WeightedMse && fed.strategy != Strategy::FedMT_P &&
      fed.strategy != Strategy::FedMT_L && fed.strategy != Strategy::Single)
    f.bad("objective", "weighted_mse applies to fedmt_p, fedmt_l and single");
  if (fed.weighting == Weighting::Custom) {
    const std::size_t total = std::visit([](const auto& t) { return t.clients + t.servers; }, cfg.task);
    if (fed.custom_weights.size() != total) f.bad("weights", "needs one entry per client and server");
    double s = 0.0;
    for (double w : fed.custom_weights) s += w;
    if (std::abs(s - 1.0) > 1e-9) f.bad("weights", "must sum to 1");
  }

  if (top.has("ntk_checks")) {
    const Fields n(top.raw("ntk_checks"), "ntk_checks", {"partitions", "xi", "xi_for_partitions", "max_side", "input_scale"});
    NtkCheckConfig c;
    c.partitions = n.get<std::vector<std::vector<std::size_t>>>("partitions", {});
    c.xis = n.get<std::vector<double>>("xi", {});
    c.xi_for_partitions = n.get<double>("xi_for_partitions", 0.0);
    c.max_side = n.get<std::size_t>("max_side", c.max_side);
    c.input_scale = n.get<double>("input_scale", c.input_scale);
    if (!(c.input_scale > 0.0) || !std::isfinite(c.input_scale)) n.bad("input_scale", "must be positive");
    for (const auto& p : c.partitions) {
      std::size_t s = 0;
      for (auto v : p) s += v;
      if (s != task_k(cfg) || std::find(p.begin(), p.end(), std::size_t{0}) != p.end())
        n.bad("partitions", "every partition must have positive blocks summing to K");
    }
    cfg.ntk_checks = c;
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ConfigInvalid, path.string() + ": cannot open");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

RunSummary summarize(const std::vector<RoundTrace>& trace, double fraction) {
  RunSummary s;
  bool any = false;
  for (const auto& row : trace) {
    if (std::isnan(row.test_accuracy)) continue;
    s.final_test_acc = row.test_accuracy;
    s.best_test_acc = any ? std::max(s.best_test_acc, row.test_accuracy) : row.test_accuracy;
    any = true;
  }
  if (!any) s.final_test_acc = s.best_test_acc = std::numeric_limits<double>::quiet_NaN();
  if (!trace.empty()) {
    const double target = fraction * trace.front().overall_loss;
    for (const auto& row : trace) {
      if (row.overall_loss <= target) {
        s.rounds_to_loss_fraction = row.round;
        break;
      }
    }
  }
  return s;
}

nlohmann::json to_json(const RunSummary& s) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"final_test_acc", num(s.final_test_acc)},
          {"best_test_acc", num(s.best_test_acc)},
          {"rounds_to_loss_fraction",
           s.rounds_to_loss_fraction ? nlohmann::json(*s.rounds_to_loss_fraction) : nlohmann::json(nullptr)}};
}

void MetricsStore::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "trace.csv");
    write_trace_csv(os, traces_);
  }
  {
    std::ofstream os(dir / "trace.jsonl");
    write_trace_jsonl(os, traces_);
  }
  std::ofstream os(dir / "summary.json");
  nlohmann::json j = to_json(summary());
  j["run_id"] = run_id_;
  j["rounds"] = traces_.empty() ? 0 : traces_.back().round;
  os << j.dump(2) << '\n';
  if (!os) fail(ErrorCode::InvalidArgument, "cannot write " + (dir / "summary.json").string());
}

FederatedDataset make_dataset(const ExperimentConfig& cfg) {
  return std::visit(
      [](const auto& t) {
        if constexpr (std::is_same_v<std::decay_t<decltype(t)>, SyntheticTaskSpec>) {
          return gen_gaussian_clusters(t);
        } else {
          return gen_semg_like(t);
        }
      },
      cfg.task);
}

Network make_network(const ExperimentConfig& cfg, std::size_t input_dim, std::size_t classes) {
  const std::uint64_t seed = derive_seed(cfg.seed, "init");
  if (cfg.model.kind == ModelConfig::Kind::Ntk) return TwoLayerReluNet::init(input_dim, cfg.model.width, classes, seed);
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
  dims.push_back(classes);
  return MlpNet::init(dims, seed);
}

MetricsStore run_experiment(const ExperimentConfig& cfg, bool persist) {
  MetricsStore store(cfg.run_id);
  try {
    const FederatedDataset data = make_dataset(cfg);
    const Network init = make_network(cfg, data.test_set.dim(), data.test_set.classes);
    for (auto& row : run_federation(data, cfg.federation, init, derive_seed(cfg.seed, "federation")))
      store.append(std::move(row));
  } catch (const Error& e) {
    throw Error(e.code(), "run '" + cfg.run_id + "': " + e.what());
  }
  if (persist) store.write(std::filesystem::path(cfg.output_dir) / cfg.run_id);
  return store;
}

std::vector<SweepEntry> run_sweep(const nlohmann::json& base, const std::string& axis,
                                  const std::vector<std::string>& values) {
  static const std::set<std::string> axes{"n", "xi", "C", "J", "local_steps", "batch"};
  if (!axes.count(axis)) fail(ErrorCode::ConfigInvalid, "sweep axis '" + axis + "' is not one of n, xi, C, J, local_steps, batch");
  const ExperimentConfig base_cfg = parse_config(base);
  if (axis == "J" && !std::holds_alternative<SyntheticTaskSpec>(base_cfg.task))
    fail(ErrorCode::ConfigInvalid, "sweep axis J needs a gaussian task");
  std::vector<SweepEntry> out;
  if (values.empty()) return out;

  for (std::size_t i = 0; i < values.size(); ++i) {
    SweepEntry entry;
    entry.value = values[i];
    try {
      nlohmann::json doc = base;
      nlohmann::json v;
      try {
        v = nlohmann::json::parse(values[i]);
      } catch (const nlohmann::json::parse_error&) {
        fail(ErrorCode::ConfigInvalid, "sweep value '" + values[i] + "' is not a number");
      }
      if (!v.is_number()) fail(ErrorCode::ConfigInvalid, "sweep value '" + values[i] + "' is not a number");
      if (axis == "n") doc["task"]["n"] = v;
      if (axis == "xi") doc["task"]["xi"] = v;
      if (axis == "C") doc["task"]["clients"] = v;
      if (axis == "J") {
        doc["task"].erase("partition");
        doc["task"].erase("q");
        doc["task"]["J"] = v;
      }
      if (axis == "local_steps") doc["federation"]["local_steps"] = v;
      if (axis == "batch") doc["federation"]["batch_size"] = v;
      doc["seed"] = derive_seed(base_cfg.seed, "sweep", {i});
      doc["run_id"] = base_cfg.run_id + "_" + axis + "_" + std::to_string(i);
      doc["output_dir"] = base_cfg.output_dir;
      entry.store = run_experiment(parse_config(doc));
    } catch (const std::exception& e) {
      entry.error = e.what();
    }
    out.push_back(std::move(entry));
  }

  std::filesystem::create_directories(base_cfg.output_dir);
  std::ofstream os(std::filesystem::path(base_cfg.output_dir) / "sweep_summary.csv");
  os << "index,axis,value,status,final_test_acc,best_test_acc,rounds_to_loss_fraction,error\n";
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& e = out[i];
    os << i << ',' << axis << ',' << e.value << ',';
    if (e.store) {
      const auto s = e.store->summary();
      os << "ok," << fmt(s.final_test_acc) << ',' << fmt(s.best_test_acc) << ','
         << (s.rounds_to_loss_fraction ? std::to_string(*s.rounds_to_loss_fraction) : std::string()) << ",\n";
    } else {
      std::string msg = e.error;
      std::replace(msg.begin(), msg.end(), '"', '\'');
      os << "failed,,,,\"" << msg << "\"\n";
    }
  }
  return out;
}

CorollaryReport run_ntk_check(const ExperimentConfig& cfg) {
  if (!cfg.ntk_checks) fail(ErrorCode::ConfigInvalid, "ntk_checks: is required for ntk-check");
  FederatedDataset data = make_dataset(cfg);
  for (auto* sets : {&data.client_sets, &data.server_sets})
    for (auto& b : *sets) b.inputs *= cfg.ntk_checks->input_scale;
  const auto k = data.test_set.classes;
  const std::uint64_t seed = derive_seed(cfg.seed, "init");
  const auto net = TwoLayerReluNet::init(data.test_set.dim(), cfg.model.width, k, seed);
  return corollary_checks(net, data, k, cfg.ntk_checks->partitions, cfg.ntk_checks->xis,
                          cfg.ntk_checks->xi_for_partitions, cfg.ntk_checks->max_side);
}

std::string resolve_output_dir(const std::optional<std::string>& cli, const std::string& from_config) {
  if (cli && !cli->empty()) return *cli;
  if (const char* env = std::getenv("FEDMT_OUTPUT_DIR"); env != nullptr && *env != '\0') return env;
  return from_config;
}

}  // namespace fedmt
