#include "fedmt/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <unordered_set>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/push_relabel_max_flow.hpp>

#include "fedmt/error.hpp"

namespace fedmt {
namespace {

// Positions of the K cluster means: scaled unit vectors when d >= K (pairwise
// distance `sep`), otherwise a regular polygon in the first two coordinates.
Matrix cluster_means(std::size_t d, std::size_t k, double sep) {
  const auto kk = static_cast<Eigen::Index>(k);
  Matrix means = Matrix::Zero(kk, static_cast<Eigen::Index>(d));
  if (d >= k) {
    for (Eigen::Index c = 0; c < kk; ++c) means(c, c) = sep / std::numbers::sqrt2;
  } else if (d == 1) {
    for (Eigen::Index c = 0; c < kk; ++c) means(c, 0) = sep * static_cast<double>(c);
  } else {
    const double radius = sep / (2.0 * std::sin(std::numbers::pi / static_cast<double>(k)));
    for (Eigen::Index c = 0; c < kk; ++c) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
      means(c, 0) = radius * std::cos(angle);
      means(c, 1) = radius * std::sin(angle);
    }
  }
  return means;
}

// `count_per_class[c]` samples of each class around its mean, in class order.
LabeledBatch sample_clusters(const Matrix& means, const std::vector<std::size_t>& count_per_class, Rng& rng,
                             std::size_t& next_id) {
  const std::size_t total = std::accumulate(count_per_class.begin(), count_per_class.end(), std::size_t{0});
  LabeledBatch out;
  out.space = LabelSpace::Desired;
  out.classes = static_cast<std::size_t>(means.rows());
  out.inputs.resize(static_cast<Eigen::Index>(total), means.cols());
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < count_per_class.size(); ++c) {
    for (std::size_t i = 0; i < count_per_class[c]; ++i, ++row) {
      for (Eigen::Index j = 0; j < means.cols(); ++j)
        out.inputs(row, j) = means(static_cast<Eigen::Index>(c), j) + normal(rng);
      out.labels.push_back(c);
      out.ids.push_back(next_id++);
    }
  }
  return out;
}

std::vector<std::size_t> balanced_counts(std::size_t total, std::size_t k) {
  std::vector<std::size_t> counts(k, total / k);
  for (std::size_t i = 0; i < total % k; ++i) ++counts[i];
  return counts;
}

std::size_t sample_row(const Matrix& m, Eigen::Index row, double u) {
  double cum = 0.0;
  Eigen::Index last = 0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    if (m(row, j) <= 0.0) continue;
    last = j;
    cum += m(row, j);
    if (u < cum) return static_cast<std::size_t>(j);
  }
  return static_cast<std::size_t>(last);
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledBatch& pool, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(pool.classes);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool.labels[i]].push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  return by_class;
}

using FlowTraits = boost::adjacency_list_traits<boost::vecS, boost::vecS, boost::directedS>;
using FlowGraph = boost::adjacency_list<
    boost::vecS, boost::vecS, boost::directedS, boost::no_property,
    boost::property<boost::edge_capacity_t, long,
                    boost::property<boost::edge_residual_capacity_t, long,
                                    boost::property<boost::edge_reverse_t, FlowTraits::edge_descriptor>>>>;
using FlowEdge = FlowTraits::edge_descriptor;

// Feasible flow with lower bounds, reduced to a max-flow between a super
// source and super sink.
class BoundedFlow {
 public:
  explicit BoundedFlow(std::size_t nodes) : graph_(nodes + 2), excess_(nodes, 0), nodes_(nodes) {}

  std::size_t add(std::size_t u, std::size_t v, long lo, long hi) {
    edges_.push_back(add_raw(u, v, hi - lo));
    lower_.push_back(lo);
    excess_[v] += lo;
    excess_[u] -= lo;
    return edges_.size() - 1;
  }

  bool solve() {
    const std::size_t s = nodes_, t = nodes_ + 1;
    long demand = 0;
    for (std::size_t v = 0; v < nodes_; ++v) {
      if (excess_[v] > 0) {
        add_raw(s, v, excess_[v]);
        demand += excess_[v];
      } else if (excess_[v] < 0) {
        add_raw(v, t, -excess_[v]);
      }
    }
    const long flow = boost::push_relabel_max_flow(graph_, s, t);
    return flow == demand;
  }

  long flow_on(std::size_t edge) const {
    const auto cap = boost::get(boost::edge_capacity, graph_);
    const auto res = boost::get(boost::edge_residual_capacity, graph_);
    return lower_[edge] + cap[edges_[edge]] - res[edges_[edge]];
  }

 private:
  FlowEdge add_raw(std::size_t u, std::size_t v, long cap) {
    auto capacity = boost::get(boost::edge_capacity, graph_);
    auto reverse = boost::get(boost::edge_reverse, graph_);
    const FlowEdge e = boost::add_edge(u, v, graph_).first;
    const FlowEdge r = boost::add_edge(v, u, graph_).first;
    capacity[e] = cap;
    capacity[r] = 0;
    reverse[e] = r;
    reverse[r] = e;
    return e;
  }

  FlowGraph graph_;
  std::vector<long> excess_;
  std::vector<FlowEdge> edges_;
  std::vector<long> lower_;
  std::size_t nodes_;
};

}  // namespace

std::vector<std::size_t> flip_labels(const std::vector<std::size_t>& labels, const ProjectionMatrix& t,
                                     std::uint64_t seed) {
  require(t.role() == MatrixRole::NoiseMap, ErrorCode::InvalidArgument, "flip_labels needs a noise matrix");
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (auto y : labels) {
    require(y < t.rows(), ErrorCode::ShapeMismatch, "label out of range for T");
    out.push_back(sample_row(t.entries(), static_cast<Eigen::Index>(y), unif(rng)));
  }
  return out;
}

std::vector<std::size_t> sample_other_labels(const std::vector<std::size_t>& desired, const ProjectionMatrix& q,
                                             Rng& rng) {
  const Matrix& m = q.entries();
  // Column k of Q normalised into P(j | k), stored row-wise for sample_row.
  Matrix cond = m.transpose();
  for (Eigen::Index k = 0; k < cond.rows(); ++k) {
    const double s = cond.row(k).sum();
    require(s > 0.0, ErrorCode::InvalidMatrix, "desired class " + std::to_string(k) + " maps to no other class");
    cond.row(k) /= s;
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::size_t> out;
  out.reserve(desired.size());
  for (auto y : desired) {
    require(y < q.cols(), ErrorCode::ShapeMismatch, "label out of range for Q");
    out.push_back(sample_row(cond, static_cast<Eigen::Index>(y), unif(rng)));
  }
  return out;
}

std::vector<LabeledBatch> split_iid(const LabeledBatch& pool, std::size_t clients, std::uint64_t seed) {
  require(clients >= 1, ErrorCode::InvalidArgument, "need at least one client");
  require(pool.size() >= clients, ErrorCode::InfeasibleSplit, "fewer samples than clients");
  Rng rng(seed);
  const auto by_class = indices_by_class(pool, rng);
  std::vector<std::vector<std::size_t>> parts(clients);
  std::size_t dealt = 0;
  for (const auto& cls : by_class)
    for (auto i : cls) parts[dealt++ % clients].push_back(i);
  std::vector<LabeledBatch> out;
  for (const auto& p : parts) out.push_back(select(pool, p));
  return out;
}

std::vector<LabeledBatch> split_noniid(const LabeledBatch& pool, std::size_t clients, std::uint64_t seed) {
  require(clients >= 1, ErrorCode::InvalidArgument, "need at least one client");
  const std::size_t k = pool.classes;
  require(k >= 2, ErrorCode::InfeasibleSplit, "two majority classes need K >= 2");
  Rng rng(seed);
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<std::size_t> class_count(k, 0);
  for (auto y : pool.labels) ++class_count[y];
  const auto sizes = balanced_counts(pool.size(), clients);

  // Nodes: source, K classes, C clients, sink.
  const std::size_t src = 0, sink = k + clients + 1;
  BoundedFlow flow(k + clients + 2);
  for (std::size_t c = 0; c < k; ++c) {
    const auto n = static_cast<long>(class_count[c]);
    flow.add(src, 1 + c, n, n);
  }
  std::vector<std::vector<std::size_t>> edge(clients, std::vector<std::size_t>(k));
  for (std::size_t i = 0; i < clients; ++i) {
    const double n = static_cast<double>(sizes[i]);
    const auto maj_lo = static_cast<long>(std::ceil(0.15 * n - 1e-9));
    const auto maj_hi = static_cast<long>(std::floor(0.25 * n + 1e-9));
    const auto min_hi = static_cast<long>(std::ceil(0.08 * n - 1e-9)) - 1;
    require(maj_lo <= maj_hi && min_hi >= 0, ErrorCode::InfeasibleSplit,
            "client " + std::to_string(i) + " is too small for the class quotas");
    const std::size_t a = perm[(2 * i) % k], b = perm[(2 * i + 1) % k];
    for (std::size_t c = 0; c < k; ++c) {
      const bool major = c == a || c == b;
      edge[i][c] = flow.add(1 + c, 1 + k + i, major ? maj_lo : 0, major ? maj_hi : min_hi);
    }
    const auto n_i = static_cast<long>(sizes[i]);
    flow.add(1 + k + i, sink, n_i, n_i);
  }
  flow.add(sink, src, 0, std::numeric_limits<long>::max() / 4);
  require(flow.solve(), ErrorCode::InfeasibleSplit, "no split satisfies the majority/minority quotas");

  const auto by_class = indices_by_class(pool, rng);
  std::vector<std::size_t> cursor(k, 0);
  std::vector<LabeledBatch> out;
  for (std::size_t i = 0; i < clients; ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < k; ++c) {
      const auto take = static_cast<std::size_t>(flow.flow_on(edge[i][c]));
      for (std::size_t r = 0; r < take; ++r) idx.push_back(by_class[c][cursor[c]++]);
    }
    out.push_back(select(pool, idx));
  }
  return out;
}

FederatedDataset gen_gaussian_clusters(const SyntheticTaskSpec& spec) {
  require(spec.separation > 0.0 && std::isfinite(spec.separation), ErrorCode::DegenerateSpec,
          "separation must be positive");
  require(spec.d >= 1, ErrorCode::DegenerateSpec, "d must be positive");
  require(spec.k == spec.space.desired_classes(), ErrorCode::DegenerateSpec, "K disagrees with the label space");
  require(spec.n_server_per_class >= 1 && spec.servers >= 1 && spec.clients >= 1 && spec.per_client >= 1,
          ErrorCode::DegenerateSpec, "n, S, C and N_c must be positive");
  const ProjectionMatrix q =
      spec.space.is_hierarchical()
          ? build_hierarchical_q(spec.space)
          : ProjectionMatrix::from_entries(std::get<OverlappingMap>(spec.space.kind()).q, MatrixRole::LabelSpaceMap);
  const ProjectionMatrix t = build_symmetric_noise_t(spec.k, spec.xi);
  const Matrix means = cluster_means(spec.d, spec.k, spec.separation);

  std::size_t next_id = 0;
  FederatedDataset out{{}, {}, {}, q, t, {}};
  for (std::size_t s = 0; s < spec.servers; ++s) {
    Rng rng = make_rng(spec.seed, "server", {s});
    LabeledBatch b = sample_clusters(means, std::vector<std::size_t>(spec.k, spec.n_server_per_class), rng, next_id);
    b.labels = flip_labels(b.labels, t, derive_seed(spec.seed, "noise", {s}));
    out.server_sets.push_back(std::move(b));
  }

  Rng pool_rng = make_rng(spec.seed, "client_pool");
  const LabeledBatch pool =
      sample_clusters(means, balanced_counts(spec.clients * spec.per_client, spec.k), pool_rng, next_id);
  const std::uint64_t split_seed = derive_seed(spec.seed, "split");
  auto parts = spec.split == SplitKind::Iid ? split_iid(pool, spec.clients, split_seed)
                                            : split_noniid(pool, spec.clients, split_seed);
  for (std::size_t c = 0; c < parts.size(); ++c) {
    Rng rng = make_rng(spec.seed, "other_labels", {c});
    parts[c].labels = sample_other_labels(parts[c].labels, q, rng);
    parts[c].space = LabelSpace::Other;
    parts[c].classes = q.rows();
  }
  out.client_sets = std::move(parts);

  Rng test_rng = make_rng(spec.seed, "test");
  out.test_set = sample_clusters(means, std::vector<std::size_t>(spec.k, spec.test_per_class), test_rng, next_id);

  out.spec = {{"kind", "gaussian"},     {"d", spec.d},
              {"K", spec.k},            {"J", q.rows()},
              {"n", spec.n_server_per_class}, {"servers", spec.servers},
              {"clients", spec.clients}, {"per_client", spec.per_client},
              {"test_per_class", spec.test_per_class}, {"xi", spec.xi},
              {"separation", spec.separation}, {"split", spec.split == SplitKind::Iid ? "iid" : "noniid"},
              {"seed", spec.seed}};
  return out;
}

bool partitions_disjoint(const FederatedDataset& data) {
  std::unordered_set<std::size_t> seen;
  auto add = [&](const LabeledBatch& b) {
    for (auto id : b.ids)
      if (!seen.insert(id).second) return false;
    return true;
  };
  for (const auto& b : data.server_sets)
    if (!add(b)) return false;
  for (const auto& b : data.client_sets)
    if (!add(b)) return false;
  return add(data.test_set);
}

nlohmann::json batch_to_json(const LabeledBatch& batch) {
  nlohmann::json inputs = nlohmann::json::array();
  for (Eigen::Index r = 0; r < batch.inputs.rows(); ++r)
    for (Eigen::Index c = 0; c < batch.inputs.cols(); ++c) inputs.push_back(batch.inputs(r, c));
  return {{"inputs", std::move(inputs)},
          {"dim", batch.inputs.cols()},
          {"labels", batch.labels},
          {"ids", batch.ids},
          {"space", batch.space == LabelSpace::Desired ? "desired" : "other"},
          {"classes", batch.classes}};
}

LabeledBatch batch_from_json(const nlohmann::json& j) {
  LabeledBatch b;
  b.labels = j.at("labels").get<std::vector<std::size_t>>();
  b.ids = j.value("ids", std::vector<std::size_t>{});
  b.classes = j.at("classes").get<std::size_t>();
  const auto space = j.at("space").get<std::string>();
  require(space == "desired" || space == "other", ErrorCode::InvalidArgument, "unknown label space " + space);
  b.space = space == "desired" ? LabelSpace::Desired : LabelSpace::Other;
  const auto dim = j.at("dim").get<std::size_t>();
  const auto& inputs = j.at("inputs");
  require(inputs.size() == dim * b.labels.size(), ErrorCode::ShapeMismatch, "inputs length != dim * labels");
  b.inputs.resize(static_cast<Eigen::Index>(b.labels.size()), static_cast<Eigen::Index>(dim));
  std::size_t idx = 0;
  for (Eigen::Index r = 0; r < b.inputs.rows(); ++r)
    for (Eigen::Index c = 0; c < b.inputs.cols(); ++c) b.inputs(r, c) = inputs[idx++].get<double>();
  validate_batch(b);
  return b;
}

nlohmann::json dataset_to_json(const FederatedDataset& data) {
  nlohmann::json servers = nlohmann::json::array();
  for (const auto& b : data.server_sets) servers.push_back(batch_to_json(b));
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& b : data.client_sets) clients.push_back(batch_to_json(b));
  return {{"spec", data.spec},           {"q", to_json(data.q)},
          {"t", to_json(data.t)},        {"server_sets", std::move(servers)},
          {"client_sets", std::move(clients)}, {"test_set", batch_to_json(data.test_set)}};
}

FederatedDataset dataset_from_json(const nlohmann::json& j) {
  FederatedDataset out{{}, {}, batch_from_json(j.at("test_set")), projection_from_json(j.at("q")),
                       projection_from_json(j.at("t")), j.value("spec", nlohmann::json::object())};
  for (const auto& b : j.at("server_sets")) out.server_sets.push_back(batch_from_json(b));
  for (const auto& b : j.at("client_sets")) out.client_sets.push_back(batch_from_json(b));
  return out;
}

}  // namespace fedmt
