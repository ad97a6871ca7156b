#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <string>

#include <fftw3.h>

#include "fedmt/datagen.hpp"
#include "fedmt/error.hpp"

namespace fedmt {
namespace {

constexpr double kZeta = 1.0;
constexpr double kMaxSeverity = 5.0;

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// One-sided power spectrum |X_j|^2, j = 0..L/2.
std::vector<double> power_spectrum(const std::vector<double>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<double> in(x);
  std::vector<std::complex<double>> out(static_cast<std::size_t>(n / 2 + 1));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<fftw_complex*>(out.data()), FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  std::vector<double> p(out.size());
  for (std::size_t j = 0; j < out.size(); ++j) p[j] = std::norm(out[j]);
  return p;
}

// Samples with severity drawn by `draw`, features in rows.
struct SemgSamples {
  Matrix features;
  std::vector<std::size_t> desired;
  std::vector<std::size_t> other;
  std::vector<std::size_t> ids;
};

template <class Draw>
SemgSamples make_samples(std::size_t count, const SemgTaskSpec& spec, Rng& rng, std::size_t& next_id, Draw draw) {
  SemgSamples s;
  s.features.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(kSemgFeatureCount));
  for (std::size_t i = 0; i < count; ++i) {
    const double severity = draw(i);
    const auto labels = severity_labels(severity, spec.k);
    const auto sig = synth_semg_signal(severity, spec.signal_length, spec.sample_rate, rng);
    const auto f = extract_semg_features(sig, spec.sample_rate);
    for (std::size_t j = 0; j < kSemgFeatureCount; ++j)
      s.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
    s.desired.push_back(labels.desired);
    s.other.push_back(labels.other);
    s.ids.push_back(next_id++);
  }
  return s;
}

LabeledBatch desired_batch(const SemgSamples& s, std::size_t k) {
  LabeledBatch b;
  b.inputs = s.features;
  b.labels = s.desired;
  b.ids = s.ids;
  b.space = LabelSpace::Desired;
  b.classes = k;
  return b;
}

}  // namespace

SeverityLabels severity_labels(double severity, std::size_t k) {
  require(k == 5 || k == 10, ErrorCode::UnsupportedK, "severity bins exist for K = 5 or 10");
  require(severity >= 0.0 && severity <= kMaxSeverity, ErrorCode::InvalidArgument, "severity outside [0, 5]");
  const double width = kMaxSeverity / static_cast<double>(k);
  const auto bin = std::min(static_cast<std::size_t>(std::floor(severity / width)), k - 1);
  const double third = kMaxSeverity / 3.0;
  const std::size_t other = severity < third ? 0 : (severity < 2.0 * third ? 1 : 2);
  return {bin, other};
}

std::vector<double> synth_semg_signal(double severity, std::size_t length, double sample_rate, Rng& rng) {
  require(length >= 3, ErrorCode::DegenerateSignal, "signal too short");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  // Tremor burst: a carrier whose amplitude and frequency grow with severity,
  // slowly modulated, plus low-pass filtered background activity.
  const double amplitude = (0.5 + 0.8 * severity) * (1.0 + 0.15 * normal(rng));
  const double freq = 4.0 + 1.6 * severity + 0.5 * normal(rng);
  const double phase = 2.0 * std::numbers::pi * unif(rng);
  const double mod_freq = 0.5 + unif(rng);
  const double mod_phase = 2.0 * std::numbers::pi * unif(rng);
  std::vector<double> x(length);
  double noise = 0.0;
  for (std::size_t n = 0; n < length; ++n) {
    const double time = static_cast<double>(n) / sample_rate;
    noise = 0.7 * noise + 0.3 * 0.8 * normal(rng);
    const double envelope = 1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * mod_freq * time + mod_phase);
    x[n] = amplitude * envelope * std::sin(2.0 * std::numbers::pi * freq * time + phase) + noise;
  }
  return x;
}

std::array<double, kSemgFeatureCount> extract_semg_features(const std::vector<double>& x, double sample_rate) {
  const std::size_t n = x.size();
  require(n >= 3, ErrorCode::DegenerateSignal, "need at least 3 samples, got " + std::to_string(n));
  const double nd = static_cast<double>(n);
  double abs_sum = 0.0, sq_sum = 0.0, log_sum = 0.0;
  for (double v : x) {
    abs_sum += std::abs(v);
    sq_sum += v * v;
    log_sum += std::log(std::max(std::abs(v), 1e-12));
  }
  double wl = 0.0, wamp = 0.0, ssc = 0.0, zc = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double step = std::abs(x[i + 1] - x[i]);
    wl += step;
    if (step >= kZeta) wamp += 1.0;
    if (-x[i] * x[i + 1] >= kZeta && step >= kZeta) zc += 1.0;
  }
  for (std::size_t i = 1; i + 1 < n; ++i)
    if ((x[i] - x[i - 1]) * (x[i] - x[i + 1]) >= kZeta) ssc += 1.0;

  const auto p = power_spectrum(x);
  double total = 0.0, moment = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double f = static_cast<double>(j) * sample_rate / nd;
    total += p[j];
    moment += f * p[j];
  }
  double msf = 0.0, mf = 0.0;
  if (total > 0.0) {
    msf = moment / total;
    double cum = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      cum += p[j];
      if (cum >= 0.5 * total) {
        mf = static_cast<double>(j) * sample_rate / nd;
        break;
      }
    }
  }
  const double msv = sq_sum / nd;
  const double var = sq_sum / (nd - 1.0);
  return {abs_sum / nd, msv, std::sqrt(msv), var, std::sqrt(var), wl, wamp, std::exp(log_sum / nd), ssc, zc, msf, mf};
}

FederatedDataset gen_semg_like(const SemgTaskSpec& spec) {
  require(spec.k == 5 || spec.k == 10, ErrorCode::UnsupportedK, "K must be 5 or 10");
  require(spec.n_server_per_class >= 1 && spec.servers >= 1 && spec.clients >= 1 && spec.per_client >= 1,
          ErrorCode::DegenerateSpec, "n, S, C and N_c must be positive");
  const ProjectionMatrix q = build_semg_q(spec.k);
  const ProjectionMatrix t = build_symmetric_noise_t(spec.k, spec.xi);
  const double width = kMaxSeverity / static_cast<double>(spec.k);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::size_t next_id = 0;

  Rng pool_rng = make_rng(spec.seed, "client_pool");
  const std::size_t pool_size = spec.clients * spec.per_client;
  const std::size_t pool_base = next_id;
  SemgSamples pool = make_samples(pool_size, spec, pool_rng, next_id,
                                  [&](std::size_t) { return kMaxSeverity * unif(pool_rng); });
  const Vector mean = pool.features.colwise().mean();
  Vector scale = ((pool.features.rowwise() - mean.transpose()).array().square().colwise().sum() /
                  std::max<double>(1.0, static_cast<double>(pool_size) - 1.0))
                     .sqrt()
                     .transpose();
  for (Eigen::Index j = 0; j < scale.size(); ++j)
    if (!(scale(j) > 1e-12)) scale(j) = 1.0;
  auto standardize = [&](Matrix& f) {
    f = ((f.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
  };
  standardize(pool.features);

  FederatedDataset out{{}, {}, {}, q, t, {}};
  for (std::size_t s = 0; s < spec.servers; ++s) {
    Rng rng = make_rng(spec.seed, "server", {s});
    const std::size_t n = spec.n_server_per_class;
    SemgSamples srv = make_samples(spec.k * n, spec, rng, next_id, [&](std::size_t i) {
      return std::min(kMaxSeverity, width * (static_cast<double>(i / n) + unif(rng)));
    });
    standardize(srv.features);
    LabeledBatch b = desired_batch(srv, spec.k);
    b.labels = flip_labels(b.labels, t, derive_seed(spec.seed, "noise", {s}));
    out.server_sets.push_back(std::move(b));
  }

  const LabeledBatch pool_batch = desired_batch(pool, spec.k);
  const std::uint64_t split_seed = derive_seed(spec.seed, "split");
  auto parts = spec.split == SplitKind::Iid ? split_iid(pool_batch, spec.clients, split_seed)
                                            : split_noniid(pool_batch, spec.clients, split_seed);
  for (auto& part : parts) {
    for (std::size_t i = 0; i < part.size(); ++i) part.labels[i] = pool.other[part.ids[i] - pool_base];
    part.space = LabelSpace::Other;
    part.classes = q.rows();
  }
  out.client_sets = std::move(parts);

  Rng test_rng = make_rng(spec.seed, "test");
  const std::size_t nt = spec.test_per_class;
  SemgSamples test = make_samples(spec.k * nt, spec, test_rng, next_id, [&](std::size_t i) {
    return std::min(kMaxSeverity, width * (static_cast<double>(i / nt) + unif(test_rng)));
  });
  standardize(test.features);
  out.test_set = desired_batch(test, spec.k);

  out.spec = {{"kind", "semg"},         {"K", spec.k},
              {"J", q.rows()},          {"n", spec.n_server_per_class},
              {"servers", spec.servers}, {"clients", spec.clients},
              {"per_client", spec.per_client}, {"test_per_class", spec.test_per_class},
              {"xi", spec.xi},          {"split", spec.split == SplitKind::Iid ? "iid" : "noniid"},
              {"signal_length", spec.signal_length}, {"sample_rate", spec.sample_rate},
              {"seed", spec.seed}};
  return out;
}

}  // namespace fedmt
