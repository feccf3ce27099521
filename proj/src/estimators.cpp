#include "gcrf/estimators.hpp"

#include <chrono>
#include <thread>

namespace gcrf {

using ad::Var;

double DownstreamObjective::value(const HardPath& path, std::size_t K) const {
  ad::Tape tape;
  return evaluate(tape, onehot(tape, path, K)).scalar();
}

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::ReinforceMs: return "reinforce_ms";
    case EstimatorKind::ReinforceMsC: return "reinforce_ms_c";
    case EstimatorKind::GumbelCrf: return "gumbel_crf";
    case EstimatorKind::GumbelCrfSt: return "gumbel_crf_st";
    case EstimatorKind::PmMrf: return "pm_mrf";
    case EstimatorKind::PmMrfSt: return "pm_mrf_st";
  }
  return "unknown";
}

EstimatorKind estimator_from_string(const std::string& name) {
  for (auto k : {EstimatorKind::ReinforceMs, EstimatorKind::ReinforceMsC, EstimatorKind::GumbelCrf,
                 EstimatorKind::GumbelCrfSt, EstimatorKind::PmMrf, EstimatorKind::PmMrfSt})
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown estimator '" + name + "'");
}

bool is_score_function(EstimatorKind kind) {
  return kind == EstimatorKind::ReinforceMs || kind == EstimatorKind::ReinforceMsC;
}

bool is_relaxed(EstimatorKind kind) { return !is_score_function(kind); }

void to_json(nlohmann::json& j, const GradReport& r) {
  j = nlohmann::json{{"estimator", r.estimator},
                     {"samples_per_estimate", r.samples_per_estimate},
                     {"estimates", r.estimates},
                     {"total_samples", r.total_samples},
                     {"mean_gradient", r.mean_gradient},
                     {"variance", r.variance},
                     {"variance_ratio", r.variance_ratio.degenerate
                                            ? nlohmann::json(nullptr)
                                            : nlohmann::json(r.variance_ratio.value)},
                     {"degenerate", r.variance_ratio.degenerate},
                     {"bias_norm", r.bias_norm ? nlohmann::json(*r.bias_norm) : nlohmann::json(nullptr)},
                     {"mean_objective", r.mean_objective},
                     {"tau", r.tau},
                     {"seconds", r.seconds},
                     {"seconds_per_estimate", r.seconds_per_estimate}};
}

ExactGradient exact_gradient(const DownstreamObjective& f, const PotentialTable& phi,
                             std::size_t cap) {
  const auto post = enumerate_posterior(phi, cap);
  ad::Tape tape;
  const auto pot = record_potentials(tape, phi);
  const auto trellis = tape_forward(pot);
  Var total = tape.scalar_constant(0.0);
  CompensatedSum expectation;
  for (std::size_t k = 0; k < post.paths.size(); ++k) {
    const double fv = f.value(post.paths[k], phi.num_states);
    expectation.add(post.probs[k] * fv);
    if (fv == 0.0) continue;
    Var p = ad::exp(tape_path_log_prob(pot, trellis, post.paths[k]));
    total = ad::add(total, ad::scalar_scale(p, fv));
  }
  tape.backprop(total);
  return {flat_gradient(tape, pot), expectation.value()};
}

namespace {

void require_soft(EstimatorKind kind, const DownstreamObjective& f,
                  const EstimatorSettings& settings) {
  if (is_relaxed(kind) && !f.accepts_soft && !settings.allow_hard_only_objective)
    throw std::invalid_argument(to_string(kind) + ": objective '" + f.name +
                                "' does not accept relaxed inputs");
}

EstimatorSurrogate score_function_surrogate(EstimatorKind kind, const DownstreamObjective& f,
                                            const TapePotentials& pot,
                                            const EstimatorSettings& s, GumbelNoiseStream& noise) {
  const std::size_t N = s.samples;
  if (N < 2) throw std::invalid_argument(to_string(kind) + ": needs at least 2 samples for the baseline");
  ad::Tape& tape = pot.transition.tape();
  const std::size_t K = pot.num_states;
  const auto values = table_values(pot);
  const auto fw = forward(values);
  EstimatorSurrogate out;
  out.hard_paths.resize(N);
  std::vector<double> rewards(N);
  Var pathwise = tape.scalar_constant(0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    out.hard_paths[i] = ffbs(values, fw, noise);
    Var fi = f.evaluate(tape, onehot(tape, out.hard_paths[i], K));
    pathwise = ad::add(pathwise, fi);
    rewards[i] = s.reward_scale * fi.scalar();
    total += fi.scalar();
  }
  const double c = kind == EstimatorKind::ReinforceMsC ? s.baseline_c : 0.0;

  const auto trellis = tape_forward(pot);
  Var score = tape.scalar_constant(0.0);
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    // Reward minus baseline as a mean of pairwise differences, exactly zero
    // for a constant objective.
    double centered = 0.0;
    for (std::size_t k = 0; k < N; ++k)
      if (k != i) centered += rewards[i] - rewards[k];
    centered /= static_cast<double>(s.leave_one_out ? N - 1 : N);
    const double w = (centered - c) / static_cast<double>(N);
    weight_sum += w;
    score = ad::add(score, ad::scalar_scale(tape_path_score(pot, out.hard_paths[i]), w));
  }
  score = ad::sub(score, ad::scalar_scale(trellis.log_Z, weight_sum));
  out.surrogate = ad::add(score, ad::scalar_scale(pathwise, 1.0 / static_cast<double>(N)));
  out.objective = total / static_cast<double>(N);
  return out;
}

EstimatorSurrogate relaxed_surrogate(EstimatorKind kind, const DownstreamObjective& f,
                                     const TapePotentials& pot, const EstimatorSettings& s,
                                     GumbelNoiseStream& noise) {
  const std::size_t N = s.samples;
  if (N < 1) throw std::invalid_argument(to_string(kind) + ": needs at least 1 sample");
  ad::Tape& tape = pot.transition.tape();
  const bool ffbs_based = kind == EstimatorKind::GumbelCrf || kind == EstimatorKind::GumbelCrfSt;
  const bool st = kind == EstimatorKind::GumbelCrfSt || kind == EstimatorKind::PmMrfSt;
  std::optional<TapeTrellis> trellis;
  if (ffbs_based) trellis = tape_forward(pot);
  EstimatorSurrogate out;
  Var total = tape.scalar_constant(0.0);
  for (std::size_t n = 0; n < N; ++n) {
    TapeRelaxedPath path = ffbs_based
                               ? tape_gumbelized_ffbs(pot, *trellis, noise, s.tau)
                               : tape_relaxed_viterbi(tape_perturb_emissions(pot, noise), s.tau);
    Var z = st ? ad::straight_through(onehot(tape, path.hard, pot.num_states), path.soft)
               : path.soft;
    total = ad::add(total, f.evaluate(tape, z));
    out.hard_paths.push_back(std::move(path.hard));
  }
  out.surrogate = ad::scalar_scale(total, 1.0 / static_cast<double>(N));
  out.objective = out.surrogate.scalar();
  return out;
}

std::vector<GradientEstimate> collect(EstimatorKind kind, const DownstreamObjective& f,
                                      const PotentialTable& phi, const EstimatorSettings& settings,
                                      const RunOptions& options) {
  require_soft(kind, f, settings);
  std::vector<GradientEstimate> out(options.estimates);
  auto work = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t m = worker; m < options.estimates; m += stride) {
      auto noise = GumbelNoiseStream::derived(options.seed, m);
      out[m] = estimate_gradient(kind, f, phi, settings, noise);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, options.estimates));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  return out;
}

}  // namespace

EstimatorSurrogate estimator_surrogate(EstimatorKind kind, const DownstreamObjective& f,
                                       const TapePotentials& pot,
                                       const EstimatorSettings& settings,
                                       GumbelNoiseStream& noise) {
  require_soft(kind, f, settings);
  if (is_score_function(kind)) return score_function_surrogate(kind, f, pot, settings, noise);
  return relaxed_surrogate(kind, f, pot, settings, noise);
}

GradientEstimate estimate_gradient(EstimatorKind kind, const DownstreamObjective& f,
                                   const PotentialTable& phi, const EstimatorSettings& settings,
                                   GumbelNoiseStream& noise) {
  ad::Tape tape;
  const auto pot = record_potentials(tape, phi);
  auto est = estimator_surrogate(kind, f, pot, settings, noise);
  tape.backprop(est.surrogate);
  return {flat_gradient(tape, pot), est.objective};
}

std::vector<std::vector<double>> collect_estimates(EstimatorKind kind,
                                                   const DownstreamObjective& f,
                                                   const PotentialTable& phi,
                                                   const EstimatorSettings& settings,
                                                   const RunOptions& options) {
  auto est = collect(kind, f, phi, settings, options);
  std::vector<std::vector<double>> out;
  out.reserve(est.size());
  for (auto& e : est) out.push_back(std::move(e.gradient));
  return out;
}

GradReport run_estimator(EstimatorKind kind, const DownstreamObjective& f,
                         const PotentialTable& phi, const EstimatorSettings& settings,
                         const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  auto est = collect(kind, f, phi, settings, options);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::vector<std::vector<double>> grads;
  grads.reserve(est.size());
  CompensatedSum obj;
  for (auto& e : est) {
    obj.add(e.objective);
    grads.push_back(std::move(e.gradient));
  }
  GradReport r;
  r.estimator = to_string(kind);
  r.samples_per_estimate = settings.samples;
  r.estimates = est.size();
  r.total_samples = settings.samples * est.size();
  r.tau = is_relaxed(kind) ? settings.tau : 0.0;
  r.seconds = seconds;
  r.seconds_per_estimate = est.empty() ? 0.0 : seconds / static_cast<double>(est.size());
  r.mean_objective = est.empty() ? 0.0 : obj.value() / static_cast<double>(est.size());
  if (!grads.empty()) {
    auto m = summarize(grads);
    r.mean_gradient = std::move(m.mean);
    r.variance = std::move(m.variance);
  }
  if (grads.size() >= 2)
    r.variance_ratio = variance_ratio(grads);
  else
    r.variance_ratio.degenerate = true;
  if (options.oracle) r.bias_norm = l2_distance(r.mean_gradient, *options.oracle);
  return r;
}

GradReport reinforce_ms(const DownstreamObjective& f, const PotentialTable& phi, std::size_t N,
                        const RunOptions& options) {
  EstimatorSettings s;
  s.samples = N;
  return run_estimator(EstimatorKind::ReinforceMs, f, phi, s, options);
}

GradReport reinforce_ms_c(const DownstreamObjective& f, const PotentialTable& phi, std::size_t N,
                          double c, const RunOptions& options) {
  EstimatorSettings s;
  s.samples = N;
  s.baseline_c = c;
  return run_estimator(EstimatorKind::ReinforceMsC, f, phi, s, options);
}

namespace {
GradReport relaxed_run(EstimatorKind kind, const DownstreamObjective& f, const PotentialTable& phi,
                       double tau, std::size_t N, const RunOptions& options) {
  EstimatorSettings s;
  s.samples = N;
  s.tau = tau;
  return run_estimator(kind, f, phi, s, options);
}
}  // namespace

GradReport gumbel_crf(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                      std::size_t N, const RunOptions& options) {
  return relaxed_run(EstimatorKind::GumbelCrf, f, phi, tau, N, options);
}
GradReport gumbel_crf_st(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                         std::size_t N, const RunOptions& options) {
  return relaxed_run(EstimatorKind::GumbelCrfSt, f, phi, tau, N, options);
}
GradReport pm_mrf(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                  std::size_t N, const RunOptions& options) {
  return relaxed_run(EstimatorKind::PmMrf, f, phi, tau, N, options);
}
GradReport pm_mrf_st(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                     std::size_t N, const RunOptions& options) {
  return relaxed_run(EstimatorKind::PmMrfSt, f, phi, tau, N, options);
}

MomentSummary summarize(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) throw std::invalid_argument("summarize: no samples");
  const std::size_t D = samples[0].size();
  const double n = static_cast<double>(samples.size());
  MomentSummary out{std::vector<double>(D), std::vector<double>(D, 0.0)};
  for (std::size_t d = 0; d < D; ++d) {
    CompensatedSum s;
    for (const auto& g : samples) s.add(g[d]);
    out.mean[d] = s.value() / n;
    if (samples.size() < 2) continue;
    CompensatedSum sq;
    for (const auto& g : samples) {
      const double dev = g[d] - out.mean[d];
      sq.add(dev * dev);
    }
    out.variance[d] = sq.value() / (n - 1.0);
  }
  return out;
}

VarianceRatio variance_ratio(const std::vector<std::vector<double>>& per_sample_grads) {
  if (per_sample_grads.size() < 2)
    throw std::invalid_argument("variance_ratio: needs at least 2 gradient samples");
  const auto m = summarize(per_sample_grads);
  double var = 0.0, norm2 = 0.0;
  for (double v : m.variance) var += v;
  var /= static_cast<double>(m.variance.size());
  for (double v : m.mean) norm2 += v * v;
  VarianceRatio r;
  if (var == 0.0 || norm2 == 0.0) {
    r.degenerate = true;
    return r;
  }
  r.value = std::log(var / std::sqrt(norm2));
  return r;
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("l2_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

DownstreamObjective linear_objective(const Matrix& weights) {
  return {"linear",
          [weights](ad::Tape& tape, Var z) {
            return ad::sum(ad::mul(z, tape.constant(weights)));
          },
          true};
}

DownstreamObjective quadratic_objective(const Matrix& targets, const Matrix& coupling) {
  return {"quadratic",
          [targets, coupling](ad::Tape& tape, Var z) {
            Var diff = ad::sub(z, tape.constant(targets));
            Var out = ad::scalar_scale(ad::sum(ad::mul(diff, diff)), -1.0);
            Var c = tape.constant(coupling);
            for (std::size_t t = 0; t + 1 < z.rows(); ++t) {
              Var left = ad::matmul(ad::gather_row(z, t), c);
              out = ad::add(out, ad::sum(ad::mul(left, ad::gather_row(z, t + 1))));
            }
            return out;
          },
          true};
}

DownstreamObjective constant_objective(double c) {
  return {"constant", [c](ad::Tape& tape, Var) { return tape.scalar_constant(c); }, true};
}

}  // namespace gcrf
