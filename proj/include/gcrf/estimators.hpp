#pragma once

// Monte-Carlo estimators of the gradient of E_{p_phi(z|x)}[f(z)] with respect
// to the potentials phi of a linear-chain CRF, and the statistics used to
// compare them.
//
// phi is the full PotentialTable; gradients are flat vectors in the layout of
// flatten_potentials(). Every estimate m in a run draws its noise from
// GumbelNoiseStream::derived(seed, m), so two estimators run with the same
// seed see the same Gumbel noise estimate by estimate.

#include <functional>
#include <optional>
#include <string>

#include <json.hpp>

#include "gcrf/crf_tape.hpp"

namespace gcrf {

// A downstream objective f(z). `evaluate` receives a T x K path node: a
// relaxed sample or a constant one-hot. Objectives that only make sense on
// one-hot inputs set accepts_soft = false.
struct DownstreamObjective {
  std::string name;
  std::function<ad::Var(ad::Tape&, ad::Var path)> evaluate;
  bool accepts_soft = true;

  double value(const HardPath& path, std::size_t K) const;
};

enum class EstimatorKind { ReinforceMs, ReinforceMsC, GumbelCrf, GumbelCrfSt, PmMrf, PmMrfSt };

std::string to_string(EstimatorKind kind);
EstimatorKind estimator_from_string(const std::string& name);
bool is_score_function(EstimatorKind kind);
bool is_relaxed(EstimatorKind kind);

struct EstimatorSettings {
  std::size_t samples = 1;    // N samples per estimate
  double tau = 1.0;           // relaxed estimators only
  double baseline_c = 0.0;    // REINFORCE-MS-C constant
  bool leave_one_out = true;  // MS baseline: mean of the other N-1 rewards
  double reward_scale = 1.0;  // multiplies f for the score-function estimators
  bool allow_hard_only_objective = false;
};

struct GradientEstimate {
  std::vector<double> gradient;
  double objective = 0.0;  // mean f over the samples used (forward value)
};

struct VarianceRatio {
  double value = 0.0;
  bool degenerate = false;  // zero variance or zero mean; value is meaningless
};

struct GradReport {
  std::string estimator;
  std::size_t samples_per_estimate = 0;
  std::size_t estimates = 0;
  std::size_t total_samples = 0;
  std::vector<double> mean_gradient;
  std::vector<double> variance;  // per coordinate, across estimates
  VarianceRatio variance_ratio;
  std::optional<double> bias_norm;  // L2 distance of mean_gradient from the oracle
  double mean_objective = 0.0;
  double seconds = 0.0;
  double seconds_per_estimate = 0.0;
  double tau = 0.0;
};

void to_json(nlohmann::json& j, const GradReport& report);

// Exact gradient of E[f] by enumerating every path; also returns E[f].
struct ExactGradient {
  std::vector<double> gradient;
  double expectation = 0.0;
};
ExactGradient exact_gradient(const DownstreamObjective& f, const PotentialTable& phi,
                             std::size_t cap = kDefaultEnumerationCap);

// Scalar whose gradient with respect to the potentials (and to any other leaf
// that f reads) is one estimate of the gradient of E[f]. Score-function
// surrogates add the mean of f on the hard samples, so leaves inside f receive
// their pathwise gradient too. `objective` is the mean f over the samples.
struct EstimatorSurrogate {
  ad::Var surrogate;
  double objective = 0.0;
  std::vector<HardPath> hard_paths;
};
EstimatorSurrogate estimator_surrogate(EstimatorKind kind, const DownstreamObjective& f,
                                       const TapePotentials& pot,
                                       const EstimatorSettings& settings,
                                       GumbelNoiseStream& noise);

// A single gradient estimate using settings.samples samples.
GradientEstimate estimate_gradient(EstimatorKind kind, const DownstreamObjective& f,
                                   const PotentialTable& phi, const EstimatorSettings& settings,
                                   GumbelNoiseStream& noise);

struct RunOptions {
  std::size_t estimates = 1;  // replications aggregated into the report
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  const std::vector<double>* oracle = nullptr;  // for bias_norm
};

GradReport run_estimator(EstimatorKind kind, const DownstreamObjective& f,
                         const PotentialTable& phi, const EstimatorSettings& settings,
                         const RunOptions& options);

// Per-estimate gradients of a run, in estimate order.
std::vector<std::vector<double>> collect_estimates(EstimatorKind kind,
                                                   const DownstreamObjective& f,
                                                   const PotentialTable& phi,
                                                   const EstimatorSettings& settings,
                                                   const RunOptions& options);

GradReport reinforce_ms(const DownstreamObjective& f, const PotentialTable& phi, std::size_t N,
                        const RunOptions& options);
GradReport reinforce_ms_c(const DownstreamObjective& f, const PotentialTable& phi, std::size_t N,
                          double c, const RunOptions& options);
GradReport gumbel_crf(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                      std::size_t N, const RunOptions& options);
GradReport gumbel_crf_st(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                         std::size_t N, const RunOptions& options);
GradReport pm_mrf(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                  std::size_t N, const RunOptions& options);
GradReport pm_mrf_st(const DownstreamObjective& f, const PotentialTable& phi, double tau,
                     std::size_t N, const RunOptions& options);

// r = log(mean per-coordinate variance / L2 norm of the mean gradient).
// Throws std::invalid_argument for fewer than two samples.
VarianceRatio variance_ratio(const std::vector<std::vector<double>>& per_sample_grads);

struct MomentSummary {
  std::vector<double> mean;
  std::vector<double> variance;  // unbiased
};
MomentSummary summarize(const std::vector<std::vector<double>>& samples);

double l2_distance(std::span<const double> a, std::span<const double> b);

// Objectives used by the benchmarks and tests.
// f(z) = sum_t <w_t, z_t>.
DownstreamObjective linear_objective(const Matrix& weights);
// f(z) = -sum_t ||z_t - target_t||^2 + sum_t z_t^T C z_{t+1}.
DownstreamObjective quadratic_objective(const Matrix& targets, const Matrix& coupling);
DownstreamObjective constant_objective(double c);

}  // namespace gcrf
