#pragma once

// Oracle checks over the golden registry. Each check returns named
// per-instance records and an overall verdict; `gcrf check` and the
// acceptance runner are thin drivers over these.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcrf/dataset.hpp"
#include "gcrf/golden.hpp"
#include "gcrf/vae.hpp"

namespace gcrf {

struct CheckRecord {
  std::string check;     // e.g. "dp_exactness.entropy"
  std::string instance;  // golden instance, primitive, or estimator name
  bool passed = true;
  nlohmann::json detail = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const CheckRecord& r);

struct CheckResult {
  std::string name;
  bool passed = true;
  std::string summary;
  std::vector<CheckRecord> records;
  double seconds = 0.0;

  void add(CheckRecord r);
  std::vector<std::string> failures() const;  // "<check>/<instance>"
};

struct SuiteOptions {
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::size_t sampler_draws = 100000;
  double chi_square_alpha = 0.001;
  double coupling_tau = 1.0;
  std::vector<double> tau_grid{1.0, 0.5, 0.1, 0.01};
  std::size_t temperature_draws = 10000;
  double near_onehot_tol = 1e-3;
  double near_onehot_share = 0.99;
  std::size_t unbiased_budget = 100000;  // samples per estimator per instance
  std::size_t unbiased_samples = 4;      // N per estimate
  double z_sigmas = 3.0;
  double unbiased_seconds = 60.0;  // per instance
  std::vector<double> fd_taus{1.0, 0.5};
  std::size_t fd_seeds = 3;
  double fd_tol = 1e-4;
  std::size_t primitive_trials = 100;
  double primitive_tol = 1e-6;
  double dp_seconds = 10.0;
};

CheckResult check_golden_integrity(const GoldenRegistry& registry);
CheckResult check_dp_exactness(const GoldenRegistry& registry, const SuiteOptions& options);
CheckResult check_samplers(const GoldenRegistry& registry, const SuiteOptions& options);
CheckResult check_temperature_limit(const GoldenRegistry& registry, const SuiteOptions& options);
CheckResult check_pm_mrf_bias(const GoldenRegistry& registry, const SuiteOptions& options);
CheckResult check_unbiasedness(const GoldenRegistry& registry, const SuiteOptions& options);
// Worst relative error per grad_engine primitive over random trials.
CheckResult check_primitive_gradients(const SuiteOptions& options);
CheckResult check_reparameterization(const GoldenRegistry& registry, const SuiteOptions& options);

struct BenchmarkRow {
  std::string instance;
  EstimatorKind estimator;
  std::uint64_t seed = 0;
  std::size_t budget = 0;  // samples per estimate
  double tau = std::numeric_limits<double>::quiet_NaN();  // NaN for score-function rows
  GradReport report;
  std::string error;  // non-empty when the estimator rejected the objective
};

void to_json(nlohmann::json& j, const BenchmarkRow& row);

struct BenchmarkPlan {
  std::vector<std::string> instances;
  std::vector<EstimatorKind> estimators;
  std::vector<double> taus;
  std::vector<std::size_t> budgets;
  std::vector<std::uint64_t> seeds;
  std::size_t estimates = 200;
  double baseline_c = 0.1;
  bool hard_only_objective = false;  // objective rejects relaxed input
  std::size_t workers = 1;
};

BenchmarkPlan benchmark_plan(const GoldenRegistry& registry);

// Rows ordered by instance, estimator, seed, tau, budget. Estimators at the
// same (instance, seed) share noise streams. `on_row` is called in order.
std::vector<BenchmarkRow> run_benchmark(const GoldenRegistry& registry, const BenchmarkPlan& plan,
                                        const std::function<void(const BenchmarkRow&)>& on_row = {});

// Share of (instance, seed, tau, budget, relaxed, score-function) points where
// r(relaxed) < r(score function), relaxed in {gumbel_crf, gumbel_crf_st} and
// score function in {reinforce_ms, reinforce_ms_c}.
CheckResult check_variance_ordering(const std::vector<BenchmarkRow>& rows, double required_share);

struct BudgetAccountingOptions {
  std::vector<std::size_t> ms_budgets{2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64};
  std::size_t estimates = 200;
  double tau = 1.0;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
};
CheckResult check_budget_accounting(const GoldenRegistry& registry,
                                    const BudgetAccountingOptions& options);

struct VaeAcceptanceOptions {
  HmmDatasetSpec data;
  vae::TrainConfig train;
  std::size_t is_samples = 100;
  double nll_tolerance = 0.05;  // relative
  double seconds_limit = 1800.0;
  std::size_t oracle_items = 20;
  std::size_t oracle_len = 5;
  std::size_t elbo_estimates = 200;
  double z_sigmas = 3.0;
  std::function<void(const vae::EpochRecord&)> on_epoch;
};
// Defaults for the synthetic HMM run (K=5, V=20, T=10, n=2000).
VaeAcceptanceOptions default_vae_acceptance();
CheckResult check_vae_end_to_end(const VaeAcceptanceOptions& options);

// Degenerate inference networks: all-zero (uniform posterior) and zero encoder
// with a dominant emission bias on state 0 (constant posterior).
vae::InferenceParams uniform_collapse_checkpoint(const vae::ModelDims& dims);
vae::InferenceParams constant_collapse_checkpoint(const vae::ModelDims& dims);

}  // namespace gcrf
