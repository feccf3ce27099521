#pragma once

// Registry of seeded golden instances with stored oracle artifacts and
// pilot-calibrated regression bounds.

#include <string>
#include <vector>

#include <json.hpp>

#include "gcrf/crf.hpp"
#include "gcrf/estimators.hpp"

namespace gcrf {

// Entries iid N(0, scale^2), drawn transition, emission, then initial.
PotentialTable normal_table(std::size_t K, std::size_t T, std::uint64_t seed, double scale);

// f(z) = -sum_t ||z_t - y_t||^2 + sum_t z_t^T C z_{t+1}, with one-hot targets
// y_t and coupling C ~ N(0, 1) drawn from `seed`.
DownstreamObjective seeded_quadratic(std::size_t K, std::size_t T, std::uint64_t seed);

// FNV-1a (64-bit, hex) of the posterior probabilities printed with %.17g.
std::string posterior_digest(const ExactPosterior& post);

struct GoldenArtifacts {
  double log_Z = 0.0;
  double entropy = 0.0;
  HardPath viterbi;
  std::size_t num_paths = 0;
  std::string posterior_digest;
};

GoldenArtifacts compute_artifacts(const PotentialTable& table);

struct GoldenInstance {
  std::string name;
  std::string role;  // "dp" or "adversarial"
  nlohmann::json spec;  // {"generator": "normal", K, T, seed, scale} or {"generator": "table", table}
  std::uint64_t objective_seed = 0;
  GoldenArtifacts artifacts;
  nlohmann::json bounds;

  PotentialTable table() const;
  DownstreamObjective objective() const;
  double bound(const std::string& key) const;
};

struct BenchmarkSpec {
  std::vector<std::string> instances;
  std::vector<double> taus;
  std::vector<std::size_t> budgets;  // samples per estimate
  std::vector<std::uint64_t> seeds;
  std::size_t estimates = 200;  // gradient estimates per measurement point
  double baseline_c = 0.1;      // REINFORCE-MS-C constant
  double order_fraction = 0.8;  // required share of points with r(relaxed) < r(score function)
  nlohmann::json pilot;         // measured values from the calibration run
};

struct GoldenRegistry {
  int version = 1;
  std::string pilot_date;
  std::uint64_t pilot_seed = 0;
  std::vector<GoldenInstance> instances;
  BenchmarkSpec benchmark;

  const GoldenInstance& find(const std::string& name) const;
  std::vector<const GoldenInstance*> with_role(const std::string& role) const;
};

PotentialTable table_from_spec(const nlohmann::json& spec);

// Builds the registry from its specs, computing every artifact.
GoldenRegistry default_golden_registry();

void to_json(nlohmann::json& j, const GoldenInstance& g);
void from_json(const nlohmann::json& j, GoldenInstance& g);
void to_json(nlohmann::json& j, const GoldenRegistry& r);
void from_json(const nlohmann::json& j, GoldenRegistry& r);

GoldenRegistry load_golden(const std::string& path);
void write_golden(const GoldenRegistry& registry, const std::string& path);

// Regenerates artifacts from each spec; returns "<instance>: <field>" for
// every mismatch with the stored values.
std::vector<std::string> verify_golden(const GoldenRegistry& registry);

}  // namespace gcrf
