#pragma once

// Exact dynamic programs for linear-chain CRFs in log space.
//
// A PotentialTable scores a path z_1..z_T as
//   log_initial[z_1] + sum_t log_emission(t, z_t) + sum_{t>1} log_transition(z_{t-1}, z_t)
// and p(z|x) is that score normalized by log_Z. Transitions are shared across
// time; emissions vary per position. -inf entries mark forbidden factors.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcrf/matrix.hpp"

namespace gcrf {

struct PotentialTable {
  std::size_t num_states = 0;  // K
  std::size_t seq_len = 0;     // T
  Matrix log_transition;       // K x K, [prev, next]
  Matrix log_emission;         // T x K
  std::vector<double> log_initial;  // K

  PotentialTable() = default;
  PotentialTable(std::size_t K, std::size_t T)
      : num_states(K), seq_len(T), log_transition(K, K), log_emission(T, K),
        log_initial(K, 0.0) {}

  // Throws std::invalid_argument on shape errors, K or T of zero, NaN, or +inf.
  void validate() const;

  // Adds `c` to every log-factor touching position t.
  void shift_step(std::size_t t, double c);
};

void to_json(nlohmann::json& j, const PotentialTable& pot);
void from_json(const nlohmann::json& j, PotentialTable& pot);
PotentialTable read_potential_table(const std::string& path);
void write_potential_table(const std::string& path, const PotentialTable& pot);

struct ForwardTrellis {
  Matrix log_alpha;  // T x K
  double log_Z = kNegInf;
};

struct BackwardTrellis {
  Matrix log_beta;  // T x K
};

using HardPath = std::vector<std::size_t>;

struct ExactPosterior {
  std::size_t num_states = 0;
  std::size_t seq_len = 0;
  std::vector<HardPath> paths;
  std::vector<double> probs;

  // Paths are enumerated in mixed-radix order with z_1 most significant.
  std::size_t index_of(const HardPath& path) const;
};

inline constexpr std::size_t kDefaultEnumerationCap = 1'000'000;

ForwardTrellis forward(const PotentialTable& pot);
BackwardTrellis backward(const PotentialTable& pot);

double path_score(const PotentialTable& pot, const HardPath& path);
double path_log_prob(const PotentialTable& pot, const HardPath& path);
double path_log_prob(const PotentialTable& pot, const ForwardTrellis& trellis,
                     const HardPath& path);

// Posterior state marginals via forward-backward; each row sums to one.
Matrix marginals(const PotentialTable& pot);

// H[p(z|x)] by the forward-style entropy recursion over backward conditionals.
double entropy(const PotentialTable& pot);
double entropy(const PotentialTable& pot, const ForwardTrellis& trellis);

// MAP path. Ties go to the lowest state index at every decision.
HardPath viterbi(const PotentialTable& pot);

ExactPosterior enumerate_posterior(const PotentialTable& pot,
                                   std::size_t cap = kDefaultEnumerationCap);

// Oracle helpers computed directly from an ExactPosterior.
Matrix posterior_marginals(const ExactPosterior& post);
double posterior_entropy(const ExactPosterior& post);
HardPath posterior_argmax(const ExactPosterior& post);

// Number of paths K^T, saturating at SIZE_MAX.
std::size_t path_count(std::size_t K, std::size_t T);
HardPath decode_path(std::size_t index, std::size_t K, std::size_t T);

// Validates a path against a table; throws std::invalid_argument on mismatch.
void check_path(const PotentialTable& pot, const HardPath& path);

}  // namespace gcrf
