#pragma once

// CRF dynamic programs recorded on an autodiff tape. Forward values are
// computed with the same arithmetic as the plain kernels in crf.hpp and
// sampling.hpp, so hard decisions made here agree with the untaped samplers
// under the same noise. All factors must be finite.

#include "gcrf/autodiff.hpp"
#include "gcrf/crf.hpp"
#include "gcrf/sampling.hpp"

namespace gcrf {

struct TapePotentials {
  std::size_t num_states = 0;
  std::size_t seq_len = 0;
  ad::Var transition;  // K x K [prev, next]
  ad::Var emission;    // T x K
  ad::Var initial;     // 1 x K
};

// Table entries as tape leaves.
TapePotentials record_potentials(ad::Tape& tape, const PotentialTable& pot);
PotentialTable table_values(const TapePotentials& pot);

// Flattened parameter layout used by the estimators: transition (row-major),
// then emission (row-major), then initial.
std::size_t potential_param_count(std::size_t K, std::size_t T);
std::vector<double> flatten_potentials(const PotentialTable& pot);
PotentialTable unflatten_potentials(std::span<const double> flat, std::size_t K, std::size_t T);
std::vector<double> flat_gradient(const ad::Tape& tape, const TapePotentials& pot);

struct TapeTrellis {
  std::vector<ad::Var> log_alpha;  // T rows, each 1 x K
  ad::Var log_Z;                   // 1 x 1
  ad::Var transition_t;            // K x K transposed transitions, [next, prev]
};

TapeTrellis tape_forward(const TapePotentials& pot);
ad::Var tape_path_score(const TapePotentials& pot, const HardPath& path);
ad::Var tape_path_log_prob(const TapePotentials& pot, const TapeTrellis& trellis,
                           const HardPath& path);
ad::Var tape_entropy(const TapePotentials& pot, const TapeTrellis& trellis);

struct TapeRelaxedPath {
  HardPath hard;
  ad::Var soft;  // T x K
  double tau = 1.0;
};

TapeRelaxedPath tape_gumbelized_ffbs(const TapePotentials& pot, const TapeTrellis& trellis,
                                     GumbelNoiseStream& noise, double tau);
// Emission noise in the shared layout; gradients pass through unchanged.
TapePotentials tape_perturb_emissions(const TapePotentials& pot, GumbelNoiseStream& noise);
TapeRelaxedPath tape_relaxed_viterbi(const TapePotentials& pot, double tau);

// Constant T x K one-hot encoding of a path.
ad::Var onehot(ad::Tape& tape, const HardPath& path, std::size_t K);
Matrix onehot_matrix(const HardPath& path, std::size_t K);

}  // namespace gcrf
