#pragma once

#include <gcrf/crf.hpp>
#include <gcrf/random.hpp>

namespace gcrf::testing {

inline PotentialTable random_table(std::size_t K, std::size_t T, std::uint64_t seed,
                                   double scale = 1.0) {
  Rng rng(seed);
  PotentialTable pot(K, T);
  for (double& v : pot.log_transition.data()) v = scale * rng.normal();
  for (double& v : pot.log_emission.data()) v = scale * rng.normal();
  for (double& v : pot.log_initial) v = scale * rng.normal();
  return pot;
}

inline PotentialTable uniform_table(std::size_t K, std::size_t T) { return PotentialTable(K, T); }

// Emissions that allow exactly one state per position.
inline PotentialTable forced_table(const HardPath& path, std::size_t K) {
  PotentialTable pot(K, path.size());
  for (std::size_t t = 0; t < path.size(); ++t)
    for (std::size_t k = 0; k < K; ++k) pot.log_emission(t, k) = k == path[t] ? 0.0 : kNegInf;
  return pot;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace gcrf::testing
