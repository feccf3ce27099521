#pragma once

#include <span>
#include <vector>

namespace gcrf {

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

// Pearson goodness-of-fit of `counts` against `probs`. Cells with expected
// count below `min_expected` are pooled into one bin before testing.
ChiSquareResult chi_square_gof(std::span<const std::size_t> counts, std::span<const double> probs,
                               double min_expected = 5.0);

// Total-variation distance between empirical frequencies and `probs`.
double tv_distance(std::span<const std::size_t> counts, std::span<const double> probs);

// sum_i |p_i - q_i| / 2
double tv_distance(std::span<const double> p, std::span<const double> q);

}  // namespace gcrf
