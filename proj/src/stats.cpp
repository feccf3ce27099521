#include "gcrf/stats.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/chi_squared.hpp>

namespace gcrf {

ChiSquareResult chi_square_gof(std::span<const std::size_t> counts, std::span<const double> probs,
                               double min_expected) {
  if (counts.size() != probs.size()) throw std::invalid_argument("chi_square_gof: size mismatch");
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  ChiSquareResult r;
  double pooled_obs = 0.0, pooled_exp = 0.0;
  std::size_t bins = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    const double o = static_cast<double>(counts[i]);
    if (e < min_expected) {
      pooled_obs += o;
      pooled_exp += e;
      continue;
    }
    r.statistic += (o - e) * (o - e) / e;
    ++bins;
  }
  if (pooled_exp > 0.0) {
    r.statistic += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / pooled_exp;
    ++bins;
  } else if (pooled_obs > 0.0) {
    // Mass observed where the model puts none.
    r.statistic = std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
    r.dof = bins;
    return r;
  }
  r.dof = bins > 1 ? bins - 1 : 0;
  if (r.dof == 0) {
    r.p_value = 1.0;
    return r;
  }
  boost::math::chi_squared dist(static_cast<double>(r.dof));
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

double tv_distance(std::span<const std::size_t> counts, std::span<const double> probs) {
  if (counts.size() != probs.size()) throw std::invalid_argument("tv_distance: size mismatch");
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  double tv = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i)
    tv += std::abs(static_cast<double>(counts[i]) / n - probs[i]);
  return 0.5 * tv;
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: size mismatch");
  double tv = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return 0.5 * tv;
}

}  // namespace gcrf
