#pragma once

// Percentile-shift costs of moving x to x_cf.

#include "cfmult/common.hpp"
#include "cfmult/tabular.hpp"

namespace cfmult {

// Sum over features of |Q_j(x_cf_j) - Q_j(x_j)|.
inline double cost_total(const PercentileTransform& t, std::span<const double> x, std::span<const double> x_cf) {
  if (x.size() != x_cf.size() || x.size() != t.d()) throw std::invalid_argument("cost_total: dimension mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) s += std::abs(t.quantile(j, x_cf[j]) - t.quantile(j, x[j]));
  return s;
}

// Max over features of |Q_j(x_cf_j) - Q_j(x_j)|.
inline double cost_max(const PercentileTransform& t, std::span<const double> x, std::span<const double> x_cf) {
  if (x.size() != x_cf.size() || x.size() != t.d()) throw std::invalid_argument("cost_max: dimension mismatch");
  double m = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) m = std::max(m, std::abs(t.quantile(j, x_cf[j]) - t.quantile(j, x[j])));
  return m;
}

struct CostReport {
  double cost_total = 0.0;
  double cost_max = 0.0;
  double norm_cost = 0.0;
};

inline CostReport cost_report(const PercentileTransform& t, std::span<const double> x, std::span<const double> x_cf) {
  return {cost_total(t, x, x_cf), cost_max(t, x, x_cf), l2_distance(x, x_cf)};
}

}  // namespace cfmult
