#pragma once

// Euclidean projection onto the simplex by enumerating every support set:
// on a fixed support the KKT point is s_i - theta with a shared shift theta.
// Of the feasible supports the closest point wins. Only for tiny n.

#include <cstddef>
#include <limits>
#include <vector>

namespace ra::testing {

inline std::vector<double> simplex_qp_oracle(const std::vector<double>& s) {
  const std::size_t n = s.size();
  std::vector<double> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    double sum = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        sum += s[i];
        ++k;
      }
    }
    const double theta = (sum - 1.0) / static_cast<double>(k);
    std::vector<double> p(n, 0.0);
    bool feasible = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        p[i] = s[i] - theta;
        if (p[i] < 0.0) feasible = false;
      }
    }
    if (!feasible) continue;
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) d += (p[i] - s[i]) * (p[i] - s[i]);
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  }
  return best;
}

}  // namespace ra::testing
