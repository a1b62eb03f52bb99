#pragma once

// Reference implementations shared by the unit tests and the acceptance
// suite. They follow the defining optimization problems directly and share
// no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace oracle {

// Euclidean projection onto the simplex by enumerating every support set.
// For support S the nearest point of that face's affine hull is
// p_S = z_S - (sum z_S - 1) / |S|; the projection is the closest such
// point that is nonnegative.
inline std::vector<double> project_simplex(const std::vector<double>& z) {
  const std::size_t n = z.size();
  std::vector<double> best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (unsigned s = 1; s < (1u << n); ++s) {
    double total = 0.0;
    int k = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (s & (1u << i)) total += z[i], ++k;
    const double tau = (total - 1.0) / k;
    std::vector<double> p(n, 0.0);
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i)
      if (s & (1u << i)) {
        p[i] = z[i] - tau;
        if (p[i] < 0) ok = false;
      }
    if (!ok) continue;
    double dist = 0.0;
    for (std::size_t i = 0; i < n; ++i) dist += (p[i] - z[i]) * (p[i] - z[i]);
    if (dist < best_dist) best_dist = dist, best = p;
  }
  return best;
}

// 1.5-entmax by bisection on the threshold: p_i = max(0, z_i/2 - tau)^2 with
// sum p = 1. The mass is decreasing in tau, so the root is bracketed by
// [max z / 2 - 1, max z / 2].
inline std::vector<double> entmax15_bisection(const std::vector<double>& z) {
  const double zmax = *std::max_element(z.begin(), z.end()) / 2.0;
  double lo = zmax - 1.0, hi = zmax;
  auto mass = [&](double tau) {
    double m = 0.0;
    for (double v : z) m += std::pow(std::max(0.0, v / 2.0 - tau), 2);
    return m;
  };
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mass(mid) > 1.0 ? lo : hi) = mid;
  }
  std::vector<double> p;
  for (double v : z) p.push_back(std::pow(std::max(0.0, v / 2.0 - 0.5 * (lo + hi)), 2));
  return p;
}

}  // namespace oracle
