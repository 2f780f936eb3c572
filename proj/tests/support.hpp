#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "spex/numerics.hpp"

namespace spex::testing {

/// Largest entrywise gap scaled by the largest reference magnitude
/// (clamped at 1e-8), so tiny entries are judged on the gradient's scale.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double gap = 0.0, scale = 1e-8;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    gap = std::max(gap, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return gap / scale;
}

/// Central differences of f w.r.t. each entry of x (x is restored afterwards).
inline std::vector<double> central_difference(const std::function<double()>& f, const std::vector<double*>& x,
                                              double h = 1e-5) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = *x[i];
    *x[i] = keep + h;
    const double up = f();
    *x[i] = keep - h;
    const double down = f();
    *x[i] = keep;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

inline std::vector<double*> entries(Matrix& m) {
  std::vector<double*> out;
  for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data() + i);
  return out;
}

inline std::vector<double> values(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

}  // namespace spex::testing
