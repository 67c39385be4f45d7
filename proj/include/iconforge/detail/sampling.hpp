#pragma once

#include <cmath>

namespace iconforge::detail {

// Position of a normalized coordinate between two neighbouring nodes of one
// axis. `clamped` marks points pushed back onto the grid (or degenerate axes),
// where the derivative with respect to the coordinate is taken as zero.
struct AxisWeight {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
  bool clamped = false;
  double scale = 0.0;  // d(index)/d(coordinate) = n-1
};

inline AxisWeight axis_weight(double p, int n) {
  AxisWeight w;
  if (n < 2) {
    w.clamped = true;
    return w;
  }
  const double last = n - 1;
  w.scale = last;
  double t = p * last;
  // NaN lands on the lower border instead of reaching the integer cast.
  if (!(t >= 0.0)) {
    t = 0.0;
    w.clamped = true;
  } else if (t > last) {
    t = last;
    w.clamped = true;
  }
  // Coordinates stored in float land within ~6e-8 relative of a node; snap so
  // that node-aligned lookups return stored values exactly.
  const double r = std::nearbyint(t);
  if (std::abs(t - r) <= 1.2e-7 * last) t = r;
  int lo = static_cast<int>(t);
  if (lo >= n - 1) lo = n - 2;
  w.lo = lo;
  w.hi = lo + 1;
  w.frac = t - lo;
  return w;
}

// Nearest node index for label lookups (ties round half up).
inline int nearest_index(double p, int n) {
  if (n < 2) return 0;
  double t = p * (n - 1);
  if (!(t >= 0.0)) t = 0.0;
  if (t > n - 1) t = n - 1;
  return static_cast<int>(std::floor(t + 0.5));
}

}  // namespace iconforge::detail
