#pragma once
// Central finite differences as an independent gradient oracle.
#include <algorithm>
#include <cmath>
#include <functional>

namespace fuselm::testing {

/// |a - n| / max(|a|, |n|, 1e-6); the floor keeps vanishing gradients from dominating.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// (f(x + h) - f(x - h)) / 2h, restoring x afterwards. A small step keeps ReLU kinks out of
/// the stencil for 512-wide layers.
inline double central_difference(const std::function<double()>& f, double& x, double h = 1e-6) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace fuselm::testing
