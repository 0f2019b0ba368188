#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "otoc/common.hpp"

namespace otoc::testing {

/// Central finite differences of f at x with step h.
inline Vec central_diff(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-5) {
  Vec g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    const double up = f(x);
    x[k] = keep - h;
    const double down = f(x);
    x[k] = keep;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

struct GradCheck {
  double maxRel = 0.0;  // over coordinates with max(|a|, |n|) > floor
  int checked = 0;
};

/// Per-coordinate relative error |a - n| / max(|a|, |n|).
inline GradCheck compare_gradients(const Vec& analytic, const Vec& numeric, double floor = 1e-8) {
  GradCheck out;
  for (Eigen::Index k = 0; k < analytic.size(); ++k) {
    const double scale = std::max(std::abs(analytic[k]), std::abs(numeric[k]));
    if (scale <= floor) continue;
    out.maxRel = std::max(out.maxRel, std::abs(analytic[k] - numeric[k]) / scale);
    ++out.checked;
  }
  return out;
}

}  // namespace otoc::testing
