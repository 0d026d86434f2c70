#pragma once

// Central finite-difference oracle for gradient tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "grace/tensor.hpp"

namespace grace::testing {

/// Largest relative error between an analytic gradient and central
/// differences of `f` with respect to `x`, using
///   |a - n| / max(|a|, |n|, floor).
inline double max_rel_error(Tensor& x, const Tensor& analytic,
                            const std::function<double()>& f, double h = 1e-5,
                            double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f();
    x[i] = orig - h;
    const double fm = f();
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace grace::testing
