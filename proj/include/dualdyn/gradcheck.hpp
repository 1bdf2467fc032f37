#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "dualdyn/tensor.hpp"

namespace dualdyn {

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& params,
                                     double eps) {
  if (!(eps > 0.0)) throw Error("finite_difference_grad: eps must be positive");
  Tensor grad = Tensor::zeros_like(params);
  Tensor probe = params;
  for (std::size_t i = 0; i < params.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error("finite_difference_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient is ~0 from dividing finite-difference noise by nothing.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// max(1, |f|, max|g|): central differences of f carry round-off near
/// ε_mach·|f|/eps, so a relative-error floor scales with this.
inline double roundoff_scale(double value, const Tensor& grad) {
  double s = std::max(1.0, std::abs(value));
  for (double g : grad.data()) s = std::max(s, std::abs(g));
  return s;
}

inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  if (a.shape() != b.shape()) throw Error("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

}  // namespace dualdyn
