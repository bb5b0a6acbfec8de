#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Core>

namespace test_support {

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// |a - n| / max(|a|, |n|), with the denominator floored so coordinates whose
/// true gradient is zero compare on an absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of `loss` with respect to `*x`.
inline double central_difference(double* x, const std::function<double()>& loss,
                                 double step = kFiniteDifferenceStep) {
  const double saved = *x;
  *x = saved + step;
  const double up = loss();
  *x = saved - step;
  const double down = loss();
  *x = saved;
  return (up - down) / (2.0 * step);
}

struct GradReport {
  double max_error = 0.0;
  int checked = 0;
};

/// Compares `grad` against central differences on `count` random
/// coordinates of `value` (all of them when count exceeds the size).
inline GradReport check_coordinates(Eigen::MatrixXd& value, const Eigen::MatrixXd& grad,
                                    const std::function<double()>& loss, int count, std::mt19937_64& rng) {
  GradReport report;
  const auto size = static_cast<std::size_t>(value.size());
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(size, static_cast<std::size_t>(count)));
  for (std::size_t i : idx) {
    const double numeric = central_difference(value.data() + i, loss);
    report.max_error = std::max(report.max_error, relative_error(grad.data()[i], numeric));
    ++report.checked;
  }
  return report;
}

}  // namespace test_support
