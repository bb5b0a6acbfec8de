#include "neurofuse/eigen_sym3.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include <Eigen/Geometry>

namespace neurofuse {

std::array<double, 3> symmetric_eigenvalues(const SymTensor& t) noexcept {
  const double a11 = t[0], a12 = t[1], a13 = t[2], a22 = t[3], a23 = t[4], a33 = t[5];
  const double off = a12 * a12 + a13 * a13 + a23 * a23;
  std::array<double, 3> eig{};

  const double q = (a11 + a22 + a33) / 3.0;
  const double d11 = a11 - q, d22 = a22 - q, d33 = a33 - q;
  const double p2 = d11 * d11 + d22 * d22 + d33 * d33 + 2.0 * off;

  if (off == 0.0 || p2 == 0.0) {
    eig = {a11, a22, a33};
  } else {
    const double p = std::sqrt(p2 / 6.0);
    // B = (A - qI) / p; r = det(B) / 2 lies in [-1, 1] up to rounding.
    const double b11 = d11 / p, b22 = d22 / p, b33 = d33 / p;
    const double b12 = a12 / p, b13 = a13 / p, b23 = a23 / p;
    const double det = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13) +
                       b13 * (b12 * b23 - b22 * b13);
    const double r = std::clamp(det / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    const double e1 = q + 2.0 * p * std::cos(phi);
    const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    const double e2 = 3.0 * q - e1 - e3;
    // The trigonometric form is only accurate for the isolated root; the
    // other two come from the 2x2 block orthogonal to its eigenvector.
    const double isolated = (e1 - e2 > e2 - e3) ? e1 : e3;
    const Eigen::Matrix3d a{{a11, a12, a13}, {a12, a22, a23}, {a13, a23, a33}};
    const Eigen::Matrix3d m = a - isolated * Eigen::Matrix3d::Identity();
    const Eigen::Vector3d c0 = m.row(0).cross(m.row(1)), c1 = m.row(0).cross(m.row(2)),
                          c2 = m.row(1).cross(m.row(2));
    Eigen::Vector3d v = c0;
    if (c1.squaredNorm() > v.squaredNorm()) v = c1;
    if (c2.squaredNorm() > v.squaredNorm()) v = c2;
    if (v.squaredNorm() == 0.0) {
      eig = {e1, e2, e3};
    } else {
      v.normalize();
      const Eigen::Vector3d seed = std::abs(v.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
      const Eigen::Vector3d u = v.cross(seed).normalized();
      const Eigen::Vector3d w = v.cross(u);
      const double b00 = u.dot(a * u), b01 = u.dot(a * w), b11 = w.dot(a * w);
      const double mid = 0.5 * (b00 + b11), rad = std::hypot(0.5 * (b00 - b11), b01);
      eig = {isolated, mid + rad, mid - rad};
    }
  }
  std::stable_sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

}  // namespace neurofuse
