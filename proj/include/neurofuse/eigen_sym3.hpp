#pragma once

#include <array>

namespace neurofuse {

/// Upper triangle of a symmetric 3x3 matrix: (xx, xy, xz, yy, yz, zz).
using SymTensor = std::array<double, 6>;

/// Eigenvalues of a symmetric 3x3 matrix by the closed-form trigonometric
/// method, sorted descending. No iteration.
std::array<double, 3> symmetric_eigenvalues(const SymTensor& t) noexcept;

}  // namespace neurofuse
