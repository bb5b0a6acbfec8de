#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "neurofuse/eigen_sym3.hpp"
#include "neurofuse/nifti_io.hpp"

namespace neurofuse {

struct VoxelMask {
  Dims3 dims{0, 0, 0};
  std::vector<std::uint8_t> inside;

  std::size_t count() const noexcept;
};

/// Per-voxel diffusion tensors (mm^2/s) with eigenvalues sorted descending
/// and clamped at zero. Unmasked voxels hold zeros.
struct TensorField {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1, 1, 1};
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  std::vector<SymTensor> tensors;
  std::vector<std::array<double, 3>> eigenvalues;
  std::vector<std::uint8_t> mask;

  std::size_t size() const noexcept { return mask.size(); }
  /// Field whose masked voxels carry the given (descending, nonnegative) eigenvalues.
  static TensorField from_eigenvalues(const std::vector<std::array<double, 3>>& eigenvalues);
};

enum class ScalarKind { FA, MD };

struct ScalarMap {
  Volume3D volume;
  ScalarKind kind;
};

inline constexpr double kDefaultMaskThreshold = 0.2;

/// Threshold at a fraction of the 99th percentile of positive intensities,
/// keep the largest 6-connected component, then close once.
VoxelMask brain_mask(const Volume3D& b0, double threshold_fraction = kDefaultMaskThreshold);

/// Log-linear ordinary least squares fit of the six tensor components.
TensorField fit_tensor(const DiffusionSeries& series, const VoxelMask& mask);

double fractional_anisotropy(const std::array<double, 3>& eigenvalues) noexcept;
double mean_diffusivity(const std::array<double, 3>& eigenvalues) noexcept;

ScalarMap fractional_anisotropy(const TensorField& field);
ScalarMap mean_diffusivity(const TensorField& field);

struct DtiMaps {
  VoxelMask mask;
  Volume3D fa;
  Volume3D md;
};

/// Mask from the mean b0, tensor fit, then FA and MD maps.
DtiMaps compute_dti_maps(const DiffusionSeries& series, double threshold_fraction = kDefaultMaskThreshold);

}  // namespace neurofuse
