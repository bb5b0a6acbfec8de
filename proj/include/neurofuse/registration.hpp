#pragma once

#include <array>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "neurofuse/nifti_io.hpp"

namespace neurofuse {

/// Twelve-parameter affine map from reference world space to moving world
/// space, composed as T * R * Sh * Sc with R = Rz * Ry * Rx.
struct AffineTransform {
  enum Param {
    kTx, kTy, kTz,
    kRx, kRy, kRz,
    kSx, kSy, kSz,
    kHxy, kHxz, kHyz,
    kCount
  };
  std::array<double, kCount> params{0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0};

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(double tx, double ty, double tz);
  static AffineTransform rigid(double tx, double ty, double tz, double rx, double ry, double rz);

  double& operator[](int p) { return params[p]; }
  double operator[](int p) const { return params[p]; }

  Eigen::Matrix4d matrix() const;
};

nlohmann::json to_json(const AffineTransform& t);
AffineTransform transform_from_json(const nlohmann::json& j);

enum class Interpolation { Nearest, Trilinear };

/// Samples `moving` on the grid of `reference`. Each output voxel reads
/// moving at transform(world point); samples outside the field are 0.
Volume3D resample(const Volume3D& moving, const AffineTransform& transform, const Volume3D& reference,
                  Interpolation interpolation);
Volume3D resample(const Volume3D& moving, const Eigen::Matrix4d& world_map, const Volume3D& reference,
                  Interpolation interpolation);

struct IntensityRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Joint counts over voxels where at least one image is nonzero. Row index
/// is the fixed-image bin.
struct JointHistogram {
  int bins = 32;
  IntensityRange fixed_range;
  IntensityRange moving_range;
  std::vector<double> counts;
  std::vector<double> fixed_marginal;
  std::vector<double> moving_marginal;
  double total = 0.0;

  double at(int f, int m) const { return counts[static_cast<std::size_t>(f) * bins + m]; }
};

inline constexpr int kDefaultBins = 32;

JointHistogram joint_histogram(const Volume3D& fixed, const Volume3D& moving, int bins = kDefaultBins);
/// MI in nats with 0 ln 0 = 0. Throws DegenerateHistogram when either
/// marginal occupies fewer than two bins.
double mutual_information(const JointHistogram& histogram);
double mutual_information(const Volume3D& fixed, const Volume3D& moving_resampled, int bins = kDefaultBins);
/// Entropy (nats) of the binned nonzero voxels, binned as mutual_information would.
double marginal_entropy(const Volume3D& volume, int bins = kDefaultBins);

struct RegistrationConfig {
  int bins = kDefaultBins;
  std::vector<int> levels{4, 2, 1};
  double translation_step = 10.0;
  double rotation_step = 0.1;
  double scale_step = 0.1;
  double shear_step = 0.05;
  double tolerance = 1e-5;
  int max_cycles = 50;
  int line_search_iterations = 12;
};

struct RegistrationResult {
  AffineTransform transform;
  AffineTransform initial;
  double initial_mi = 0.0;
  double final_mi = 0.0;
  bool no_improvement = false;
  int cycles = 0;
};

Eigen::Vector3d center_of_mass(const Volume3D& volume);
/// Block-average downsampling; the affine keeps block centres in place.
Volume3D downsample(const Volume3D& volume, int factor);

/// Maximises MI of fixed vs. resampled moving over all twelve parameters,
/// starting from centre-of-mass alignment.
RegistrationResult register_affine(const Volume3D& fixed, const Volume3D& moving,
                                   const RegistrationConfig& config = {});

}  // namespace neurofuse
