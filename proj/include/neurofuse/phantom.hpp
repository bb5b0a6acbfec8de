#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "neurofuse/dataset.hpp"
#include "neurofuse/eigen_sym3.hpp"
#include "neurofuse/nifti_io.hpp"

namespace neurofuse {

/// splitmix64 step; derives independent per-sample seeds from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept;

enum class Shape { Ellipsoid, Box, Tube };

/// Axis-aligned primitive in world millimetres. For tubes, `half_extent`
/// along `axis` is the half length and the other two components are radii.
struct Region {
  Shape shape = Shape::Ellipsoid;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extent = Eigen::Vector3d::Ones();
  int axis = 0;
  std::optional<double> intensity;
  std::optional<SymTensor> tensor;  // mm^2/s

  bool contains(const Eigen::Vector3d& p) const noexcept;
};

/// The grid is centred on the world origin. Later regions paint over
/// earlier ones.
struct PhantomSpec {
  Dims3 dims{32, 32, 32};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<Region> regions;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::optional<Label> class_label;

  Eigen::Matrix4d affine() const;
  /// InvalidTensor for a region tensor with a negative eigenvalue;
  /// InvalidArgument for bad dims, noise, or a region centred off the grid.
  void validate() const;
};

inline constexpr double kPhantomS0 = 100.0;

/// Voxels inside any region.
std::vector<std::uint8_t> region_mask(const PhantomSpec& spec);

/// Intensity of the last containing region (0 elsewhere) plus clamped
/// Gaussian noise.
Volume3D render_intensity(const PhantomSpec& spec);

/// S = S0 exp(-b g^T D g) with S0 inside regions and D from the last
/// containing region that has a tensor; Gaussian noise, clamped at 0.
DiffusionSeries generate_dwi(const PhantomSpec& spec, const GradientTable& table);

/// `b0_count` b=0 volumes followed by `directions` unit vectors spread over
/// a hemisphere, all at `bvalue`.
GradientTable make_gradient_table(int directions, double bvalue = 1000.0, int b0_count = 1);

/// Sum of randomly placed, randomly oriented ellipsoids, evaluated
/// analytically. Used as registration ground truth.
class StructuredPhantom {
 public:
  StructuredPhantom(double extent_mm, std::uint64_t seed, int blob_count = 10);

  double value_at(const Eigen::Vector3d& p) const noexcept;
  /// Samples `value_at(world_to_phantom * x)` at each voxel centre x,
  /// averaging `supersample`^3 points per voxel.
  Volume3D render(Dims3 dims, Spacing3 spacing, const Eigen::Matrix4d& world_to_phantom = Eigen::Matrix4d::Identity(),
                  int supersample = 2) const;

 private:
  struct Blob {
    Eigen::Vector3d center;
    Eigen::Matrix3d to_unit;  // world offset -> unit-sphere coordinates
    double intensity;
  };
  std::vector<Blob> blobs_;
};

struct ClassificationConfig {
  int per_class = 100;
  double jitter = 0.1;
  std::uint64_t seed = 0;
  Dims3 t1w_dims{40, 40, 40};
  double t1w_spacing = 1.6;
  Dims3 dwi_dims{32, 32, 32};
  double dwi_spacing = 2.0;
  double t1w_noise = 2.0;
  double dwi_noise = 1.0;
  int directions = 12;
  double bvalue = 1000.0;
  /// Per class, the first round(fraction * per_class) samples lack a modality.
  double t1w_only_fraction = 0.0;
  double dti_only_fraction = 0.0;
  /// Class geometry in mm, indexed NC, MCI, AD.
  std::array<double, 3> ventricle_radius{4.0, 5.5, 7.0};
  std::array<double, 3> tract_radius{4.0, 3.0, 2.0};
};

struct ClassificationSample {
  std::string subject_id;
  Label label = Label::NC;
  AvailabilityGroup group = AvailabilityGroup::Both;
  std::optional<Volume3D> t1w;
  std::optional<DiffusionSeries> dwi;
};

int classification_set_size(const ClassificationConfig& config) noexcept;
PhantomSpec classification_spec(const ClassificationConfig& config, int index, bool diffusion);
ClassificationSample make_classification_sample(const ClassificationConfig& config, int index);
/// Noise-free MCI-sized subject on the T1w grid, used as the registration target.
Volume3D classification_reference(const ClassificationConfig& config);

/// Writes <root>/<subject_id>/{t1w.nii.gz, dwi.nii.gz, dwi.bval, dwi.bvec},
/// <root>/reference.nii.gz and <root>/manifest.csv. Returns the manifest rows.
std::vector<SubjectRecord> generate_classification_set(const ClassificationConfig& config,
                                                       const std::filesystem::path& root);

}  // namespace neurofuse
