#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace neurofuse {

using Dims3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

/// A 3D scalar grid. Data is stored x-fastest; the affine maps voxel
/// indices (i, j, k, 1) to world millimetres.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims3 dims, Spacing3 spacing, const Eigen::Matrix4d& affine, std::vector<double> data);

  /// Zero-filled volume with the geometry of `like`.
  static Volume3D zeros_like(const Volume3D& like);
  /// Volume with diagonal affine built from the spacing and an origin.
  static Volume3D with_spacing(Dims3 dims, Spacing3 spacing, std::vector<double> data,
                               const Eigen::Vector3d& origin = Eigen::Vector3d::Zero());

  const Dims3& dims() const noexcept { return dims_; }
  const Spacing3& spacing() const noexcept { return spacing_; }
  const Eigen::Matrix4d& affine() const noexcept { return affine_; }
  std::span<const double> data() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(int i, int j, int k) const noexcept {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_[1]) * k);
  }
  double operator()(int i, int j, int k) const noexcept { return data_[index(i, j, k)]; }

  bool same_geometry(const Volume3D& other, double tol = 1e-6) const;

 private:
  Dims3 dims_{0, 0, 0};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  Eigen::Matrix4d affine_ = Eigen::Matrix4d::Identity();
  std::vector<double> data_;
};

/// DWI acquisition: volumes with one b-value and gradient direction each.
struct DiffusionSeries {
  std::vector<Volume3D> volumes;
  std::vector<double> bvals;
  std::vector<Eigen::Vector3d> bvecs;

  DiffusionSeries() = default;
  /// Checks geometry consistency, counts, and the presence of a b0 volume.
  DiffusionSeries(std::vector<Volume3D> volumes, std::vector<double> bvals,
                  std::vector<Eigen::Vector3d> bvecs);

  /// Voxelwise mean of the b=0 volumes.
  Volume3D mean_b0() const;
};

struct GradientTable {
  std::vector<double> bvals;
  std::vector<Eigen::Vector3d> bvecs;
};

Volume3D read_nifti(const std::filesystem::path& path);
/// Reads a 3D or 4D file and returns one Volume3D per t-index.
std::vector<Volume3D> read_nifti_series(const std::filesystem::path& path);

/// Writes float32 NIfTI-1 with the sform taken from the affine. A ".gz"
/// suffix selects gzip compression.
void write_nifti(const Volume3D& volume, const std::filesystem::path& path);
/// All frames must share geometry.
void write_nifti_series(std::span<const Volume3D> frames, const std::filesystem::path& path);

GradientTable read_bval_bvec(const std::filesystem::path& bval_path,
                             const std::filesystem::path& bvec_path);
void write_bval_bvec(const GradientTable& table, const std::filesystem::path& bval_path,
                     const std::filesystem::path& bvec_path);

DiffusionSeries read_dwi(const std::filesystem::path& dwi_path,
                         const std::filesystem::path& bval_path,
                         const std::filesystem::path& bvec_path);

}  // namespace neurofuse
