#include "neurofuse/dti.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include <Eigen/Dense>

#include "neurofuse/error.hpp"

namespace neurofuse {

namespace {

constexpr std::array<std::array<int, 3>, 6> kFaceNeighbours{{
    {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

struct Grid {
  Dims3 dims;
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(dims[0]) * (j + static_cast<std::size_t>(dims[1]) * k);
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
};

double percentile(std::vector<double> values, double fraction) {
  std::sort(values.begin(), values.end());
  const double pos = fraction * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<std::uint8_t> largest_component(const Grid& grid, const std::vector<std::uint8_t>& in) {
  std::vector<int> label(in.size(), 0);
  int best_label = 0;
  std::size_t best_size = 0;
  int next = 0;
  std::deque<std::array<int, 3>> queue;
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) {
        const std::size_t seed = grid.index(i, j, k);
        if (!in[seed] || label[seed] != 0) continue;
        ++next;
        std::size_t size = 0;
        label[seed] = next;
        queue.push_back({i, j, k});
        while (!queue.empty()) {
          const auto [x, y, z] = queue.front();
          queue.pop_front();
          ++size;
          for (const auto& d : kFaceNeighbours) {
            const int nx = x + d[0], ny = y + d[1], nz = z + d[2];
            if (!grid.contains(nx, ny, nz)) continue;
            const std::size_t n = grid.index(nx, ny, nz);
            if (in[n] && label[n] == 0) {
              label[n] = next;
              queue.push_back({nx, ny, nz});
            }
          }
        }
        if (size > best_size) {
          best_size = size;
          best_label = next;
        }
      }
  std::vector<std::uint8_t> out(in.size(), 0);
  for (std::size_t v = 0; v < in.size(); ++v) out[v] = label[v] == best_label ? 1 : 0;
  return out;
}

std::vector<std::uint8_t> morph(const Grid& grid, const std::vector<std::uint8_t>& in, bool dilate) {
  std::vector<std::uint8_t> out(in.size(), 0);
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) {
        const std::size_t c = grid.index(i, j, k);
        bool value = in[c] != 0;
        for (const auto& d : kFaceNeighbours) {
          const int nx = i + d[0], ny = j + d[1], nz = k + d[2];
          const bool n = grid.contains(nx, ny, nz) && in[grid.index(nx, ny, nz)] != 0;
          value = dilate ? (value || n) : (value && n);
        }
        out[c] = value ? 1 : 0;
      }
  return out;
}

// Closing on a one-voxel zero pad so the grid edge behaves like background.
std::vector<std::uint8_t> close(const Grid& grid, const std::vector<std::uint8_t>& in) {
  const Grid padded{{grid.dims[0] + 2, grid.dims[1] + 2, grid.dims[2] + 2}};
  std::vector<std::uint8_t> p(static_cast<std::size_t>(padded.dims[0]) * padded.dims[1] * padded.dims[2], 0);
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) p[padded.index(i + 1, j + 1, k + 1)] = in[grid.index(i, j, k)];
  p = morph(padded, morph(padded, p, true), false);
  std::vector<std::uint8_t> out(in.size(), 0);
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) out[grid.index(i, j, k)] = p[padded.index(i + 1, j + 1, k + 1)];
  return out;
}

}  // namespace

std::size_t VoxelMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(inside.begin(), inside.end(), std::uint8_t{1}));
}

TensorField TensorField::from_eigenvalues(const std::vector<std::array<double, 3>>& eigenvalues) {
  TensorField field;
  field.dims = {static_cast<int>(eigenvalues.size()), 1, 1};
  field.eigenvalues = eigenvalues;
  field.tensors.resize(eigenvalues.size());
  field.mask.assign(eigenvalues.size(), 1);
  for (std::size_t v = 0; v < eigenvalues.size(); ++v) {
    const auto& e = eigenvalues[v];
    field.tensors[v] = {e[0], 0.0, 0.0, e[1], 0.0, e[2]};
  }
  return field;
}

VoxelMask brain_mask(const Volume3D& b0, double threshold_fraction) {
  if (!(threshold_fraction > 0.0 && threshold_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "threshold fraction must lie in (0, 1)");
  }
  std::vector<double> positive;
  for (double v : b0.data()) {
    if (v > 0.0) positive.push_back(v);
  }
  if (positive.empty()) throw Error(ErrorCode::EmptyMask, "b0 has no positive voxels");
  const double threshold = threshold_fraction * percentile(std::move(positive), 0.99);

  const Grid grid{b0.dims()};
  std::vector<std::uint8_t> raw(b0.size(), 0);
  for (std::size_t v = 0; v < raw.size(); ++v) raw[v] = b0.data()[v] >= threshold && b0.data()[v] > 0.0;

  std::vector<std::uint8_t> kept = largest_component(grid, raw);
  kept = close(grid, kept);
  return VoxelMask{b0.dims(), std::move(kept)};
}

TensorField fit_tensor(const DiffusionSeries& series, const VoxelMask& mask) {
  const Volume3D& ref = series.volumes.front();
  if (mask.dims != ref.dims() || mask.inside.size() != ref.size()) {
    throw Error(ErrorCode::GeometryMismatch, "mask does not match the diffusion series");
  }

  std::vector<std::size_t> b0_index;
  std::vector<std::size_t> dw_index;
  for (std::size_t i = 0; i < series.bvals.size(); ++i) {
    (series.bvals[i] == 0.0 ? b0_index : dw_index).push_back(i);
  }
  if (b0_index.size() + dw_index.size() < 7 || dw_index.size() < 6) {
    throw Error(ErrorCode::InsufficientDirections,
                std::to_string(dw_index.size()) + " diffusion-weighted volumes; need at least 6");
  }

  const auto rows = static_cast<Eigen::Index>(dw_index.size());
  Eigen::MatrixXd design(rows, 6);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double b = series.bvals[dw_index[r]];
    const Eigen::Vector3d& g = series.bvecs[dw_index[r]];
    design.row(r) << b * g.x() * g.x(), 2 * b * g.x() * g.y(), 2 * b * g.x() * g.z(),
        b * g.y() * g.y(), 2 * b * g.y() * g.z(), b * g.z() * g.z();
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < 6) {
    throw Error(ErrorCode::InsufficientDirections,
                "gradient design has rank " + std::to_string(qr.rank()) + " < 6");
  }
  // Solving -ln(S_i/S_0) = b g^T D g; the pseudo-inverse is shared by every voxel.
  const Eigen::MatrixXd pinv = qr.solve(Eigen::MatrixXd::Identity(rows, rows));

  TensorField field;
  field.dims = ref.dims();
  field.spacing = ref.spacing();
  field.affine = ref.affine();
  field.tensors.assign(ref.size(), SymTensor{});
  field.eigenvalues.assign(ref.size(), {0.0, 0.0, 0.0});
  field.mask.assign(ref.size(), 0);

  Eigen::VectorXd y(rows);
  for (std::size_t v = 0; v < ref.size(); ++v) {
    if (!mask.inside[v]) continue;
    double s0 = 0.0;
    bool usable = true;
    for (std::size_t i : b0_index) {
      const double s = series.volumes[i].data()[v];
      usable = usable && s > 0.0;
      s0 += s;
    }
    s0 /= static_cast<double>(b0_index.size());
    for (Eigen::Index r = 0; r < rows && usable; ++r) {
      const double s = series.volumes[dw_index[r]].data()[v];
      if (s <= 0.0) {
        usable = false;
        break;
      }
      y[r] = -std::log(s / s0);
    }
    if (!usable) continue;

    const Eigen::Matrix<double, 6, 1> d = pinv * y;
    SymTensor tensor{d[0], d[1], d[2], d[3], d[4], d[5]};
    std::array<double, 3> eig = symmetric_eigenvalues(tensor);
    for (double& e : eig) e = std::max(e, 0.0);
    field.tensors[v] = tensor;
    field.eigenvalues[v] = eig;
    field.mask[v] = 1;
  }
  return field;
}

double fractional_anisotropy(const std::array<double, 3>& e) noexcept {
  const double norm2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
  if (norm2 == 0.0) return 0.0;
  const double spread = (e[0] - e[1]) * (e[0] - e[1]) + (e[1] - e[2]) * (e[1] - e[2]) +
                        (e[2] - e[0]) * (e[2] - e[0]);
  return std::min(1.0, std::sqrt(0.5) * std::sqrt(spread) / std::sqrt(norm2));
}

double mean_diffusivity(const std::array<double, 3>& e) noexcept { return (e[0] + e[1] + e[2]) / 3.0; }

namespace {

template <typename Fn>
ScalarMap scalar_map(const TensorField& field, ScalarKind kind, Fn fn) {
  std::vector<double> values(field.size(), 0.0);
  for (std::size_t v = 0; v < field.size(); ++v) {
    if (field.mask[v]) values[v] = fn(field.eigenvalues[v]);
  }
  return ScalarMap{Volume3D(field.dims, field.spacing, field.affine, std::move(values)), kind};
}

}  // namespace

ScalarMap fractional_anisotropy(const TensorField& field) {
  return scalar_map(field, ScalarKind::FA,
                    [](const std::array<double, 3>& e) { return fractional_anisotropy(e); });
}

ScalarMap mean_diffusivity(const TensorField& field) {
  return scalar_map(field, ScalarKind::MD,
                    [](const std::array<double, 3>& e) { return mean_diffusivity(e); });
}

DtiMaps compute_dti_maps(const DiffusionSeries& series, double threshold_fraction) {
  VoxelMask mask = brain_mask(series.mean_b0(), threshold_fraction);
  const TensorField field = fit_tensor(series, mask);
  return DtiMaps{std::move(mask), fractional_anisotropy(field).volume, mean_diffusivity(field).volume};
}

}  // namespace neurofuse
