#include "neurofuse/registration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Dense>

#include "neurofuse/error.hpp"

namespace neurofuse {

namespace {

constexpr double kEdgeSnap = 1e-6;

struct Sampler {
  const double* data;
  int nx, ny, nz;

  double nearest(double x, double y, double z) const {
    const auto i = static_cast<int>(std::floor(x + 0.5));
    const auto j = static_cast<int>(std::floor(y + 0.5));
    const auto k = static_cast<int>(std::floor(z + 0.5));
    if (i < 0 || j < 0 || k < 0 || i >= nx || j >= ny || k >= nz) return 0.0;
    return data[i + static_cast<std::size_t>(nx) * (j + static_cast<std::size_t>(ny) * k)];
  }

  static bool axis(double x, int n, int& i0, int& i1, double& f) {
    if (x < -kEdgeSnap || x > n - 1 + kEdgeSnap) return false;
    x = std::clamp(x, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(x));
    if (i0 >= n - 1) {
      i0 = n - 1;
      i1 = i0;
      f = 0.0;
    } else {
      i1 = i0 + 1;
      f = x - i0;
    }
    return true;
  }

  double trilinear(double x, double y, double z) const {
    int i0, i1, j0, j1, k0, k1;
    double fx, fy, fz;
    if (!axis(x, nx, i0, i1, fx) || !axis(y, ny, j0, j1, fy) || !axis(z, nz, k0, k1, fz)) return 0.0;
    const auto at = [&](int i, int j, int k) {
      return data[i + static_cast<std::size_t>(nx) * (j + static_cast<std::size_t>(ny) * k)];
    };
    const double c00 = at(i0, j0, k0) * (1 - fx) + at(i1, j0, k0) * fx;
    const double c10 = at(i0, j1, k0) * (1 - fx) + at(i1, j1, k0) * fx;
    const double c01 = at(i0, j0, k1) * (1 - fx) + at(i1, j0, k1) * fx;
    const double c11 = at(i0, j1, k1) * (1 - fx) + at(i1, j1, k1) * fx;
    const double c0 = c00 * (1 - fy) + c10 * fy;
    const double c1 = c01 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
  }
};

Sampler sampler_for(const Volume3D& v) {
  return Sampler{v.data().data(), v.dims()[0], v.dims()[1], v.dims()[2]};
}

/// Maps reference voxel indices to moving voxel indices.
Eigen::Matrix4d voxel_map(const Volume3D& moving, const Eigen::Matrix4d& world_map, const Volume3D& reference) {
  return moving.affine().inverse() * world_map * reference.affine();
}

void check_invertible(const Eigen::Matrix4d& m) {
  const double det = m.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12 || m.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) {
    throw Error(ErrorCode::NonInvertibleTransform, "transform matrix is singular");
  }
}

int bin_of(double v, const IntensityRange& r, int bins) {
  if (r.hi <= r.lo) return 0;
  const auto b = static_cast<int>(std::floor((v - r.lo) / (r.hi - r.lo) * bins));
  return std::clamp(b, 0, bins - 1);
}

int occupied(const std::vector<double>& marginal) {
  return static_cast<int>(std::count_if(marginal.begin(), marginal.end(), [](double c) { return c > 0; }));
}

std::optional<double> mi_from_counts(const std::vector<double>& counts, const std::vector<double>& fm,
                                     const std::vector<double>& mm, double total, int bins) {
  if (total <= 0 || occupied(fm) < 2 || occupied(mm) < 2) return std::nullopt;
  double mi = 0.0;
  for (int f = 0; f < bins; ++f) {
    if (fm[f] == 0) continue;
    for (int m = 0; m < bins; ++m) {
      const double c = counts[static_cast<std::size_t>(f) * bins + m];
      if (c == 0) continue;
      mi += c * std::log(c * total / (fm[f] * mm[m]));
    }
  }
  return std::max(0.0, mi / total);
}

/// Fixed-image bins are computed once; each call resamples moving on the fly.
class MetricEvaluator {
 public:
  MetricEvaluator(const Volume3D& fixed, const Volume3D& moving, int bins)
      : fixed_(fixed), moving_(moving), bins_(bins) {
    const auto [fmin, fmax] = std::minmax_element(fixed.data().begin(), fixed.data().end());
    const auto [mmin, mmax] = std::minmax_element(moving.data().begin(), moving.data().end());
    fixed_range_ = {std::min(0.0, *fmin), *fmax};
    moving_range_ = {std::min(0.0, *mmin), *mmax};
    fixed_bins_.resize(fixed.size());
    for (std::size_t v = 0; v < fixed.size(); ++v) fixed_bins_[v] = bin_of(fixed.data()[v], fixed_range_, bins_);
    counts_.resize(static_cast<std::size_t>(bins_) * bins_);
    fmarg_.resize(bins_);
    mmarg_.resize(bins_);
  }

  double operator()(const AffineTransform& t) {
    const Eigen::Matrix4d m = voxel_map(moving_, t.matrix(), fixed_);
    const Sampler s = sampler_for(moving_);
    std::fill(counts_.begin(), counts_.end(), 0.0);
    std::fill(fmarg_.begin(), fmarg_.end(), 0.0);
    std::fill(mmarg_.begin(), mmarg_.end(), 0.0);
    double total = 0.0;
    const auto& d = fixed_.dims();
    const auto fdata = fixed_.data();
    const Eigen::Vector3d step = m.col(0).head<3>();
    std::size_t v = 0;
    for (int k = 0; k < d[2]; ++k) {
      for (int j = 0; j < d[1]; ++j) {
        Eigen::Vector3d p = m.col(1).head<3>() * j + m.col(2).head<3>() * k + m.col(3).head<3>();
        for (int i = 0; i < d[0]; ++i, ++v, p += step) {
          const double mv = s.trilinear(p.x(), p.y(), p.z());
          if (fdata[v] == 0.0 && mv == 0.0) continue;
          const int fb = fixed_bins_[v];
          const int mb = bin_of(mv, moving_range_, bins_);
          counts_[static_cast<std::size_t>(fb) * bins_ + mb] += 1.0;
          fmarg_[fb] += 1.0;
          mmarg_[mb] += 1.0;
          total += 1.0;
        }
      }
    }
    return mi_from_counts(counts_, fmarg_, mmarg_, total, bins_).value_or(-std::numeric_limits<double>::infinity());
  }

 private:
  const Volume3D& fixed_;
  const Volume3D& moving_;
  int bins_;
  IntensityRange fixed_range_;
  IntensityRange moving_range_;
  std::vector<int> fixed_bins_;
  std::vector<double> counts_, fmarg_, mmarg_;
};

IntensityRange range_over(const Volume3D& v, const std::vector<std::uint8_t>& include) {
  IntensityRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!include[i]) continue;
    r.lo = std::min(r.lo, v.data()[i]);
    r.hi = std::max(r.hi, v.data()[i]);
  }
  return r;
}

constexpr double kInvPhi = 0.6180339887498949;

struct LineResult {
  double x;
  double value;
};

template <typename F>
LineResult golden_section(F&& f, double lo, double hi, int iterations) {
  double a = lo, b = hi;
  double c = b - kInvPhi * (b - a);
  double d = a + kInvPhi * (b - a);
  double fc = f(c), fd = f(d);
  LineResult best = fc >= fd ? LineResult{c, fc} : LineResult{d, fd};
  for (int it = 0; it < iterations; ++it) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - kInvPhi * (b - a);
      fc = f(c);
      if (fc > best.value) best = {c, fc};
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + kInvPhi * (b - a);
      fd = f(d);
      if (fd > best.value) best = {d, fd};
    }
  }
  return best;
}

}  // namespace

AffineTransform AffineTransform::translation(double tx, double ty, double tz) {
  AffineTransform t;
  t.params[kTx] = tx;
  t.params[kTy] = ty;
  t.params[kTz] = tz;
  return t;
}

AffineTransform AffineTransform::rigid(double tx, double ty, double tz, double rx, double ry, double rz) {
  AffineTransform t = translation(tx, ty, tz);
  t.params[kRx] = rx;
  t.params[kRy] = ry;
  t.params[kRz] = rz;
  return t;
}

Eigen::Matrix4d AffineTransform::matrix() const {
  const double cx = std::cos(params[kRx]), sx = std::sin(params[kRx]);
  const double cy = std::cos(params[kRy]), sy = std::sin(params[kRy]);
  const double cz = std::cos(params[kRz]), sz = std::sin(params[kRz]);
  Eigen::Matrix3d rx, ry, rz, shear;
  rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
  ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
  shear << 1, params[kHxy], params[kHxz], 0, 1, params[kHyz], 0, 0, 1;
  const Eigen::Vector3d scale(params[kSx], params[kSy], params[kSz]);

  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rz * ry * rx * shear * scale.asDiagonal();
  m.topRightCorner<3, 1>() = Eigen::Vector3d(params[kTx], params[kTy], params[kTz]);
  return m;
}

nlohmann::json to_json(const AffineTransform& t) {
  static constexpr std::array<const char*, AffineTransform::kCount> names{
      "tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "hxy", "hxz", "hyz"};
  nlohmann::json j = nlohmann::json::object();
  for (int p = 0; p < AffineTransform::kCount; ++p) j[names[p]] = t.params[p];
  return j;
}

AffineTransform transform_from_json(const nlohmann::json& j) {
  static constexpr std::array<const char*, AffineTransform::kCount> names{
      "tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "hxy", "hxz", "hyz"};
  AffineTransform t;
  for (int p = 0; p < AffineTransform::kCount; ++p) {
    if (!j.contains(names[p]) || !j[names[p]].is_number()) {
      throw Error(ErrorCode::InvalidArgument, std::string("transform record lacks ") + names[p]);
    }
    t.params[p] = j[names[p]].get<double>();
  }
  return t;
}

Volume3D resample(const Volume3D& moving, const AffineTransform& transform, const Volume3D& reference,
                  Interpolation interpolation) {
  for (int p : {AffineTransform::kSx, AffineTransform::kSy, AffineTransform::kSz}) {
    if (!(transform[p] > 0.0)) throw Error(ErrorCode::NonInvertibleTransform, "scales must be positive");
  }
  return resample(moving, transform.matrix(), reference, interpolation);
}

Volume3D resample(const Volume3D& moving, const Eigen::Matrix4d& world_map, const Volume3D& reference,
                  Interpolation interpolation) {
  check_invertible(world_map);
  const Eigen::Matrix4d m = voxel_map(moving, world_map, reference);
  const Sampler s = sampler_for(moving);
  const auto& d = reference.dims();
  std::vector<double> out(reference.size(), 0.0);
  std::size_t v = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i, ++v) {
        const Eigen::Vector3d p = (m * Eigen::Vector4d(i, j, k, 1)).head<3>();
        out[v] = interpolation == Interpolation::Nearest ? s.nearest(p.x(), p.y(), p.z())
                                                         : s.trilinear(p.x(), p.y(), p.z());
      }
  return Volume3D(reference.dims(), reference.spacing(), reference.affine(), std::move(out));
}

JointHistogram joint_histogram(const Volume3D& fixed, const Volume3D& moving, int bins) {
  if (bins < 8) throw Error(ErrorCode::InvalidArgument, "histogram needs at least 8 bins");
  if (fixed.dims() != moving.dims()) {
    throw Error(ErrorCode::GeometryMismatch, "mutual information needs volumes of equal dims");
  }
  std::vector<std::uint8_t> include(fixed.size());
  for (std::size_t v = 0; v < fixed.size(); ++v) include[v] = fixed.data()[v] != 0.0 || moving.data()[v] != 0.0;

  JointHistogram h;
  h.bins = bins;
  h.fixed_range = range_over(fixed, include);
  h.moving_range = range_over(moving, include);
  h.counts.assign(static_cast<std::size_t>(bins) * bins, 0.0);
  h.fixed_marginal.assign(bins, 0.0);
  h.moving_marginal.assign(bins, 0.0);
  for (std::size_t v = 0; v < fixed.size(); ++v) {
    if (!include[v]) continue;
    const int fb = bin_of(fixed.data()[v], h.fixed_range, bins);
    const int mb = bin_of(moving.data()[v], h.moving_range, bins);
    h.counts[static_cast<std::size_t>(fb) * bins + mb] += 1.0;
    h.fixed_marginal[fb] += 1.0;
    h.moving_marginal[mb] += 1.0;
    h.total += 1.0;
  }
  return h;
}

double mutual_information(const JointHistogram& h) {
  const auto mi = mi_from_counts(h.counts, h.fixed_marginal, h.moving_marginal, h.total, h.bins);
  if (!mi) {
    throw Error(ErrorCode::DegenerateHistogram, "a marginal histogram occupies fewer than two bins");
  }
  return *mi;
}

double mutual_information(const Volume3D& fixed, const Volume3D& moving_resampled, int bins) {
  return mutual_information(joint_histogram(fixed, moving_resampled, bins));
}

double marginal_entropy(const Volume3D& volume, int bins) {
  const JointHistogram h = joint_histogram(volume, volume, bins);
  double entropy = 0.0;
  for (double c : h.fixed_marginal) {
    if (c > 0) entropy -= (c / h.total) * std::log(c / h.total);
  }
  return entropy;
}

Eigen::Vector3d center_of_mass(const Volume3D& volume) {
  const auto& d = volume.dims();
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double mass = 0.0;
  std::size_t v = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i, ++v) {
        const double w = std::abs(volume.data()[v]);
        acc += w * Eigen::Vector3d(i, j, k);
        mass += w;
      }
  const Eigen::Vector3d index = mass > 0 ? Eigen::Vector3d(acc / mass)
                                         : Eigen::Vector3d((d[0] - 1) / 2.0, (d[1] - 1) / 2.0, (d[2] - 1) / 2.0);
  return (volume.affine() * index.homogeneous()).head<3>();
}

Volume3D downsample(const Volume3D& volume, int factor) {
  if (factor < 1) throw Error(ErrorCode::InvalidArgument, "downsample factor must be >= 1");
  if (factor == 1) return volume;
  const auto& d = volume.dims();
  const Dims3 nd{std::max(1, d[0] / factor), std::max(1, d[1] / factor), std::max(1, d[2] / factor)};
  std::vector<double> out(static_cast<std::size_t>(nd[0]) * nd[1] * nd[2], 0.0);
  std::array<int, 3> f{};
  for (int a = 0; a < 3; ++a) f[a] = std::min(factor, d[a]);
  std::size_t v = 0;
  for (int k = 0; k < nd[2]; ++k)
    for (int j = 0; j < nd[1]; ++j)
      for (int i = 0; i < nd[0]; ++i, ++v) {
        double sum = 0.0;
        for (int dk = 0; dk < f[2]; ++dk)
          for (int dj = 0; dj < f[1]; ++dj)
            for (int di = 0; di < f[0]; ++di) sum += volume(i * f[0] + di, j * f[1] + dj, k * f[2] + dk);
        out[v] = sum / (f[0] * f[1] * f[2]);
      }
  Eigen::Matrix4d block = Eigen::Matrix4d::Identity();
  Spacing3 spacing{};
  for (int a = 0; a < 3; ++a) {
    block(a, a) = f[a];
    block(a, 3) = (f[a] - 1) / 2.0;
    spacing[a] = volume.spacing()[a] * f[a];
  }
  return Volume3D(nd, spacing, volume.affine() * block, std::move(out));
}

RegistrationResult register_affine(const Volume3D& fixed, const Volume3D& moving, const RegistrationConfig& config) {
  if (config.levels.empty()) throw Error(ErrorCode::InvalidArgument, "registration needs at least one level");
  // Public MI call surfaces DegenerateHistogram for constant inputs.
  mutual_information(fixed, fixed, config.bins);
  mutual_information(moving, moving, config.bins);

  RegistrationResult result;
  const Eigen::Vector3d shift = center_of_mass(moving) - center_of_mass(fixed);
  result.initial = AffineTransform::translation(shift.x(), shift.y(), shift.z());

  std::array<double, AffineTransform::kCount> steps{};
  for (int p = 0; p < AffineTransform::kCount; ++p) {
    steps[p] = p < 3 ? config.translation_step
             : p < 6 ? config.rotation_step
             : p < 9 ? config.scale_step
                     : config.shear_step;
  }

  AffineTransform current = result.initial;
  const int coarsest = *std::max_element(config.levels.begin(), config.levels.end());
  for (int factor : config.levels) {
    const Volume3D fixed_level = downsample(fixed, factor);
    const Volume3D moving_level = downsample(moving, factor);
    MetricEvaluator metric(fixed_level, moving_level, config.bins);
    double value = metric(current);
    const double step_scale = static_cast<double>(factor) / coarsest;

    for (int cycle = 0; cycle < config.max_cycles; ++cycle) {
      const double start = value;
      for (int p = 0; p < AffineTransform::kCount; ++p) {
        const double h = steps[p] * step_scale;
        double lo = current[p] - h;
        if (p >= AffineTransform::kSx && p <= AffineTransform::kSz) lo = std::max(lo, 0.5 * current[p]);
        AffineTransform probe = current;
        const LineResult best = golden_section(
            [&](double x) {
              probe[p] = x;
              return metric(probe);
            },
            lo, current[p] + h, config.line_search_iterations);
        if (best.value > value) {
          current[p] = best.x;
          value = best.value;
        }
      }
      ++result.cycles;
      if (value - start < config.tolerance) break;
    }
  }

  MetricEvaluator full(fixed, moving, config.bins);
  result.initial_mi = full(result.initial);
  result.final_mi = full(current);
  if (!(result.final_mi > result.initial_mi)) {
    result.no_improvement = true;
    result.transform = result.initial;
    result.final_mi = result.initial_mi;
  } else {
    result.transform = current;
  }
  return result;
}

}  // namespace neurofuse
