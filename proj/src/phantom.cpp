#include "neurofuse/phantom.hpp"

#include <cmath>
#include <fmt/format.h>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "neurofuse/error.hpp"

namespace neurofuse {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
  std::uint64_t z = master + (index + 1) * 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool Region::contains(const Eigen::Vector3d& p) const noexcept {
  const Eigen::Vector3d d = (p - center).cwiseQuotient(half_extent);
  switch (shape) {
    case Shape::Ellipsoid: return d.squaredNorm() <= 1.0;
    case Shape::Box: return d.cwiseAbs().maxCoeff() <= 1.0;
    case Shape::Tube: {
      if (std::abs(d[axis]) > 1.0) return false;
      double r2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        if (a != axis) r2 += d[a] * d[a];
      }
      return r2 <= 1.0;
    }
  }
  return false;
}

namespace {

Eigen::Matrix4d centred_affine(const Dims3& dims, const Spacing3& spacing) {
  Eigen::Matrix4d a = Eigen::Matrix4d::Identity();
  for (int d = 0; d < 3; ++d) {
    a(d, d) = spacing[d];
    a(d, 3) = -spacing[d] * (dims[d] - 1) / 2.0;
  }
  return a;
}

template <typename F>
void for_each_voxel(const Dims3& dims, const Eigen::Matrix4d& affine, F&& f) {
  std::size_t idx = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++idx) {
        const Eigen::Vector3d p = (affine * Eigen::Vector4d(i, j, k, 1.0)).head<3>();
        f(idx, p);
      }
}

std::size_t voxel_count(const Dims3& dims) {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
}

void add_noise(std::vector<double>& data, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0.0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  for (double& v : data) v = std::max(0.0, v + noise(rng));
}

SymTensor isotropic(double d) { return {d, 0, 0, d, 0, d}; }

}  // namespace

Eigen::Matrix4d PhantomSpec::affine() const { return centred_affine(dims, spacing); }

void PhantomSpec::validate() const {
  for (int d = 0; d < 3; ++d) {
    if (dims[d] < 1 || !(spacing[d] > 0.0)) throw Error(ErrorCode::InvalidArgument, "phantom grid must be positive");
  }
  if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise sigma must be nonnegative");
  for (const auto& r : regions) {
    for (int d = 0; d < 3; ++d) {
      if (!(r.half_extent[d] > 0.0)) throw Error(ErrorCode::InvalidArgument, "region extents must be positive");
      if (std::abs(r.center[d]) > spacing[d] * dims[d] / 2.0) {
        throw Error(ErrorCode::InvalidArgument, "region centre lies outside the phantom grid");
      }
    }
    if (r.axis < 0 || r.axis > 2) throw Error(ErrorCode::InvalidArgument, "tube axis must be 0, 1 or 2");
    if (r.tensor) {
      const auto ev = symmetric_eigenvalues(*r.tensor);
      const double scale = std::max({std::abs(ev[0]), std::abs(ev[2]), 1e-300});
      if (ev[2] < -1e-12 * scale) {
        throw Error(ErrorCode::InvalidTensor, fmt::format("region tensor has eigenvalue {:g}", ev[2]));
      }
    }
  }
}

std::vector<std::uint8_t> region_mask(const PhantomSpec& spec) {
  spec.validate();
  std::vector<std::uint8_t> mask(voxel_count(spec.dims), 0);
  for_each_voxel(spec.dims, spec.affine(), [&](std::size_t idx, const Eigen::Vector3d& p) {
    for (const auto& r : spec.regions) {
      if (r.contains(p)) {
        mask[idx] = 1;
        return;
      }
    }
  });
  return mask;
}

Volume3D render_intensity(const PhantomSpec& spec) {
  spec.validate();
  std::vector<double> data(voxel_count(spec.dims), 0.0);
  for_each_voxel(spec.dims, spec.affine(), [&](std::size_t idx, const Eigen::Vector3d& p) {
    for (const auto& r : spec.regions) {
      if (r.intensity && r.contains(p)) data[idx] = *r.intensity;
    }
  });
  std::mt19937_64 rng(spec.seed);
  add_noise(data, spec.noise_sigma, rng);
  return Volume3D(spec.dims, spec.spacing, spec.affine(), std::move(data));
}

DiffusionSeries generate_dwi(const PhantomSpec& spec, const GradientTable& table) {
  spec.validate();
  if (table.bvals.size() != table.bvecs.size()) throw Error(ErrorCode::CountMismatch, "bval/bvec count mismatch");
  const auto weighted = std::count_if(table.bvals.begin(), table.bvals.end(), [](double b) { return b > 0; });
  if (weighted < 6) throw Error(ErrorCode::InsufficientDirections, "need at least 6 diffusion-weighted volumes");

  const std::size_t n = voxel_count(spec.dims);
  std::vector<std::uint8_t> inside(n, 0);
  std::vector<SymTensor> tensors(n, SymTensor{});
  for_each_voxel(spec.dims, spec.affine(), [&](std::size_t idx, const Eigen::Vector3d& p) {
    for (const auto& r : spec.regions) {
      if (!r.contains(p)) continue;
      inside[idx] = 1;
      if (r.tensor) tensors[idx] = *r.tensor;
    }
  });

  std::mt19937_64 rng(spec.seed);
  std::vector<Volume3D> volumes;
  for (std::size_t v = 0; v < table.bvals.size(); ++v) {
    const double b = table.bvals[v];
    const Eigen::Vector3d& g = table.bvecs[v];
    std::vector<double> data(n, 0.0);
    for (std::size_t idx = 0; idx < n; ++idx) {
      if (!inside[idx]) continue;
      const SymTensor& t = tensors[idx];
      const double q = t[0] * g[0] * g[0] + t[3] * g[1] * g[1] + t[5] * g[2] * g[2] +
                       2.0 * (t[1] * g[0] * g[1] + t[2] * g[0] * g[2] + t[4] * g[1] * g[2]);
      data[idx] = kPhantomS0 * std::exp(-b * q);
    }
    add_noise(data, spec.noise_sigma, rng);
    volumes.emplace_back(spec.dims, spec.spacing, spec.affine(), std::move(data));
  }
  return DiffusionSeries(std::move(volumes), table.bvals, table.bvecs);
}

GradientTable make_gradient_table(int directions, double bvalue, int b0_count) {
  if (directions < 0 || b0_count < 0 || !(bvalue > 0)) throw Error(ErrorCode::InvalidArgument, "bad gradient table");
  GradientTable t;
  for (int i = 0; i < b0_count; ++i) {
    t.bvals.push_back(0.0);
    t.bvecs.emplace_back(0.0, 0.0, 0.0);
  }
  // Fibonacci points on the upper hemisphere.
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < directions; ++i) {
    const double z = 1.0 - (i + 0.5) / directions;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    t.bvals.push_back(bvalue);
    t.bvecs.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
  }
  return t;
}

StructuredPhantom::StructuredPhantom(double extent_mm, std::uint64_t seed, int blob_count) {
  if (!(extent_mm > 0) || blob_count < 0) throw Error(ErrorCode::InvalidArgument, "bad structured phantom");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> size(0.12, 0.3);
  std::uniform_real_distribution<double> level(20.0, 80.0);
  std::normal_distribution<double> gauss;

  const Eigen::Vector3d head_radii = 0.8 * extent_mm * Eigen::Vector3d(1.0, 0.85, 0.9);
  blobs_.push_back({Eigen::Vector3d::Zero(), head_radii.cwiseInverse().asDiagonal(), 40.0});
  for (int b = 0; b < blob_count; ++b) {
    const Eigen::Vector3d center = 0.5 * extent_mm * Eigen::Vector3d(unit(rng), unit(rng), unit(rng));
    const Eigen::Vector3d radii = extent_mm * Eigen::Vector3d(size(rng), size(rng), size(rng));
    const Eigen::Quaterniond q = Eigen::Quaterniond(gauss(rng), gauss(rng), gauss(rng), gauss(rng)).normalized();
    const Eigen::Matrix3d to_unit = radii.cwiseInverse().asDiagonal() * q.toRotationMatrix().transpose();
    blobs_.push_back({center, to_unit, level(rng)});
  }
}

double StructuredPhantom::value_at(const Eigen::Vector3d& p) const noexcept {
  double v = 0.0;
  for (const auto& b : blobs_) {
    if ((b.to_unit * (p - b.center)).squaredNorm() <= 1.0) v += b.intensity;
  }
  return v;
}

Volume3D StructuredPhantom::render(Dims3 dims, Spacing3 spacing, const Eigen::Matrix4d& world_to_phantom,
                                   int supersample) const {
  if (supersample < 1) throw Error(ErrorCode::InvalidArgument, "supersample must be positive");
  const Eigen::Matrix4d affine = centred_affine(dims, spacing);
  const Eigen::Matrix4d map = world_to_phantom * affine;
  std::vector<Eigen::Vector3d> offsets;
  for (int a = 0; a < supersample; ++a)
    for (int b = 0; b < supersample; ++b)
      for (int c = 0; c < supersample; ++c) {
        const auto o = [supersample](int s) { return (s + 0.5) / supersample - 0.5; };
        offsets.emplace_back(o(a), o(b), o(c));
      }
  std::vector<double> data(voxel_count(dims), 0.0);
  std::size_t idx = 0;
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i, ++idx) {
        double sum = 0.0;
        for (const auto& o : offsets) {
          sum += value_at((map * Eigen::Vector4d(i + o[0], j + o[1], k + o[2], 1.0)).head<3>());
        }
        data[idx] = sum / static_cast<double>(offsets.size());
      }
  return Volume3D(dims, spacing, affine, std::move(data));
}

int classification_set_size(const ClassificationConfig& config) noexcept { return 3 * config.per_class; }

namespace {

Label label_of(int index) { return label_from_index(index % kNumClasses); }

AvailabilityGroup group_of(const ClassificationConfig& config, int index) {
  const int j = index / kNumClasses;
  const int t1w_only = static_cast<int>(std::lround(config.t1w_only_fraction * config.per_class));
  const int dti_only = static_cast<int>(std::lround(config.dti_only_fraction * config.per_class));
  if (j < t1w_only) return AvailabilityGroup::T1wOnly;
  if (j < t1w_only + dti_only) return AvailabilityGroup::DtiOnly;
  return AvailabilityGroup::Both;
}

// Geometry comes from `anatomy_seed` so both modalities of a subject agree;
// `seed` only drives the noise.
PhantomSpec subject_spec(const ClassificationConfig& config, Label label, double jitter, std::uint64_t anatomy_seed,
                         std::uint64_t seed, bool diffusion) {
  PhantomSpec spec;
  const double spacing = diffusion ? config.dwi_spacing : config.t1w_spacing;
  spec.dims = diffusion ? config.dwi_dims : config.t1w_dims;
  spec.spacing = {spacing, spacing, spacing};
  spec.noise_sigma = diffusion ? config.dwi_noise : config.t1w_noise;
  spec.seed = seed;
  spec.class_label = label;

  std::mt19937_64 rng(anatomy_seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double ventricle_scale = 1.0 + jitter * unit(rng);
  const double tract_scale = 1.0 + jitter * unit(rng);
  const Eigen::Vector3d shift = 20.0 * jitter * Eigen::Vector3d(unit(rng), unit(rng), unit(rng)) / 2.0;

  Region brain;
  brain.center = Eigen::Vector3d::Zero();
  brain.half_extent = {26.0, 22.0, 24.0};
  brain.intensity = 60.0;
  brain.tensor = isotropic(0.8e-3);

  Region tract;
  tract.shape = Shape::Tube;
  tract.axis = 0;
  const double tr = config.tract_radius[class_index(label)] * tract_scale;
  tract.center = Eigen::Vector3d(0.0, -13.0, 0.0) + shift;
  tract.half_extent = {18.0, tr, tr};
  tract.intensity = 90.0;
  tract.tensor = SymTensor{1.7e-3, 0, 0, 3e-4, 0, 3e-4};

  Region ventricle;
  const double vr = config.ventricle_radius[class_index(label)] * ventricle_scale;
  ventricle.center = shift;
  ventricle.half_extent = vr * Eigen::Vector3d(1.0, 0.8, 1.1);
  ventricle.intensity = 20.0;
  ventricle.tensor = isotropic(3.0e-3);

  spec.regions = {brain, tract, ventricle};
  return spec;
}

}  // namespace

PhantomSpec classification_spec(const ClassificationConfig& config, int index, bool diffusion) {
  if (index < 0 || index >= classification_set_size(config)) {
    throw Error(ErrorCode::InvalidArgument, "sample index out of range");
  }
  const auto i = static_cast<std::uint64_t>(index);
  const std::uint64_t anatomy = derive_seed(config.seed, 3 * i);
  const std::uint64_t noise = derive_seed(config.seed, 3 * i + (diffusion ? 2 : 1));
  return subject_spec(config, label_of(index), config.jitter, anatomy, noise, diffusion);
}

ClassificationSample make_classification_sample(const ClassificationConfig& config, int index) {
  ClassificationSample s;
  s.subject_id = fmt::format("sub-{:04d}", index);
  s.label = label_of(index);
  s.group = group_of(config, index);
  if (s.group != AvailabilityGroup::DtiOnly) s.t1w = render_intensity(classification_spec(config, index, false));
  if (s.group != AvailabilityGroup::T1wOnly) {
    s.dwi = generate_dwi(classification_spec(config, index, true), make_gradient_table(config.directions, config.bvalue));
  }
  return s;
}

Volume3D classification_reference(const ClassificationConfig& config) {
  ClassificationConfig clean = config;
  clean.t1w_noise = 0.0;
  return render_intensity(subject_spec(clean, Label::MCI, 0.0, config.seed, config.seed, false));
}

std::vector<SubjectRecord> generate_classification_set(const ClassificationConfig& config,
                                                       const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  write_nifti(classification_reference(config), root / "reference.nii.gz");
  std::vector<SubjectRecord> records;
  for (int i = 0; i < classification_set_size(config); ++i) {
    const ClassificationSample s = make_classification_sample(config, i);
    const std::filesystem::path dir = root / s.subject_id;
    std::filesystem::create_directories(dir);
    SubjectRecord r;
    r.subject_id = s.subject_id;
    r.session_id = "ses-01";
    r.label = s.label;
    if (s.t1w) {
      write_nifti(*s.t1w, dir / "t1w.nii.gz");
      r.t1w_path = std::filesystem::path(s.subject_id) / "t1w.nii.gz";
    }
    if (s.dwi) {
      write_nifti_series(s.dwi->volumes, dir / "dwi.nii.gz");
      write_bval_bvec(GradientTable{s.dwi->bvals, s.dwi->bvecs}, dir / "dwi.bval", dir / "dwi.bvec");
      r.dwi_path = std::filesystem::path(s.subject_id) / "dwi.nii.gz";
      r.bval_path = std::filesystem::path(s.subject_id) / "dwi.bval";
      r.bvec_path = std::filesystem::path(s.subject_id) / "dwi.bvec";
    }
    records.push_back(std::move(r));
  }
  write_manifest(records, root / "manifest.csv");
  return load_manifest(root / "manifest.csv");
}

}  // namespace neurofuse
