#include "neurofuse/nifti_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>
#include <zlib.h>

#include "neurofuse/error.hpp"

namespace neurofuse {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kNifti2HeaderSize = 540;
constexpr int kVoxOffset = 352;

enum NiftiType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  // gzread passes uncompressed files through unchanged.
  gzFile file = gzopen(path.c_str(), "rb");
  if (file == nullptr) {
    throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  }
  std::vector<unsigned char> bytes;
  std::array<unsigned char, 1 << 16> chunk{};
  for (;;) {
    const int n = gzread(file, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(file);
      throw Error(ErrorCode::IoFailure, "read error in " + path.string());
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(file);
  return bytes;
}

class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T at(std::size_t offset) const {
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    T value;
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }

 private:
  std::span<const unsigned char> bytes_;
  bool swap_;
};

struct ParsedHeader {
  bool swap = false;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 0;
  float scl_slope = 0;
  float scl_inter = 0;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 6> quatern{};  // b, c, d, qoffset x, y, z
  std::array<std::array<float, 4>, 3> srow{};
};

bool host_is_little() { return std::endian::native == std::endian::little; }

ParsedHeader parse_header(std::span<const unsigned char> bytes, const std::string& name) {
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize)) {
    throw Error(ErrorCode::TruncatedFile, name + " is shorter than a NIfTI-1 header");
  }
  const auto as_little = ByteReader(bytes, !host_is_little()).at<std::int32_t>(0);
  const auto as_big = ByteReader(bytes, host_is_little()).at<std::int32_t>(0);

  ParsedHeader h;
  if (as_little == kHeaderSize) {
    h.swap = !host_is_little();
  } else if (as_big == kHeaderSize) {
    h.swap = host_is_little();
  } else if (as_little == kNifti2HeaderSize || as_big == kNifti2HeaderSize) {
    throw Error(ErrorCode::UnsupportedFormat, name + ": NIfTI-2 is not supported");
  } else {
    throw Error(ErrorCode::BadMagic, name + ": unrecognised header size");
  }

  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (std::memcmp(magic, "ni1\0", 4) == 0) {
    throw Error(ErrorCode::UnsupportedFormat, name + ": .hdr/.img pairs are not supported");
  }
  if (std::memcmp(magic, "n+1\0", 4) != 0) {
    throw Error(ErrorCode::BadMagic, name + ": magic is not n+1");
  }

  ByteReader r(bytes, h.swap);
  for (int i = 0; i < 8; ++i) h.dim[i] = r.at<std::int16_t>(40 + 2 * i);
  h.datatype = r.at<std::int16_t>(70);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = r.at<float>(76 + 4 * i);
  h.vox_offset = r.at<float>(108);
  h.scl_slope = r.at<float>(112);
  h.scl_inter = r.at<float>(116);
  h.qform_code = r.at<std::int16_t>(252);
  h.sform_code = r.at<std::int16_t>(254);
  for (int i = 0; i < 6; ++i) h.quatern[i] = r.at<float>(256 + 4 * i);
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 4; ++c) h.srow[row][c] = r.at<float>(280 + 16 * row + 4 * c);
  return h;
}

Eigen::Matrix4d affine_from_header(const ParsedHeader& h) {
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  if (h.sform_code > 0) {
    for (int row = 0; row < 3; ++row)
      for (int c = 0; c < 4; ++c) affine(row, c) = h.srow[row][c];
    return affine;
  }
  const double dx = h.pixdim[1] > 0 ? h.pixdim[1] : 1.0;
  const double dy = h.pixdim[2] > 0 ? h.pixdim[2] : 1.0;
  const double dz = h.pixdim[3] > 0 ? h.pixdim[3] : 1.0;
  if (h.qform_code > 0) {
    double b = h.quatern[0], c = h.quatern[1], d = h.quatern[2];
    double a = 1.0 - (b * b + c * c + d * d);
    if (a < 1e-7) {
      // Rotation by 180 degrees: renormalise (b, c, d) and take a = 0.
      const double norm = std::sqrt(b * b + c * c + d * d);
      b /= norm;
      c /= norm;
      d /= norm;
      a = 0.0;
    } else {
      a = std::sqrt(a);
    }
    Eigen::Matrix3d rot;
    rot << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
        2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
        2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    const Eigen::Vector3d scale(dx, dy, qfac * dz);
    affine.topLeftCorner<3, 3>() = rot * scale.asDiagonal();
    affine.topRightCorner<3, 1>() = Eigen::Vector3d(h.quatern[3], h.quatern[4], h.quatern[5]);
    return affine;
  }
  affine.diagonal().head<3>() = Eigen::Vector3d(dx, dy, dz);
  return affine;
}

std::size_t bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kInt32: return 4;
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

double decode_voxel(const ByteReader& r, std::int16_t datatype, std::size_t offset) {
  switch (datatype) {
    case kUint8: return r.at<std::uint8_t>(offset);
    case kInt16: return r.at<std::int16_t>(offset);
    case kInt32: return r.at<std::int32_t>(offset);
    case kFloat32: return r.at<float>(offset);
    case kFloat64: return r.at<double>(offset);
    default: return 0.0;
  }
}

std::vector<Volume3D> decode_file(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = slurp(path);
  const std::string name = path.string();
  const ParsedHeader h = parse_header(bytes, name);

  const int ndim = h.dim[0];
  if (ndim < 1 || ndim > 7) {
    throw Error(ErrorCode::UnsupportedFormat, name + ": invalid dim[0]");
  }
  Dims3 dims{1, 1, 1};
  std::size_t frames = 1;
  for (int i = 1; i <= ndim; ++i) {
    if (h.dim[i] < 1) throw Error(ErrorCode::UnsupportedFormat, name + ": nonpositive dimension");
    if (i <= 3) {
      dims[i - 1] = h.dim[i];
    } else {
      frames *= static_cast<std::size_t>(h.dim[i]);
    }
  }

  const std::size_t voxel_bytes = bytes_per_voxel(h.datatype);
  if (voxel_bytes == 0) {
    throw Error(ErrorCode::UnsupportedDatatype,
                name + ": datatype code " + std::to_string(h.datatype));
  }

  const std::size_t offset =
      std::max<std::size_t>(kVoxOffset, static_cast<std::size_t>(std::lround(h.vox_offset)));
  const std::size_t per_frame = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  const std::size_t needed = offset + per_frame * frames * voxel_bytes;
  if (bytes.size() < needed) {
    throw Error(ErrorCode::TruncatedFile, name + ": expected " + std::to_string(needed) +
                                              " bytes, found " + std::to_string(bytes.size()));
  }

  Eigen::Matrix4d affine = affine_from_header(h);
  const double det = affine.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw Error(ErrorCode::NonInvertibleAffine, name);
  }
  Spacing3 spacing{};
  for (int a = 0; a < 3; ++a) {
    spacing[a] = h.pixdim[a + 1] > 0 ? h.pixdim[a + 1] : affine.col(a).head<3>().norm();
  }

  const bool scaled = h.scl_slope != 0.0f && std::isfinite(h.scl_slope);
  const double slope = scaled ? h.scl_slope : 1.0;
  const double inter = scaled ? h.scl_inter : 0.0;

  ByteReader r(bytes, h.swap);
  std::vector<Volume3D> out;
  out.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<double> data(per_frame);
    const std::size_t base = offset + f * per_frame * voxel_bytes;
    for (std::size_t v = 0; v < per_frame; ++v) {
      data[v] = decode_voxel(r, h.datatype, base + v * voxel_bytes) * slope + inter;
    }
    out.emplace_back(dims, spacing, affine, std::move(data));
  }
  return out;
}

template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t offset, T value) {
  std::array<unsigned char, sizeof(T)> raw{};
  std::memcpy(raw.data(), &value, sizeof(T));
  if (!host_is_little()) std::reverse(raw.begin(), raw.end());
  std::memcpy(buf.data() + offset, raw.data(), sizeof(T));
}

std::vector<unsigned char> encode(std::span<const Volume3D> frames) {
  const Volume3D& first = frames.front();
  const auto& dims = first.dims();
  const std::size_t per_frame = first.size();
  std::vector<unsigned char> buf(kVoxOffset + 4 * per_frame * frames.size(), 0);

  put<std::int32_t>(buf, 0, kHeaderSize);
  const bool series = frames.size() > 1;
  put<std::int16_t>(buf, 40, series ? 4 : 3);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(buf, 42 + 2 * a, static_cast<std::int16_t>(dims[a]));
  put<std::int16_t>(buf, 48, static_cast<std::int16_t>(frames.size()));
  for (int i = 5; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, 1);
  put<std::int16_t>(buf, 70, kFloat32);
  put<std::int16_t>(buf, 72, 32);
  put<float>(buf, 76, 1.0f);
  for (int a = 0; a < 3; ++a) put<float>(buf, 80 + 4 * a, static_cast<float>(first.spacing()[a]));
  put<float>(buf, 92, 1.0f);
  put<float>(buf, 108, static_cast<float>(kVoxOffset));
  put<float>(buf, 112, 1.0f);
  put<float>(buf, 116, 0.0f);
  buf[123] = 2;  // xyzt_units: millimetres
  put<std::int16_t>(buf, 252, 0);
  put<std::int16_t>(buf, 254, 1);
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 4; ++c)
      put<float>(buf, 280 + 16 * row + 4 * c, static_cast<float>(first.affine()(row, c)));
  std::memcpy(buf.data() + 344, "n+1\0", 4);

  std::size_t offset = kVoxOffset;
  for (const Volume3D& frame : frames) {
    for (double v : frame.data()) {
      put<float>(buf, offset, static_cast<float>(v));
      offset += 4;
    }
  }
  return buf;
}

void emit(const std::vector<unsigned char>& buf, const std::filesystem::path& path) {
  if (path.extension() == ".gz") {
    gzFile file = gzopen(path.c_str(), "wb6");
    if (file == nullptr) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
    const int written = gzwrite(file, buf.data(), static_cast<unsigned>(buf.size()));
    const int closed = gzclose(file);
    if (written != static_cast<int>(buf.size()) || closed != Z_OK) {
      throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<std::vector<double>> read_number_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream tokens(line);
    std::vector<double> row;
    std::string token;
    while (tokens >> token) {
      double value = 0.0;
      const auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
      if (ec != std::errc{} || end != token.data() + token.size()) {
        throw Error(ErrorCode::NonNumericToken, path.string() + ": '" + token + "'");
      }
      row.push_back(value);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_number(double value) {
  std::array<char, 32> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), end);
}

}  // namespace

Volume3D::Volume3D(Dims3 dims, Spacing3 spacing, const Eigen::Matrix4d& affine,
                   std::vector<double> data)
    : dims_(dims), spacing_(spacing), affine_(affine), data_(std::move(data)) {
  for (int a = 0; a < 3; ++a) {
    if (dims_[a] <= 0) throw Error(ErrorCode::InvalidArgument, "volume dimensions must be positive");
    if (!(spacing_[a] > 0.0)) throw Error(ErrorCode::InvalidArgument, "voxel spacing must be positive");
  }
  const std::size_t expected = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
  if (data_.size() != expected) {
    throw Error(ErrorCode::InvalidArgument, "data length " + std::to_string(data_.size()) +
                                                " does not match dims (" + std::to_string(expected) + ")");
  }
  if (affine_.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) {
    throw Error(ErrorCode::InvalidArgument, "affine last row must be (0,0,0,1)");
  }
  const double det = affine_.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12) {
    throw Error(ErrorCode::NonInvertibleAffine, "volume affine is singular");
  }
}

Volume3D Volume3D::zeros_like(const Volume3D& like) {
  return Volume3D(like.dims_, like.spacing_, like.affine_, std::vector<double>(like.size(), 0.0));
}

Volume3D Volume3D::with_spacing(Dims3 dims, Spacing3 spacing, std::vector<double> data,
                                const Eigen::Vector3d& origin) {
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  affine.diagonal().head<3>() = Eigen::Vector3d(spacing[0], spacing[1], spacing[2]);
  affine.topRightCorner<3, 1>() = origin;
  return Volume3D(dims, spacing, affine, std::move(data));
}

bool Volume3D::same_geometry(const Volume3D& other, double tol) const {
  return dims_ == other.dims_ &&
         (affine_ - other.affine_).cwiseAbs().maxCoeff() <= tol * (1.0 + affine_.cwiseAbs().maxCoeff());
}

DiffusionSeries::DiffusionSeries(std::vector<Volume3D> vols, std::vector<double> b,
                                 std::vector<Eigen::Vector3d> g)
    : volumes(std::move(vols)), bvals(std::move(b)), bvecs(std::move(g)) {
  if (volumes.empty()) throw Error(ErrorCode::InvalidArgument, "diffusion series is empty");
  if (volumes.size() != bvals.size() || volumes.size() != bvecs.size()) {
    throw Error(ErrorCode::CountMismatch,
                std::to_string(volumes.size()) + " volumes vs " + std::to_string(bvals.size()) +
                    " b-values and " + std::to_string(bvecs.size()) + " vectors");
  }
  bool has_b0 = false;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    if (!volumes[i].same_geometry(volumes.front())) {
      throw Error(ErrorCode::GeometryMismatch, "DWI volume " + std::to_string(i) + " geometry differs");
    }
    if (bvals[i] < 0.0) throw Error(ErrorCode::InvalidArgument, "negative b-value");
    has_b0 = has_b0 || bvals[i] == 0.0;
  }
  if (!has_b0) throw Error(ErrorCode::InvalidArgument, "diffusion series has no b=0 volume");
}

Volume3D DiffusionSeries::mean_b0() const {
  std::vector<double> sum(volumes.front().size(), 0.0);
  int count = 0;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    if (bvals[i] != 0.0) continue;
    const auto data = volumes[i].data();
    for (std::size_t v = 0; v < sum.size(); ++v) sum[v] += data[v];
    ++count;
  }
  for (double& s : sum) s /= count;
  const Volume3D& ref = volumes.front();
  return Volume3D(ref.dims(), ref.spacing(), ref.affine(), std::move(sum));
}

Volume3D read_nifti(const std::filesystem::path& path) {
  std::vector<Volume3D> frames = decode_file(path);
  if (frames.size() != 1) {
    throw Error(ErrorCode::UnsupportedFormat, path.string() + " holds " +
                                                  std::to_string(frames.size()) + " frames, expected 3D");
  }
  return std::move(frames.front());
}

std::vector<Volume3D> read_nifti_series(const std::filesystem::path& path) { return decode_file(path); }

void write_nifti(const Volume3D& volume, const std::filesystem::path& path) {
  emit(encode(std::span<const Volume3D>(&volume, 1)), path);
}

void write_nifti_series(std::span<const Volume3D> frames, const std::filesystem::path& path) {
  if (frames.empty()) throw Error(ErrorCode::InvalidArgument, "no frames to write");
  for (const Volume3D& f : frames) {
    if (!f.same_geometry(frames.front())) {
      throw Error(ErrorCode::GeometryMismatch, "series frames must share geometry");
    }
  }
  emit(encode(frames), path);
}

GradientTable read_bval_bvec(const std::filesystem::path& bval_path,
                             const std::filesystem::path& bvec_path) {
  GradientTable table;
  for (const auto& row : read_number_rows(bval_path)) {
    table.bvals.insert(table.bvals.end(), row.begin(), row.end());
  }
  const auto rows = read_number_rows(bvec_path);
  if (rows.size() != 3) {
    throw Error(ErrorCode::CountMismatch,
                bvec_path.string() + ": expected 3 rows, found " + std::to_string(rows.size()));
  }
  const std::size_t n = table.bvals.size();
  for (const auto& row : rows) {
    if (row.size() != n) {
      throw Error(ErrorCode::CountMismatch, std::to_string(n) + " b-values but " +
                                                std::to_string(row.size()) + " bvec columns");
    }
  }
  table.bvecs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d g(rows[0][i], rows[1][i], rows[2][i]);
    if (table.bvals[i] < 0.0) throw Error(ErrorCode::InvalidArgument, "negative b-value");
    if (table.bvals[i] > 0.0) {
      const double norm = g.norm();
      if (norm == 0.0) {
        throw Error(ErrorCode::InvalidArgument, "zero gradient direction with b > 0");
      }
      g /= norm;
    }
    table.bvecs[i] = g;
  }
  return table;
}

void write_bval_bvec(const GradientTable& table, const std::filesystem::path& bval_path,
                     const std::filesystem::path& bvec_path) {
  std::ofstream bval(bval_path);
  std::ofstream bvec(bvec_path);
  if (!bval || !bvec) throw Error(ErrorCode::IoFailure, "cannot create gradient sidecars");
  for (std::size_t i = 0; i < table.bvals.size(); ++i) {
    bval << (i ? " " : "") << format_number(table.bvals[i]);
  }
  bval << '\n';
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < table.bvecs.size(); ++i) {
      bvec << (i ? " " : "") << format_number(table.bvecs[i][axis]);
    }
    bvec << '\n';
  }
  if (!bval || !bvec) throw Error(ErrorCode::IoFailure, "write failed for gradient sidecars");
}

DiffusionSeries read_dwi(const std::filesystem::path& dwi_path,
                         const std::filesystem::path& bval_path,
                         const std::filesystem::path& bvec_path) {
  GradientTable table = read_bval_bvec(bval_path, bvec_path);
  std::vector<Volume3D> frames = read_nifti_series(dwi_path);
  return DiffusionSeries(std::move(frames), std::move(table.bvals), std::move(table.bvecs));
}

}  // namespace neurofuse
