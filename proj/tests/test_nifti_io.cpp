#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <zlib.h>

#include "neurofuse/nifti_io.hpp"
#include "support.hpp"

using namespace neurofuse;
using test_support::TempDir;

namespace {

/// Minimal NIfTI-1 writer written against the published header layout.
struct RawHeader {
  std::array<std::int16_t, 8> dim{3, 2, 2, 2, 1, 1, 1, 1};
  std::int16_t datatype = 16;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 0, 0, 0};
  float vox_offset = 352;
  float scl_slope = 0;
  float scl_inter = 0;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 1;
  std::array<float, 6> quatern{};
  std::array<float, 12> srow{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  std::string magic{"n+1\0", 4};
  std::int32_t sizeof_hdr = 348;
  bool big_endian = false;
};

template <typename T>
void put(std::vector<char>& buf, std::size_t offset, T value, bool big_endian) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if (big_endian) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(buf.data() + offset, bytes, sizeof(T));
}

std::vector<char> header_bytes(const RawHeader& h) {
  std::vector<char> buf(352, 0);
  const bool be = h.big_endian;
  put(buf, 0, h.sizeof_hdr, be);
  for (int i = 0; i < 8; ++i) put(buf, 40 + 2 * i, h.dim[i], be);
  put(buf, 70, h.datatype, be);
  put(buf, 72, h.bitpix, be);
  for (int i = 0; i < 8; ++i) put(buf, 76 + 4 * i, h.pixdim[i], be);
  put(buf, 108, h.vox_offset, be);
  put(buf, 112, h.scl_slope, be);
  put(buf, 116, h.scl_inter, be);
  put(buf, 252, h.qform_code, be);
  put(buf, 254, h.sform_code, be);
  for (int i = 0; i < 6; ++i) put(buf, 256 + 4 * i, h.quatern[i], be);
  for (int i = 0; i < 12; ++i) put(buf, 280 + 4 * i, h.srow[i], be);
  std::memcpy(buf.data() + 344, h.magic.data(), std::min<std::size_t>(4, h.magic.size()));
  return buf;
}

template <typename T>
std::vector<char> payload(const std::vector<T>& values, bool big_endian = false) {
  std::vector<char> buf(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) put(buf, i * sizeof(T), values[i], big_endian);
  return buf;
}

void write_file(const std::filesystem::path& p, const std::vector<char>& a, const std::vector<char>& b = {}) {
  std::ofstream out(p, std::ios::binary);
  out.write(a.data(), static_cast<std::streamsize>(a.size()));
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

void write_text(const std::filesystem::path& p, const std::string& s) { std::ofstream(p) << s; }

std::vector<float> iota_floats(int n) {
  std::vector<float> v(n);
  for (int i = 0; i < n; ++i) v[i] = static_cast<float>(i);
  return v;
}

}  // namespace

TEST_CASE("read_nifti: 2x2x2 float32 with identity sform") {
  TempDir dir("nifti");
  write_file(dir / "a.nii", header_bytes({}), payload(iota_floats(8)));
  const Volume3D v = read_nifti(dir / "a.nii");
  CHECK(v.dims() == Dims3{2, 2, 2});
  for (int i = 0; i < 8; ++i) CHECK(v.data()[i] == i);
  CHECK(v.affine() == Eigen::Matrix4d::Identity());
  CHECK(v(1, 0, 0) == 1.0);
  CHECK(v(0, 1, 0) == 2.0);
  CHECK(v(0, 0, 1) == 4.0);
}

TEST_CASE("read_nifti: big-endian file parses like the little-endian one") {
  TempDir dir("nifti");
  RawHeader be;
  be.big_endian = true;
  be.srow = {2, 0, 0, -1, 0, 3, 0, 2, 0, 0, 4, 5};
  RawHeader le = be;
  le.big_endian = false;
  write_file(dir / "be.nii", header_bytes(be), payload(iota_floats(8), true));
  write_file(dir / "le.nii", header_bytes(le), payload(iota_floats(8), false));
  const Volume3D a = read_nifti(dir / "be.nii");
  const Volume3D b = read_nifti(dir / "le.nii");
  CHECK(a.affine() == b.affine());
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK(a.affine()(1, 1) == 3.0);
  CHECK(a.affine()(2, 3) == 5.0);
}

TEST_CASE("read_nifti: integer datatypes with scaling") {
  TempDir dir("nifti");
  RawHeader h;
  h.datatype = 4;  // int16
  h.bitpix = 16;
  h.scl_slope = 2.0f;
  h.scl_inter = -1.0f;
  write_file(dir / "s.nii", header_bytes(h), payload(std::vector<std::int16_t>{0, 1, 2, 3, -4, 5, 6, 7}));
  const Volume3D v = read_nifti(dir / "s.nii");
  CHECK(v.data()[0] == -1.0);
  CHECK(v.data()[3] == 5.0);
  CHECK(v.data()[4] == -9.0);

  h.datatype = 2;  // uint8
  h.bitpix = 8;
  h.scl_slope = 0.0f;  // zero slope means unscaled
  write_file(dir / "u.nii", header_bytes(h), payload(std::vector<std::uint8_t>{0, 1, 2, 3, 250, 5, 6, 7}));
  CHECK(read_nifti(dir / "u.nii").data()[4] == 250.0);

  h.datatype = 8;  // int32
  h.bitpix = 32;
  write_file(dir / "i.nii", header_bytes(h), payload(std::vector<std::int32_t>{0, 1, 2, -100000, 4, 5, 6, 7}));
  CHECK(read_nifti(dir / "i.nii").data()[3] == -100000.0);

  h.datatype = 64;  // float64
  h.bitpix = 64;
  write_file(dir / "d.nii", header_bytes(h), payload(std::vector<double>{0.1, 1, 2, 3, 4, 5, 6, 7}));
  CHECK(read_nifti(dir / "d.nii").data()[0] == 0.1);
}

TEST_CASE("read_nifti: affine falls back to qform, then pixdim") {
  TempDir dir("nifti");
  RawHeader h;
  h.sform_code = 0;
  h.qform_code = 1;
  h.pixdim = {1, 2, 3, 4, 0, 0, 0, 0};
  // 90 degrees about z: quaternion (a, b, c, d) = (cos 45, 0, 0, sin 45).
  h.quatern = {0, 0, static_cast<float>(std::sqrt(0.5)), 10, 20, 30};
  write_file(dir / "q.nii", header_bytes(h), payload(iota_floats(8)));
  const Eigen::Matrix4d q = read_nifti(dir / "q.nii").affine();
  Eigen::Matrix4d expected = Eigen::Matrix4d::Identity();
  expected.topLeftCorner<3, 3>() << 0, -3, 0, 2, 0, 0, 0, 0, 4;
  expected.topRightCorner<3, 1>() << 10, 20, 30;
  CHECK((q - expected).cwiseAbs().maxCoeff() < 1e-6);

  h.pixdim[0] = -1;  // qfac flips the third axis
  write_file(dir / "qf.nii", header_bytes(h), payload(iota_floats(8)));
  CHECK(read_nifti(dir / "qf.nii").affine()(2, 2) == doctest::Approx(-4.0));

  h.qform_code = 0;
  write_file(dir / "p.nii", header_bytes(h), payload(iota_floats(8)));
  const Eigen::Matrix4d p = read_nifti(dir / "p.nii").affine();
  CHECK(p(0, 0) == 2.0);
  CHECK(p(1, 1) == 3.0);
  CHECK(p(2, 2) == 4.0);
  CHECK(read_nifti(dir / "p.nii").spacing() == Spacing3{2, 3, 4});
}

TEST_CASE("read_nifti: error cases") {
  TempDir dir("nifti");
  SUBCASE("truncated payload") {
    write_file(dir / "t.nii", header_bytes({}), payload(iota_floats(5)));
    CHECK_ERROR(read_nifti(dir / "t.nii"), ErrorCode::TruncatedFile);
  }
  SUBCASE("truncated header") {
    auto bytes = header_bytes({});
    bytes.resize(100);
    write_file(dir / "h.nii", bytes);
    CHECK_ERROR(read_nifti(dir / "h.nii"), ErrorCode::TruncatedFile);
  }
  SUBCASE("bad magic") {
    RawHeader h;
    h.magic = std::string("abc\0", 4);
    write_file(dir / "m.nii", header_bytes(h), payload(iota_floats(8)));
    CHECK_ERROR(read_nifti(dir / "m.nii"), ErrorCode::BadMagic);
  }
  SUBCASE("header of an hdr/img pair") {
    RawHeader h;
    h.magic = std::string("ni1\0", 4);
    write_file(dir / "x.nii", header_bytes(h), payload(iota_floats(8)));
    CHECK_ERROR(read_nifti(dir / "x.nii"), ErrorCode::UnsupportedFormat);
  }
  SUBCASE("NIfTI-2") {
    RawHeader h;
    h.sizeof_hdr = 540;
    write_file(dir / "n2.nii", header_bytes(h), std::vector<char>(600, 0));
    CHECK_ERROR(read_nifti(dir / "n2.nii"), ErrorCode::UnsupportedFormat);
  }
  SUBCASE("complex datatype") {
    RawHeader h;
    h.datatype = 32;
    h.bitpix = 64;
    write_file(dir / "c.nii", header_bytes(h), std::vector<char>(64, 0));
    CHECK_ERROR(read_nifti(dir / "c.nii"), ErrorCode::UnsupportedDatatype);
  }
  SUBCASE("singular sform") {
    RawHeader h;
    h.srow = {1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0};
    write_file(dir / "z.nii", header_bytes(h), payload(iota_floats(8)));
    CHECK_ERROR(read_nifti(dir / "z.nii"), ErrorCode::NonInvertibleAffine);
  }
  SUBCASE("missing file") { CHECK_ERROR(read_nifti(dir / "absent.nii"), ErrorCode::IoFailure); }
}

TEST_CASE("write_nifti: uncompressed size is header, extender and float32 payload") {
  TempDir dir("nifti");
  const Dims3 dims{96, 96, 96};
  const Volume3D v = Volume3D::with_spacing(dims, {2, 2, 2}, std::vector<double>(96 * 96 * 96, 1.5));
  write_nifti(v, dir / "big.nii");
  CHECK(std::filesystem::file_size(dir / "big.nii") == 352u + 4u * 96u * 96u * 96u);
}

TEST_CASE("write_nifti: round trip preserves geometry and float32 data") {
  TempDir dir("nifti");
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int trial = 0; trial < 5; ++trial) {
    const Dims3 dims{3 + trial, 4, 5};
    Eigen::Matrix4d a = Eigen::Matrix4d::Identity();
    a.topLeftCorner<3, 3>() = Eigen::Matrix3d::Random() + 3 * Eigen::Matrix3d::Identity();
    a.topRightCorner<3, 1>() << u(rng), u(rng), u(rng);
    std::vector<double> data(static_cast<std::size_t>(dims[0] * dims[1] * dims[2]));
    for (auto& x : data) x = static_cast<float>(u(rng));  // float32-representable
    const Spacing3 spacing{a.col(0).head<3>().norm(), a.col(1).head<3>().norm(), a.col(2).head<3>().norm()};
    const Volume3D v(dims, spacing, a, data);
    for (const char* name : {"r.nii", "r.nii.gz"}) {
      write_nifti(v, dir / name);
      const Volume3D back = read_nifti(dir / name);
      CHECK(back.dims() == dims);
      CHECK(std::equal(back.data().begin(), back.data().end(), v.data().begin()));
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) CHECK(std::abs(back.affine()(r, c) - a(r, c)) <= 1e-6 * std::max(1.0, std::abs(a(r, c))));
      for (int d = 0; d < 3; ++d) CHECK(back.spacing()[d] == doctest::Approx(spacing[d]).epsilon(1e-6));
    }
  }
}

TEST_CASE("write_nifti: gzip output is a real gzip stream") {
  TempDir dir("nifti");
  const Volume3D v = Volume3D::with_spacing({2, 2, 2}, {1, 1, 1}, {0, 1, 2, 3, 4, 5, 6, 7});
  write_nifti(v, dir / "g.nii.gz");
  gzFile f = gzopen((dir / "g.nii.gz").c_str(), "rb");
  REQUIRE(f != nullptr);
  CHECK(gzdirect(f) == 0);
  std::vector<char> buf(400);
  CHECK(gzread(f, buf.data(), static_cast<unsigned>(buf.size())) == 352 + 32);
  gzclose(f);
  CHECK(std::string(buf.data() + 344, 3) == "n+1");
}

TEST_CASE("write_nifti: unwritable path") {
  const Volume3D v = Volume3D::with_spacing({1, 1, 1}, {1, 1, 1}, {0});
  CHECK_ERROR(write_nifti(v, "/nonexistent-dir/x/y.nii"), ErrorCode::IoFailure);
  CHECK_ERROR(write_nifti(v, "/nonexistent-dir/x/y.nii.gz"), ErrorCode::IoFailure);
}

TEST_CASE("Volume3D invariants") {
  CHECK_ERROR(Volume3D::with_spacing({2, 2, 2}, {1, 1, 1}, std::vector<double>(7)), ErrorCode::InvalidArgument);
  CHECK_ERROR(Volume3D::with_spacing({2, 2, 0}, {1, 1, 1}, {}), ErrorCode::InvalidArgument);
  CHECK_ERROR(Volume3D::with_spacing({1, 1, 1}, {1, 0, 1}, {0}), ErrorCode::InvalidArgument);
  Eigen::Matrix4d bad = Eigen::Matrix4d::Identity();
  bad(3, 0) = 1;
  CHECK_ERROR(Volume3D({1, 1, 1}, {1, 1, 1}, bad, {0}), ErrorCode::InvalidArgument);
  Eigen::Matrix4d singular = Eigen::Matrix4d::Identity();
  singular(2, 2) = 0;
  CHECK_ERROR(Volume3D({1, 1, 1}, {1, 1, 1}, singular, {0}), ErrorCode::NonInvertibleAffine);
}

TEST_CASE("4D series round trip and DWI loading") {
  TempDir dir("nifti");
  std::vector<Volume3D> frames;
  for (int t = 0; t < 7; ++t) frames.push_back(Volume3D::with_spacing({2, 1, 1}, {2, 2, 2}, {1.0 * t, 2.0 * t}));
  write_nifti_series(frames, dir / "dwi.nii.gz");
  const auto back = read_nifti_series(dir / "dwi.nii.gz");
  REQUIRE(back.size() == 7);
  CHECK(back[6].data()[1] == 12.0);
  CHECK_ERROR(read_nifti(dir / "dwi.nii.gz"), ErrorCode::UnsupportedFormat);

  GradientTable table;
  table.bvals = {0, 1000, 1000, 1000, 1000, 1000, 1000};
  table.bvecs = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}};
  write_bval_bvec(table, dir / "dwi.bval", dir / "dwi.bvec");
  const DiffusionSeries s = read_dwi(dir / "dwi.nii.gz", dir / "dwi.bval", dir / "dwi.bvec");
  CHECK(s.volumes.size() == 7);
  CHECK(s.bvecs[4].norm() == doctest::Approx(1.0));
  CHECK(s.mean_b0().data()[1] == 0.0);

  write_text(dir / "short.bval", "0 1000 1000\n");
  CHECK_ERROR(read_dwi(dir / "dwi.nii.gz", dir / "short.bval", dir / "dwi.bvec"), ErrorCode::CountMismatch);
}

TEST_CASE("DiffusionSeries invariants") {
  const Volume3D a = Volume3D::with_spacing({1, 1, 1}, {1, 1, 1}, {1});
  const Volume3D b = Volume3D::with_spacing({1, 1, 2}, {1, 1, 1}, {1, 1});
  CHECK_ERROR(DiffusionSeries({a, a}, {1000, 1000}, {{1, 0, 0}, {0, 1, 0}}), ErrorCode::InvalidArgument);
  CHECK_ERROR(DiffusionSeries({a, b}, {0, 1000}, {{0, 0, 0}, {0, 1, 0}}), ErrorCode::GeometryMismatch);
  CHECK_ERROR(DiffusionSeries({a, a}, {0}, {{0, 0, 0}}), ErrorCode::CountMismatch);
}

TEST_CASE("read_bval_bvec") {
  TempDir dir("bvec");
  SUBCASE("canonical two-volume case") {
    write_text(dir / "b.bval", "0 1000\n");
    write_text(dir / "b.bvec", "0 1\n0 0\n0 0\n");
    const GradientTable t = read_bval_bvec(dir / "b.bval", dir / "b.bvec");
    REQUIRE(t.bvals.size() == 2);
    CHECK(t.bvals[0] == 0.0);
    CHECK(t.bvals[1] == 1000.0);
    CHECK(t.bvecs[0] == Eigen::Vector3d(0, 0, 0));
    CHECK(t.bvecs[1] == Eigen::Vector3d(1, 0, 0));
  }
  SUBCASE("count mismatch") {
    write_text(dir / "b.bval", "0 1000\n");
    write_text(dir / "b.bvec", "0 1 0\n0 0 1\n0 0 0\n");
    CHECK_ERROR(read_bval_bvec(dir / "b.bval", dir / "b.bvec"), ErrorCode::CountMismatch);
  }
  SUBCASE("bvec with only two rows") {
    write_text(dir / "b.bval", "0 1000\n");
    write_text(dir / "b.bvec", "0 1\n0 0\n");
    CHECK_ERROR(read_bval_bvec(dir / "b.bval", dir / "b.bvec"), ErrorCode::CountMismatch);
  }
  SUBCASE("renormalisation") {
    write_text(dir / "b.bval", "1000\n");
    write_text(dir / "b.bvec", "2\n0\n0\n");
    CHECK(read_bval_bvec(dir / "b.bval", dir / "b.bvec").bvecs[0] == Eigen::Vector3d(1, 0, 0));
  }
  SUBCASE("non-numeric token") {
    write_text(dir / "b.bval", "0 abc\n");
    write_text(dir / "b.bvec", "0 1\n0 0\n0 0\n");
    CHECK_ERROR(read_bval_bvec(dir / "b.bval", dir / "b.bvec"), ErrorCode::NonNumericToken);
  }
  SUBCASE("output length equals column count") {
    std::mt19937_64 rng(3);
    for (int n = 1; n < 20; n += 3) {
      std::string bval, rows[3];
      std::uniform_real_distribution<double> u(-1, 1);
      for (int i = 0; i < n; ++i) {
        bval += (i ? " " : "") + std::to_string(i == 0 ? 0 : 1000);
        for (auto& r : rows) r += (i ? " " : "") + std::to_string(i == 0 ? 0.0 : u(rng) + 2.0);
      }
      write_text(dir / "b.bval", bval + "\n");
      write_text(dir / "b.bvec", rows[0] + "\n" + rows[1] + "\n" + rows[2] + "\n");
      const GradientTable t = read_bval_bvec(dir / "b.bval", dir / "b.bvec");
      CHECK(t.bvals.size() == static_cast<std::size_t>(n));
      for (int i = 1; i < n; ++i) CHECK(t.bvecs[i].norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}
