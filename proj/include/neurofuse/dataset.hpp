#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurofuse/nifti_io.hpp"
#include "neurofuse/types.hpp"

namespace neurofuse {

/// Which modalities a scan session provides.
enum class AvailabilityGroup : std::uint8_t { T1wOnly = 0, DtiOnly = 1, Both = 2 };
std::string_view to_string(AvailabilityGroup group) noexcept;

struct SubjectRecord {
  std::string subject_id;
  std::string session_id;
  Label label = Label::NC;
  std::optional<std::filesystem::path> t1w_path;
  std::optional<std::filesystem::path> dwi_path;
  std::optional<std::filesystem::path> bval_path;
  std::optional<std::filesystem::path> bvec_path;

  bool has_t1w() const noexcept { return t1w_path.has_value(); }
  bool has_dwi() const noexcept { return dwi_path.has_value(); }
  AvailabilityGroup group() const noexcept;
};

/// CSV with header subject_id,session_id,label,t1w_path,dwi_path,bval_path,bvec_path.
/// Relative paths resolve against the manifest's directory.
std::vector<SubjectRecord> load_manifest(const std::filesystem::path& path);
void write_manifest(std::span<const SubjectRecord> records, const std::filesystem::path& path);

struct FoldSplit {
  /// Record indices, one list per availability group.
  std::array<std::vector<std::size_t>, 3> train;
  std::array<std::vector<std::size_t>, 3> test;
};

struct FoldPlan {
  int fold_count = 5;
  std::uint64_t seed = 0;
  std::map<std::string, int> assignment;
  std::vector<FoldSplit> folds;
  std::vector<std::string> notes;

  int fold_of(const std::string& subject_id) const;
  nlohmann::json to_json() const;
  static FoldPlan from_json(const nlohmann::json& j);
};

inline constexpr int kDefaultFolds = 5;

/// Subject-wise split stratified by (availability group, label).
FoldPlan plan_folds(std::span<const SubjectRecord> records, std::uint64_t seed, int fold_count = kDefaultFolds);

inline constexpr int kImageSize = 224;

/// H x W x 3 image stored channel-major: (sagittal, coronal, axial).
struct SliceImage {
  int size = kImageSize;
  std::vector<float> pixels;
  Modality modality = Modality::Black;
  Label label = Label::NC;
  std::string subject_id;
  int slice_offset = 0;

  float at(int channel, int row, int col) const {
    return pixels[(static_cast<std::size_t>(channel) * size + row) * size + col];
  }
  bool operator==(const SliceImage&) const = default;
};

bool offset_in_range(const Dims3& dims, int offset) noexcept;

/// Slices at floor(d/2)+offset along each axis, min-max normalised per
/// channel and resized to size x size by nearest neighbour.
SliceImage extract_slices(const Volume3D& volume, Modality modality, Label label, std::string subject_id,
                          int offset, int size = kImageSize);

SliceImage black_image(Label label, std::string subject_id, int size = kImageSize);

SliceImage flip(const SliceImage& image, bool horizontal, bool vertical);

struct FlipDraw {
  bool horizontal = false;
  bool vertical = false;
};

/// Independent horizontal and vertical flips with probability 0.5 each.
SliceImage augment(const SliceImage& image, std::mt19937_64& rng, FlipDraw* drawn = nullptr);
FlipDraw draw_flips(std::mt19937_64& rng);

struct SliceSource {
  Label label = Label::NC;
  Dims3 dims{0, 0, 0};
};

struct SlicePick {
  std::size_t source = 0;
  int offset = 0;
  bool operator==(const SlicePick&) const = default;
};

inline constexpr double kDefaultBalanceTolerance = 0.1;

/// Offset-0 pick for every source followed by neighbouring-slice picks for
/// minority classes: offsets +1, -1, +2, -2, ... cycling through each
/// class's sources in order until the class reaches (1 - tolerance) of the
/// majority count or runs out of offsets.
std::vector<SlicePick> plan_balance(std::span<const SliceSource> sources, double tolerance = kDefaultBalanceTolerance);

/// `images[i]` must be the offset-0 image of `volumes[i]`.
std::vector<SliceImage> balance_classes(std::span<const SliceImage> images, std::span<const Volume3D> volumes,
                                        double tolerance = kDefaultBalanceTolerance);

/// float32 blob plus a JSON index in `dir`.
void write_slice_cache(std::span<const SliceImage> images, const std::filesystem::path& dir);
std::vector<SliceImage> read_slice_cache(const std::filesystem::path& dir);

}  // namespace neurofuse
