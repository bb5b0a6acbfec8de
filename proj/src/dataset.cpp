#include "neurofuse/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "neurofuse/error.hpp"

namespace neurofuse {

namespace {

constexpr std::array<const char*, 7> kManifestColumns{
    "subject_id", "session_id", "label", "t1w_path", "dwi_path", "bval_path", "bvec_path"};

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::optional<std::filesystem::path> optional_path(const std::string& cell, const std::filesystem::path& base) {
  if (cell.empty()) return std::nullopt;
  std::filesystem::path p(cell);
  if (p.is_relative()) p = base / p;
  return p;
}

}  // namespace

std::string_view to_string(AvailabilityGroup group) noexcept {
  switch (group) {
    case AvailabilityGroup::T1wOnly: return "T1wOnly";
    case AvailabilityGroup::DtiOnly: return "DtiOnly";
    case AvailabilityGroup::Both: return "Both";
  }
  return "?";
}

AvailabilityGroup SubjectRecord::group() const noexcept {
  if (has_t1w() && has_dwi()) return AvailabilityGroup::Both;
  return has_t1w() ? AvailabilityGroup::T1wOnly : AvailabilityGroup::DtiOnly;
}

std::vector<SubjectRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();

  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::BadHeader, path.string() + " is empty");
  const auto header = split_csv(line);
  if (header.size() != kManifestColumns.size() ||
      !std::equal(header.begin(), header.end(), kManifestColumns.begin())) {
    throw Error(ErrorCode::BadHeader, "manifest header must be " + std::string("subject_id,session_id,label,"
                                                                               "t1w_path,dwi_path,bval_path,bvec_path"));
  }

  std::vector<SubjectRecord> records;
  std::set<std::pair<std::string, std::string>> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != kManifestColumns.size()) {
      throw Error(ErrorCode::BadHeader, where + ": expected 7 cells, found " + std::to_string(cells.size()));
    }
    SubjectRecord r;
    r.subject_id = cells[0];
    r.session_id = cells[1];
    if (r.subject_id.empty()) throw Error(ErrorCode::BadHeader, where + ": empty subject_id");
    const auto label = parse_label(cells[2]);
    if (!label) throw Error(ErrorCode::BadLabel, where + ": '" + cells[2] + "'");
    r.label = *label;
    r.t1w_path = optional_path(cells[3], base);
    r.dwi_path = optional_path(cells[4], base);
    r.bval_path = optional_path(cells[5], base);
    r.bvec_path = optional_path(cells[6], base);
    const int dwi_parts = r.dwi_path.has_value() + r.bval_path.has_value() + r.bvec_path.has_value();
    if (dwi_parts != 0 && dwi_parts != 3) throw Error(ErrorCode::PartialDwiTriple, where);
    if (!r.has_t1w() && !r.has_dwi()) throw Error(ErrorCode::MissingModality, where + ": no T1w and no DWI");
    if (!seen.emplace(r.subject_id, r.session_id).second) {
      throw Error(ErrorCode::DuplicateRow, where + ": " + r.subject_id + "/" + r.session_id);
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(std::span<const SubjectRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
  for (std::size_t c = 0; c < kManifestColumns.size(); ++c) out << (c ? "," : "") << kManifestColumns[c];
  out << '\n';
  const auto cell = [](const std::optional<std::filesystem::path>& p) { return p ? p->string() : std::string(); };
  for (const auto& r : records) {
    out << r.subject_id << ',' << r.session_id << ',' << to_string(r.label) << ',' << cell(r.t1w_path) << ','
        << cell(r.dwi_path) << ',' << cell(r.bval_path) << ',' << cell(r.bvec_path) << '\n';
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

int FoldPlan::fold_of(const std::string& subject_id) const {
  const auto it = assignment.find(subject_id);
  if (it == assignment.end()) throw Error(ErrorCode::InvalidArgument, "subject not in fold plan: " + subject_id);
  return it->second;
}

nlohmann::json FoldPlan::to_json() const {
  nlohmann::json j;
  j["fold_count"] = fold_count;
  j["seed"] = seed;
  j["assignment"] = assignment;
  j["notes"] = notes;
  nlohmann::json folds_json = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json fj;
    for (int g = 0; g < 3; ++g) {
      const std::string name(to_string(static_cast<AvailabilityGroup>(g)));
      fj["train"][name] = f.train[g];
      fj["test"][name] = f.test[g];
    }
    folds_json.push_back(fj);
  }
  j["folds"] = folds_json;
  return j;
}

FoldPlan FoldPlan::from_json(const nlohmann::json& j) {
  FoldPlan plan;
  plan.fold_count = j.at("fold_count").get<int>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.assignment = j.at("assignment").get<std::map<std::string, int>>();
  plan.notes = j.at("notes").get<std::vector<std::string>>();
  for (const auto& fj : j.at("folds")) {
    FoldSplit f;
    for (int g = 0; g < 3; ++g) {
      const std::string name(to_string(static_cast<AvailabilityGroup>(g)));
      f.train[g] = fj.at("train").at(name).get<std::vector<std::size_t>>();
      f.test[g] = fj.at("test").at(name).get<std::vector<std::size_t>>();
    }
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

FoldPlan plan_folds(std::span<const SubjectRecord> records, std::uint64_t seed, int fold_count) {
  if (fold_count < 2) throw Error(ErrorCode::InvalidArgument, "need at least two folds");

  // Subject order of first appearance; label from the first session,
  // availability from the union of the subject's sessions.
  struct SubjectInfo {
    Label label;
    bool t1w = false;
    bool dwi = false;
  };
  std::vector<std::string> order;
  std::map<std::string, SubjectInfo> info;
  for (const auto& r : records) {
    auto [it, inserted] = info.try_emplace(r.subject_id, SubjectInfo{r.label});
    if (inserted) order.push_back(r.subject_id);
    it->second.t1w = it->second.t1w || r.has_t1w();
    it->second.dwi = it->second.dwi || r.has_dwi();
  }

  std::map<std::pair<int, int>, std::vector<std::string>> strata;
  for (const auto& id : order) {
    const SubjectInfo& s = info[id];
    const auto group = s.t1w && s.dwi ? AvailabilityGroup::Both
                       : s.t1w        ? AvailabilityGroup::T1wOnly
                                      : AvailabilityGroup::DtiOnly;
    strata[{static_cast<int>(group), class_index(s.label)}].push_back(id);
  }

  FoldPlan plan;
  plan.fold_count = fold_count;
  plan.seed = seed;
  std::mt19937_64 rng(seed);
  std::size_t dealt = 0;
  for (auto& [key, subjects] : strata) {
    std::shuffle(subjects.begin(), subjects.end(), rng);
    if (subjects.size() < static_cast<std::size_t>(fold_count)) {
      plan.notes.push_back("stratum " + std::string(to_string(static_cast<AvailabilityGroup>(key.first))) + "/" +
                           std::string(to_string(label_from_index(key.second))) + " has " +
                           std::to_string(subjects.size()) + " subjects for " + std::to_string(fold_count) +
                           " folds");
    }
    for (const auto& id : subjects) {
      plan.assignment[id] = static_cast<int>(dealt % fold_count);
      ++dealt;
    }
  }

  plan.folds.resize(fold_count);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int fold = plan.assignment.at(records[i].subject_id);
    const int g = static_cast<int>(records[i].group());
    for (int f = 0; f < fold_count; ++f) {
      (f == fold ? plan.folds[f].test : plan.folds[f].train)[g].push_back(i);
    }
  }
  return plan;
}

bool offset_in_range(const Dims3& dims, int offset) noexcept {
  for (int d : dims) {
    const int index = d / 2 + offset;
    if (index < 0 || index >= d) return false;
  }
  return true;
}

namespace {

// Writes one normalised, resized channel from a 2D plane given by a reader.
template <typename Reader>
void fill_channel(float* out, int size, int rows, int cols, Reader&& read) {
  std::vector<double> plane(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) plane[static_cast<std::size_t>(r) * cols + c] = read(r, c);
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double min = *lo, range = *hi - *lo;
  for (int r = 0; r < size; ++r) {
    const int sr = std::min(rows - 1, static_cast<int>(static_cast<long long>(r) * rows / size));
    for (int c = 0; c < size; ++c) {
      const int sc = std::min(cols - 1, static_cast<int>(static_cast<long long>(c) * cols / size));
      const double v = plane[static_cast<std::size_t>(sr) * cols + sc];
      out[static_cast<std::size_t>(r) * size + c] = range > 0 ? static_cast<float>((v - min) / range) : 0.0f;
    }
  }
}

}  // namespace

SliceImage extract_slices(const Volume3D& volume, Modality modality, Label label, std::string subject_id,
                          int offset, int size) {
  if (size < 1) throw Error(ErrorCode::InvalidArgument, "image size must be positive");
  const Dims3& d = volume.dims();
  if (!offset_in_range(d, offset)) {
    throw Error(ErrorCode::OffsetOutOfRange, "offset " + std::to_string(offset) + " leaves the volume");
  }
  const int x = d[0] / 2 + offset, y = d[1] / 2 + offset, z = d[2] / 2 + offset;

  SliceImage img;
  img.size = size;
  img.pixels.assign(static_cast<std::size_t>(3) * size * size, 0.0f);
  img.modality = modality;
  img.label = label;
  img.subject_id = std::move(subject_id);
  img.slice_offset = offset;
  const std::size_t plane = static_cast<std::size_t>(size) * size;

  // Rows run from high to low along the vertical axis of each view.
  fill_channel(img.pixels.data(), size, d[2], d[1],
               [&](int r, int c) { return volume(x, c, d[2] - 1 - r); });
  fill_channel(img.pixels.data() + plane, size, d[2], d[0],
               [&](int r, int c) { return volume(c, y, d[2] - 1 - r); });
  fill_channel(img.pixels.data() + 2 * plane, size, d[1], d[0],
               [&](int r, int c) { return volume(c, d[1] - 1 - r, z); });
  return img;
}

SliceImage black_image(Label label, std::string subject_id, int size) {
  SliceImage img;
  img.size = size;
  img.pixels.assign(static_cast<std::size_t>(3) * size * size, 0.0f);
  img.modality = Modality::Black;
  img.label = label;
  img.subject_id = std::move(subject_id);
  return img;
}

SliceImage flip(const SliceImage& image, bool horizontal, bool vertical) {
  SliceImage out = image;
  const int n = image.size;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < n; ++r)
      for (int col = 0; col < n; ++col) {
        const int sr = vertical ? n - 1 - r : r;
        const int sc = horizontal ? n - 1 - col : col;
        out.pixels[(static_cast<std::size_t>(c) * n + r) * n + col] = image.at(c, sr, sc);
      }
  return out;
}

FlipDraw draw_flips(std::mt19937_64& rng) {
  FlipDraw d;
  d.horizontal = (rng() >> 63) != 0;
  d.vertical = (rng() >> 63) != 0;
  return d;
}

SliceImage augment(const SliceImage& image, std::mt19937_64& rng, FlipDraw* drawn) {
  const FlipDraw d = draw_flips(rng);
  if (drawn != nullptr) *drawn = d;
  if (!d.horizontal && !d.vertical) return image;
  return flip(image, d.horizontal, d.vertical);
}

std::vector<SlicePick> plan_balance(std::span<const SliceSource> sources, double tolerance) {
  if (!(tolerance >= 0.0 && tolerance < 1.0)) throw Error(ErrorCode::InvalidArgument, "tolerance must lie in [0, 1)");
  std::vector<SlicePick> picks;
  std::array<std::vector<std::size_t>, 3> by_class;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    picks.push_back({s, 0});
    by_class[class_index(sources[s].label)].push_back(s);
  }
  std::size_t majority = 0;
  for (const auto& members : by_class) majority = std::max(majority, members.size());
  const double target = (1.0 - tolerance) * static_cast<double>(majority);

  for (const auto& members : by_class) {
    if (members.empty() || members.size() == majority) continue;
    std::size_t count = members.size();
    int max_offset = 0;
    for (std::size_t s : members) {
      max_offset = std::max(max_offset, *std::max_element(sources[s].dims.begin(), sources[s].dims.end()));
    }
    for (int k = 1; k <= max_offset && static_cast<double>(count) < target; ++k) {
      for (int offset : {k, -k}) {
        for (std::size_t s : members) {
          if (static_cast<double>(count) >= target) break;
          if (!offset_in_range(sources[s].dims, offset)) continue;
          picks.push_back({s, offset});
          ++count;
        }
      }
    }
  }
  return picks;
}

std::vector<SliceImage> balance_classes(std::span<const SliceImage> images, std::span<const Volume3D> volumes,
                                        double tolerance) {
  if (images.size() != volumes.size()) {
    throw Error(ErrorCode::CountMismatch, "each image needs its source volume");
  }
  std::vector<SliceSource> sources;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].slice_offset != 0) throw Error(ErrorCode::InvalidArgument, "balancing expects offset-0 images");
    sources.push_back({images[i].label, volumes[i].dims()});
  }
  std::vector<SliceImage> out(images.begin(), images.end());
  for (const SlicePick& p : plan_balance(sources, tolerance)) {
    if (p.offset == 0) continue;
    const SliceImage& origin = images[p.source];
    out.push_back(extract_slices(volumes[p.source], origin.modality, origin.label, origin.subject_id, p.offset,
                                 origin.size));
  }
  return out;
}

void write_slice_cache(std::span<const SliceImage> images, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream blob(dir / "slices.f32", std::ios::binary);
  if (!blob) throw Error(ErrorCode::IoFailure, "cannot create slice cache in " + dir.string());
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& img : images) {
    index.push_back({{"subject_id", img.subject_id},
                     {"modality", std::string(to_string(img.modality))},
                     {"label", std::string(to_string(img.label))},
                     {"slice_offset", img.slice_offset},
                     {"size", img.size},
                     {"byte_offset", offset}});
    // Little-endian float32 on disk.
    for (float v : img.pixels) {
      std::array<char, 4> raw{};
      std::memcpy(raw.data(), &v, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
      blob.write(raw.data(), 4);
    }
    offset += img.pixels.size() * 4;
  }
  std::ofstream(dir / "index.json") << index.dump(1) << '\n';
  if (!blob) throw Error(ErrorCode::IoFailure, "write failed for slice cache in " + dir.string());
}

std::vector<SliceImage> read_slice_cache(const std::filesystem::path& dir) {
  std::ifstream index_in(dir / "index.json");
  std::ifstream blob(dir / "slices.f32", std::ios::binary);
  if (!index_in || !blob) throw Error(ErrorCode::IoFailure, "missing slice cache in " + dir.string());
  const nlohmann::json index = nlohmann::json::parse(index_in);
  std::vector<SliceImage> images;
  for (const auto& entry : index) {
    SliceImage img;
    img.subject_id = entry.at("subject_id").get<std::string>();
    img.modality = parse_modality(entry.at("modality").get<std::string>()).value();
    img.label = parse_label(entry.at("label").get<std::string>()).value();
    img.slice_offset = entry.at("slice_offset").get<int>();
    img.size = entry.at("size").get<int>();
    img.pixels.resize(static_cast<std::size_t>(3) * img.size * img.size);
    blob.seekg(static_cast<std::streamoff>(entry.at("byte_offset").get<std::size_t>()));
    for (float& v : img.pixels) {
      std::array<char, 4> raw{};
      blob.read(raw.data(), 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
      std::memcpy(&v, raw.data(), 4);
    }
    if (!blob) throw Error(ErrorCode::TruncatedFile, "slice cache blob is short in " + dir.string());
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace neurofuse
