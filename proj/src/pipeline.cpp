#include "neurofuse/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "neurofuse/checkpoint.hpp"
#include "neurofuse/dti.hpp"
#include "neurofuse/error.hpp"
#include "neurofuse/hash.hpp"

namespace neurofuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); }

fs::path resolve(const json& j, const char* key, const fs::path& base) {
  if (!j.contains(key)) return {};
  const fs::path p = j.at(key).get<std::string>();
  return p.is_absolute() || base.empty() ? p : base / p;
}

template <typename T>
void read_if(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) invalid(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      invalid(fmt::format("unknown key '{}' in {}", key, where));
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    out << text;
    if (!out) throw Error(ErrorCode::IoFailure, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, path.string() + ": " + e.what());
  }
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    check_keys(j,
               {"manifest", "workdir", "reference", "seed", "fold_count", "encoder_width", "image_size", "batch_size",
                "epochs", "head_epochs", "learning_rate", "beta1", "beta2", "epsilon", "augment",
                "validation_fraction", "balance_tolerance", "registration", "phantom"},
               "config");
    c.manifest = resolve(j, "manifest", base_dir);
    c.workdir = resolve(j, "workdir", base_dir);
    c.reference = resolve(j, "reference", base_dir);
    read_if(j, "seed", c.seed);
    c.train.seed = c.seed;
    read_if(j, "fold_count", c.fold_count);
    read_if(j, "encoder_width", c.encoder_width);
    read_if(j, "image_size", c.image_size);
    read_if(j, "batch_size", c.train.batch_size);
    read_if(j, "epochs", c.train.epochs);
    c.head_epochs = c.train.epochs;
    read_if(j, "head_epochs", c.head_epochs);
    read_if(j, "learning_rate", c.train.adam.learning_rate);
    read_if(j, "beta1", c.train.adam.beta1);
    read_if(j, "beta2", c.train.adam.beta2);
    read_if(j, "epsilon", c.train.adam.epsilon);
    read_if(j, "augment", c.train.augment);
    read_if(j, "validation_fraction", c.validation_fraction);
    read_if(j, "balance_tolerance", c.balance_tolerance);
    if (j.contains("registration")) {
      const json& r = j.at("registration");
      check_keys(r, {"bins", "levels", "max_cycles", "tolerance"}, "registration");
      read_if(r, "bins", c.registration.bins);
      read_if(r, "levels", c.registration.levels);
      read_if(r, "max_cycles", c.registration.max_cycles);
      read_if(r, "tolerance", c.registration.tolerance);
    }
    if (j.contains("phantom")) {
      const json& p = j.at("phantom");
      check_keys(p,
                 {"root", "per_class", "jitter", "seed", "t1w_noise", "dwi_noise", "t1w_only_fraction",
                  "dti_only_fraction"},
                 "phantom");
      c.phantom_root = resolve(p, "root", base_dir);
      c.phantom.seed = c.seed;
      read_if(p, "per_class", c.phantom.per_class);
      read_if(p, "jitter", c.phantom.jitter);
      read_if(p, "seed", c.phantom.seed);
      read_if(p, "t1w_noise", c.phantom.t1w_noise);
      read_if(p, "dwi_noise", c.phantom.dwi_noise);
      read_if(p, "t1w_only_fraction", c.phantom.t1w_only_fraction);
      read_if(p, "dti_only_fraction", c.phantom.dti_only_fraction);
    }
  } catch (const json::exception& e) {
    invalid(std::string("config: ") + e.what());
  }
  c.validate_numbers();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) invalid("config file not found: " + path.string());
  return from_json(read_json(path), path.parent_path());
}

json PipelineConfig::to_json() const {
  return json{{"manifest", manifest.string()},
              {"workdir", workdir.string()},
              {"reference", reference.string()},
              {"seed", seed},
              {"fold_count", fold_count},
              {"encoder_width", encoder_width},
              {"image_size", image_size},
              {"batch_size", train.batch_size},
              {"epochs", train.epochs},
              {"head_epochs", head_epochs},
              {"learning_rate", train.adam.learning_rate},
              {"beta1", train.adam.beta1},
              {"beta2", train.adam.beta2},
              {"epsilon", train.adam.epsilon},
              {"augment", train.augment},
              {"validation_fraction", validation_fraction},
              {"balance_tolerance", balance_tolerance},
              {"registration",
               {{"bins", registration.bins},
                {"levels", registration.levels},
                {"max_cycles", registration.max_cycles},
                {"tolerance", registration.tolerance}}}};
}

void PipelineConfig::validate_numbers() const {
  if (fold_count < 2) invalid("fold_count must be at least 2");
  if (encoder_width < 1) invalid("encoder_width must be positive");
  if (image_size < 8) invalid("image_size must be at least 8");
  if (train.batch_size < 1) invalid("batch_size must be at least 1");
  if (train.epochs < 1 || head_epochs < 1) invalid("epochs must be at least 1");
  if (!(train.adam.learning_rate > 0)) invalid("learning_rate must be positive");
  if (!(train.adam.beta1 >= 0 && train.adam.beta1 < 1 && train.adam.beta2 >= 0 && train.adam.beta2 < 1)) {
    invalid("Adam betas must lie in [0, 1)");
  }
  if (!(train.adam.epsilon > 0)) invalid("epsilon must be positive");
  if (!(validation_fraction >= 0 && validation_fraction <= 0.5)) invalid("validation_fraction must lie in [0, 0.5]");
  if (!(balance_tolerance >= 0 && balance_tolerance < 1)) invalid("balance_tolerance must lie in [0, 1)");
  if (registration.bins < 8) invalid("registration bins must be at least 8");
  if (registration.levels.empty() ||
      std::any_of(registration.levels.begin(), registration.levels.end(), [](int l) { return l < 1; })) {
    invalid("registration levels must be positive");
  }
  if (registration.max_cycles < 1) invalid("registration max_cycles must be positive");
  if (phantom.per_class < 1) invalid("phantom per_class must be positive");
  if (!(phantom.jitter >= 0 && phantom.jitter < 1)) invalid("phantom jitter must lie in [0, 1)");
  if (!(phantom.t1w_only_fraction >= 0 && phantom.dti_only_fraction >= 0 &&
        phantom.t1w_only_fraction + phantom.dti_only_fraction <= 1)) {
    invalid("phantom availability fractions must be nonnegative and sum to at most 1");
  }
}

void PipelineConfig::require_manifest() const {
  if (manifest.empty() || !fs::exists(manifest)) invalid("manifest not found: " + manifest.string());
  if (workdir.empty()) invalid("workdir is required");
}

void PipelineConfig::require_reference() const {
  if (reference.empty() || !fs::exists(reference)) invalid("reference volume not found: " + reference.string());
}

std::string session_key(const SubjectRecord& record) { return record.subject_id + "_" + record.session_id; }

ExitCode PreprocessSummary::exit_code() const noexcept {
  if (failed > 0 && processed + skipped == 0) return ExitCode::PartialFailure;
  return ExitCode::Success;
}

// ---------------------------------------------------------------- preprocess

namespace {

json registration_json(const RegistrationResult& r) {
  return json{{"parameters", to_json(r.transform)},
              {"initial", to_json(r.initial)},
              {"initial_mi", r.initial_mi},
              {"final_mi", r.final_mi},
              {"no_improvement", r.no_improvement},
              {"cycles", r.cycles}};
}

json registration_settings(const RegistrationConfig& r) {
  return json{{"bins", r.bins}, {"levels", r.levels}, {"max_cycles", r.max_cycles}, {"tolerance", r.tolerance}};
}

std::string input_hash(const SubjectRecord& record, const std::string& reference_hash, const RegistrationConfig& reg,
                       json& inputs) {
  Sha256 sha;
  sha.update(kSoftwareVersion);
  sha.update(reference_hash);
  sha.update(registration_settings(reg).dump());
  const std::array<std::pair<const char*, const std::optional<fs::path>*>, 4> files{
      {{"t1w", &record.t1w_path}, {"dwi", &record.dwi_path}, {"bval", &record.bval_path}, {"bvec", &record.bvec_path}}};
  for (const auto& [name, path] : files) {
    if (!*path) continue;
    const std::string h = sha256_file(**path);
    inputs[name] = {{"path", (*path)->string()}, {"sha256", h}};
    sha.update(name);
    sha.update(h);
  }
  return sha.hex_digest();
}

bool outputs_intact(const fs::path& dir, const json& provenance) {
  if (!provenance.contains("outputs")) return false;
  for (const auto& name : provenance.at("outputs")) {
    if (!fs::exists(dir / name.get<std::string>())) return false;
  }
  return true;
}

enum class SessionOutcome { Processed, Skipped };

SessionOutcome preprocess_session(const PipelineConfig& config, const SubjectRecord& record, const Volume3D& reference,
                                  const std::string& reference_hash) {
  const std::string key = session_key(record);
  const fs::path dir = config.volumes_dir() / key;
  json inputs = json::object();
  const std::string hash = input_hash(record, reference_hash, config.registration, inputs);

  const fs::path provenance_path = dir / "provenance.json";
  if (fs::exists(provenance_path)) {
    try {
      const json old = read_json(provenance_path);
      if (old.value("input_hash", "") == hash && outputs_intact(dir, old)) return SessionOutcome::Skipped;
    } catch (const Error&) {
      // Unreadable provenance: redo the session.
    }
  }

  json provenance{{"subject_id", record.subject_id},
                  {"session_id", record.session_id},
                  {"label", std::string(to_string(record.label))},
                  {"group", std::string(to_string(record.group()))},
                  {"software_version", kSoftwareVersion},
                  {"input_hash", hash},
                  {"inputs", inputs},
                  {"registration_settings", registration_settings(config.registration)},
                  {"transforms", json::object()}};
  json outputs = json::array();
  fs::create_directories(dir);

  std::optional<Volume3D> t1w_native;
  Eigen::Matrix4d t1w_map = Eigen::Matrix4d::Identity();
  if (record.t1w_path) {
    t1w_native = read_nifti(*record.t1w_path);
    const RegistrationResult r = register_affine(reference, *t1w_native, config.registration);
    t1w_map = r.transform.matrix();
    write_nifti(resample(*t1w_native, t1w_map, reference, Interpolation::Trilinear), dir / "t1w.nii.gz");
    provenance["transforms"]["t1w_to_reference"] = registration_json(r);
    outputs.push_back("t1w.nii.gz");
  }
  if (record.dwi_path) {
    const DiffusionSeries series = read_dwi(*record.dwi_path, *record.bval_path, *record.bvec_path);
    const DtiMaps maps = compute_dti_maps(series);
    Eigen::Matrix4d map;
    if (t1w_native) {
      const RegistrationResult r = register_affine(*t1w_native, maps.md, config.registration);
      map = r.transform.matrix() * t1w_map;
      provenance["transforms"]["dti_to_t1w"] = registration_json(r);
    } else {
      const RegistrationResult r = register_affine(reference, maps.md, config.registration);
      map = r.transform.matrix();
      provenance["transforms"]["dti_to_reference"] = registration_json(r);
    }
    write_nifti(resample(maps.fa, map, reference, Interpolation::Trilinear), dir / "fa.nii.gz");
    write_nifti(resample(maps.md, map, reference, Interpolation::Trilinear), dir / "md.nii.gz");
    provenance["mask_voxels"] = maps.mask.count();
    outputs.push_back("fa.nii.gz");
    outputs.push_back("md.nii.gz");
  }
  provenance["outputs"] = outputs;
  write_text(provenance_path, provenance.dump(2) + "\n");
  return SessionOutcome::Processed;
}

}  // namespace

PreprocessSummary cmd_preprocess(const PipelineConfig& config, int workers) {
  config.require_manifest();
  config.require_reference();
  if (workers < 1) invalid("workers must be at least 1");
  const std::vector<SubjectRecord> records = load_manifest(config.manifest);
  const Volume3D reference = read_nifti(config.reference);
  const std::string reference_hash = sha256_file(config.reference);
  fs::create_directories(config.volumes_dir());

  PreprocessSummary summary;
  std::mutex mutex;
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      const SubjectRecord& r = records[i];
      try {
        const SessionOutcome outcome = preprocess_session(config, r, reference, reference_hash);
        std::lock_guard lock(mutex);
        if (outcome == SessionOutcome::Skipped) {
          ++summary.skipped;
          spdlog::info("{}: unchanged, skipped", session_key(r));
        } else {
          ++summary.processed;
          spdlog::info("{}: preprocessed", session_key(r));
        }
      } catch (const std::exception& e) {
        std::lock_guard lock(mutex);
        ++summary.failed;
        spdlog::warn("{}: preprocessing failed: {}", session_key(r), e.what());
      }
    }
  };
  const int pool_size = std::min<int>(workers, static_cast<int>(std::max<std::size_t>(records.size(), 1)));
  std::vector<std::thread> pool;
  for (int w = 1; w < pool_size; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  spdlog::info("preprocess: {} processed, {} skipped, {} failed", summary.processed, summary.skipped, summary.failed);
  return summary;
}

std::vector<SubjectRecord> cmd_generate_phantom(const PipelineConfig& config) {
  if (config.phantom_root.empty()) invalid("phantom.root is required for generate-phantom");
  auto records = generate_classification_set(config.phantom, config.phantom_root);
  spdlog::info("generate-phantom: {} subjects written to {}", records.size(), config.phantom_root.string());
  return records;
}

// ---------------------------------------------------------------- training data

namespace {

constexpr std::array<const char*, 3> kVolumeFiles{"t1w.nii.gz", "fa.nii.gz", "md.nii.gz"};
constexpr std::array<const char*, 3> kModalityNames{"t1w", "fa", "md"};

struct Session {
  SubjectRecord record;
  std::array<bool, 3> available{};
  std::string input_hash;
};

/// Manifest rows with preprocessing outputs; rows that failed preprocessing
/// are dropped with a warning.
std::vector<Session> processed_sessions(const PipelineConfig& config) {
  std::vector<Session> out;
  for (const auto& r : load_manifest(config.manifest)) {
    const fs::path dir = config.volumes_dir() / session_key(r);
    if (!fs::exists(dir / "provenance.json")) {
      spdlog::warn("{}: no preprocessing outputs, excluded", session_key(r));
      continue;
    }
    Session s{r, {}, read_json(dir / "provenance.json").value("input_hash", "")};
    for (int m = 0; m < 3; ++m) s.available[m] = fs::exists(dir / kVolumeFiles[m]);
    if (!s.available[0]) s.record.t1w_path.reset();
    if (!s.available[1] || !s.available[2]) {
      s.record.dwi_path.reset();
      s.record.bval_path.reset();
      s.record.bvec_path.reset();
    }
    if (!s.record.has_t1w() && !s.record.has_dwi()) continue;
    out.push_back(std::move(s));
  }
  if (out.empty()) throw Error(ErrorCode::EmptyDataset, "no preprocessed sessions; run preprocess first");
  return out;
}

Volume3D load_volume(const PipelineConfig& config, const Session& s, int m) {
  return read_nifti(config.volumes_dir() / session_key(s.record) / kVolumeFiles[m]);
}

std::vector<SubjectRecord> records_of(const std::vector<Session>& sessions) {
  std::vector<SubjectRecord> out;
  for (const auto& s : sessions) out.push_back(s.record);
  return out;
}

std::vector<std::size_t> merge(std::initializer_list<const std::vector<std::size_t>*> lists) {
  std::vector<std::size_t> out;
  for (const auto* l : lists) out.insert(out.end(), l->begin(), l->end());
  std::sort(out.begin(), out.end());
  return out;
}

constexpr int kT1wOnly = static_cast<int>(AvailabilityGroup::T1wOnly);
constexpr int kDtiOnly = static_cast<int>(AvailabilityGroup::DtiOnly);
constexpr int kBoth = static_cast<int>(AvailabilityGroup::Both);

/// Sessions of a split that provide modality m.
std::vector<std::size_t> with_modality(const std::array<std::vector<std::size_t>, 3>& split, int m) {
  return m == 0 ? merge({&split[kT1wOnly], &split[kBoth]}) : merge({&split[kDtiOnly], &split[kBoth]});
}

/// Slice images for some modality slots of each session, balanced by
/// neighbouring offsets. Slots not in `present` become Black.
std::vector<MultimodalSample> build_samples(const PipelineConfig& config, const std::vector<Session>& sessions,
                                            const std::vector<std::size_t>& indices, std::array<bool, 3> present,
                                            bool balance, std::array<int, 3>* black_counts = nullptr) {
  std::vector<std::array<std::optional<Volume3D>, 3>> volumes;
  std::vector<SliceSource> sources;
  for (std::size_t idx : indices) {
    std::array<std::optional<Volume3D>, 3> v;
    Dims3 dims{0, 0, 0};
    for (int m = 0; m < 3; ++m) {
      if (!present[m]) continue;
      v[m] = load_volume(config, sessions[idx], m);
      dims = v[m]->dims();
    }
    volumes.push_back(std::move(v));
    sources.push_back({sessions[idx].record.label, dims});
  }
  std::vector<SlicePick> picks;
  if (balance) {
    picks = plan_balance(sources, config.balance_tolerance);
  } else {
    for (std::size_t i = 0; i < sources.size(); ++i) picks.push_back({i, 0});
  }
  std::vector<MultimodalSample> out;
  for (const auto& pick : picks) {
    const SubjectRecord& r = sessions[indices[pick.source]].record;
    MultimodalSample s;
    s.label = r.label;
    s.subject_id = r.subject_id;
    for (int m = 0; m < 3; ++m) {
      if (present[m]) {
        s.images[m] = extract_slices(*volumes[pick.source][m], kFusionModalities[m], r.label, r.subject_id,
                                     pick.offset, config.image_size);
      } else {
        s.images[m] = black_image(r.label, r.subject_id, config.image_size);
        if (black_counts != nullptr) ++(*black_counts)[m];
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<SliceImage> slot_images(const std::vector<MultimodalSample>& samples, int m) {
  std::vector<SliceImage> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.images[m]);
  return out;
}

std::vector<Label> labels_of(const std::vector<MultimodalSample>& samples) {
  std::vector<Label> out;
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<Label> labels_of(const std::vector<SliceImage>& images) {
  std::vector<Label> out;
  for (const auto& s : images) out.push_back(s.label);
  return out;
}

Condition condition_of_modality(int m) {
  return std::array{Condition::T1w, Condition::FA, Condition::MD}[m];
}

fs::path fold_dir(const PipelineConfig& config, int fold) {
  return config.checkpoints_dir() / fmt::format("fold{}", fold);
}

fs::path classifier_path(const PipelineConfig& config, int fold, int m) {
  return fold_dir(config, fold) / fmt::format("{}.nfck", kModalityNames[m]);
}

fs::path fused_path(const PipelineConfig& config, int fold, FusionMode mode) {
  return fold_dir(config, fold) / fmt::format("{}.nfck", to_string(mode));
}

void write_loss_csv(const fs::path& path, const std::vector<double>& trace) {
  std::string text = "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) text += fmt::format("{},{:.17g}\n", i, trace[i]);
  write_text(path, text);
}

json report_json(const MetricsReport& report, const ConfusionMatrix& cm) {
  json j = to_json(report);
  j["confusion"] = to_json(cm);
  return j;
}

std::vector<fs::path> expected_checkpoints(const PipelineConfig& config, FusionMode mode) {
  std::vector<fs::path> out;
  for (int f = 0; f < config.fold_count; ++f) {
    if (mode == FusionMode::PerModality) {
      for (int m = 0; m < 3; ++m) out.push_back(classifier_path(config, f, m));
    } else {
      out.push_back(fused_path(config, f, mode));
    }
  }
  return out;
}

std::string training_stamp(const PipelineConfig& config, FusionMode mode, const FoldPlan& plan,
                           const std::vector<Session>& sessions) {
  Sha256 sha;
  sha.update(kSoftwareVersion);
  sha.update(to_string(mode));
  json settings = config.to_json();
  settings.erase("manifest");
  settings.erase("workdir");
  settings.erase("reference");
  settings.erase("registration");
  sha.update(settings.dump());
  sha.update(plan.to_json().dump());
  for (const auto& s : sessions) sha.update(session_key(s.record) + s.input_hash);
  if (mode != FusionMode::PerModality) {
    for (const auto& p : expected_checkpoints(config, FusionMode::PerModality)) sha.update(sha256_file(p));
  }
  return sha.hex_digest();
}

void require_classifiers(const PipelineConfig& config) {
  for (const auto& p : expected_checkpoints(config, FusionMode::PerModality)) {
    if (!fs::exists(p)) {
      throw Error(ErrorCode::MissingCheckpoint, "missing per-modality checkpoint " + p.string() +
                                                    "; run train --mode per-modality first");
    }
  }
}

FoldTraining train_per_modality_fold(const PipelineConfig& config, const std::vector<Session>& sessions,
                                     const FoldSplit& split, int fold) {
  FoldTraining out;
  out.fold = fold;
  for (int m = 0; m < 3; ++m) {
    std::vector<std::size_t> train = with_modality(split.train, m);
    const std::vector<std::size_t> test = with_modality(split.test, m);
    if (train.empty() || test.empty()) {
      throw Error(ErrorCode::EmptyDataset, fmt::format("fold {} has no {} sessions to train or test", fold,
                                                        kModalityNames[m]));
    }
    std::mt19937_64 split_rng(derive_seed(config.seed, 1000 + 10 * static_cast<std::uint64_t>(fold) + m));
    std::shuffle(train.begin(), train.end(), split_rng);
    const auto held = static_cast<std::size_t>(std::lround(config.validation_fraction * train.size()));
    std::vector<std::size_t> validation(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(held));
    train.erase(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(held));
    std::sort(train.begin(), train.end());

    std::array<bool, 3> present{};
    present[m] = true;
    const auto train_images = slot_images(build_samples(config, sessions, train, present, true), m);
    const auto validation_images = slot_images(build_samples(config, sessions, validation, present, false), m);
    const auto test_images = slot_images(build_samples(config, sessions, test, present, false), m);

    TrainConfig tc = config.train;
    tc.seed = derive_seed(config.seed, 2000 + 10 * static_cast<std::uint64_t>(fold) + m);
    const std::uint64_t init_seed = derive_seed(config.seed, 3000 + 10 * static_cast<std::uint64_t>(fold) + m);
    spdlog::info("fold {} {}: {} training images, {} validation, {} test", fold, kModalityNames[m],
                 train_images.size(), validation_images.size(), test_images.size());
    PretrainResult result =
        pretrain_encoder(ResidualEncoder(config.encoder_width, init_seed), train_images, tc, validation_images);

    CheckpointMeta meta;
    meta.seed = tc.seed;
    meta.epoch = result.best_epoch;
    meta.image_size = config.image_size;
    save_checkpoint(result.classifier, meta, classifier_path(config, fold, m));
    write_loss_csv(fold_dir(config, fold) / fmt::format("{}_loss.csv", kModalityNames[m]), result.loss_trace);
    out.encoder_hashes[m] = result.classifier.encoder.hash();

    const ConfusionMatrix cm = accumulate(labels_of(test_images), predict(result.classifier, test_images));
    const MetricsReport report = compute_report(cm, fold, condition_of_modality(m));
    out.reports.push_back(report);
    spdlog::info("fold {} {}: test accuracy {:.3f}", fold, kModalityNames[m], report.accuracy);
  }
  return out;
}

FusionModel fresh_fusion(const PipelineConfig& config, int fold, FusionMode mode,
                         std::array<std::string, 3>* classifier_hashes) {
  std::array<ResidualEncoder, 3> encoders;
  for (int m = 0; m < 3; ++m) {
    const fs::path p = classifier_path(config, fold, m);
    encoders[m] = load_encoder(p);
    const CheckpointMeta meta = read_checkpoint_meta(p);
    if (classifier_hashes != nullptr) (*classifier_hashes)[m] = meta.encoder_hashes.at(0);
  }
  return build_fusion(std::move(encoders[0]), std::move(encoders[1]), std::move(encoders[2]),
                      derive_seed(config.seed, 4000 + static_cast<std::uint64_t>(fold)), mode);
}

FoldTraining train_fused_fold(const PipelineConfig& config, const std::vector<Session>& sessions,
                              const FoldSplit& split, int fold, FusionMode mode) {
  FoldTraining out;
  out.fold = fold;
  std::array<std::string, 3> classifier_hashes;
  FusionModel model = fresh_fusion(config, fold, mode, &classifier_hashes);

  std::vector<MultimodalSample> train;
  if (mode == FusionMode::Fusion) {
    train = build_samples(config, sessions, split.train[kBoth], {true, true, true}, true);
  } else {
    const auto t1w_view = merge({&split.train[kT1wOnly], &split.train[kBoth]});
    const auto dti_view = merge({&split.train[kDtiOnly], &split.train[kBoth]});
    for (auto&& part : {build_samples(config, sessions, t1w_view, {true, false, false}, true, &out.black_substitutions),
                        build_samples(config, sessions, dti_view, {false, true, true}, true, &out.black_substitutions),
                        build_samples(config, sessions, split.train[kBoth], {true, true, true}, true)}) {
      train.insert(train.end(), part.begin(), part.end());
    }
    spdlog::info("fold {} agnostic: black substitutions T1w={} FA={} MD={}", fold, out.black_substitutions[0],
                 out.black_substitutions[1], out.black_substitutions[2]);
  }
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, fmt::format("fold {} has no training samples", fold));

  TrainConfig tc = config.train;
  tc.epochs = config.head_epochs;
  tc.seed = derive_seed(config.seed, 5000 + static_cast<std::uint64_t>(fold));
  spdlog::info("fold {} {}: {} training samples", fold, to_string(mode), train.size());
  const HeadTrainResult result = train_head(model, train, tc);
  for (int m = 0; m < 3; ++m) {
    if (result.encoder_hashes_after[m] != classifier_hashes[m] ||
        result.encoder_hashes_before[m] != result.encoder_hashes_after[m]) {
      throw Error(ErrorCode::ModeViolation,
                  fmt::format("fold {}: frozen {} encoder does not match its checkpoint", fold, kModalityNames[m]));
    }
  }
  out.encoder_hashes = result.encoder_hashes_after;

  CheckpointMeta meta;
  meta.seed = tc.seed;
  meta.epoch = tc.epochs - 1;
  meta.image_size = config.image_size;
  save_checkpoint(model, meta, fused_path(config, fold, mode));
  write_loss_csv(fold_dir(config, fold) / fmt::format("{}_loss.csv", to_string(mode)), result.loss_trace);

  const auto test = build_samples(config, sessions, split.test[kBoth], {true, true, true}, false);
  if (!test.empty()) {
    const ConfusionMatrix cm = accumulate(labels_of(test), predict(model, test));
    out.reports.push_back(compute_report(cm, fold, Condition::T1wDti));
    spdlog::info("fold {} {}: test accuracy {:.3f}", fold, to_string(mode), out.reports.back().accuracy);
  }
  return out;
}

}  // namespace

TrainSummary cmd_train(const PipelineConfig& config, FusionMode mode) {
  config.require_manifest();
  if (mode != FusionMode::PerModality) require_classifiers(config);
  const std::vector<Session> sessions = processed_sessions(config);
  const FoldPlan plan = plan_folds(records_of(sessions), config.seed, config.fold_count);
  for (const auto& note : plan.notes) spdlog::warn("fold plan: {}", note);
  write_text(config.folds_dir() / "plan.json", plan.to_json().dump(2) + "\n");

  TrainSummary summary;
  summary.mode = mode;
  const std::string stamp = training_stamp(config, mode, plan, sessions);
  const fs::path stamp_path = config.checkpoints_dir() / fmt::format("{}.stamp", to_string(mode));
  const auto expected = expected_checkpoints(config, mode);
  if (fs::exists(stamp_path) && std::all_of(expected.begin(), expected.end(), [](const fs::path& p) {
        return fs::exists(p);
      })) {
    std::ifstream in(stamp_path);
    std::string old;
    std::getline(in, old);
    if (old == stamp) {
      spdlog::info("train {}: inputs unchanged, skipped", to_string(mode));
      summary.skipped = true;
      return summary;
    }
  }

  json fold_reports = json::array();
  for (int f = 0; f < config.fold_count; ++f) {
    const FoldSplit& split = plan.folds[f];
    FoldTraining t = mode == FusionMode::PerModality ? train_per_modality_fold(config, sessions, split, f)
                                                     : train_fused_fold(config, sessions, split, f, mode);
    json j{{"fold", f}, {"reports", json::array()}, {"encoder_hashes", t.encoder_hashes}};
    if (mode == FusionMode::InputAgnostic) {
      j["black_substitutions"] = {{"T1w", t.black_substitutions[0]},
                                  {"FA", t.black_substitutions[1]},
                                  {"MD", t.black_substitutions[2]}};
    }
    for (const auto& r : t.reports) j["reports"].push_back(to_json(r));
    fold_reports.push_back(j);
    summary.folds.push_back(std::move(t));
  }
  write_text(config.reports_dir() / fmt::format("train_{}.json", to_string(mode)), fold_reports.dump(2) + "\n");
  write_text(stamp_path, stamp + "\n");
  return summary;
}

// ---------------------------------------------------------------- evaluation

namespace {

std::string condition_file_tag(Condition c) { return c == Condition::T1wDti ? "T1w-DTI" : std::string(to_string(c)); }

std::array<bool, 3> condition_inputs(Condition c) {
  switch (c) {
    case Condition::T1w: return {true, false, false};
    case Condition::FA: return {false, true, false};
    case Condition::MD: return {false, false, true};
    case Condition::T1wDti: return {true, true, true};
  }
  return {};
}

}  // namespace

EvaluationResult cmd_evaluate(const PipelineConfig& config, FusionMode checkpoint, Condition condition) {
  config.require_manifest();
  const bool supported = checkpoint == FusionMode::InputAgnostic ||
                         (checkpoint == FusionMode::Fusion && condition == Condition::T1wDti) ||
                         (checkpoint == FusionMode::PerModality && condition != Condition::T1wDti);
  if (!supported) {
    throw Error(ErrorCode::ConditionUnsupported,
                fmt::format("{} checkpoints cannot be evaluated under {}", to_string(checkpoint), to_string(condition)));
  }
  for (const auto& p : expected_checkpoints(config, checkpoint)) {
    if (checkpoint == FusionMode::PerModality) {
      const int m = condition == Condition::T1w ? 0 : condition == Condition::FA ? 1 : 2;
      if (p.filename() != fmt::format("{}.nfck", kModalityNames[m])) continue;
    }
    if (!fs::exists(p)) throw Error(ErrorCode::MissingCheckpoint, "missing checkpoint " + p.string());
  }

  const std::vector<Session> sessions = processed_sessions(config);
  const FoldPlan plan = plan_folds(records_of(sessions), config.seed, config.fold_count);
  const std::array<bool, 3> inputs = condition_inputs(condition);

  EvaluationResult result;
  result.checkpoint = checkpoint;
  result.condition = condition;
  json folds = json::array();
  for (int f = 0; f < config.fold_count; ++f) {
    const FoldSplit& split = plan.folds[f];
    std::vector<std::size_t> test;
    if (inputs[0] && inputs[1]) {
      test = split.test[kBoth];
    } else {
      test = with_modality(split.test, inputs[0] ? 0 : 1);
    }
    if (test.empty()) {
      spdlog::warn("fold {}: no test sessions for condition {}", f, to_string(condition));
      continue;
    }
    const auto samples = build_samples(config, sessions, test, inputs, false);
    std::vector<Label> predicted;
    if (checkpoint == FusionMode::PerModality) {
      const int m = inputs[0] ? 0 : inputs[1] ? 1 : 2;
      ModalityClassifier clf = load_classifier(classifier_path(config, f, m));
      predicted = predict(clf, slot_images(samples, m));
    } else {
      FusionModel model = load_fusion(fused_path(config, f, checkpoint));
      predicted = predict(model, samples);
    }
    const ConfusionMatrix cm = accumulate(labels_of(samples), predicted);
    const MetricsReport report = compute_report(cm, f, condition);
    result.folds.push_back(report);
    folds.push_back(report_json(report, cm));
  }
  if (result.folds.empty()) throw Error(ErrorCode::EmptyDataset, "no fold had test sessions for this condition");
  result.average = average_reports(result.folds);
  result.json = json{{"checkpoint", std::string(to_string(checkpoint))},
                     {"condition", std::string(to_string(condition))},
                     {"folds", folds},
                     {"average", to_json(result.average)}};
  result.table = format_table(std::span(&result.average, 1));
  const std::string stem = fmt::format("{}_{}", to_string(checkpoint), condition_file_tag(condition));
  write_text(config.reports_dir() / (stem + ".json"), result.json.dump(2) + "\n");
  write_text(config.reports_dir() / (stem + ".txt"), result.table);
  return result;
}

namespace {

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.condition = parse_condition(j.at("condition").get<std::string>()).value_or(Condition::T1wDti);
  for (Label label : kAllLabels) {
    const json& c = j.at("classes").at(std::string(to_string(label)));
    auto metric = [](const json& m) { return Metric{m.at("value").get<double>(), m.at("defined").get<bool>()}; };
    auto& out = r.classes[class_index(label)];
    out.precision = metric(c.at("precision"));
    out.recall = metric(c.at("recall"));
    out.f1 = metric(c.at("f1"));
  }
  return r;
}

}  // namespace

std::string cmd_report(const PipelineConfig& config) {
  if (config.workdir.empty()) invalid("workdir is required");
  std::map<int, std::map<int, MetricsReport>> found;  // mode -> condition -> report
  if (fs::exists(config.reports_dir())) {
    for (const auto& entry : fs::directory_iterator(config.reports_dir())) {
      if (entry.path().extension() != ".json") continue;
      const json j = read_json(entry.path());
      if (!j.is_object() || !j.contains("average") || !j.contains("checkpoint")) continue;
      const auto mode = parse_fusion_mode(j.at("checkpoint").get<std::string>());
      const MetricsReport r = report_from_json(j.at("average"));
      if (mode) found[static_cast<int>(*mode)][static_cast<int>(r.condition)] = r;
    }
  }
  std::string out;
  for (const auto& [mode, by_condition] : found) {
    std::vector<MetricsReport> row;
    for (const auto& [condition, r] : by_condition) row.push_back(r);
    out += fmt::format("== {} ==\n", to_string(static_cast<FusionMode>(mode)));
    out += format_table(row);
    out += '\n';
  }
  if (out.empty()) out = "no evaluation reports found\n";
  write_text(config.reports_dir() / "summary.txt", out);
  return out;
}

}  // namespace neurofuse
