#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurofuse/metrics.hpp"
#include "neurofuse/model.hpp"
#include "neurofuse/phantom.hpp"
#include "neurofuse/registration.hpp"

namespace neurofuse {

inline constexpr const char* kSoftwareVersion = "neurofuse 0.1.0";

enum class ExitCode : int { Success = 0, PartialFailure = 1, ConfigError = 2 };

/// Pipeline settings. Relative paths resolve against the config file's directory.
struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path workdir;
  std::filesystem::path reference;
  std::uint64_t seed = 0;
  int fold_count = kDefaultFolds;
  int encoder_width = 64;
  int image_size = kImageSize;
  TrainConfig train;
  int head_epochs = 10;
  double validation_fraction = 0.1;
  double balance_tolerance = kDefaultBalanceTolerance;
  RegistrationConfig registration;
  /// generate-phantom output directory and settings.
  std::filesystem::path phantom_root;
  ClassificationConfig phantom;

  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static PipelineConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  /// ConfigInvalid for out-of-range numbers or missing inputs.
  void validate_numbers() const;
  void require_manifest() const;
  void require_reference() const;

  std::filesystem::path volumes_dir() const { return workdir / "volumes"; }
  std::filesystem::path folds_dir() const { return workdir / "folds"; }
  std::filesystem::path checkpoints_dir() const { return workdir / "checkpoints"; }
  std::filesystem::path reports_dir() const { return workdir / "reports"; }
};

std::string session_key(const SubjectRecord& record);

struct PreprocessSummary {
  int processed = 0;
  int skipped = 0;  // unchanged inputs, outputs reused
  int failed = 0;
  ExitCode exit_code() const noexcept;
};

/// Per session: T1w registered to the reference; FA/MD fitted from DWI,
/// registered to the T1w (or the reference when there is no T1w) and
/// resampled onto the reference grid. Writes volumes/<key>/ and a
/// provenance.json per session.
PreprocessSummary cmd_preprocess(const PipelineConfig& config, int workers = 1);

std::vector<SubjectRecord> cmd_generate_phantom(const PipelineConfig& config);

struct FoldTraining {
  int fold = 0;
  std::vector<MetricsReport> reports;
  /// Black images substituted per modality (T1w, FA, MD); agnostic mode only.
  std::array<int, 3> black_substitutions{};
  std::array<std::string, 3> encoder_hashes;
};

struct TrainSummary {
  FusionMode mode = FusionMode::PerModality;
  bool skipped = false;
  std::vector<FoldTraining> folds;
};

TrainSummary cmd_train(const PipelineConfig& config, FusionMode mode);

struct EvaluationResult {
  FusionMode checkpoint = FusionMode::PerModality;
  Condition condition = Condition::T1wDti;
  std::vector<MetricsReport> folds;
  MetricsReport average;
  nlohmann::json json;
  std::string table;
};

/// Evaluates the per-fold checkpoints of one training mode on each fold's
/// test split. ConditionUnsupported when the checkpoint cannot take the
/// condition's inputs.
EvaluationResult cmd_evaluate(const PipelineConfig& config, FusionMode checkpoint, Condition condition);

/// Table of every averaged evaluation report found under reports/.
std::string cmd_report(const PipelineConfig& config);

}  // namespace neurofuse
