#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "neurofuse/error.hpp"
#include "neurofuse/pipeline.hpp"

namespace {

using neurofuse::ErrorCode;
using neurofuse::ExitCode;

int code(ExitCode c) { return static_cast<int>(c); }

bool is_configuration_error(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::MissingCheckpoint:
    case ErrorCode::ConditionUnsupported:
    case ErrorCode::BadHeader:
    case ErrorCode::BadLabel:
    case ErrorCode::PartialDwiTriple:
    case ErrorCode::MissingModality:
    case ErrorCode::DuplicateRow:
      return true;
    default:
      return false;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal MRI classification pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string mode_text;
  std::string condition_text;
  std::string checkpoint_text;
  bool verbose = false;

  app.add_option("--config", config_path, "Pipeline configuration (JSON)")->required();
  app.add_option("--seed", seed, "Override the configured seed");
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto* preprocess = app.add_subcommand("preprocess", "Register volumes and compute FA/MD maps");
  preprocess->add_option("--workers", workers, "Parallel sessions")->check(CLI::PositiveNumber);
  auto* generate = app.add_subcommand("generate-phantom", "Write a synthetic 3-class dataset");
  auto* train = app.add_subcommand("train", "Train per-modality, fusion or agnostic models per fold");
  train->add_option("--mode", mode_text, "per-modality | fusion | agnostic")->required();
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate fold checkpoints under a modality condition");
  evaluate->add_option("--checkpoint", checkpoint_text, "per-modality | fusion | agnostic")->required();
  evaluate->add_option("--condition", condition_text, "T1w | FA | MD | T1w+DTI")->required();
  auto* report = app.add_subcommand("report", "Summarise evaluation reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : code(ExitCode::ConfigError);
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    neurofuse::PipelineConfig config = neurofuse::PipelineConfig::load(config_path);
    if (seed) {
      config.seed = *seed;
      config.train.seed = *seed;
    }
    if (*preprocess) {
      return code(neurofuse::cmd_preprocess(config, workers).exit_code());
    }
    if (*generate) {
      neurofuse::cmd_generate_phantom(config);
      return code(ExitCode::Success);
    }
    if (*train) {
      const auto mode = neurofuse::parse_fusion_mode(mode_text);
      if (!mode) throw neurofuse::Error(ErrorCode::ConfigInvalid, "unknown mode '" + mode_text + "'");
      neurofuse::cmd_train(config, *mode);
      return code(ExitCode::Success);
    }
    if (*evaluate) {
      const auto mode = neurofuse::parse_fusion_mode(checkpoint_text);
      if (!mode) throw neurofuse::Error(ErrorCode::ConfigInvalid, "unknown checkpoint '" + checkpoint_text + "'");
      const auto condition = neurofuse::parse_condition(condition_text);
      if (!condition) throw neurofuse::Error(ErrorCode::ConfigInvalid, "unknown condition '" + condition_text + "'");
      std::cout << neurofuse::cmd_evaluate(config, *mode, *condition).table;
      return code(ExitCode::Success);
    }
    if (*report) {
      std::cout << neurofuse::cmd_report(config);
      return code(ExitCode::Success);
    }
  } catch (const neurofuse::Error& e) {
    spdlog::error("{}", e.what());
    return code(is_configuration_error(e.code()) ? ExitCode::ConfigError : ExitCode::PartialFailure);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return code(ExitCode::PartialFailure);
  }
  return code(ExitCode::ConfigError);
}
