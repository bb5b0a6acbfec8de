#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "neurofuse/checkpoint.hpp"
#include "neurofuse/pipeline.hpp"
#include "support.hpp"

using namespace neurofuse;
using test_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string log;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run cli(const TempDir& dir, const std::string& args) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string("\"") + NEUROFUSE_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

nlohmann::json tiny_config() {
  return {{"manifest", "phantom/manifest.csv"},
          {"workdir", "work"},
          {"reference", "phantom/reference.nii.gz"},
          {"seed", 3},
          {"fold_count", 3},
          {"encoder_width", 2},
          {"image_size", 24},
          {"epochs", 2},
          {"head_epochs", 2},
          {"registration", {{"levels", {4, 2}}, {"max_cycles", 3}}},
          {"phantom",
           {{"root", "phantom"},
            {"per_class", 4},
            {"t1w_only_fraction", 0.25},
            {"dti_only_fraction", 0.25},
            {"seed", 9}}}};
}

fs::path write_config(const TempDir& dir, const nlohmann::json& j, const std::string& name = "config.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST_CASE("config parsing") {
  TempDir dir("cfg");
  const PipelineConfig c = PipelineConfig::from_json(tiny_config(), dir.path());
  CHECK(c.manifest == dir.path() / "phantom/manifest.csv");
  CHECK(c.workdir == dir.path() / "work");
  CHECK(c.encoder_width == 2);
  CHECK(c.registration.levels == std::vector<int>{4, 2});
  CHECK(c.registration.bins == kDefaultBins);
  CHECK(c.phantom.per_class == 4);
  CHECK(c.train.batch_size == 16);
  CHECK(c.train.adam.learning_rate == 1e-3);
  CHECK(c.validation_fraction == 0.1);
  CHECK(PipelineConfig::from_json(c.to_json()).to_json() == c.to_json());

  auto bad = tiny_config();
  bad["learning_rte"] = 0.1;
  CHECK_ERROR(PipelineConfig::from_json(bad), ErrorCode::ConfigInvalid);
  bad = tiny_config();
  bad["fold_count"] = 1;
  CHECK_ERROR(PipelineConfig::from_json(bad).validate_numbers(), ErrorCode::ConfigInvalid);
  bad = tiny_config();
  bad["encoder_width"] = "wide";
  CHECK_ERROR(PipelineConfig::from_json(bad), ErrorCode::ConfigInvalid);
  CHECK_ERROR(PipelineConfig::load(dir / "missing.json"), ErrorCode::ConfigInvalid);
  CHECK_ERROR(c.require_manifest(), ErrorCode::ConfigInvalid);
}

TEST_CASE("cli exit codes for configuration errors") {
  TempDir dir("cli");
  CHECK(cli(dir, "--config \"" + (dir / "absent.json").string() + "\" preprocess").code == 2);
  auto j = tiny_config();
  j["unknown"] = true;
  CHECK(cli(dir, "--config \"" + write_config(dir, j).string() + "\" preprocess").code == 2);
  const fs::path cfg = write_config(dir, tiny_config());
  // No manifest yet.
  const Run pre = cli(dir, "--config \"" + cfg.string() + "\" preprocess");
  CHECK(pre.code == 2);
  CHECK(cli(dir, "--config \"" + cfg.string() + "\" train --mode sideways").code != 0);
  CHECK(cli(dir, "--config \"" + cfg.string() + "\" frobnicate").code != 0);
}

TEST_CASE("cli end to end on a small phantom") {
  TempDir dir("cli");
  const fs::path cfg = write_config(dir, tiny_config());
  const std::string base = "--config \"" + cfg.string() + "\" ";
  const fs::path work = dir / "work";

  REQUIRE(cli(dir, base + "generate-phantom").code == 0);
  REQUIRE(fs::exists(dir / "phantom/manifest.csv"));
  const auto records = load_manifest(dir / "phantom/manifest.csv");
  REQUIRE(records.size() == 12);

  // Fusion before per-modality training.
  const Run early = cli(dir, base + "train --mode fusion");
  CHECK(early.code == 2);
  CHECK(early.log.find("MissingCheckpoint") != std::string::npos);

  // One corrupt T1w file: that session fails, the rest go through.
  const SubjectRecord& victim = records.back();
  REQUIRE(victim.group() == AvailabilityGroup::Both);
  std::ofstream(*victim.t1w_path, std::ios::trunc) << "not a nifti file";
  const Run pre = cli(dir, base + "preprocess --workers 2");
  CHECK(pre.code == 0);
  CHECK(pre.log.find(session_key(victim)) != std::string::npos);
  CHECK(pre.log.find("11 processed, 0 skipped, 1 failed") != std::string::npos);

  int volumes = 0;
  for (const auto& r : records) {
    const fs::path d = work / "volumes" / session_key(r);
    if (&r == &victim) {
      CHECK_FALSE(fs::exists(d / "provenance.json"));
      continue;
    }
    REQUIRE(fs::exists(d / "provenance.json"));
    const auto prov = nlohmann::json::parse(slurp(d / "provenance.json"));
    CHECK(prov.at("software_version") == kSoftwareVersion);
    CHECK(fs::exists(d / "t1w.nii.gz") == r.has_t1w());
    CHECK(fs::exists(d / "fa.nii.gz") == r.has_dwi());
    CHECK(fs::exists(d / "md.nii.gz") == r.has_dwi());
    if (r.has_t1w()) CHECK(prov.at("transforms").contains("t1w_to_reference"));
    if (r.has_t1w() && r.has_dwi()) CHECK(prov.at("transforms").contains("dti_to_t1w"));
    if (!r.has_t1w()) CHECK(prov.at("transforms").contains("dti_to_reference"));
    for (const char* m : {"t1w", "fa", "md"}) volumes += fs::exists(d / (std::string(m) + ".nii.gz"));
    // Outputs sit on the reference grid.
    if (r.has_dwi()) {
      CHECK(read_nifti(d / "fa.nii.gz").same_geometry(read_nifti(dir / "phantom/reference.nii.gz"), 1e-4));
    }
  }
  CHECK(volumes == 3 * 1 + 3 * 2 + 5 * 3);

  // Unchanged inputs are skipped without touching outputs.
  const fs::path probe = work / "volumes" / session_key(records[0]) / "provenance.json";
  const auto stamp = fs::last_write_time(probe);
  const Run again = cli(dir, base + "preprocess");
  CHECK(again.code == 0);
  CHECK(again.log.find("0 processed, 11 skipped, 1 failed") != std::string::npos);
  CHECK(fs::last_write_time(probe) == stamp);

  REQUIRE(cli(dir, base + "train --mode per-modality").code == 0);
  const Run fusion = cli(dir, base + "train --mode fusion");
  REQUIRE(fusion.code == 0);
  for (int f = 0; f < 3; ++f) {
    const fs::path fold = work / "checkpoints" / ("fold" + std::to_string(f));
    const CheckpointMeta fm = read_checkpoint_meta(fold / "fusion.nfck");
    REQUIRE(fm.encoder_hashes.size() == 3);
    CHECK(fm.mode == "fusion");
    CHECK(fm.encoder_hashes[0] == read_checkpoint_meta(fold / "t1w.nfck").encoder_hashes.at(0));
    CHECK(fm.encoder_hashes[1] == read_checkpoint_meta(fold / "fa.nfck").encoder_hashes.at(0));
    CHECK(fm.encoder_hashes[2] == read_checkpoint_meta(fold / "md.nfck").encoder_hashes.at(0));
    CHECK(fs::exists(fold / "t1w_loss.csv"));
  }
  CHECK(fs::exists(work / "folds/plan.json"));

  const Run agnostic = cli(dir, base + "train --mode agnostic");
  REQUIRE(agnostic.code == 0);
  CHECK(agnostic.log.find("black substitutions") != std::string::npos);
  // Training twice on unchanged inputs is a no-op.
  const Run agnostic_again = cli(dir, base + "train --mode agnostic");
  CHECK(agnostic_again.code == 0);
  CHECK(agnostic_again.log.find("skipped") != std::string::npos);

  for (const char* c : {"T1w", "FA", "MD", "T1w+DTI"}) {
    CHECK(cli(dir, base + "evaluate --checkpoint agnostic --condition " + c).code == 0);
  }
  const std::string first = slurp(work / "reports/agnostic_FA.json");
  CHECK(cli(dir, base + "evaluate --checkpoint agnostic --condition FA").code == 0);
  CHECK(slurp(work / "reports/agnostic_FA.json") == first);
  const auto report = nlohmann::json::parse(first);
  CHECK(report.at("folds").size() == 3);
  CHECK(report.contains("average"));

  const Run unsupported = cli(dir, base + "evaluate --checkpoint fusion --condition FA");
  CHECK(unsupported.code == 2);
  CHECK(unsupported.log.find("ConditionUnsupported") != std::string::npos);
  CHECK(cli(dir, base + "evaluate --checkpoint per-modality --condition T1w+DTI").code == 2);
  CHECK(cli(dir, base + "evaluate --checkpoint per-modality --condition MD").code == 0);
  CHECK(cli(dir, base + "evaluate --checkpoint fusion --condition T1w+DTI").code == 0);

  const Run summary = cli(dir, base + "report");
  CHECK(summary.code == 0);
  CHECK(fs::exists(work / "reports/summary.txt"));
  CHECK(summary.log.find("Accuracy") != std::string::npos);
}

TEST_CASE("preprocess exits 1 when every session fails") {
  TempDir dir("cli");
  const fs::path cfg = write_config(dir, tiny_config());
  const std::string base = "--config \"" + cfg.string() + "\" ";
  REQUIRE(cli(dir, base + "generate-phantom").code == 0);
  for (const auto& r : load_manifest(dir / "phantom/manifest.csv")) {
    if (r.t1w_path) std::ofstream(*r.t1w_path, std::ios::trunc) << "x";
    if (r.dwi_path) std::ofstream(*r.dwi_path, std::ios::trunc) << "x";
  }
  CHECK(cli(dir, base + "preprocess").code == 1);
}
