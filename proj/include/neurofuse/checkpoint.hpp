#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "neurofuse/model.hpp"

namespace neurofuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// JSON header stored in front of the raw parameter payload.
struct CheckpointMeta {
  std::string kind;  // "classifier", "fusion" or "encoder"
  int width = 0;
  std::string mode;      // fusion mode for fusion checkpoints, "per-modality" otherwise
  std::string modality;  // classifier and encoder checkpoints only
  std::uint64_t seed = 0;
  int epoch = 0;
  int image_size = 0;
  std::vector<std::string> encoder_hashes;
};

void save_checkpoint(ModalityClassifier& classifier, CheckpointMeta meta, const std::filesystem::path& path);
void save_checkpoint(FusionModel& model, CheckpointMeta meta, const std::filesystem::path& path);
void save_encoder(ResidualEncoder& encoder, CheckpointMeta meta, const std::filesystem::path& path);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
ModalityClassifier load_classifier(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);
FusionModel load_fusion(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

/// Encoder weights from an encoder or classifier checkpoint, e.g. weights
/// produced by another training run. The encoder comes back unfrozen.
ResidualEncoder load_encoder(const std::filesystem::path& path);

}  // namespace neurofuse
