#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neurofuse/dataset.hpp"
#include "neurofuse/nn/layers.hpp"

namespace neurofuse {

class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, int in_channels, int out_channels, int stride);

  void init(std::mt19937_64& rng);
  nn::Tensor forward(const nn::Tensor& x, bool training);
  nn::Tensor backward(const nn::Tensor& grad_out);
  void collect(std::vector<nn::Parameter*>& params, std::vector<nn::Matrix*>& buffers);

 private:
  nn::Conv2d conv1_, conv2_, proj_conv_;
  nn::BatchNorm2d bn1_, bn2_, proj_bn_;
  nn::Relu relu1_, relu_out_;
  bool projected_ = false;
};

/// Residual network with a 2-2-2-2 block layout and widths (w, 2w, 4w, 8w),
/// ending in global average pooling. Emits 8w features per image.
class ResidualEncoder {
 public:
  explicit ResidualEncoder(int width = 64, std::uint64_t seed = 0);

  int width() const noexcept { return width_; }
  int feature_length() const noexcept { return 8 * width_; }
  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool frozen) noexcept { frozen_ = frozen; }

  /// Features as feature_length x batch. Training mode uses batch
  /// statistics and caches activations for backward; frozen encoders
  /// always run in inference mode.
  nn::Matrix forward(const nn::Tensor& images, bool training);
  void backward(const nn::Matrix& grad_features);

  std::vector<nn::Parameter*> parameters();
  /// Parameters followed by batch-norm running statistics.
  std::vector<nn::Matrix*> state();
  std::vector<const nn::Matrix*> state() const;
  /// SHA-256 of every parameter and running statistic.
  std::string hash() const;

 private:
  void collect(std::vector<nn::Parameter*>& params, std::vector<nn::Matrix*>& buffers);

  int width_;
  bool frozen_ = false;
  nn::Conv2d stem_conv_;
  nn::BatchNorm2d stem_bn_;
  nn::Relu stem_relu_;
  nn::MaxPool2d pool_;
  std::vector<ResidualBlock> blocks_;
  nn::GlobalAvgPool gap_;
};

/// An encoder with its own temporary 8w -> 3 head, used for single-modality
/// pretraining and per-modality evaluation.
struct ModalityClassifier {
  Modality modality = Modality::T1w;
  ResidualEncoder encoder;
  nn::Linear head;

  ModalityClassifier(Modality modality, ResidualEncoder encoder, std::uint64_t head_seed);
  nn::Matrix scores(const nn::Tensor& images, bool training);
  std::vector<nn::Parameter*> parameters();
  std::vector<nn::Matrix*> state();
};

enum class FusionMode { PerModality, Fusion, InputAgnostic };
std::string_view to_string(FusionMode mode) noexcept;
std::optional<FusionMode> parse_fusion_mode(std::string_view text) noexcept;

/// Modality order for encoders and sample images.
inline constexpr std::array<Modality, 3> kFusionModalities{Modality::T1w, Modality::FA, Modality::MD};

struct MultimodalSample {
  std::array<SliceImage, 3> images;  // T1w, FA, MD; Black where unavailable
  Label label = Label::NC;
  std::string subject_id;

  bool complete() const noexcept;
};

/// Three frozen encoders feeding one linear head over 3 * 8w features.
struct FusionModel {
  std::array<ResidualEncoder, 3> encoders;
  nn::Linear head;
  FusionMode mode = FusionMode::Fusion;

  int head_inputs() const noexcept { return head.in_features(); }
  nn::Matrix features(std::span<const MultimodalSample> samples);
  std::vector<nn::Matrix*> head_state();
};

struct TrainConfig {
  int batch_size = 16;
  nn::AdamConfig adam;
  int epochs = 10;
  std::uint64_t seed = 0;
  bool augment = true;
};

/// Stacks images into a 3-channel batch tensor.
nn::Tensor to_tensor(std::span<const SliceImage* const> images);
nn::Tensor to_tensor(std::span<const SliceImage> images);

std::array<double, 3> forward(FusionModel& model, const SliceImage& t1w, const SliceImage& fa, const SliceImage& md);
nn::Matrix forward(FusionModel& model, std::span<const MultimodalSample> samples);

/// Argmax with ties broken toward the lowest class index.
Label predict(const std::array<double, 3>& scores) noexcept;
std::vector<Label> predict(FusionModel& model, std::span<const MultimodalSample> samples);
std::vector<Label> predict(ModalityClassifier& classifier, std::span<const SliceImage> images);

struct PretrainResult {
  ModalityClassifier classifier;
  std::vector<double> loss_trace;  // one entry per optimiser step
  int best_epoch = -1;
  double best_validation_accuracy = -1.0;
};

/// Trains encoder plus a temporary head by cross-entropy and Adam. When a
/// validation set is given, the epoch with the best validation accuracy is
/// kept.
PretrainResult pretrain_encoder(ResidualEncoder encoder, std::span<const SliceImage> train, const TrainConfig& config,
                                std::span<const SliceImage> validation = {});

/// Freezes the three encoders and attaches a fresh head.
FusionModel build_fusion(ResidualEncoder t1w, ResidualEncoder fa, ResidualEncoder md, std::uint64_t head_seed,
                         FusionMode mode = FusionMode::Fusion);

struct HeadTrainResult {
  std::vector<double> loss_trace;
  std::array<std::string, 3> encoder_hashes_before;
  std::array<std::string, 3> encoder_hashes_after;
};

/// Optimises head parameters only. Encoder features are cached per sample
/// and flip pattern, which is exact because the encoders are frozen.
HeadTrainResult train_head(FusionModel& model, std::span<const MultimodalSample> samples, const TrainConfig& config);

/// Loss and parameter gradients of a classifier in training mode, without
/// an optimiser step. Used for gradient checking.
double compute_gradients(ModalityClassifier& classifier, std::span<const SliceImage> images);
double compute_loss(ModalityClassifier& classifier, std::span<const SliceImage> images);

double accuracy(std::span<const Label> truth, std::span<const Label> predicted);

}  // namespace neurofuse
