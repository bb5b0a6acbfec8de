#include "neurofuse/model.hpp"

#include <algorithm>
#include <numeric>

#include "neurofuse/error.hpp"
#include "neurofuse/hash.hpp"

namespace neurofuse {

ResidualBlock::ResidualBlock(const std::string& name, int in_channels, int out_channels, int stride)
    : conv1_(name + ".conv1", in_channels, out_channels, 3, stride, 1),
      conv2_(name + ".conv2", out_channels, out_channels, 3, 1, 1),
      bn1_(name + ".bn1", out_channels),
      bn2_(name + ".bn2", out_channels),
      projected_(stride != 1 || in_channels != out_channels) {
  if (projected_) {
    proj_conv_ = nn::Conv2d(name + ".downsample.conv", in_channels, out_channels, 1, stride, 0);
    proj_bn_ = nn::BatchNorm2d(name + ".downsample.bn", out_channels);
  }
}

void ResidualBlock::init(std::mt19937_64& rng) {
  conv1_.init_kaiming(rng);
  conv2_.init_kaiming(rng);
  if (projected_) proj_conv_.init_kaiming(rng);
}

nn::Tensor ResidualBlock::forward(const nn::Tensor& x, bool training) {
  nn::Tensor a = relu1_.forward(bn1_.forward(conv1_.forward(x, training), training), training);
  nn::Tensor b = bn2_.forward(conv2_.forward(a, training), training);
  if (projected_) {
    b.data += proj_bn_.forward(proj_conv_.forward(x, training), training).data;
  } else {
    b.data += x.data;
  }
  return relu_out_.forward(b, training);
}

nn::Tensor ResidualBlock::backward(const nn::Tensor& grad_out) {
  const nn::Tensor g = relu_out_.backward(grad_out);
  nn::Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
  if (projected_) {
    dx.data += proj_conv_.backward(proj_bn_.backward(g)).data;
  } else {
    dx.data += g.data;
  }
  return dx;
}

void ResidualBlock::collect(std::vector<nn::Parameter*>& params, std::vector<nn::Matrix*>& buffers) {
  conv1_.collect(params);
  bn1_.collect(params);
  bn1_.collect_buffers(buffers);
  conv2_.collect(params);
  bn2_.collect(params);
  bn2_.collect_buffers(buffers);
  if (projected_) {
    proj_conv_.collect(params);
    proj_bn_.collect(params);
    proj_bn_.collect_buffers(buffers);
  }
}

ResidualEncoder::ResidualEncoder(int width, std::uint64_t seed)
    : width_(width), stem_conv_("stem.conv", 3, width, 7, 2, 3), stem_bn_("stem.bn", width) {
  if (width < 1) throw Error(ErrorCode::InvalidArgument, "encoder width must be positive");
  int in = width;
  for (int stage = 0; stage < 4; ++stage) {
    const int out = width << stage;
    for (int b = 0; b < 2; ++b) {
      const std::string name = "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
      blocks_.emplace_back(name, in, out, b == 0 && stage > 0 ? 2 : 1);
      in = out;
    }
  }
  std::mt19937_64 rng(seed);
  stem_conv_.init_kaiming(rng);
  for (auto& block : blocks_) block.init(rng);
}

nn::Matrix ResidualEncoder::forward(const nn::Tensor& images, bool training) {
  training = training && !frozen_;
  nn::Tensor x = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(images, training), training), training);
  x = pool_.forward(x, training);
  for (auto& block : blocks_) x = block.forward(x, training);
  return gap_.forward(x).data;
}

void ResidualEncoder::backward(const nn::Matrix& grad_features) {
  if (frozen_) throw Error(ErrorCode::ModeViolation, "backward through a frozen encoder");
  nn::Tensor g = gap_.backward(nn::Tensor{static_cast<int>(grad_features.cols()), 1, 1, grad_features});
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
  g = pool_.backward(g);
  stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(g)));
}

void ResidualEncoder::collect(std::vector<nn::Parameter*>& params, std::vector<nn::Matrix*>& buffers) {
  stem_conv_.collect(params);
  stem_bn_.collect(params);
  stem_bn_.collect_buffers(buffers);
  for (auto& block : blocks_) block.collect(params, buffers);
}

std::vector<nn::Parameter*> ResidualEncoder::parameters() {
  std::vector<nn::Parameter*> params;
  std::vector<nn::Matrix*> buffers;
  collect(params, buffers);
  return params;
}

std::vector<nn::Matrix*> ResidualEncoder::state() {
  std::vector<nn::Parameter*> params;
  std::vector<nn::Matrix*> buffers;
  collect(params, buffers);
  std::vector<nn::Matrix*> out;
  for (auto* p : params) out.push_back(&p->value);
  out.insert(out.end(), buffers.begin(), buffers.end());
  return out;
}

std::vector<const nn::Matrix*> ResidualEncoder::state() const {
  // collect() only hands out addresses; nothing is modified.
  auto mutable_state = const_cast<ResidualEncoder*>(this)->state();
  return {mutable_state.begin(), mutable_state.end()};
}

std::string ResidualEncoder::hash() const {
  Sha256 sha;
  for (const nn::Matrix* m : state()) {
    sha.update(std::as_bytes(std::span<const double>(m->data(), static_cast<std::size_t>(m->size()))));
  }
  return sha.hex_digest();
}

ModalityClassifier::ModalityClassifier(Modality m, ResidualEncoder enc, std::uint64_t head_seed)
    : modality(m), encoder(std::move(enc)), head("head", encoder.feature_length(), kNumClasses) {
  std::mt19937_64 rng(head_seed);
  head.init_uniform(rng);
}

nn::Matrix ModalityClassifier::scores(const nn::Tensor& images, bool training) {
  return head.forward(encoder.forward(images, training), training);
}

std::vector<nn::Parameter*> ModalityClassifier::parameters() {
  auto params = encoder.parameters();
  head.collect(params);
  return params;
}

std::vector<nn::Matrix*> ModalityClassifier::state() {
  auto out = encoder.state();
  std::vector<nn::Parameter*> head_params;
  head.collect(head_params);
  for (auto* p : head_params) out.push_back(&p->value);
  return out;
}

std::string_view to_string(FusionMode mode) noexcept {
  switch (mode) {
    case FusionMode::PerModality: return "per-modality";
    case FusionMode::Fusion: return "fusion";
    case FusionMode::InputAgnostic: return "agnostic";
  }
  return "?";
}

std::optional<FusionMode> parse_fusion_mode(std::string_view text) noexcept {
  for (FusionMode m : {FusionMode::PerModality, FusionMode::Fusion, FusionMode::InputAgnostic}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

bool MultimodalSample::complete() const noexcept {
  return std::none_of(images.begin(), images.end(),
                      [](const SliceImage& img) { return img.modality == Modality::Black; });
}

nn::Tensor to_tensor(std::span<const SliceImage* const> images) {
  if (images.empty()) throw Error(ErrorCode::EmptyDataset, "no images to batch");
  const int size = images.front()->size;
  nn::Tensor t{static_cast<int>(images.size()), size, size,
               nn::Matrix(3, static_cast<Eigen::Index>(images.size()) * size * size)};
  for (std::size_t s = 0; s < images.size(); ++s) {
    const SliceImage& img = *images[s];
    if (img.size != size || img.pixels.size() != static_cast<std::size_t>(3) * size * size) {
      throw Error(ErrorCode::ShapeMismatch, "images in a batch must share one size");
    }
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < size; ++r)
        for (int col = 0; col < size; ++col) t.data(c, t.column(static_cast<int>(s), r, col)) = img.at(c, r, col);
  }
  return t;
}

nn::Tensor to_tensor(std::span<const SliceImage> images) {
  std::vector<const SliceImage*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  return to_tensor(ptrs);
}

namespace {

constexpr std::size_t kInferenceChunk = 32;

void check_sample_shapes(const MultimodalSample& s, int size) {
  for (const auto& img : s.images) {
    if (img.size != size) throw Error(ErrorCode::ShapeMismatch, "sample images must share one size");
  }
}

}  // namespace

nn::Matrix FusionModel::features(std::span<const MultimodalSample> samples) {
  if (samples.empty()) throw Error(ErrorCode::EmptyDataset, "no samples");
  const int per = encoders.front().feature_length();
  const int size = samples.front().images.front().size;
  nn::Matrix out(3 * per, static_cast<Eigen::Index>(samples.size()));
  for (std::size_t start = 0; start < samples.size(); start += kInferenceChunk) {
    const std::size_t end = std::min(samples.size(), start + kInferenceChunk);
    for (int m = 0; m < 3; ++m) {
      std::vector<const SliceImage*> batch;
      for (std::size_t i = start; i < end; ++i) {
        check_sample_shapes(samples[i], size);
        batch.push_back(&samples[i].images[m]);
      }
      out.block(m * per, static_cast<Eigen::Index>(start), per, static_cast<Eigen::Index>(end - start)) =
          encoders[m].forward(to_tensor(batch), false);
    }
  }
  return out;
}

std::vector<nn::Matrix*> FusionModel::head_state() {
  std::vector<nn::Parameter*> params;
  head.collect(params);
  std::vector<nn::Matrix*> out;
  for (auto* p : params) out.push_back(&p->value);
  return out;
}

nn::Matrix forward(FusionModel& model, std::span<const MultimodalSample> samples) {
  const nn::Matrix feats = model.features(samples);
  if (feats.rows() != model.head_inputs()) throw Error(ErrorCode::ShapeMismatch, "head/encoder width mismatch");
  return model.head.forward(feats, false);
}

std::array<double, 3> forward(FusionModel& model, const SliceImage& t1w, const SliceImage& fa, const SliceImage& md) {
  if (t1w.size != fa.size || t1w.size != md.size) {
    throw Error(ErrorCode::ShapeMismatch, "fusion inputs must share one size");
  }
  const MultimodalSample sample{{t1w, fa, md}, t1w.label, t1w.subject_id};
  const nn::Matrix s = forward(model, std::span<const MultimodalSample>(&sample, 1));
  return {s(0, 0), s(1, 0), s(2, 0)};
}

Label predict(const std::array<double, 3>& scores) noexcept {
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    if (scores[c] > scores[best]) best = c;
  }
  return label_from_index(best);
}

namespace {

std::vector<Label> argmax_columns(const nn::Matrix& scores) {
  std::vector<Label> out;
  for (Eigen::Index s = 0; s < scores.cols(); ++s) out.push_back(predict({scores(0, s), scores(1, s), scores(2, s)}));
  return out;
}

std::vector<int> targets_of(std::span<const SliceImage* const> images) {
  std::vector<int> t;
  for (const auto* img : images) t.push_back(class_index(img->label));
  return t;
}

std::vector<nn::Matrix> snapshot(const std::vector<nn::Matrix*>& state) {
  std::vector<nn::Matrix> out;
  for (const auto* m : state) out.push_back(*m);
  return out;
}

void restore(const std::vector<nn::Matrix*>& state, const std::vector<nn::Matrix>& saved) {
  for (std::size_t i = 0; i < state.size(); ++i) *state[i] = saved[i];
}

}  // namespace

std::vector<Label> predict(FusionModel& model, std::span<const MultimodalSample> samples) {
  return argmax_columns(forward(model, samples));
}

std::vector<Label> predict(ModalityClassifier& classifier, std::span<const SliceImage> images) {
  std::vector<Label> out;
  for (std::size_t start = 0; start < images.size(); start += kInferenceChunk) {
    const std::size_t end = std::min(images.size(), start + kInferenceChunk);
    const auto labels = argmax_columns(classifier.scores(to_tensor(images.subspan(start, end - start)), false));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

double accuracy(std::span<const Label> truth, std::span<const Label> predicted) {
  if (truth.empty() || truth.size() != predicted.size()) {
    throw Error(ErrorCode::InvalidArgument, "accuracy needs equally sized, nonempty label lists");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

PretrainResult pretrain_encoder(ResidualEncoder encoder, std::span<const SliceImage> train, const TrainConfig& config,
                                std::span<const SliceImage> validation) {
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, "pretraining set is empty");
  if (config.batch_size < 1 || config.epochs < 1) throw Error(ErrorCode::InvalidArgument, "bad training config");
  if (encoder.frozen()) throw Error(ErrorCode::ModeViolation, "cannot pretrain a frozen encoder");
  const Modality modality = train.front().modality;
  for (const auto& img : train) {
    if (img.modality != modality) throw Error(ErrorCode::ModeViolation, "pretraining images must share a modality");
  }

  PretrainResult result{ModalityClassifier(modality, std::move(encoder), config.seed ^ 0x9e3779b97f4a7c15ULL), {}};
  ModalityClassifier& clf = result.classifier;
  nn::Adam adam(clf.parameters(), config.adam);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<nn::Matrix> best_state;
  const auto state = clf.state();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<SliceImage> augmented;
      augmented.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        augmented.push_back(config.augment ? augment(train[order[i]], rng) : train[order[i]]);
      }
      std::vector<const SliceImage*> batch;
      for (const auto& img : augmented) batch.push_back(&img);

      adam.zero_grad();
      const nn::Matrix scores = clf.scores(to_tensor(batch), true);
      const nn::LossResult loss = nn::softmax_cross_entropy(scores, targets_of(batch));
      clf.encoder.backward(clf.head.backward(loss.grad));
      adam.step();
      result.loss_trace.push_back(loss.loss);
    }
    if (!validation.empty()) {
      std::vector<Label> truth;
      for (const auto& img : validation) truth.push_back(img.label);
      const double acc = accuracy(truth, predict(clf, validation));
      if (acc > result.best_validation_accuracy) {
        result.best_validation_accuracy = acc;
        result.best_epoch = epoch;
        best_state = snapshot(state);
      }
    }
  }
  if (!best_state.empty()) restore(state, best_state);
  if (result.best_epoch < 0) result.best_epoch = config.epochs - 1;
  return result;
}

FusionModel build_fusion(ResidualEncoder t1w, ResidualEncoder fa, ResidualEncoder md, std::uint64_t head_seed,
                         FusionMode mode) {
  if (t1w.width() != fa.width() || t1w.width() != md.width()) {
    throw Error(ErrorCode::WidthMismatch, "encoder widths " + std::to_string(t1w.width()) + ", " +
                                              std::to_string(fa.width()) + ", " + std::to_string(md.width()));
  }
  if (mode == FusionMode::PerModality) throw Error(ErrorCode::ModeViolation, "fusion model needs a fused mode");
  const int inputs = 3 * t1w.feature_length();
  FusionModel model{{std::move(t1w), std::move(fa), std::move(md)}, nn::Linear("head", inputs, kNumClasses), mode};
  for (auto& enc : model.encoders) enc.set_frozen(true);
  std::mt19937_64 rng(head_seed);
  model.head.init_uniform(rng);
  return model;
}

HeadTrainResult train_head(FusionModel& model, std::span<const MultimodalSample> samples, const TrainConfig& config) {
  if (samples.empty()) throw Error(ErrorCode::EmptyDataset, "head training set is empty");
  if (config.batch_size < 1 || config.epochs < 1) throw Error(ErrorCode::InvalidArgument, "bad training config");
  for (const auto& enc : model.encoders) {
    if (!enc.frozen()) throw Error(ErrorCode::ModeViolation, "head training requires frozen encoders");
  }
  if (model.mode == FusionMode::Fusion) {
    for (const auto& s : samples) {
      if (!s.complete()) {
        throw Error(ErrorCode::ModeViolation, "fusion sample for " + s.subject_id + " contains a Black image");
      }
    }
  }

  HeadTrainResult result;
  for (int m = 0; m < 3; ++m) result.encoder_hashes_before[m] = model.encoders[m].hash();

  // Features per (sample, flip pattern); bit 0 = horizontal, bit 1 = vertical.
  std::vector<std::optional<Eigen::VectorXd>> cache(samples.size() * 4);
  std::vector<nn::Parameter*> head_params;
  model.head.collect(head_params);
  nn::Adam adam(head_params, config.adam);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<std::size_t> keys;
      std::vector<MultimodalSample> missing;
      std::vector<std::size_t> missing_keys;
      for (std::size_t i = start; i < end; ++i) {
        int pattern = 0;
        if (config.augment) {
          const FlipDraw d = draw_flips(rng);
          pattern = (d.horizontal ? 1 : 0) | (d.vertical ? 2 : 0);
        }
        const std::size_t key = order[i] * 4 + static_cast<std::size_t>(pattern);
        keys.push_back(key);
        if (!cache[key] && std::find(missing_keys.begin(), missing_keys.end(), key) == missing_keys.end()) {
          MultimodalSample s = samples[order[i]];
          if (pattern != 0) {
            for (auto& img : s.images) img = flip(img, pattern & 1, pattern & 2);
          }
          missing.push_back(std::move(s));
          missing_keys.push_back(key);
        }
      }
      if (!missing.empty()) {
        const nn::Matrix f = model.features(missing);
        for (std::size_t j = 0; j < missing_keys.size(); ++j) cache[missing_keys[j]] = f.col(static_cast<Eigen::Index>(j));
      }

      nn::Matrix x(model.head_inputs(), static_cast<Eigen::Index>(keys.size()));
      std::vector<int> targets;
      for (std::size_t j = 0; j < keys.size(); ++j) {
        x.col(static_cast<Eigen::Index>(j)) = *cache[keys[j]];
        targets.push_back(class_index(samples[keys[j] / 4].label));
      }
      adam.zero_grad();
      const nn::LossResult loss = nn::softmax_cross_entropy(model.head.forward(x, true), targets);
      model.head.backward(loss.grad, false);
      adam.step();
      result.loss_trace.push_back(loss.loss);
    }
  }

  for (int m = 0; m < 3; ++m) result.encoder_hashes_after[m] = model.encoders[m].hash();
  return result;
}

double compute_gradients(ModalityClassifier& classifier, std::span<const SliceImage> images) {
  for (auto* p : classifier.parameters()) p->zero_grad();
  std::vector<const SliceImage*> batch;
  for (const auto& img : images) batch.push_back(&img);
  const nn::Matrix scores = classifier.scores(to_tensor(batch), true);
  const nn::LossResult loss = nn::softmax_cross_entropy(scores, targets_of(batch));
  classifier.encoder.backward(classifier.head.backward(loss.grad));
  return loss.loss;
}

double compute_loss(ModalityClassifier& classifier, std::span<const SliceImage> images) {
  std::vector<const SliceImage*> batch;
  for (const auto& img : images) batch.push_back(&img);
  const nn::Matrix scores = classifier.scores(to_tensor(batch), true);
  return nn::softmax_cross_entropy(scores, targets_of(batch)).loss;
}

}  // namespace neurofuse
