#include "neurofuse/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "neurofuse/error.hpp"

namespace neurofuse {

namespace {

using nlohmann::json;

constexpr std::array<char, 4> kMagic{'N', 'F', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in native order");

json meta_to_json(const CheckpointMeta& meta, const std::vector<const nn::Matrix*>& tensors) {
  json j{{"kind", meta.kind},       {"width", meta.width},          {"mode", meta.mode},
         {"modality", meta.modality}, {"seed", meta.seed},          {"epoch", meta.epoch},
         {"image_size", meta.image_size}, {"encoder_hashes", meta.encoder_hashes}};
  json shapes = json::array();
  for (const auto* m : tensors) shapes.push_back({m->rows(), m->cols()});
  j["tensors"] = shapes;
  return j;
}

void write_blob(const std::filesystem::path& path, const CheckpointMeta& meta,
                const std::vector<const nn::Matrix*>& tensors) {
  const std::string header = meta_to_json(meta, tensors).dump();
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = header.size();
  out.write(kMagic.data(), kMagic.size());
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto* m : tensors) {
    out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorCode::IoFailure, "short write to " + path.string());
}

struct Blob {
  CheckpointMeta meta;
  std::vector<nn::Matrix> tensors;
};

Blob read_blob(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingCheckpoint, "no checkpoint at " + path.string());
  std::array<char, 4> magic{};
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic.data(), magic.size());
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || magic != kMagic) throw Error(ErrorCode::BadCheckpoint, path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::BadCheckpoint, "unsupported checkpoint version " + std::to_string(version));
  }
  if (length > (1u << 26)) throw Error(ErrorCode::BadCheckpoint, "implausible checkpoint header length");
  std::string header(length, '\0');
  in.read(header.data(), static_cast<std::streamsize>(length));
  if (!in) throw Error(ErrorCode::BadCheckpoint, "truncated checkpoint header");

  Blob blob;
  json j;
  try {
    j = json::parse(header);
    auto& m = blob.meta;
    m.kind = j.at("kind").get<std::string>();
    m.width = j.at("width").get<int>();
    m.mode = j.at("mode").get<std::string>();
    m.modality = j.at("modality").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epoch = j.at("epoch").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.encoder_hashes = j.at("encoder_hashes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadCheckpoint, std::string("checkpoint header: ") + e.what());
  }
  if (!with_payload) return blob;
  for (const auto& shape : j.at("tensors")) {
    const auto rows = shape.at(0).get<Eigen::Index>();
    const auto cols = shape.at(1).get<Eigen::Index>();
    if (rows < 0 || cols < 0 || rows * cols > (Eigen::Index{1} << 28)) {
      throw Error(ErrorCode::BadCheckpoint, "implausible tensor shape");
    }
    nn::Matrix t(rows, cols);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw Error(ErrorCode::BadCheckpoint, "truncated checkpoint payload");
    blob.tensors.push_back(std::move(t));
  }
  return blob;
}

void fill(const std::vector<nn::Matrix*>& targets, std::vector<nn::Matrix>& source, std::size_t& cursor) {
  for (auto* t : targets) {
    if (cursor >= source.size()) throw Error(ErrorCode::BadCheckpoint, "checkpoint has too few tensors");
    nn::Matrix& s = source[cursor++];
    if (s.rows() != t->rows() || s.cols() != t->cols()) {
      throw Error(ErrorCode::BadCheckpoint, "checkpoint tensor shape does not match the model");
    }
    *t = std::move(s);
  }
}

std::vector<const nn::Matrix*> const_view(const std::vector<nn::Matrix*>& v) { return {v.begin(), v.end()}; }

Modality modality_of(const CheckpointMeta& meta) {
  const auto m = parse_modality(meta.modality);
  if (!m) throw Error(ErrorCode::BadCheckpoint, "unknown modality '" + meta.modality + "'");
  return *m;
}

void require_kind(const CheckpointMeta& meta, std::string_view kind) {
  if (meta.kind != kind) {
    throw Error(ErrorCode::BadCheckpoint, "expected a " + std::string(kind) + " checkpoint, got " + meta.kind);
  }
}

}  // namespace

void save_checkpoint(ModalityClassifier& classifier, CheckpointMeta meta, const std::filesystem::path& path) {
  meta.kind = "classifier";
  meta.width = classifier.encoder.width();
  meta.modality = std::string(to_string(classifier.modality));
  if (meta.mode.empty()) meta.mode = std::string(to_string(FusionMode::PerModality));
  meta.encoder_hashes = {classifier.encoder.hash()};
  write_blob(path, meta, const_view(classifier.state()));
}

void save_checkpoint(FusionModel& model, CheckpointMeta meta, const std::filesystem::path& path) {
  meta.kind = "fusion";
  meta.width = model.encoders[0].width();
  meta.mode = std::string(to_string(model.mode));
  meta.encoder_hashes.clear();
  std::vector<nn::Matrix*> tensors;
  for (auto& enc : model.encoders) {
    meta.encoder_hashes.push_back(enc.hash());
    const auto s = enc.state();
    tensors.insert(tensors.end(), s.begin(), s.end());
  }
  const auto head = model.head_state();
  tensors.insert(tensors.end(), head.begin(), head.end());
  write_blob(path, meta, const_view(tensors));
}

void save_encoder(ResidualEncoder& encoder, CheckpointMeta meta, const std::filesystem::path& path) {
  meta.kind = "encoder";
  meta.width = encoder.width();
  meta.encoder_hashes = {encoder.hash()};
  write_blob(path, meta, const_view(encoder.state()));
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) { return read_blob(path, false).meta; }

ModalityClassifier load_classifier(const std::filesystem::path& path, CheckpointMeta* meta) {
  Blob blob = read_blob(path, true);
  require_kind(blob.meta, "classifier");
  ModalityClassifier clf(modality_of(blob.meta), ResidualEncoder(blob.meta.width, 0), 0);
  std::size_t cursor = 0;
  fill(clf.state(), blob.tensors, cursor);
  if (cursor != blob.tensors.size()) throw Error(ErrorCode::BadCheckpoint, "checkpoint has extra tensors");
  if (meta != nullptr) *meta = blob.meta;
  return clf;
}

FusionModel load_fusion(const std::filesystem::path& path, CheckpointMeta* meta) {
  Blob blob = read_blob(path, true);
  require_kind(blob.meta, "fusion");
  const auto mode = parse_fusion_mode(blob.meta.mode);
  if (!mode || *mode == FusionMode::PerModality) throw Error(ErrorCode::BadCheckpoint, "bad fusion mode");
  const int w = blob.meta.width;
  FusionModel model = build_fusion(ResidualEncoder(w, 0), ResidualEncoder(w, 0), ResidualEncoder(w, 0), 0, *mode);
  std::size_t cursor = 0;
  for (auto& enc : model.encoders) fill(enc.state(), blob.tensors, cursor);
  fill(model.head_state(), blob.tensors, cursor);
  if (cursor != blob.tensors.size()) throw Error(ErrorCode::BadCheckpoint, "checkpoint has extra tensors");
  if (!blob.meta.encoder_hashes.empty()) {
    if (blob.meta.encoder_hashes.size() != 3) throw Error(ErrorCode::BadCheckpoint, "expected three encoder hashes");
    for (int m = 0; m < 3; ++m) {
      if (model.encoders[m].hash() != blob.meta.encoder_hashes[m]) {
        throw Error(ErrorCode::BadCheckpoint, "encoder " + std::to_string(m) + " does not match its recorded hash");
      }
    }
  }
  if (meta != nullptr) *meta = blob.meta;
  return model;
}

ResidualEncoder load_encoder(const std::filesystem::path& path) {
  Blob blob = read_blob(path, true);
  if (blob.meta.kind != "encoder" && blob.meta.kind != "classifier") {
    throw Error(ErrorCode::BadCheckpoint, "no single encoder in a " + blob.meta.kind + " checkpoint");
  }
  ResidualEncoder enc(blob.meta.width, 0);
  std::size_t cursor = 0;
  fill(enc.state(), blob.tensors, cursor);
  return enc;
}

}  // namespace neurofuse
