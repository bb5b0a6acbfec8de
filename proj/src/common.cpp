#include "neurofuse/error.hpp"
#include "neurofuse/types.hpp"

namespace neurofuse {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::NonInvertibleAffine: return "NonInvertibleAffine";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::NonNumericToken: return "NonNumericToken";
    case ErrorCode::GeometryMismatch: return "GeometryMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::InsufficientDirections: return "InsufficientDirections";
    case ErrorCode::NonInvertibleTransform: return "NonInvertibleTransform";
    case ErrorCode::DegenerateHistogram: return "DegenerateHistogram";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::PartialDwiTriple: return "PartialDwiTriple";
    case ErrorCode::MissingModality: return "MissingModality";
    case ErrorCode::DuplicateRow: return "DuplicateRow";
    case ErrorCode::OffsetOutOfRange: return "OffsetOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::WidthMismatch: return "WidthMismatch";
    case ErrorCode::ModeViolation: return "ModeViolation";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    case ErrorCode::EmptyMatrix: return "EmptyMatrix";
    case ErrorCode::InvalidTensor: return "InvalidTensor";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::ConditionUnsupported: return "ConditionUnsupported";
  }
  return "Unknown";
}

std::string_view to_string(Label label) noexcept {
  switch (label) {
    case Label::NC: return "NC";
    case Label::MCI: return "MCI";
    case Label::AD: return "AD";
  }
  return "?";
}

std::string_view to_string(Modality modality) noexcept {
  switch (modality) {
    case Modality::T1w: return "T1w";
    case Modality::FA: return "FA";
    case Modality::MD: return "MD";
    case Modality::Black: return "Black";
  }
  return "?";
}

std::optional<Label> parse_label(std::string_view text) noexcept {
  for (Label l : kAllLabels) {
    if (text == to_string(l)) return l;
  }
  return std::nullopt;
}

std::optional<Modality> parse_modality(std::string_view text) noexcept {
  for (Modality m : {Modality::T1w, Modality::FA, Modality::MD, Modality::Black}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

}  // namespace neurofuse
