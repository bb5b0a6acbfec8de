#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace neurofuse {

enum class ErrorCode {
  // volume and sidecar I/O
  BadMagic,
  UnsupportedFormat,
  UnsupportedDatatype,
  TruncatedFile,
  NonInvertibleAffine,
  IoFailure,
  CountMismatch,
  NonNumericToken,
  GeometryMismatch,
  InvalidArgument,
  // tensor fitting
  EmptyMask,
  InsufficientDirections,
  // registration
  NonInvertibleTransform,
  DegenerateHistogram,
  // dataset assembly
  BadHeader,
  BadLabel,
  PartialDwiTriple,
  MissingModality,
  DuplicateRow,
  OffsetOutOfRange,
  // networks
  ShapeMismatch,
  EmptyDataset,
  WidthMismatch,
  ModeViolation,
  BadCheckpoint,
  // metrics
  EmptyMatrix,
  // phantoms
  InvalidTensor,
  // pipeline
  MissingCheckpoint,
  ConfigInvalid,
  ConditionUnsupported,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace neurofuse
