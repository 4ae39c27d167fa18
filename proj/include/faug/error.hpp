#pragma once

#include <stdexcept>
#include <string>

namespace faug {

enum class ErrorCode {
  ShapeMismatch,
  NonFiniteInput,
  NonFiniteResult,
  UnknownPrimitive,
  NotScalarLoss,
  TapeConsumed,
  InvalidNoiseParams,
  UnknownArchitecture,
  UnknownLayer,
  MissingRng,
  InvalidSpec,
  DivergedTraining,
  EmptySplit,
  IoError,
  CorruptCheckpoint,
  VersionMismatch,
  ConfigInvalid,
  InvalidSizes,
  InvalidKernel,
  InvalidGrid,
  InvalidLevels,
  NoEligibleSamples,
  DegenerateLogits,
  IncompatibleModels,
  GoldenMismatch,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NonFiniteResult: return "NonFiniteResult";
    case ErrorCode::UnknownPrimitive: return "UnknownPrimitive";
    case ErrorCode::NotScalarLoss: return "NotScalarLoss";
    case ErrorCode::TapeConsumed: return "TapeConsumed";
    case ErrorCode::InvalidNoiseParams: return "InvalidNoiseParams";
    case ErrorCode::UnknownArchitecture: return "UnknownArchitecture";
    case ErrorCode::UnknownLayer: return "UnknownLayer";
    case ErrorCode::MissingRng: return "MissingRng";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::DivergedTraining: return "DivergedTraining";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::InvalidSizes: return "InvalidSizes";
    case ErrorCode::InvalidKernel: return "InvalidKernel";
    case ErrorCode::InvalidGrid: return "InvalidGrid";
    case ErrorCode::InvalidLevels: return "InvalidLevels";
    case ErrorCode::NoEligibleSamples: return "NoEligibleSamples";
    case ErrorCode::DegenerateLogits: return "DegenerateLogits";
    case ErrorCode::IncompatibleModels: return "IncompatibleModels";
    case ErrorCode::GoldenMismatch: return "GoldenMismatch";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code),
        message_(message) {}

  ErrorCode code() const { return code_; }
  // diagnostic text without the code prefix
  const std::string& message() const { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace faug
