#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace msd {

enum class ErrorCode {
  ZeroVector,
  DimMismatch,
  EmptyInput,
  DegeneratePooling,
  EmptyData,
  NotAProbabilityRow,
  OutOfRange,
  LengthMismatch,
  KappaMismatch,
  GridMismatch,
  AllMasked,
  EmptyCandidates,
  EmptyEval,
  TooFewClusters,
  DegenerateRanks,
  BadMagic,
  BadHeader,
  VersionUnsupported,
  TruncatedPayload,
  DegenerateRow,
  ParseError,
  DuplicateId,
  MissingPath,
  FingerprintMismatch,
  InvalidConfig,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::DegeneratePooling: return "DegeneratePooling";
    case ErrorCode::EmptyData: return "EmptyData";
    case ErrorCode::NotAProbabilityRow: return "NotAProbabilityRow";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::KappaMismatch: return "KappaMismatch";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::AllMasked: return "AllMasked";
    case ErrorCode::EmptyCandidates: return "EmptyCandidates";
    case ErrorCode::EmptyEval: return "EmptyEval";
    case ErrorCode::TooFewClusters: return "TooFewClusters";
    case ErrorCode::DegenerateRanks: return "DegenerateRanks";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::DegenerateRow: return "DegenerateRow";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::MissingPath: return "MissingPath";
    case ErrorCode::FingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace msd
