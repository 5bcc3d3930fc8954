#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fuselm {

enum class ErrorCode {
  InvalidArgument,
  EmptyCorpus,
  NotEnoughData,
  VocabMismatch,
  RemoteUnavailable,
  ProtocolError,
  ShapeError,
  BatchTooSmall,
  CacheMismatch,
  DegenerateRenormalization,
  NoLambda,
  EmptyCache,
  EmptyEval,
  UndefinedCorrelation,
  IoError,
  FormatError,
};

std::string_view to_string(ErrorCode code);

/// All library failures are reported as this exception; `code()` tells them apart.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace fuselm
