#pragma once

#include <stdexcept>
#include <string>

namespace prunekit {

enum class ErrorCode {
  kArgument,
  kStructural,
  kNumeric,
  kState,
  kData,
  kIo,
  kConfig,
  kVersionMismatch,
  kTruncatedBlob,
  kManifestMismatch,
  kDegenerateGamma,
  kDegenerateFilter,
  kSize,
  kFloorViolation,
  kGroupConstraint,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace prunekit
