#include "prunekit/error.hpp"

namespace prunekit {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kArgument: return "argument error";
    case ErrorCode::kStructural: return "structural error";
    case ErrorCode::kNumeric: return "numeric error";
    case ErrorCode::kState: return "state error";
    case ErrorCode::kData: return "data error";
    case ErrorCode::kIo: return "io error";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kVersionMismatch: return "version mismatch";
    case ErrorCode::kTruncatedBlob: return "truncated blob";
    case ErrorCode::kManifestMismatch: return "manifest/blob mismatch";
    case ErrorCode::kDegenerateGamma: return "degenerate gamma";
    case ErrorCode::kDegenerateFilter: return "degenerate filter";
    case ErrorCode::kSize: return "size error";
    case ErrorCode::kFloorViolation: return "floor violation";
    case ErrorCode::kGroupConstraint: return "group constraint violation";
  }
  return "unknown error";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace prunekit
