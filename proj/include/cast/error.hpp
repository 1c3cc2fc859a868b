#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cast {

enum class ErrorCode {
  MissingFile,
  MalformedHeader,
  TruncatedPayload,
  IoFailure,
  TooManySegments,
  NonNestedLevels,
  ImageTooSmall,
  ShapeMismatch,
  NonFiniteInput,
  NotScalarLoss,
  EmptySegmentAtCellResolution,
  KOutOfRange,
  MNotSmaller,
  InvalidParameter,
  InvalidConfig,
  EmptyCluster,
  DivergenceDetected,
  DimMismatch,
  EmptyGallery,
  ConfigMismatch,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace cast
