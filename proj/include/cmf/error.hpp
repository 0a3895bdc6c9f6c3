#pragma once

#include <stdexcept>
#include <string>

namespace cmf {

enum class ErrorCode {
  InvalidArgument = 1,
  Config = 2,
  NotPositiveDefinite = 3,
  Breakdown = 4,
  NonFinite = 5,
  MomentDegeneracy = 6,
  Parse = 7,
  ZeroVariance = 8,
  Io = 9,
  DimensionMismatch = 10,
};

/// Exception carrying a machine-readable code. The C API maps codes onto
/// process exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

const char* to_string(ErrorCode code) noexcept;

}  // namespace cmf
