#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace klctrl {

enum class ErrorCode {
  InvalidGrid,
  InvalidDensity,
  AllZero,
  NegativeMass,
  NonFiniteH,
  BadAxis,
  GridMismatch,
  AbsContinuityViolation,
  EmptyInterval,
  Infeasible,
  DegenerateSupport,
  NotConverged,
  InfeasibleConstraints,
  NoInRangeSamples,
  RankDeficient,
  IoError,
  SchemaVersionMismatch,
  ChecksumMismatch,
  BadConfig,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; `code()` discriminates.
// `index()` carries the offending cell/row/state when one is known.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace klctrl
