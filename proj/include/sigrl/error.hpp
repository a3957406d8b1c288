#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sigrl {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the documented domain of an operation.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf surfaced where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  bad_magic,
  version_mismatch,
  truncated,
  dimension_mismatch,
  label_out_of_range,
  invalid_value,
};

inline const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::bad_magic: return "bad magic";
    case FormatErrc::version_mismatch: return "version mismatch";
    case FormatErrc::truncated: return "truncated payload";
    case FormatErrc::dimension_mismatch: return "dimension mismatch";
    case FormatErrc::label_out_of_range: return "label out of range";
    case FormatErrc::invalid_value: return "invalid value";
  }
  return "unknown";
}

/// Parse failure of a SIGF/SIGP file. Carries the byte offset at which the
/// reader detected the problem.
class FormatError : public Error {
 public:
  FormatError(FormatErrc code, std::size_t offset, const std::string& detail)
      : Error(std::string(to_string(code)) + " at byte " + std::to_string(offset) +
              (detail.empty() ? "" : ": " + detail)),
        code_(code),
        offset_(offset) {}

  FormatErrc code() const noexcept { return code_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  FormatErrc code_;
  std::size_t offset_;
};

}  // namespace sigrl
