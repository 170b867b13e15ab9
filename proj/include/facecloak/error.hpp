#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace facecloak {

// Every error raised by the library derives from Error. The CLI maps the
// concrete kinds onto exit codes (config 2, data/format 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or dimensions that do not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or a degenerate quantity (e.g. normalizing a zero vector).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong lifecycle state (backward before forward,
// stale activation cache).
class StateError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or violated precondition on user-supplied input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed file contents. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        detail_(what),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  // Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t offset_;
};

class VersionError : public FormatError {
 public:
  VersionError(unsigned expected, unsigned actual, std::uint64_t offset)
      : FormatError("unsupported format version: expected " +
                        std::to_string(expected) + ", found " +
                        std::to_string(actual),
                    offset),
        expected_(expected),
        actual_(actual) {}

  unsigned expected() const noexcept { return expected_; }
  unsigned actual() const noexcept { return actual_; }

 private:
  unsigned expected_;
  unsigned actual_;
};

// A negative-selection strategy has no admissible candidate in the gallery.
class StrategyInfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace facecloak
