#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smvit {

enum class ErrorKind {
  Shape,
  Tiling,
  Rank,
  Label,
  Numeric,
  DegenerateBatch,
  Config,
  Protocol,
  InsufficientPairs,
  MissingFactor,
  Layout,
  EmptyDataset,
  BlankFrame,
  DegenerateStratum,
  Io,
  Load,
  Comparison,
};

/// Coarse grouping used for process exit codes.
enum class ErrorCategory { Config, Data, Numeric, Io };

std::string_view error_kind_name(ErrorKind kind);
ErrorCategory error_category(ErrorKind kind);

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return error_category(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace smvit
