#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace orgapipe {

enum class ErrorKind {
  invalid_argument,
  not_found,
  conflict,
  io,
  format,
  checksum,
  version,
  schema_mismatch,
  protocol,
  timeout,
  transport,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type used across the engine; `kind()` drives HTTP status and exit-code mapping.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace orgapipe
