#include "orgapipe/error.hpp"

namespace orgapipe {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::version: return "version";
    case ErrorKind::schema_mismatch: return "schema_mismatch";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::timeout: return "timeout";
    case ErrorKind::transport: return "transport";
  }
  return "unknown";
}

}  // namespace orgapipe
