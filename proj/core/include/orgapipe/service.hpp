#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "orgapipe/error.hpp"

namespace orgapipe {

/// HTTP status for an engine error kind.
int http_status(ErrorKind kind);

/// The `/v1` HTTP API over a cache root. Sessions are loaded lazily from the cache and written
/// back after every mutation. Mutations on a session are single-writer: a second concurrent
/// mutating call gets 409.
class Service {
 public:
  explicit Service(std::filesystem::path cache_root);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port. Returns the bound port.
  int start(const std::string& host, int port);
  /// Stops listening and joins outstanding jobs.
  void stop();
  /// Serves on the calling thread until stop() is called from elsewhere.
  void run(const std::string& host, int port);

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace orgapipe
