#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "orgapipe/detection.hpp"
#include "orgapipe/segmentation.hpp"

namespace orgapipe {

inline constexpr int kAdapterProtocolVersion = 1;

enum class Transport { stdio, http };

struct AdapterEndpoint {
  Transport transport = Transport::stdio;
  std::string address;  // shell command line, or http://host:port[/path]
  double timeout_seconds = 30.0;
  int max_in_flight = 1;
  void validate() const;
};

struct Capabilities {
  bool detect = false;
  bool segment = false;
  std::string model;
};

// Wire codecs. Images travel as {"shape": [h, w, c], "dtype": "<f8", "data": base64}; masks as
// {"shape": [h, w], "counts": [...]} with row-major runs that start with a zero run.
std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);
nlohmann::json encode_image(const Frame& frame);
Frame decode_image(const nlohmann::json& j);
nlohmann::json encode_rle(const BinaryMask& mask);
BinaryMask decode_rle(const nlohmann::json& j, int height, int width);

/// Thread-safe client for one endpoint. Requests carry fresh ids; replies are matched by id.
class AdapterClient {
 public:
  explicit AdapterClient(AdapterEndpoint endpoint);
  ~AdapterClient();
  AdapterClient(const AdapterClient&) = delete;
  AdapterClient& operator=(const AdapterClient&) = delete;

  const AdapterEndpoint& endpoint() const;

  Capabilities health();

  struct DetectResult {
    std::vector<ScoredBox> boxes;
    std::size_t dropped = 0;
  };
  DetectResult detect(const Frame& tile);
  BinaryMask segment(const Frame& crop, const Rect& prompt);

  /// Sends `request` (an "id" is assigned) and returns the validated reply with ok == true.
  /// Error replies raise protocol errors carrying the sidecar's message.
  nlohmann::json call(nlohmann::json request);

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

class AdapterDetector final : public Detector {
 public:
  explicit AdapterDetector(AdapterClient& client) : client_(client) {}
  std::vector<ScoredBox> detect(const Frame& tile) override;
  std::size_t dropped() const { return dropped_.load(); }

 private:
  AdapterClient& client_;
  std::atomic<std::size_t> dropped_{0};
};

class AdapterSegmenter final : public Segmenter {
 public:
  explicit AdapterSegmenter(AdapterClient& client) : client_(client) {}
  BinaryMask segment(const Frame& crop, const Rect& prompt) override { return client_.segment(crop, prompt); }

 private:
  AdapterClient& client_;
};

}  // namespace orgapipe
