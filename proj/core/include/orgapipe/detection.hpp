#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "orgapipe/error.hpp"
#include "orgapipe/geometry.hpp"
#include "orgapipe/imaging.hpp"

namespace orgapipe {

using DetectionId = std::uint64_t;
using TrackId = std::uint64_t;

enum class Provenance { model, manual, gap_fill };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

/// One organoid in one frame.
struct DetectionRecord {
  DetectionId detection_id = 0;
  int frame_index = 0;
  Rect bbox;
  double confidence = 0.0;
  Provenance provenance = Provenance::model;
  std::optional<TrackId> track_id;

  /// Mean of the bbox side lengths.
  double diameter() const { return (bbox.width() + bbox.height()) / 2.0; }

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

struct ScoredBox {
  Rect rect;
  double confidence = 0.0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

struct TilingConfig {
  int window_size = 512;
  std::vector<int> downsampling_rates{1};

  static constexpr double overlap_fraction = 0.5;

  void validate() const;
};

struct NmsConfig {
  double iou_threshold = 0.5;

  void validate() const;
};

struct FilterConfig {
  double min_confidence = 0.0;
  double min_diameter = 0.0;

  void validate() const;
  bool accepts(const DetectionRecord& r) const {
    return r.confidence >= min_confidence && r.diameter() >= min_diameter;
  }

  friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

/// Monotonic detection id allocator; ids start at 1.
class DetectionIdSource {
 public:
  explicit DetectionIdSource(DetectionId next = 1) : next_(next) {}
  DetectionId take() { return next_++; }
  DetectionId peek() const { return next_; }

 private:
  DetectionId next_;
};

/// Window origins along one axis: stride window/2, final origin flush with the far edge.
std::vector<int> tile_positions(int extent, int window);

double iou(const Rect& a, const Rect& b);

/// Greedy NMS. Returns indices into `boxes` of the survivors, in keep order. Equal confidences
/// keep input order; a box is suppressed when its IoU with a kept box is strictly above the threshold.
std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, const NmsConfig& cfg = {});

/// Detector contract: boxes in tile pixel coordinates with confidence in [0, 1].
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<ScoredBox> detect(const Frame& tile) = 0;
};

/// Otsu foreground (minority class), 8-connected components of >= 25 px, confidence by relative size.
std::vector<ScoredBox> classical_detect(const Frame& tile);

class ClassicalDetector final : public Detector {
 public:
  std::vector<ScoredBox> detect(const Frame& tile) override { return classical_detect(tile); }
};

struct TileError {
  int rate = 1;
  std::size_t tile_index = 0;
  Rect region;  // full-resolution coordinates
  ErrorKind kind = ErrorKind::transport;
  std::string message;
};

struct DetectOptions {
  TilingConfig tiling;
  NmsConfig nms;
  std::optional<Rect> roi;
  int threads = 1;
};

struct DetectionRun {
  std::vector<DetectionRecord> records;
  std::vector<TileError> tile_errors;
  std::size_t pooled_boxes = 0;
};

/// Multi-scale tiled detection over one frame followed by global NMS and ROI restriction.
/// Failing tiles are reported in `tile_errors`; the remaining tiles still contribute.
DetectionRun detect_frame(const Frame& frame, int frame_index, Detector& detector, const DetectOptions& options,
                          DetectionIdSource& ids);

std::vector<DetectionRecord> filter_detections(std::span<const DetectionRecord> records, const FilterConfig& cfg);

}  // namespace orgapipe
