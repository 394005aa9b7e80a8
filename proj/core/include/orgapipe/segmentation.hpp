#pragma once

#include <compare>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "orgapipe/detection.hpp"
#include "orgapipe/imaging.hpp"

namespace orgapipe {

inline constexpr const char* kPrimaryChannel = "primary";

/// Instance mask stored as its outer contour.
struct PolygonMask {
  DetectionId detection_id = 0;
  int frame_index = 0;
  std::string channel_name = kPrimaryChannel;
  Polygon vertices;

  friend bool operator==(const PolygonMask&, const PolygonMask&) = default;
};

struct MaskKey {
  DetectionId detection_id = 0;
  std::string channel;

  friend auto operator<=>(const MaskKey&, const MaskKey&) = default;
};

using MaskMap = std::map<MaskKey, PolygonMask>;

/// Segmenter contract: a binary mask with the crop's shape for a bbox prompt in crop coordinates.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual BinaryMask segment(const Frame& crop, const Rect& prompt) = 0;
};

/// Otsu on crop luminance, centre-proximity polarity, component overlapping the prompt's central half.
BinaryMask classical_segment(const Frame& crop, const Rect& prompt);

class ClassicalSegmenter final : public Segmenter {
 public:
  BinaryMask segment(const Frame& crop, const Rect& prompt) override { return classical_segment(crop, prompt); }
};

/// Smooths a pixel-edge contour by joining the midpoints of its unit edges. Pixel-centre
/// rasterization of the result reproduces the traced pixels; corners lose their staircase, so
/// the arc length approaches the boundary of the underlying shape. Collinear points are dropped.
Polygon midpoint_contour(const Polygon& crack);

/// Douglas-Peucker on a closed polygon. When the area would change by more than 2% the tolerance
/// is halved (down to 1/16 of the request); the input is returned if that never succeeds or
/// the result would have fewer than 3 vertices.
Polygon simplify_polygon(const Polygon& poly, double tolerance = 1.0);

/// Integer crop rect: bbox grown by `fraction` of its size on every side, clamped to the frame.
Rect padded_crop(const Rect& bbox, int frame_width, int frame_height, double fraction = 0.1);

struct SegmentOptions {
  double padding_fraction = 0.1;
  double simplify_tolerance = 1.0;
  int threads = 1;
};

struct SegmentIssue {
  DetectionId detection_id = 0;
  std::string channel;
  std::string reason;
  bool failed = false;  // segmenter error rather than an empty mask
};

struct SegmentationRun {
  std::vector<PolygonMask> masks;
  std::vector<SegmentIssue> issues;
};

/// Segments every record on the primary stack and on each signal channel with the same prompts.
SegmentationRun segment(std::span<const DetectionRecord> records, const ImageStack& primary,
                        std::span<const SignalChannel> channels, Segmenter& segmenter,
                        const SegmentOptions& options = {});

}  // namespace orgapipe
