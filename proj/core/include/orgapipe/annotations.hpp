#pragma once

#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "orgapipe/detection.hpp"
#include "orgapipe/features.hpp"

namespace orgapipe {

enum class AnnotationKind { text, number, classes, object, ruler };

std::string_view to_string(AnnotationKind kind);
AnnotationKind annotation_kind_from_string(std::string_view s);

using Polyline = std::vector<Point>;

/// Alternative index equals the AnnotationKind value.
using AnnotationPayload =
    std::variant<std::string, double, std::set<std::string>, std::vector<Rect>, std::vector<Polyline>>;

struct Annotation {
  DetectionId detection_id = 0;
  AnnotationKind kind = AnnotationKind::text;
  std::string name;  // column name within the kind
  AnnotationPayload payload;
  std::string author;
  std::string timestamp;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Decodes a JSON payload for `kind`; a type mismatch is an invalid_argument error.
AnnotationPayload parse_payload(AnnotationKind kind, const nlohmann::json& j);
nlohmann::json payload_to_json(const AnnotationPayload& payload);

nlohmann::json annotation_to_json(const Annotation& a);
Annotation annotation_from_json(const nlohmann::json& j);

/// CSV cell text: classes joined by ';', objects and rulers as compact JSON.
std::string payload_to_cell(const AnnotationPayload& payload);

struct AnnotationKey {
  DetectionId detection_id = 0;
  AnnotationKind kind = AnnotationKind::text;
  std::string name;

  friend auto operator<=>(const AnnotationKey&, const AnnotationKey&) = default;
};

/// At most one annotation per (detection, kind, name).
class AnnotationBook {
 public:
  void put(Annotation a);
  const Annotation* find(const AnnotationKey& key) const;
  bool contains(const AnnotationKey& key) const { return find(key) != nullptr; }
  void erase_detection(DetectionId id);
  const std::map<AnnotationKey, Annotation>& entries() const { return entries_; }
  std::vector<Annotation> for_detection(DetectionId id) const;
  /// Distinct (kind, name) pairs in key order; these become CSV columns.
  std::vector<std::pair<AnnotationKind, std::string>> columns() const;

  friend bool operator==(const AnnotationBook&, const AnnotationBook&) = default;

 private:
  std::map<AnnotationKey, Annotation> entries_;
};

/// A resumable pass over a list of detections for one annotation column.
struct AnnotationSession {
  std::string name;
  AnnotationKind kind = AnnotationKind::text;
  std::vector<DetectionId> target_ids;
  std::size_t cursor = 0;
  std::optional<std::set<std::string>> vocabulary;

  friend bool operator==(const AnnotationSession&, const AnnotationSession&) = default;
};

nlohmann::json session_to_json(const AnnotationSession& s);
AnnotationSession annotation_session_from_json(const nlohmann::json& j);

struct AnnotateContext {
  int frame_width = 0;   // bounds for object rects; 0 disables the check
  int frame_height = 0;
  std::optional<double> pixel_scale;
  std::string author;
  std::string timestamp;
};

/// Stores the annotation, then moves the cursor past the annotated prefix of the targets.
/// Ruler payloads also write `ruler_length_<n>` feature columns, one per polyline.
void annotate(AnnotationSession& session, AnnotationBook& book, FeatureTable& features, DetectionId id,
              AnnotationPayload payload, const AnnotateContext& ctx = {});

/// Recomputes the cursor from the book.
void advance_cursor(AnnotationSession& session, const AnnotationBook& book);

}  // namespace orgapipe
