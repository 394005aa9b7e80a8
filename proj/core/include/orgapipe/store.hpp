#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "orgapipe/annotations.hpp"
#include "orgapipe/detection.hpp"
#include "orgapipe/features.hpp"
#include "orgapipe/imaging.hpp"
#include "orgapipe/segmentation.hpp"
#include "orgapipe/table.hpp"
#include "orgapipe/tracking.hpp"

namespace orgapipe {

/// Everything known about one image, indexed by detection id.
struct Session {
  ImageStack image;
  std::vector<SignalChannel> signals;
  std::map<DetectionId, DetectionRecord> detections;
  TrackAssignment tracks;
  MaskMap masks;
  FeatureTable features;
  AnnotationBook annotations;
  std::map<std::string, AnnotationSession> annotation_sessions;
  std::map<std::string, std::vector<std::uint8_t>> models;  // OPML container bytes by name
  FilterConfig filter;
  DetectionId next_detection_id = 1;

  std::string hash_hex() const { return to_hex(image.content_hash); }
  /// Records passing the current filter, in id order.
  std::vector<DetectionRecord> visible() const;
  /// Per-frame lists of visible records, in id order.
  std::vector<std::vector<DetectionRecord>> visible_by_frame() const;
  const DetectionRecord& record(DetectionId id) const;

  friend bool operator==(const Session&, const Session&) = default;
};

Session make_session(ImageStack image, std::vector<SignalChannel> signals = {});

/// Checks every cross-reference; returns human-readable violations (empty when consistent).
std::vector<std::string> integrity_violations(const Session& s);

// Edits. Bounds are checked against the frame size.
DetectionId add_detection(Session& s, int frame_index, const Rect& bbox);
/// Replaces the bbox. Masks and computed feature cells of the record are dropped; annotations stay.
void modify_detection(Session& s, DetectionId id, const Rect& bbox);
/// Removes the record with its masks, features, annotations, track entries and session targets.
void delete_detection(Session& s, DetectionId id);
/// Removes every record and all state keyed by records; the id counter keeps running.
void clear_detections(Session& s);

nlohmann::json detection_to_json(const DetectionRecord& r);
DetectionRecord detection_from_json(const nlohmann::json& j);

/// Snapshot of everything except pixel data and models.
nlohmann::json session_state_to_json(const Session& s);
/// Restores the state part of a snapshot into `s`, whose image and signals must already be set.
void session_state_from_json(Session& s, const nlohmann::json& j);

/// Subset export. `ids` empty with `all` true exports every record.
nlohmann::json export_json(const Session& s, const std::vector<DetectionId>& ids, bool all = false);
struct ImportReport {
  std::vector<std::string> warnings;
  std::map<DetectionId, DetectionId> id_map;  // exported id -> id in the session
};
/// Imports records. A foreign image hash or an id collision remaps to fresh ids.
ImportReport import_json(Session& s, const nlohmann::json& doc);

/// Flat table of visible records: fixed columns, feature columns in registry order, then
/// `ann:<kind>:<name>` columns.
TabularData session_table(const Session& s);
std::string export_csv(const Session& s);

/// NPY v1.0 label image of the frame's visible primary masks. Overlaps go to the lower id.
std::vector<std::uint8_t> export_npy(const Session& s, int frame_index);

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Content-addressed session cache: `<root>/<hash>/session.json`, `models/<name>.opml`,
/// `annotations/<name>.json`, plus the pixel data as TIFF.
class Cache {
 public:
  explicit Cache(std::filesystem::path root);

  /// ORGAPIPE_CACHE, else $XDG_CACHE_HOME/orgapipe, else ~/.cache/orgapipe.
  static std::filesystem::path default_root();

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path entry_dir(const std::string& hash) const;

  void save(const Session& s) const;
  /// nullopt when absent or corrupt; corruption is described in `warnings`.
  std::optional<Session> load(const std::string& hash, std::vector<std::string>* warnings = nullptr) const;
  bool contains(const std::string& hash) const;

  void save_model(const std::string& hash, const std::string& name, const std::vector<std::uint8_t>& bytes) const;
  std::optional<std::vector<std::uint8_t>> load_model(const std::string& hash, const std::string& name) const;

  /// Persists the session with its own annotations; idempotent.
  void suspend(const std::string& hash, const AnnotationSession& session, const AnnotationBook& book) const;
  /// Restores a suspended session and merges its annotations into `book`. Throws not_found.
  AnnotationSession resume(const std::string& hash, const std::string& name, AnnotationBook& book) const;

  /// Test hook run between writing a temp file and renaming it into place.
  std::function<void(const std::filesystem::path& tmp, const std::filesystem::path& target)> before_rename;

 private:
  void write(const std::filesystem::path& path, std::string_view bytes) const;
  std::filesystem::path root_;
};

/// Rejects names that are not safe single path components.
void validate_entry_name(const std::string& name);

}  // namespace orgapipe
