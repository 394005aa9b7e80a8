#pragma once

#include <map>
#include <vector>

#include "orgapipe/detection.hpp"

namespace orgapipe {

struct TrackingConfig {
  double search_radius = 10.0;
  int memory = 0;
  bool fill_gaps = false;

  void validate() const;

  friend bool operator==(const TrackingConfig&, const TrackingConfig&) = default;
};

struct TrackEntry {
  int frame_index = 0;
  DetectionId detection_id = 0;
  bool synthetic = false;

  friend bool operator==(const TrackEntry&, const TrackEntry&) = default;
};

struct TrackAssignment {
  std::map<DetectionId, TrackId> track_of;
  std::map<TrackId, std::vector<TrackEntry>> tracks;

  friend bool operator==(const TrackAssignment&, const TrackAssignment&) = default;
};

/// Optimal one-to-one assignment for a rows x cols cost matrix with rows <= cols.
/// Returns the column chosen for each row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost);

/// Per-step objective minimised by `link`: squared displacement of every link plus
/// search_radius^2 for each active track left unmatched.
double link_step_cost(std::span<const Point> track_positions, std::span<const Point> detections,
                      std::span<const int> match, double search_radius);

/// Frame-to-frame linking. `frames[t]` holds the detections of frame t.
TrackAssignment link(const std::vector<std::vector<DetectionRecord>>& frames, const TrackingConfig& cfg);

/// Inserts a synthetic record for every interior frame a track is missing, copying the
/// most recent real bbox. Returns the new records; `assignment` gains the synthetic entries.
std::vector<DetectionRecord> fill_gaps(TrackAssignment& assignment,
                                       const std::vector<std::vector<DetectionRecord>>& frames,
                                       DetectionIdSource& ids);

}  // namespace orgapipe
