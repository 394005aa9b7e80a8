#include "orgapipe/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace orgapipe {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Components up to this many tracks get exact lexicographic tie-breaking.
constexpr std::size_t kTieBreakLimit = 24;

double assignment_cost(const std::vector<std::vector<double>>& cost, const std::vector<int>& cols) {
  double total = 0.0;
  for (std::size_t r = 0; r < cols.size(); ++r) total += cost[r][static_cast<std::size_t>(cols[r])];
  return total;
}

bool nearly_equal(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

struct ActiveTrack {
  TrackId id = 0;
  Point position;
  int last_frame = 0;
};

// Links one connected group of tracks and detections. Returns, per track, the detection
// index (into `dets`) or -1. Among optimal matchings picks the lexicographically smallest
// (track id, detection id) sequence, treating "unmatched" as larger than any detection.
std::vector<int> solve_group(const std::vector<const ActiveTrack*>& tracks, const std::vector<const DetectionRecord*>& dets,
                             double radius) {
  const std::size_t k = tracks.size();
  const std::size_t n = dets.size();
  const double r2 = radius * radius;
  std::vector<std::vector<double>> cost(k, std::vector<double>(n + k, r2));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d2 = squared_distance(tracks[i]->position, dets[j]->bbox.center());
      cost[i][j] = d2 <= r2 ? d2 : kInf;
    }

  std::vector<int> cols = solve_assignment(cost);
  if (k <= kTieBreakLimit) {
    const double optimum = assignment_cost(cost, cols);
    std::vector<int> chosen(k, -1);
    std::vector<bool> used(n + k, false);
    double fixed_cost = 0.0;
    for (std::size_t row = 0; row < k; ++row) {
      // Candidates in order: detections by id (dets are id-sorted), then the first free dummy.
      std::vector<std::size_t> candidates;
      for (std::size_t j = 0; j < n; ++j)
        if (!used[j] && cost[row][j] < kInf) candidates.push_back(j);
      for (std::size_t j = n; j < n + k; ++j)
        if (!used[j]) {
          candidates.push_back(j);
          break;
        }
      for (std::size_t c : candidates) {
        // Optimal completion of the remaining rows over the remaining columns.
        std::vector<std::size_t> free_cols;
        for (std::size_t j = 0; j < n + k; ++j)
          if (!used[j] && j != c) free_cols.push_back(j);
        std::vector<std::vector<double>> sub;
        for (std::size_t r = row + 1; r < k; ++r) {
          std::vector<double> line;
          line.reserve(free_cols.size());
          for (std::size_t j : free_cols) line.push_back(cost[r][j]);
          sub.push_back(std::move(line));
        }
        double rest = 0.0;
        if (!sub.empty()) rest = assignment_cost(sub, solve_assignment(sub));
        if (nearly_equal(fixed_cost + cost[row][c] + rest, optimum)) {
          chosen[row] = static_cast<int>(c);
          used[c] = true;
          fixed_cost += cost[row][c];
          break;
        }
      }
    }
    cols = chosen;
  }

  std::vector<int> match(k, -1);
  for (std::size_t i = 0; i < k; ++i)
    if (cols[i] >= 0 && static_cast<std::size_t>(cols[i]) < n) match[i] = cols[i];
  return match;
}

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

void TrackingConfig::validate() const {
  if (!(search_radius > 0.0)) throw Error(ErrorKind::invalid_argument, "search_radius must be > 0");
  if (memory < 0) throw Error(ErrorKind::invalid_argument, "memory must be >= 0");
}

std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  if (rows == 0) return {};
  const std::size_t cols = cost.front().size();
  if (cols < rows) throw Error(ErrorKind::invalid_argument, "assignment needs rows <= cols");

  // Shortest augmenting path formulation with potentials; 1-based internally.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, kInf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      if (j1 == 0 || delta == kInf) throw Error(ErrorKind::invalid_argument, "assignment problem is infeasible");
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> result(rows, -1);
  for (std::size_t j = 1; j <= cols; ++j)
    if (p[j] != 0) result[p[j] - 1] = static_cast<int>(j - 1);
  return result;
}

double link_step_cost(std::span<const Point> track_positions, std::span<const Point> detections,
                      std::span<const int> match, double search_radius) {
  double total = 0.0;
  for (std::size_t i = 0; i < track_positions.size(); ++i) {
    if (match[i] < 0) total += search_radius * search_radius;
    else total += squared_distance(track_positions[i], detections[static_cast<std::size_t>(match[i])]);
  }
  return total;
}

TrackAssignment link(const std::vector<std::vector<DetectionRecord>>& frames, const TrackingConfig& cfg) {
  cfg.validate();
  TrackAssignment out;
  std::vector<ActiveTrack> active;
  TrackId next_track = 1;

  auto start_track = [&](const DetectionRecord& d, int frame) {
    const TrackId id = next_track++;
    out.track_of[d.detection_id] = id;
    out.tracks[id].push_back({frame, d.detection_id, false});
    active.push_back({id, d.bbox.center(), frame});
  };

  for (std::size_t t = 0; t < frames.size(); ++t) {
    const int frame = static_cast<int>(t);
    std::vector<const DetectionRecord*> dets;
    for (const auto& d : frames[t]) dets.push_back(&d);
    std::sort(dets.begin(), dets.end(),
              [](const DetectionRecord* a, const DetectionRecord* b) { return a->detection_id < b->detection_id; });

    // Close tracks that have been missing for more than `memory` frames.
    std::erase_if(active, [&](const ActiveTrack& a) { return frame - a.last_frame - 1 > cfg.memory; });
    std::sort(active.begin(), active.end(), [](const ActiveTrack& a, const ActiveTrack& b) { return a.id < b.id; });

    const std::size_t k = active.size();
    const std::size_t n = dets.size();
    const double r2 = cfg.search_radius * cfg.search_radius;
    DisjointSet groups(k + n);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (squared_distance(active[i].position, dets[j]->bbox.center()) <= r2) groups.unite(i, k + j);

    std::vector<int> det_track(n, -1);
    std::map<std::size_t, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> members;
    for (std::size_t i = 0; i < k; ++i) members[groups.find(i)].first.push_back(i);
    for (std::size_t j = 0; j < n; ++j) members[groups.find(k + j)].second.push_back(j);
    for (const auto& [root, group] : members) {
      const auto& [track_idx, det_idx] = group;
      if (track_idx.empty() || det_idx.empty()) continue;
      std::vector<const ActiveTrack*> gt;
      std::vector<const DetectionRecord*> gd;
      for (std::size_t i : track_idx) gt.push_back(&active[i]);
      for (std::size_t j : det_idx) gd.push_back(dets[j]);
      const std::vector<int> match = solve_group(gt, gd, cfg.search_radius);
      for (std::size_t a = 0; a < match.size(); ++a)
        if (match[a] >= 0) det_track[det_idx[static_cast<std::size_t>(match[a])]] = static_cast<int>(track_idx[a]);
    }

    for (std::size_t j = 0; j < n; ++j) {
      if (det_track[j] < 0) continue;
      ActiveTrack& tr = active[static_cast<std::size_t>(det_track[j])];
      out.track_of[dets[j]->detection_id] = tr.id;
      out.tracks[tr.id].push_back({frame, dets[j]->detection_id, false});
      tr.position = dets[j]->bbox.center();
      tr.last_frame = frame;
    }
    for (std::size_t j = 0; j < n; ++j)
      if (det_track[j] < 0) start_track(*dets[j], frame);
  }
  return out;
}

std::vector<DetectionRecord> fill_gaps(TrackAssignment& assignment,
                                       const std::vector<std::vector<DetectionRecord>>& frames,
                                       DetectionIdSource& ids) {
  std::unordered_map<DetectionId, const DetectionRecord*> by_id;
  for (const auto& frame : frames)
    for (const auto& d : frame) by_id[d.detection_id] = &d;

  std::vector<DetectionRecord> created;
  for (auto& [track, entries] : assignment.tracks) {
    std::vector<TrackEntry> filled;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i > 0) {
        const TrackEntry prev = filled.back();
        const auto src_it = by_id.find(prev.detection_id);
        for (int f = prev.frame_index + 1; f < entries[i].frame_index && src_it != by_id.end(); ++f) {
          DetectionRecord rec = *src_it->second;
          rec.detection_id = ids.take();
          rec.frame_index = f;
          rec.provenance = Provenance::gap_fill;
          rec.track_id = track;
          created.push_back(rec);
          assignment.track_of[rec.detection_id] = track;
          filled.push_back({f, rec.detection_id, true});
        }
      }
      filled.push_back(entries[i]);
    }
    entries = std::move(filled);
  }
  return created;
}

}  // namespace orgapipe
