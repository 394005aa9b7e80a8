#include "orgapipe/segmentation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace orgapipe {

namespace {

double point_segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  if (len2 == 0.0) return distance(p, a);
  const double t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return distance(p, {a.x + t * dx, a.y + t * dy});
}

// Marks vertices to keep on the open chain poly[first..last] (indices modulo n).
void douglas_peucker(const Polygon& poly, std::size_t first, std::size_t last, double tolerance,
                     std::vector<bool>& keep) {
  const std::size_t n = poly.size();
  std::vector<std::pair<std::size_t, std::size_t>> stack{{first, last}};
  while (!stack.empty()) {
    const auto [a, b] = stack.back();
    stack.pop_back();
    const std::size_t span = (b + n - a) % n;
    if (span < 2) continue;
    double best = -1.0;
    std::size_t best_idx = a;
    for (std::size_t s = 1; s < span; ++s) {
      const std::size_t i = (a + s) % n;
      const double d = point_segment_distance(poly[i], poly[a], poly[b % n]);
      if (d > best) {
        best = d;
        best_idx = i;
      }
    }
    if (best > tolerance) {
      keep[best_idx] = true;
      stack.emplace_back(a, best_idx);
      stack.emplace_back(best_idx, b);
    }
  }
}

}  // namespace

BinaryMask classical_segment(const Frame& crop, const Rect& prompt) {
  BinaryMask out(crop.width, crop.height);
  if (crop.empty()) return out;
  const Frame lum = to_luminance(crop);
  const auto threshold = otsu_threshold(lum.pixels);
  if (!threshold) return out;

  const double cx = crop.width / 2.0;
  const double cy = crop.height / 2.0;
  double dist_high = 0.0, dist_low = 0.0;
  std::size_t n_high = 0, n_low = 0;
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) {
      const double d = distance({x + 0.5, y + 0.5}, {cx, cy});
      if (lum.at(x, y) > *threshold) {
        dist_high += d;
        ++n_high;
      } else {
        dist_low += d;
        ++n_low;
      }
    }
  const bool high_is_fg = n_low == 0 || (n_high > 0 && dist_high / n_high <= dist_low / n_low);

  BinaryMask fg(crop.width, crop.height);
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) fg.set(x, y, (lum.at(x, y) > *threshold) == high_is_fg);

  const Rect core{prompt.x_min + 0.25 * prompt.width(), prompt.y_min + 0.25 * prompt.height(),
                  prompt.x_max - 0.25 * prompt.width(), prompt.y_max - 0.25 * prompt.height()};
  const ComponentLabels cl = label_components(fg);
  std::vector<std::size_t> overlap(cl.components.size() + 1, 0);
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) {
      const int label = cl.labels[static_cast<std::size_t>(y) * crop.width + x];
      if (label && core.contains({x + 0.5, y + 0.5})) ++overlap[static_cast<std::size_t>(label)];
    }
  int best = 0;
  std::size_t best_overlap = 0;
  for (std::size_t l = 1; l < overlap.size(); ++l)
    if (overlap[l] > best_overlap) {
      best_overlap = overlap[l];
      best = static_cast<int>(l);
    }
  if (best == 0) return out;
  for (std::size_t i = 0; i < cl.labels.size(); ++i) out.data[i] = cl.labels[i] == best ? 1 : 0;
  return out;
}

namespace {

Polygon douglas_peucker_closed(const Polygon& poly, double tolerance) {
  const std::size_t n = poly.size();
  std::size_t far = 0;
  double far_d = -1.0;
  for (std::size_t i = 1; i < n; ++i) {
    const double d = distance(poly[0], poly[i]);
    if (d > far_d) {
      far_d = d;
      far = i;
    }
  }
  std::vector<bool> keep(n, false);
  keep[0] = true;
  keep[far] = true;
  douglas_peucker(poly, 0, far, tolerance, keep);
  douglas_peucker(poly, far, n, tolerance, keep);
  Polygon out;
  for (std::size_t i = 0; i < n; ++i)
    if (keep[i]) out.push_back(poly[i]);
  return out;
}

}  // namespace

Polygon midpoint_contour(const Polygon& crack) {
  const std::size_t n = crack.size();
  if (n < 3) return crack;
  Polygon mids;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = crack[i];
    const Point b = crack[(i + 1) % n];
    const int steps = static_cast<int>(std::lround(std::abs(b.x - a.x) + std::abs(b.y - a.y)));
    const double ux = steps ? (b.x - a.x) / steps : 0.0;
    const double uy = steps ? (b.y - a.y) / steps : 0.0;
    for (int k = 0; k < steps; ++k) mids.push_back({a.x + ux * (k + 0.5), a.y + uy * (k + 0.5)});
  }
  Polygon out;
  const std::size_t m = mids.size();
  for (std::size_t i = 0; i < m; ++i) {
    const Point& prev = mids[(i + m - 1) % m];
    const Point& cur = mids[i];
    const Point& next = mids[(i + 1) % m];
    const double cross = (cur.x - prev.x) * (next.y - cur.y) - (cur.y - prev.y) * (next.x - cur.x);
    if (cross != 0.0) out.push_back(cur);
  }
  return out.size() >= 3 ? out : mids;
}

Polygon simplify_polygon(const Polygon& poly, double tolerance) {
  if (tolerance <= 0.0 || poly.size() <= 3) return poly;
  const double before = std::abs(signed_area(poly));
  // Halve the tolerance until the area stays within 2%; small shapes keep more vertices.
  for (double t = tolerance; t >= tolerance / 16.0; t /= 2.0) {
    Polygon out = douglas_peucker_closed(poly, t);
    if (out.size() < 3) return poly;
    if (std::abs(std::abs(signed_area(out)) - before) <= 0.02 * before) return out;
  }
  return poly;
}

Rect padded_crop(const Rect& bbox, int frame_width, int frame_height, double fraction) {
  const double px = fraction * bbox.width();
  const double py = fraction * bbox.height();
  return {std::max(0.0, std::floor(bbox.x_min - px)), std::max(0.0, std::floor(bbox.y_min - py)),
          std::min(static_cast<double>(frame_width), std::ceil(bbox.x_max + px)),
          std::min(static_cast<double>(frame_height), std::ceil(bbox.y_max + py))};
}

SegmentationRun segment(std::span<const DetectionRecord> records, const ImageStack& primary,
                        std::span<const SignalChannel> channels, Segmenter& segmenter,
                        const SegmentOptions& options) {
  struct Source {
    std::string name;
    const ImageStack* stack;
  };
  std::vector<Source> sources{{kPrimaryChannel, &primary}};
  for (const auto& ch : channels) {
    if (ch.stack.height() != primary.height() || ch.stack.width() != primary.width() ||
        ch.stack.frame_count() != primary.frame_count())
      throw Error(ErrorKind::invalid_argument, "signal channel '" + ch.name + "' does not match the primary stack");
    sources.push_back({ch.name, &ch.stack});
  }

  struct Slot {
    std::optional<PolygonMask> mask;
    std::optional<SegmentIssue> issue;
  };
  const std::size_t total = records.size() * sources.size();
  std::vector<Slot> slots(total);

  auto run_one = [&](std::size_t k) {
    const DetectionRecord& rec = records[k / sources.size()];
    const Source& src = sources[k % sources.size()];
    Slot& slot = slots[k];
    if (rec.frame_index < 0 || static_cast<std::size_t>(rec.frame_index) >= src.stack->frame_count()) {
      slot.issue = SegmentIssue{rec.detection_id, src.name, "frame index out of range", true};
      return;
    }
    const Frame& frame = src.stack->frames[static_cast<std::size_t>(rec.frame_index)];
    const Rect box = padded_crop(rec.bbox, frame.width, frame.height, options.padding_fraction);
    if (!box.valid()) {
      slot.issue = SegmentIssue{rec.detection_id, src.name, "empty crop", false};
      return;
    }
    const int x0 = static_cast<int>(box.x_min), y0 = static_cast<int>(box.y_min);
    const Frame crop = frame.crop(x0, y0, static_cast<int>(box.x_max), static_cast<int>(box.y_max));
    try {
      const BinaryMask m = segmenter.segment(crop, rec.bbox.translated(-x0, -y0));
      if (m.width != crop.width || m.height != crop.height || m.data.size() != crop.pixels.size() / crop.channels)
        throw Error(ErrorKind::protocol, "segmenter returned a mask of the wrong shape");
      if (m.empty()) {
        slot.issue = SegmentIssue{rec.detection_id, src.name, "empty mask", false};
        return;
      }
      BinaryMask placed = m;
      placed.x0 = x0;
      placed.y0 = y0;
      PolygonMask pm;
      pm.detection_id = rec.detection_id;
      pm.frame_index = rec.frame_index;
      pm.channel_name = src.name;
      pm.vertices = simplify_polygon(midpoint_contour(trace_contour(placed)), options.simplify_tolerance);
      slot.mask = std::move(pm);
    } catch (const std::exception& e) {
      slot.issue = SegmentIssue{rec.detection_id, src.name, e.what(), true};
    }
  };

  const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(total)));
  if (threads == 1) {
    for (std::size_t k = 0; k < total; ++k) run_one(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < total; k = next++) run_one(k);
      });
    for (auto& th : pool) th.join();
  }

  SegmentationRun run;
  for (auto& s : slots) {
    if (s.mask) run.masks.push_back(std::move(*s.mask));
    if (s.issue) run.issues.push_back(std::move(*s.issue));
  }
  return run;
}

}  // namespace orgapipe
