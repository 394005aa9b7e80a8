#include "orgapipe/detection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace orgapipe {

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::model: return "model";
    case Provenance::manual: return "manual";
    case Provenance::gap_fill: return "gap_fill";
  }
  return "model";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "model") return Provenance::model;
  if (s == "manual") return Provenance::manual;
  if (s == "gap_fill") return Provenance::gap_fill;
  throw Error(ErrorKind::invalid_argument, "unknown provenance '" + std::string(s) + "'");
}

void TilingConfig::validate() const {
  if (window_size < 16) throw Error(ErrorKind::invalid_argument, "window_size must be >= 16");
  if (downsampling_rates.empty()) throw Error(ErrorKind::invalid_argument, "downsampling_rates must not be empty");
  for (int r : downsampling_rates)
    if (r < 1) throw Error(ErrorKind::invalid_argument, "downsampling rates must be >= 1");
}

void NmsConfig::validate() const {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw Error(ErrorKind::invalid_argument, "iou_threshold must lie in (0, 1]");
}

void FilterConfig::validate() const {
  if (!(min_confidence >= 0.0 && min_confidence <= 1.0))
    throw Error(ErrorKind::invalid_argument, "min_confidence must lie in [0, 1]");
  if (!(min_diameter >= 0.0)) throw Error(ErrorKind::invalid_argument, "min_diameter must be >= 0");
}

std::vector<int> tile_positions(int extent, int window) {
  if (extent < 1 || window < 1) throw Error(ErrorKind::invalid_argument, "extent and window must be >= 1");
  if (window >= extent) return {0};
  // window 1 would give a zero stride; step by one pixel instead.
  const int stride = std::max(1, window / 2);
  std::vector<int> origins;
  for (int origin = 0; origin + window < extent; origin += stride) origins.push_back(origin);
  const int last = std::max(0, extent - window);
  if (origins.empty() || origins.back() != last) origins.push_back(last);
  return origins;
}

double iou(const Rect& a, const Rect& b) {
  const double inter = intersect(a, b).area();
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, const NmsConfig& cfg) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].confidence > boxes[b].confidence; });
  std::vector<bool> suppressed(boxes.size(), false);
  std::vector<std::size_t> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i].rect, boxes[j].rect) > cfg.iou_threshold) suppressed[j] = true;
    }
  }
  return kept;
}

std::vector<ScoredBox> classical_detect(const Frame& tile) {
  if (tile.empty()) return {};
  const Frame lum = to_luminance(tile);
  const auto threshold = otsu_threshold(lum.pixels);
  if (!threshold) return {};

  std::size_t high = 0;
  for (double v : lum.pixels)
    if (v > *threshold) ++high;
  const std::size_t total = lum.pixels.size();
  // Minority class is foreground; an exact split keeps the bright class.
  const bool bright_foreground = high * 2 <= total;

  BinaryMask mask(lum.width, lum.height);
  for (int y = 0; y < lum.height; ++y)
    for (int x = 0; x < lum.width; ++x) {
      const bool is_high = lum.at(x, y) > *threshold;
      mask.set(x, y, is_high == bright_foreground);
    }

  constexpr std::size_t kMinArea = 25;
  const double quarter_tile = 0.25 * static_cast<double>(total);
  std::vector<ScoredBox> out;
  for (const Component& c : label_components(mask).components) {
    if (c.area < kMinArea) continue;
    ScoredBox box;
    box.rect = {static_cast<double>(c.x_min), static_cast<double>(c.y_min), static_cast<double>(c.x_max),
                static_cast<double>(c.y_max)};
    box.confidence = std::clamp(static_cast<double>(c.area) / quarter_tile, 0.0, 1.0);
    out.push_back(box);
  }
  return out;
}

namespace {

struct TileTask {
  int rate = 1;
  std::size_t tile_index = 0;
  const Frame* source = nullptr;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // in the downsampled frame
};

struct TileOutcome {
  std::vector<ScoredBox> boxes;
  std::optional<TileError> error;
};

}  // namespace

DetectionRun detect_frame(const Frame& frame, int frame_index, Detector& detector, const DetectOptions& options,
                          DetectionIdSource& ids) {
  if (frame.empty()) throw Error(ErrorKind::invalid_argument, "cannot detect on an empty image");
  options.tiling.validate();
  options.nms.validate();
  if (options.roi) validate_roi(*options.roi, frame.width, frame.height);

  std::vector<Frame> scaled;
  scaled.reserve(options.tiling.downsampling_rates.size());
  for (int rate : options.tiling.downsampling_rates) scaled.push_back(downsample(frame, rate));

  std::vector<TileTask> tasks;
  for (std::size_t s = 0; s < scaled.size(); ++s) {
    const Frame& f = scaled[s];
    const int window = options.tiling.window_size;
    std::size_t tile_index = 0;
    for (int oy : tile_positions(f.height, window)) {
      for (int ox : tile_positions(f.width, window)) {
        TileTask t;
        t.rate = options.tiling.downsampling_rates[s];
        t.tile_index = tile_index++;
        t.source = &f;
        t.x0 = ox;
        t.y0 = oy;
        t.x1 = std::min(f.width, ox + window);
        t.y1 = std::min(f.height, oy + window);
        tasks.push_back(t);
      }
    }
  }

  std::vector<TileOutcome> outcomes(tasks.size());
  auto run_task = [&](std::size_t i) {
    const TileTask& t = tasks[i];
    try {
      outcomes[i].boxes = detector.detect(t.source->crop(t.x0, t.y0, t.x1, t.y1));
    } catch (const Error& e) {
      outcomes[i].error = TileError{t.rate, t.tile_index,
                                    Rect{static_cast<double>(t.x0), static_cast<double>(t.y0),
                                         static_cast<double>(t.x1), static_cast<double>(t.y1)}
                                        .scaled(t.rate),
                                    e.kind(), e.what()};
    } catch (const std::exception& e) {
      outcomes[i].error = TileError{t.rate, t.tile_index,
                                    Rect{static_cast<double>(t.x0), static_cast<double>(t.y0),
                                         static_cast<double>(t.x1), static_cast<double>(t.y1)}
                                        .scaled(t.rate),
                                    ErrorKind::transport, e.what()};
    }
  };

  const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(tasks.size())));
  if (threads == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) run_task(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) run_task(i);
      });
    for (auto& th : pool) th.join();
  }

  // Pool in (rate, tile, within-tile) order so NMS input is schedule independent.
  DetectionRun run;
  std::vector<ScoredBox> pooled;
  const Rect frame_rect{0.0, 0.0, static_cast<double>(frame.width), static_cast<double>(frame.height)};
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (outcomes[i].error) {
      run.tile_errors.push_back(*outcomes[i].error);
      continue;
    }
    const TileTask& t = tasks[i];
    for (const ScoredBox& b : outcomes[i].boxes) {
      ScoredBox mapped = b;
      mapped.rect = intersect(b.rect.translated(t.x0, t.y0).scaled(t.rate), frame_rect);
      if (!mapped.rect.valid()) continue;
      pooled.push_back(mapped);
    }
  }
  run.pooled_boxes = pooled.size();

  for (std::size_t idx : nms(pooled, options.nms)) {
    const ScoredBox& b = pooled[idx];
    if (options.roi && !options.roi->contains(b.rect.center())) continue;
    DetectionRecord r;
    r.detection_id = ids.take();
    r.frame_index = frame_index;
    r.bbox = b.rect;
    r.confidence = b.confidence;
    r.provenance = Provenance::model;
    run.records.push_back(r);
  }
  return run;
}

std::vector<DetectionRecord> filter_detections(std::span<const DetectionRecord> records, const FilterConfig& cfg) {
  std::vector<DetectionRecord> out;
  for (const auto& r : records)
    if (cfg.accepts(r)) out.push_back(r);
  return out;
}

}  // namespace orgapipe
