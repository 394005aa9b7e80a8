#include "orgapipe/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace orgapipe {

std::string_view to_string(ColumnKind kind) {
  switch (kind) {
    case ColumnKind::geometric: return "geometric";
    case ColumnKind::intensity: return "intensity";
    case ColumnKind::regionprops: return "regionprops";
    case ColumnKind::annotation: return "annotation";
    case ColumnKind::predicted: return "predicted";
  }
  return "geometric";
}

ColumnKind column_kind_from_string(std::string_view s) {
  if (s == "geometric") return ColumnKind::geometric;
  if (s == "intensity") return ColumnKind::intensity;
  if (s == "regionprops") return ColumnKind::regionprops;
  if (s == "annotation") return ColumnKind::annotation;
  if (s == "predicted") return ColumnKind::predicted;
  throw Error(ErrorKind::invalid_argument, "unknown column kind '" + std::string(s) + "'");
}

void FeatureTable::ensure_column(const Column& column) {
  for (auto& c : columns_) {
    if (c.name == column.name) {
      c = column;
      return;
    }
  }
  columns_.push_back(column);
}

void FeatureTable::set(DetectionId id, const std::string& column, double value) {
  if (!this->column(column)) throw Error(ErrorKind::invalid_argument, "unregistered feature column '" + column + "'");
  rows_[id][column] = value;
}

void FeatureTable::erase(DetectionId id, const std::string& column) {
  auto it = rows_.find(id);
  if (it == rows_.end()) return;
  it->second.erase(column);
  if (it->second.empty()) rows_.erase(it);
}

void FeatureTable::erase_row(DetectionId id) {
  rows_.erase(id);
  flags_.erase(id);
}

void FeatureTable::erase_kinds(DetectionId id, std::initializer_list<ColumnKind> kinds) {
  auto it = rows_.find(id);
  if (it == rows_.end()) return;
  std::erase_if(it->second, [&](const auto& cell) {
    const Column* c = column(cell.first);
    return c && std::find(kinds.begin(), kinds.end(), c->kind) != kinds.end();
  });
  if (it->second.empty()) rows_.erase(it);
}

std::optional<double> FeatureTable::get(DetectionId id, const std::string& column) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) return std::nullopt;
  auto jt = it->second.find(column);
  if (jt == it->second.end()) return std::nullopt;
  return jt->second;
}

const Column* FeatureTable::column(const std::string& name) const {
  for (const auto& c : columns_)
    if (c.name == name) return &c;
  return nullptr;
}

BinaryMask rasterize_mask(const Polygon& poly) {
  if (poly.size() < 3) throw Error(ErrorKind::invalid_argument, "polygon needs at least 3 vertices");
  double x0 = poly[0].x, x1 = poly[0].x, y0 = poly[0].y, y1 = poly[0].y;
  for (const Point& p : poly) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return rasterize_polygon(poly, {std::floor(x0), std::floor(y0), std::ceil(x1), std::ceil(y1)});
}

GeometricFeatures geometric_features(const Polygon& poly, std::optional<double> pixel_scale) {
  const BinaryMask mask = rasterize_mask(poly);
  const double s = pixel_scale.value_or(1.0);
  GeometricFeatures g;
  g.area = static_cast<double>(mask.count()) * s * s;
  g.perimeter = arc_length(poly) * s;
  if (g.area <= 0.0 || g.perimeter <= 0.0) throw Error(ErrorKind::invalid_argument, "degenerate polygon");
  g.roundness = std::clamp(4.0 * std::numbers::pi * g.area / (g.perimeter * g.perimeter), 0.0, 1.0);
  return g;
}

IntensityFeatures intensity_features(const Polygon& poly, const Frame& channel) {
  const BinaryMask mask = rasterize_mask(poly);
  std::vector<double> values;
  for (int y = 0; y < mask.height; ++y) {
    const int iy = y + mask.y0;
    if (iy < 0 || iy >= channel.height) continue;
    for (int x = 0; x < mask.width; ++x) {
      const int ix = x + mask.x0;
      if (ix < 0 || ix >= channel.width || !mask.get(x, y)) continue;
      values.push_back(channel.luminance(ix, iy));
    }
  }
  if (values.empty()) throw Error(ErrorKind::invalid_argument, "mask covers no pixels of the channel");
  IntensityFeatures f;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  f.min = *lo;
  f.max = *hi;
  for (double v : values) f.total += v;
  const double n = static_cast<double>(values.size());
  f.mean = f.total / n;
  // Two passes: the variance is accumulated around the mean.
  double ss = 0.0;
  for (double v : values) ss += (v - f.mean) * (v - f.mean);
  f.std = std::sqrt(ss / n);
  return f;
}

MomentSet moments(const BinaryMask& mask) {
  // Raw moments in mask-local integer coordinates, shifted to image-space pixel centres at the end.
  double m00 = 0, m10 = 0, m01 = 0, m20 = 0, m02 = 0, m11 = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.get(x, y)) continue;
      const double fx = x, fy = y;
      m00 += 1.0;
      m10 += fx;
      m01 += fy;
      m20 += fx * fx;
      m02 += fy * fy;
      m11 += fx * fy;
    }
  if (m00 == 0.0) throw Error(ErrorKind::invalid_argument, "moments of an empty mask");
  MomentSet m;
  m.m00 = m00;
  m.centroid_x = mask.x0 + 0.5 + m10 / m00;
  m.centroid_y = mask.y0 + 0.5 + m01 / m00;
  m.mu20 = std::max(0.0, m20 - m10 * m10 / m00);
  m.mu02 = std::max(0.0, m02 - m01 * m01 / m00);
  m.mu11 = m11 - m10 * m01 / m00;
  return m;
}

double convex_hull_area(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(), [](Point a, Point b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return 0.0;
  auto cross = [](Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); };
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (const Point& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return std::abs(signed_area(hull));
}

RegionProps regionprops_features(const BinaryMask& mask) {
  const MomentSet m = moments(mask);
  const double a = m.mu20 / m.m00;
  const double c = m.mu02 / m.m00;
  const double b = m.mu11 / m.m00;
  const double mid = (a + c) / 2.0;
  const double radius = std::sqrt(((a - c) / 2.0) * ((a - c) / 2.0) + b * b);
  const double l1 = mid + radius;
  const double l2 = std::max(0.0, mid - radius);

  RegionProps r;
  r.major_axis_length = 4.0 * std::sqrt(l1);
  r.minor_axis_length = 4.0 * std::sqrt(l2);
  r.eccentricity = l1 > 0.0 ? std::sqrt(std::max(0.0, 1.0 - l2 / l1)) : 0.0;
  r.orientation = 0.5 * std::atan2(2.0 * m.mu11, m.mu20 - m.mu02);

  // Hull over pixel-square corners; the row extremes are enough.
  std::vector<Point> corners;
  int bx0 = mask.width, by0 = mask.height, bx1 = -1, by1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    int left = -1, right = -1;
    for (int x = 0; x < mask.width; ++x)
      if (mask.get(x, y)) {
        if (left < 0) left = x;
        right = x;
      }
    if (left < 0) continue;
    bx0 = std::min(bx0, left);
    bx1 = std::max(bx1, right);
    by0 = std::min(by0, y);
    by1 = std::max(by1, y);
    for (double cx : {static_cast<double>(left), static_cast<double>(right + 1)})
      for (double cy : {static_cast<double>(y), static_cast<double>(y + 1)}) corners.push_back({cx, cy});
  }
  const double hull = convex_hull_area(std::move(corners));
  r.solidity = hull > 0.0 ? m.m00 / hull : 0.0;
  r.extent = m.m00 / (static_cast<double>(bx1 - bx0 + 1) * static_cast<double>(by1 - by0 + 1));
  return r;
}

RegionProps regionprops_features(const Polygon& poly) { return regionprops_features(rasterize_mask(poly)); }

double ruler_length(std::span<const Point> polyline, std::optional<double> pixel_scale) {
  if (polyline.size() < 2) throw Error(ErrorKind::invalid_argument, "a ruler needs at least 2 points");
  double total = 0.0;
  for (std::size_t i = 1; i < polyline.size(); ++i) total += distance(polyline[i - 1], polyline[i]);
  return total * pixel_scale.value_or(1.0);
}

namespace {

constexpr const char* kIntensityNames[] = {"mean_intensity", "total_intensity", "min_intensity", "max_intensity",
                                           "std_intensity"};
constexpr const char* kRegionNames[] = {"eccentricity",      "solidity",          "extent",
                                        "major_axis_length", "minor_axis_length", "orientation"};

std::string col(const char* base, const std::string& channel) { return std::string(base) + ":" + channel; }

}  // namespace

void compute_all(std::span<const DetectionRecord> records, const MaskMap& masks, const ImageStack& primary,
                 std::span<const SignalChannel> channels, FeatureTable& table) {
  struct Source {
    std::string name;
    const ImageStack* stack;
  };
  std::vector<Source> sources{{kPrimaryChannel, &primary}};
  for (const auto& ch : channels) sources.push_back({ch.name, &ch.stack});

  for (const char* name : {"area", "perimeter", "roundness"}) table.ensure_column({name, ColumnKind::geometric, {}, {}});
  for (const auto& src : sources) {
    for (const char* name : kIntensityNames) table.ensure_column({col(name, src.name), ColumnKind::intensity, src.name, {}});
    for (const char* name : kRegionNames) table.ensure_column({col(name, src.name), ColumnKind::regionprops, src.name, {}});
  }

  for (const DetectionRecord& rec : records) {
    const DetectionId id = rec.detection_id;
    table.erase_kinds(id, {ColumnKind::geometric, ColumnKind::intensity, ColumnKind::regionprops});
    table.clear_flags(id);
    const auto primary_it = masks.find({id, kPrimaryChannel});
    const PolygonMask* primary_mask = primary_it == masks.end() ? nullptr : &primary_it->second;
    if (!primary_mask) {
      table.add_flag(id, "no_mask");
      continue;
    }
    try {
      const GeometricFeatures g = geometric_features(primary_mask->vertices, primary.pixel_scale);
      table.set(id, "area", g.area);
      table.set(id, "perimeter", g.perimeter);
      table.set(id, "roundness", g.roundness);
    } catch (const Error&) {
      table.add_flag(id, "geometric_failed");
    }

    for (const auto& src : sources) {
      const auto it = masks.find({id, src.name});
      const PolygonMask* mask = it == masks.end() ? nullptr : &it->second;
      if (!mask) {
        mask = primary_mask;
        table.add_flag(id, "fallback:" + src.name);
      }
      if (rec.frame_index < 0 || static_cast<std::size_t>(rec.frame_index) >= src.stack->frame_count()) continue;
      const Frame& frame = src.stack->frames[static_cast<std::size_t>(rec.frame_index)];
      try {
        const IntensityFeatures f = intensity_features(mask->vertices, frame);
        const double values[] = {f.mean, f.total, f.min, f.max, f.std};
        for (std::size_t i = 0; i < 5; ++i) table.set(id, col(kIntensityNames[i], src.name), values[i]);
        const RegionProps r = regionprops_features(mask->vertices);
        const double props[] = {r.eccentricity,      r.solidity,          r.extent,
                                r.major_axis_length, r.minor_axis_length, r.orientation};
        for (std::size_t i = 0; i < 6; ++i) table.set(id, col(kRegionNames[i], src.name), props[i]);
      } catch (const Error&) {
        table.add_flag(id, "features_failed:" + src.name);
      }
    }
  }
}

}  // namespace orgapipe
