#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace orgapipe {

/// A point in image coordinates: x = column, y = row, origin at the top-left corner.
struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Axis-aligned half-open rectangle [x_min, x_max) x [y_min, y_max) in pixels.
struct Rect {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  Point center() const { return {(x_min + x_max) / 2.0, (y_min + y_max) / 2.0}; }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  bool contains(Point p) const { return p.x >= x_min && p.x < x_max && p.y >= y_min && p.y < y_max; }

  /// True when the rect lies inside [0, width) x [0, height).
  bool within(double frame_width, double frame_height) const {
    return valid() && x_min >= 0.0 && y_min >= 0.0 && x_max <= frame_width && y_max <= frame_height;
  }

  Rect translated(double dx, double dy) const { return {x_min + dx, y_min + dy, x_max + dx, y_max + dy}; }
  Rect scaled(double s) const { return {x_min * s, y_min * s, x_max * s, y_max * s}; }

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline Rect intersect(const Rect& a, const Rect& b) {
  return {std::max(a.x_min, b.x_min), std::max(a.y_min, b.y_min), std::min(a.x_max, b.x_max),
          std::min(a.y_max, b.y_max)};
}

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline double squared_distance(Point a, Point b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return dx * dx + dy * dy;
}

/// Closed polygon; the closing edge from back() to front() is implicit.
using Polygon = std::vector<Point>;

/// Shoelace signed area. Positive for counter-clockwise vertex order in (x, y).
inline double signed_area(const Polygon& poly) {
  double acc = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % n];
    acc += a.x * b.y - b.x * a.y;
  }
  return acc / 2.0;
}

inline double arc_length(const Polygon& poly) {
  double acc = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) acc += distance(poly[i], poly[(i + 1) % n]);
  return acc;
}

}  // namespace orgapipe
