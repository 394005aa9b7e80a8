#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "orgapipe/detection.hpp"
#include "orgapipe/imaging.hpp"
#include "orgapipe/segmentation.hpp"

namespace orgapipe {

enum class ColumnKind { geometric, intensity, regionprops, annotation, predicted };

std::string_view to_string(ColumnKind kind);
ColumnKind column_kind_from_string(std::string_view s);

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::geometric;
  std::string channel;              // intensity / regionprops columns
  std::vector<std::string> labels;  // predicted class columns: value i means labels[i]

  friend bool operator==(const Column&, const Column&) = default;
};

/// Per-detection numeric features with an ordered column registry. Absent cells are simply missing.
class FeatureTable {
 public:
  /// Registers the column; an existing column of that name is replaced in place.
  /// Rows with no cells left are removed by the erase operations.
  void ensure_column(const Column& column);
  void set(DetectionId id, const std::string& column, double value);
  void erase(DetectionId id, const std::string& column);
  void erase_row(DetectionId id);
  /// Drops the given kinds of cells for one row.
  void erase_kinds(DetectionId id, std::initializer_list<ColumnKind> kinds);

  std::optional<double> get(DetectionId id, const std::string& column) const;
  const Column* column(const std::string& name) const;
  const std::vector<Column>& columns() const { return columns_; }
  const std::map<DetectionId, std::map<std::string, double>>& rows() const { return rows_; }

  void add_flag(DetectionId id, const std::string& flag) { flags_[id].insert(flag); }
  const std::map<DetectionId, std::set<std::string>>& flags() const { return flags_; }
  void clear_flags(DetectionId id) { flags_.erase(id); }

  friend bool operator==(const FeatureTable&, const FeatureTable&) = default;

 private:
  std::vector<Column> columns_;
  std::map<DetectionId, std::map<std::string, double>> rows_;
  std::map<DetectionId, std::set<std::string>> flags_;
};

struct GeometricFeatures {
  double area = 0.0;
  double perimeter = 0.0;
  double roundness = 0.0;
};

struct IntensityFeatures {
  double mean = 0.0;
  double total = 0.0;
  double min = 0.0;
  double max = 0.0;
  double std = 0.0;
};

struct MomentSet {
  double m00 = 0.0;
  double centroid_x = 0.0;
  double centroid_y = 0.0;
  double mu20 = 0.0;
  double mu02 = 0.0;
  double mu11 = 0.0;
};

struct RegionProps {
  double eccentricity = 0.0;
  double solidity = 0.0;
  double extent = 0.0;
  double major_axis_length = 0.0;
  double minor_axis_length = 0.0;
  double orientation = 0.0;
};

/// Raster of the polygon over its own integer bounding box.
BinaryMask rasterize_mask(const Polygon& poly);

/// Area from the pixel-centre raster, perimeter from arc length, roundness = 4*pi*A/P^2 clamped to [0, 1].
GeometricFeatures geometric_features(const Polygon& poly, std::optional<double> pixel_scale = std::nullopt);

/// Statistics of the channel's luminance over pixels whose centres lie inside the polygon.
IntensityFeatures intensity_features(const Polygon& poly, const Frame& channel);

/// Moments of the foreground pixels; pixel coordinates are the pixel centres in image space.
MomentSet moments(const BinaryMask& mask);
RegionProps regionprops_features(const BinaryMask& mask);
RegionProps regionprops_features(const Polygon& poly);

/// Area of the convex hull of a point set (monotone chain).
double convex_hull_area(std::vector<Point> points);

double ruler_length(std::span<const Point> polyline, std::optional<double> pixel_scale = std::nullopt);

/// Fills geometric, intensity and regionprops columns for every record; recomputation
/// overwrites earlier values of the same columns. Per-record failures leave cells absent.
void compute_all(std::span<const DetectionRecord> records, const MaskMap& masks, const ImageStack& primary,
                 std::span<const SignalChannel> channels, FeatureTable& table);

}  // namespace orgapipe
