#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "orgapipe/geometry.hpp"

namespace orgapipe {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
std::string to_hex(const Digest& digest);
/// Parses a 64-character lowercase or uppercase hex string.
std::optional<Digest> digest_from_hex(std::string_view hex);

/// One image plane set. Pixels are row-major, channel-interleaved and normalized to [0, 1].
struct Frame {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> pixels;
  int original_bit_depth = 8;

  Frame() = default;
  Frame(int h, int w, int c, int bit_depth = 8)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, 0.0),
        original_bit_depth(bit_depth) {}

  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
  double& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }

  /// Rec. 601 luma for colour frames; alpha is ignored. Identity for one channel.
  double luminance(int x, int y) const;

  bool empty() const { return height <= 0 || width <= 0; }

  /// Copies the integer pixel region [x0, x1) x [y0, y1); the region must lie inside the frame.
  Frame crop(int x0, int y0, int x1, int y1) const;

  friend bool operator==(const Frame&, const Frame&) = default;
};

/// Single-channel luminance copy of a frame.
Frame to_luminance(const Frame& frame);

struct ImageStack {
  std::vector<Frame> frames;
  std::optional<double> pixel_scale;  // physical units per pixel
  std::string source_path;
  Digest content_hash{};

  int height() const { return frames.empty() ? 0 : frames.front().height; }
  int width() const { return frames.empty() ? 0 : frames.front().width; }
  int channels() const { return frames.empty() ? 0 : frames.front().channels; }
  std::size_t frame_count() const { return frames.size(); }
  friend bool operator==(const ImageStack&, const ImageStack&) = default;
};

struct SignalChannel {
  std::string name;
  ImageStack stack;
  friend bool operator==(const SignalChannel&, const SignalChannel&) = default;
};

enum class LayoutHint { automatic, grayscale };

/// Builds a stack from decoded frames, checks uniform shape and computes the content hash.
ImageStack make_stack(std::vector<Frame> frames, std::string source_path = {});

/// Loads PNG or TIFF (single or multi-page, 8/16-bit) into normalized frames.
ImageStack load_stack(const std::filesystem::path& path, LayoutHint hint = LayoutHint::automatic);

/// Writes every frame as one TIFF page at the frame's original bit depth.
void save_tiff(const ImageStack& stack, const std::filesystem::path& path);
void save_png(const Frame& frame, const std::filesystem::path& path);

/// SHA-256 over (frames, height, width, channels, bit depth as u32 LE) followed by raw sample bytes.
Digest content_hash(const ImageStack& stack);

/// Throws unless `roi` is a non-empty integer rect inside a width x height frame.
void validate_roi(const Rect& roi, int width, int height);

/// Binary raster with an origin in image coordinates; data is row-major, 0 or 1.
struct BinaryMask {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int w, int h, int ox = 0, int oy = 0)
      : x0(ox), y0(oy), width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  bool get(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v = true) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  /// Local-coordinate lookup that returns false outside the raster.
  bool test(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height && get(x, y); }
  std::size_t count() const;
  bool empty() const { return count() == 0; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct Component {
  int label = 0;  // 1-based
  std::size_t area = 0;
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // half-open, mask-local
};

struct ComponentLabels {
  std::vector<int> labels;  // 0 = background, otherwise component label
  std::vector<Component> components;
};

/// 8-connected labelling in raster-scan order of each component's first pixel.
ComponentLabels label_components(const BinaryMask& mask);

/// Otsu threshold over values in [0, 1] using a 256-bin histogram; nullopt if all values are equal.
std::optional<double> otsu_threshold(std::span<const double> values);

/// Pixel-centre, even-odd fill of `poly` over the integer pixel rect `bounds`.
BinaryMask rasterize_polygon(const Polygon& poly, const Rect& bounds);

/// Outer boundary of the largest 8-connected component along pixel edges, counter-clockwise
/// (positive shoelace area), in image coordinates. Holes are not represented.
Polygon trace_contour(const BinaryMask& mask);

/// Block-mean pooling; output dims are ceil(dim / rate).
Frame downsample(const Frame& frame, int rate);
ImageStack downsample(const ImageStack& stack, int rate);

}  // namespace orgapipe
