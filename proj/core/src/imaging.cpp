#include "orgapipe/imaging.hpp"

#include <openssl/sha.h>
#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "orgapipe/error.hpp"

namespace orgapipe {

namespace {

double max_code(int bit_depth) { return bit_depth == 16 ? 65535.0 : 255.0; }

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

// Appends normalized samples re-quantized to their original integer codes (u8 or u16 LE).
void append_raw_samples(std::vector<std::uint8_t>& out, const Frame& frame) {
  const double scale = max_code(frame.original_bit_depth);
  for (double v : frame.pixels) {
    const auto code = static_cast<std::uint32_t>(std::llround(std::clamp(v, 0.0, 1.0) * scale));
    out.push_back(static_cast<std::uint8_t>(code & 0xFF));
    if (frame.original_bit_depth == 16) out.push_back(static_cast<std::uint8_t>(code >> 8));
  }
}

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::array<unsigned char, 8> sig{};
  in.read(reinterpret_cast<char*>(sig.data()), sig.size());
  return in.gcount() == 8 && png_sig_cmp(sig.data(), 0, 8) == 0;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

Frame read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error(ErrorKind::io, "cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::io, "libpng initialisation failed");
  }
  Frame frame;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::format, "corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  const int depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(height));
  rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (channels != 1 && channels != 3 && channels != 4)
    throw Error(ErrorKind::format, "unsupported channel count " + std::to_string(channels) + " in " + path.string());
  if (depth != 8 && depth != 16) throw Error(ErrorKind::format, "unsupported PNG bit depth");

  frame = Frame(height, width, channels, depth);
  const double scale = max_code(depth);
  std::size_t k = 0;
  for (int y = 0; y < height; ++y) {
    const std::uint8_t* row = buffer.data() + stride * y;
    for (int i = 0; i < width * channels; ++i) {
      const unsigned code = depth == 8 ? row[i] : (static_cast<unsigned>(row[2 * i]) << 8) | row[2 * i + 1];
      frame.pixels[k++] = code / scale;
    }
  }
  return frame;
}

struct TiffCloser {
  void operator()(TIFF* t) const {
    if (t) TIFFClose(t);
  }
};

Frame read_tiff_page(TIFF* tif, const std::string& name) {
  std::uint32_t width = 0, height = 0;
  std::uint16_t spp = 1, bps = 8, planar = PLANARCONFIG_CONTIG, sample_format = SAMPLEFORMAT_UINT;
  TIFFGetField(tif, TIFFTAG_IMAGEWIDTH, &width);
  TIFFGetField(tif, TIFFTAG_IMAGELENGTH, &height);
  TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif, TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif, TIFFTAG_PLANARCONFIG, &planar);
  TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLEFORMAT, &sample_format);
  if (spp != 1 && spp != 3 && spp != 4)
    throw Error(ErrorKind::format, "unsupported channel count " + std::to_string(spp) + " in " + name);
  if (bps != 8 && bps != 16) throw Error(ErrorKind::format, "unsupported TIFF bit depth " + std::to_string(bps));
  if (sample_format != SAMPLEFORMAT_UINT) throw Error(ErrorKind::format, "only unsigned integer TIFF samples are supported");
  if (planar != PLANARCONFIG_CONTIG) throw Error(ErrorKind::format, "planar-separate TIFF is not supported");

  Frame frame(static_cast<int>(height), static_cast<int>(width), spp, bps);
  const double scale = max_code(bps);
  const std::size_t bytes_per_sample = bps / 8;
  const std::size_t samples_per_row = static_cast<std::size_t>(width) * spp;

  auto store_row = [&](const std::uint8_t* src, std::uint32_t y, std::uint32_t x_begin, std::uint32_t count) {
    for (std::uint32_t i = 0; i < count * spp; ++i) {
      unsigned code = 0;
      if (bytes_per_sample == 1) {
        code = src[i];
      } else {
        std::uint16_t v;
        std::memcpy(&v, src + 2 * i, 2);  // libtiff returns host byte order
        code = v;
      }
      frame.pixels[static_cast<std::size_t>(y) * samples_per_row + x_begin * spp + i] = code / scale;
    }
  };

  if (TIFFIsTiled(tif)) {
    std::uint32_t tw = 0, th = 0;
    TIFFGetField(tif, TIFFTAG_TILEWIDTH, &tw);
    TIFFGetField(tif, TIFFTAG_TILELENGTH, &th);
    std::vector<std::uint8_t> tile(static_cast<std::size_t>(TIFFTileSize(tif)));
    for (std::uint32_t ty = 0; ty < height; ty += th) {
      for (std::uint32_t tx = 0; tx < width; tx += tw) {
        if (TIFFReadTile(tif, tile.data(), tx, ty, 0, 0) < 0) throw Error(ErrorKind::format, "corrupt TIFF tile in " + name);
        const std::uint32_t cols = std::min(tw, width - tx);
        for (std::uint32_t r = 0; r < th && ty + r < height; ++r)
          store_row(tile.data() + static_cast<std::size_t>(r) * tw * spp * bytes_per_sample, ty + r, tx, cols);
      }
    }
  } else {
    std::vector<std::uint8_t> line(static_cast<std::size_t>(TIFFScanlineSize(tif)));
    for (std::uint32_t y = 0; y < height; ++y) {
      if (TIFFReadScanline(tif, line.data(), y, 0) < 0) throw Error(ErrorKind::format, "corrupt TIFF scanline in " + name);
      store_row(line.data(), y, 0, width);
    }
  }
  return frame;
}

std::vector<Frame> read_tiff(const std::filesystem::path& path) {
  TIFFSetWarningHandler(nullptr);
  TIFFSetErrorHandler(nullptr);
  std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw Error(ErrorKind::io, "cannot read " + path.string() + " as PNG or TIFF");
  std::vector<Frame> frames;
  do {
    frames.push_back(read_tiff_page(tif.get(), path.string()));
  } while (TIFFReadDirectory(tif.get()));
  return frames;
}

}  // namespace

Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest out{};
  SHA256(bytes.data(), bytes.size(), out.data());
  return out;
}

std::string to_hex(const Digest& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : digest) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xF]);
  }
  return s;
}

std::optional<Digest> digest_from_hex(std::string_view hex) {
  if (hex.size() != 64) return std::nullopt;
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  Digest d{};
  for (std::size_t i = 0; i < 32; ++i) {
    const int hi = nibble(hex[2 * i]);
    const int lo = nibble(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    d[i] = static_cast<std::uint8_t>(hi * 16 + lo);
  }
  return d;
}

double Frame::luminance(int x, int y) const {
  if (channels == 1) return at(x, y);
  return 0.299 * at(x, y, 0) + 0.587 * at(x, y, 1) + 0.114 * at(x, y, 2);
}

Frame Frame::crop(int cx0, int cy0, int cx1, int cy1) const {
  if (cx0 < 0 || cy0 < 0 || cx1 > width || cy1 > height || cx0 >= cx1 || cy0 >= cy1)
    throw Error(ErrorKind::invalid_argument, "crop region outside frame");
  Frame out(cy1 - cy0, cx1 - cx0, channels, original_bit_depth);
  for (int y = cy0; y < cy1; ++y) {
    const auto src = pixels.begin() + static_cast<std::ptrdiff_t>(index(cx0, y));
    std::copy(src, src + static_cast<std::ptrdiff_t>(out.width) * channels,
              out.pixels.begin() + static_cast<std::ptrdiff_t>(out.index(0, y - cy0)));
  }
  return out;
}

Frame to_luminance(const Frame& frame) {
  if (frame.channels == 1) return frame;
  Frame out(frame.height, frame.width, 1, frame.original_bit_depth);
  for (int y = 0; y < frame.height; ++y)
    for (int x = 0; x < frame.width; ++x) out.at(x, y) = frame.luminance(x, y);
  return out;
}

ImageStack make_stack(std::vector<Frame> frames, std::string source_path) {
  if (frames.empty()) throw Error(ErrorKind::format, "image contains no frames");
  const Frame& first = frames.front();
  for (const Frame& f : frames) {
    if (f.height != first.height || f.width != first.width || f.channels != first.channels)
      throw Error(ErrorKind::format, "frames have mismatched shapes in " + source_path);
    if (f.original_bit_depth != first.original_bit_depth)
      throw Error(ErrorKind::format, "frames have mismatched bit depths in " + source_path);
    if (f.channels != 1 && f.channels != 3 && f.channels != 4)
      throw Error(ErrorKind::format, "unsupported channel count " + std::to_string(f.channels));
    if (f.pixels.size() != static_cast<std::size_t>(f.height) * f.width * f.channels)
      throw Error(ErrorKind::invalid_argument, "pixel buffer does not match frame shape");
  }
  ImageStack stack;
  stack.frames = std::move(frames);
  stack.source_path = std::move(source_path);
  stack.content_hash = content_hash(stack);
  return stack;
}

ImageStack load_stack(const std::filesystem::path& path, LayoutHint hint) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::io, "no such file: " + path.string());
  std::vector<Frame> frames;
  if (has_png_signature(path)) {
    frames.push_back(read_png(path));
  } else {
    frames = read_tiff(path);
  }
  if (hint == LayoutHint::grayscale) {
    for (auto& f : frames) f = to_luminance(f);
  }
  return make_stack(std::move(frames), path.string());
}

void save_tiff(const ImageStack& stack, const std::filesystem::path& path) {
  TIFFSetWarningHandler(nullptr);
  TIFFSetErrorHandler(nullptr);
  std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.c_str(), "w"));
  if (!tif) throw Error(ErrorKind::io, "cannot write " + path.string());
  for (const Frame& f : stack.frames) {
    const int bps = f.original_bit_depth;
    TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(f.width));
    TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(f.height));
    TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, static_cast<std::uint16_t>(f.channels));
    TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, static_cast<std::uint16_t>(bps));
    TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
    TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, f.channels == 1 ? PHOTOMETRIC_MINISBLACK : PHOTOMETRIC_RGB);
    TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, static_cast<std::uint32_t>(f.height));
    if (f.channels == 4) {
      const std::uint16_t extra = EXTRASAMPLE_UNASSALPHA;
      TIFFSetField(tif.get(), TIFFTAG_EXTRASAMPLES, 1, &extra);
    }
    if (stack.frames.size() > 1) {
      TIFFSetField(tif.get(), TIFFTAG_SUBFILETYPE, FILETYPE_PAGE);
    }
    const double scale = max_code(bps);
    const std::size_t row_samples = static_cast<std::size_t>(f.width) * f.channels;
    std::vector<std::uint8_t> row8(row_samples);
    std::vector<std::uint16_t> row16(row_samples);
    for (int y = 0; y < f.height; ++y) {
      for (std::size_t i = 0; i < row_samples; ++i) {
        const auto code = std::llround(std::clamp(f.pixels[y * row_samples + i], 0.0, 1.0) * scale);
        if (bps == 8) row8[i] = static_cast<std::uint8_t>(code);
        else row16[i] = static_cast<std::uint16_t>(code);
      }
      void* buf = bps == 8 ? static_cast<void*>(row8.data()) : static_cast<void*>(row16.data());
      if (TIFFWriteScanline(tif.get(), buf, static_cast<std::uint32_t>(y), 0) < 0)
        throw Error(ErrorKind::io, "TIFF write failed: " + path.string());
    }
    TIFFWriteDirectory(tif.get());
  }
}

namespace {

void write_png_rows(std::FILE* fp, const Frame& frame, int depth, std::vector<png_bytep>& rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::io, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::io, "PNG write failed");
  }
  const int color = frame.channels == 1 ? PNG_COLOR_TYPE_GRAY
                    : frame.channels == 3 ? PNG_COLOR_TYPE_RGB
                                          : PNG_COLOR_TYPE_RGBA;
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(frame.width), static_cast<png_uint_32>(frame.height), depth, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void save_png(const Frame& frame, const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error(ErrorKind::io, "cannot write " + path.string());
  const int depth = frame.original_bit_depth == 16 ? 16 : 8;
  const std::size_t row_bytes = static_cast<std::size_t>(frame.width) * frame.channels * (depth / 8);
  std::vector<std::uint8_t> buffer(row_bytes * frame.height);
  const double scale = max_code(depth);
  for (std::size_t i = 0; i < frame.pixels.size(); ++i) {
    const auto code = static_cast<unsigned>(std::llround(std::clamp(frame.pixels[i], 0.0, 1.0) * scale));
    if (depth == 8) {
      buffer[i] = static_cast<std::uint8_t>(code);
    } else {
      buffer[2 * i] = static_cast<std::uint8_t>(code >> 8);
      buffer[2 * i + 1] = static_cast<std::uint8_t>(code & 0xFF);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(frame.height));
  for (int y = 0; y < frame.height; ++y) rows[y] = buffer.data() + row_bytes * y;
  write_png_rows(fp.get(), frame, depth, rows);
}

Digest content_hash(const ImageStack& stack) {
  std::vector<std::uint8_t> bytes;
  append_u32(bytes, static_cast<std::uint32_t>(stack.frames.size()));
  append_u32(bytes, static_cast<std::uint32_t>(stack.height()));
  append_u32(bytes, static_cast<std::uint32_t>(stack.width()));
  append_u32(bytes, static_cast<std::uint32_t>(stack.channels()));
  append_u32(bytes, static_cast<std::uint32_t>(stack.frames.empty() ? 0 : stack.frames.front().original_bit_depth));
  for (const Frame& f : stack.frames) append_raw_samples(bytes, f);
  return sha256(bytes);
}

void validate_roi(const Rect& roi, int width, int height) {
  const bool integral = roi.x_min == std::floor(roi.x_min) && roi.y_min == std::floor(roi.y_min) &&
                        roi.x_max == std::floor(roi.x_max) && roi.y_max == std::floor(roi.y_max);
  if (!integral || !roi.within(width, height))
    throw Error(ErrorKind::invalid_argument, "ROI must be a non-empty integer rect inside the frame");
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

ComponentLabels label_components(const BinaryMask& mask) {
  ComponentLabels out;
  out.labels.assign(mask.data.size(), 0);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * mask.width + x;
      if (!mask.data[idx] || out.labels[idx]) continue;
      Component comp;
      comp.label = static_cast<int>(out.components.size()) + 1;
      comp.x_min = x;
      comp.y_min = y;
      comp.x_max = x + 1;
      comp.y_max = y + 1;
      out.labels[idx] = comp.label;
      stack.emplace_back(x, y);
      while (!stack.empty()) {
        const auto [cx, cy] = stack.back();
        stack.pop_back();
        ++comp.area;
        comp.x_min = std::min(comp.x_min, cx);
        comp.y_min = std::min(comp.y_min, cy);
        comp.x_max = std::max(comp.x_max, cx + 1);
        comp.y_max = std::max(comp.y_max, cy + 1);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx;
            const int ny = cy + dy;
            if (!mask.test(nx, ny)) continue;
            const std::size_t nidx = static_cast<std::size_t>(ny) * mask.width + nx;
            if (out.labels[nidx]) continue;
            out.labels[nidx] = comp.label;
            stack.emplace_back(nx, ny);
          }
        }
      }
      out.components.push_back(comp);
    }
  }
  return out;
}

std::optional<double> otsu_threshold(std::span<const double> values) {
  std::array<double, 256> hist{};
  for (double v : values) {
    const auto bin = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    hist[static_cast<std::size_t>(bin)] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  int populated = 0;
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) {
    if (hist[i] > 0) ++populated;
    sum_all += i * hist[i];
  }
  if (populated < 2) return std::nullopt;

  double best = -1.0;
  int best_t = 0;
  double w0 = 0.0;
  double sum0 = 0.0;
  for (int t = 0; t < 255; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return (best_t + 0.5) / 255.0;
}

BinaryMask rasterize_polygon(const Polygon& poly, const Rect& bounds) {
  if (poly.size() < 3) throw Error(ErrorKind::invalid_argument, "polygon needs at least 3 vertices");
  const int bx0 = static_cast<int>(std::floor(bounds.x_min));
  const int by0 = static_cast<int>(std::floor(bounds.y_min));
  const int bx1 = static_cast<int>(std::ceil(bounds.x_max));
  const int by1 = static_cast<int>(std::ceil(bounds.y_max));
  BinaryMask mask(std::max(0, bx1 - bx0), std::max(0, by1 - by0), bx0, by0);

  std::vector<double> crossings;
  const std::size_t n = poly.size();
  for (int y = by0; y < by1; ++y) {
    const double py = y + 0.5;
    crossings.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const Point& a = poly[i];
      const Point& b = poly[j];
      if ((a.y > py) != (b.y > py)) crossings.push_back((b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x);
    }
    std::sort(crossings.begin(), crossings.end());
    // A centre px is inside iff an odd number of crossings lie strictly right of it,
    // i.e. px in [crossings[2k], crossings[2k+1]).
    for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
      const double lo = crossings[k];
      const double hi = crossings[k + 1];
      int x = std::max(bx0, static_cast<int>(std::ceil(lo - 0.5)) - 1);
      while (x < bx1 && x + 0.5 < lo) ++x;
      for (; x < bx1 && x + 0.5 < hi; ++x) mask.set(x - bx0, y - by0);
    }
  }
  return mask;
}

Polygon trace_contour(const BinaryMask& mask) {
  const ComponentLabels cl = label_components(mask);
  if (cl.components.empty()) throw Error(ErrorKind::invalid_argument, "cannot trace an empty mask");
  const Component* largest = &cl.components.front();
  for (const auto& c : cl.components)
    if (c.area > largest->area) largest = &c;
  const int target = largest->label;

  auto fg = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < mask.width && y < mask.height &&
           cl.labels[static_cast<std::size_t>(y) * mask.width + x] == target;
  };

  // First pixel in raster order of the target component: nothing above it or to its left.
  int sx = largest->x_min, sy = largest->y_min;
  for (int x = largest->x_min; x < largest->x_max; ++x) {
    if (fg(x, largest->y_min)) {
      sx = x;
      break;
    }
  }

  // Directions: 0 east, 1 south, 2 west, 3 north (image coordinates, y down).
  static constexpr int kDx[4] = {1, 0, -1, 0};
  static constexpr int kDy[4] = {0, 1, 0, -1};
  // Pixels flanking the edge leaving corner (cx, cy) in direction d, foreground kept on the left.
  auto left_pixel = [](int d, int cx, int cy) -> std::pair<int, int> {
    switch (d) {
      case 0: return {cx, cy - 1};
      case 1: return {cx, cy};
      case 2: return {cx - 1, cy};
      default: return {cx - 1, cy - 1};
    }
  };
  auto right_pixel = [](int d, int cx, int cy) -> std::pair<int, int> {
    switch (d) {
      case 0: return {cx, cy};
      case 1: return {cx - 1, cy};
      case 2: return {cx - 1, cy - 1};
      default: return {cx, cy - 1};
    }
  };

  const int start_x = sx + 1;
  const int start_y = sy;
  const int start_dir = 2;
  int cx = start_x, cy = start_y, dir = start_dir;
  Polygon poly;
  std::size_t guard = 0;
  const std::size_t limit = 4 * (static_cast<std::size_t>(mask.width) + 1) * (mask.height + 1) + 8;
  do {
    cx += kDx[dir];
    cy += kDy[dir];
    const auto [rx, ry] = right_pixel(dir, cx, cy);
    const auto [lx, ly] = left_pixel(dir, cx, cy);
    int next = dir;
    if (fg(rx, ry)) next = (dir + 1) % 4;
    else if (!fg(lx, ly)) next = (dir + 3) % 4;
    if (next != dir) poly.push_back({static_cast<double>(cx + mask.x0), static_cast<double>(cy + mask.y0)});
    dir = next;
    if (++guard > limit) throw Error(ErrorKind::invalid_argument, "contour trace did not terminate");
  } while (!(cx == start_x && cy == start_y && dir == start_dir));

  if (signed_area(poly) < 0) std::reverse(poly.begin(), poly.end());
  return poly;
}

Frame downsample(const Frame& frame, int rate) {
  if (rate < 1) throw Error(ErrorKind::invalid_argument, "downsampling rate must be >= 1");
  if (rate == 1) return frame;
  const int oh = (frame.height + rate - 1) / rate;
  const int ow = (frame.width + rate - 1) / rate;
  Frame out(oh, ow, frame.channels, frame.original_bit_depth);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int y1 = std::min(frame.height, (oy + 1) * rate);
      const int x1 = std::min(frame.width, (ox + 1) * rate);
      for (int c = 0; c < frame.channels; ++c) {
        double acc = 0.0;
        int count = 0;
        for (int y = oy * rate; y < y1; ++y) {
          for (int x = ox * rate; x < x1; ++x) {
            acc += frame.at(x, y, c);
            ++count;
          }
        }
        out.at(ox, oy, c) = acc / count;
      }
    }
  }
  return out;
}

ImageStack downsample(const ImageStack& stack, int rate) {
  if (rate < 1) throw Error(ErrorKind::invalid_argument, "downsampling rate must be >= 1");
  if (rate == 1) return stack;
  std::vector<Frame> frames;
  frames.reserve(stack.frames.size());
  for (const Frame& f : stack.frames) frames.push_back(downsample(f, rate));
  ImageStack out = make_stack(std::move(frames), stack.source_path);
  if (stack.pixel_scale) out.pixel_scale = *stack.pixel_scale * rate;
  return out;
}

}  // namespace orgapipe
