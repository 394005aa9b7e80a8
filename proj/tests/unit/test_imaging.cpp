#include <gtest/gtest.h>

#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "orgapipe/imaging.hpp"
#include "error_matchers.hpp"
#include "test_support.hpp"

using namespace orgapipe;
using testsupport::fixture_path;

namespace {

nlohmann::json read_json(const std::string& name) {
  return nlohmann::json::parse(testsupport::read_file(fixture_path(name)));
}

// Crossing-number test written independently of the engine rasterizer.
bool inside_even_odd(const Polygon& poly, double px, double py) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point a = poly[i], b = poly[j];
    if ((a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

BinaryMask brute_force_raster(const Polygon& poly, int w, int h) {
  BinaryMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(x, y, inside_even_odd(poly, x + 0.5, y + 0.5));
  return m;
}

// Largest 8-connected component with enclosed background filled (background is 4-connected).
BinaryMask largest_filled(const BinaryMask& m) {
  const int w = m.width, h = m.height;
  std::vector<int> comp(static_cast<std::size_t>(w) * h, 0);
  int best = 0, label = 0;
  std::size_t best_size = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m.get(x, y) || comp[y * w + x]) continue;
      ++label;
      std::vector<std::pair<int, int>> stack{{x, y}};
      comp[y * w + x] = label;
      std::size_t size = 0;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        ++size;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h || !m.get(nx, ny) || comp[ny * w + nx]) continue;
            comp[ny * w + nx] = label;
            stack.push_back({nx, ny});
          }
      }
      if (size > best_size) best_size = size, best = label;
    }
  // Flood the background from outside the raster (padded by one pixel).
  const int pw = w + 2, ph = h + 2;
  std::vector<std::uint8_t> outside(static_cast<std::size_t>(pw) * ph, 0);
  auto fg = [&](int x, int y) { return x >= 1 && y >= 1 && x <= w && y <= h && comp[(y - 1) * w + (x - 1)] == best; };
  std::vector<std::pair<int, int>> stack{{0, 0}};
  outside[0] = 1;
  while (!stack.empty()) {
    auto [cx, cy] = stack.back();
    stack.pop_back();
    const int d[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (auto& v : d) {
      const int nx = cx + v[0], ny = cy + v[1];
      if (nx < 0 || ny < 0 || nx >= pw || ny >= ph || outside[ny * pw + nx] || fg(nx, ny)) continue;
      outside[ny * pw + nx] = 1;
      stack.push_back({nx, ny});
    }
  }
  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.set(x, y, !outside[(y + 1) * pw + (x + 1)]);
  return out;
}

}  // namespace

TEST(Imaging, LoadsFullScalePng) {
  const ImageStack s = load_stack(fixture_path("white8.png"));
  ASSERT_EQ(s.frame_count(), 1u);
  EXPECT_EQ(s.channels(), 1);
  EXPECT_EQ(s.width(), 64);
  EXPECT_EQ(s.height(), 64);
  for (double v : s.frames[0].pixels) EXPECT_EQ(v, 1.0);
}

TEST(Imaging, SixteenBitMultiPageTiffMatchesReferenceDecode) {
  const auto oracle = read_json("stack16.json");
  const ImageStack s = load_stack(fixture_path("stack16.tif"));
  ASSERT_EQ(s.frame_count(), 3u);
  ASSERT_EQ(s.height(), 7);
  ASSERT_EQ(s.width(), 5);
  for (std::size_t f = 0; f < 3; ++f) {
    EXPECT_EQ(s.frames[f].original_bit_depth, 16);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 5; ++x)
        EXPECT_EQ(s.frames[f].at(x, y), oracle["raw"][f][y][x].get<double>() / 65535.0) << f << " " << x << "," << y;
  }
}

TEST(Imaging, RgbaPngKeepsFourChannels) {
  const auto oracle = read_json("rgba8.json");
  const ImageStack s = load_stack(fixture_path("rgba8.png"));
  ASSERT_EQ(s.channels(), 4);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 4; ++c) EXPECT_EQ(s.frames[0].at(x, y, c), oracle["raw"][y][x][c].get<double>() / 255.0);
}

TEST(Imaging, MismatchedPagesAreRejected) {
  EXPECT_ERROR_KIND(load_stack(fixture_path("mismatch.tif")), ErrorKind::format);
}

TEST(Imaging, MissingFileIsIoError) {
  EXPECT_ERROR_KIND(load_stack("/nonexistent/image.tif"), ErrorKind::io);
}

TEST(Imaging, LoadedPixelsStayInUnitRange) {
  for (const char* name : {"white8.png", "stack16.tif", "rgba8.png"}) {
    const ImageStack s = load_stack(fixture_path(name));
    for (const auto& f : s.frames)
      for (double v : f.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
  }
}

TEST(Imaging, TiffAndPngSaveRoundTrip) {
  testsupport::TempDir dir;
  const ImageStack tl = testsupport::disk_timelapse();
  save_tiff(tl, dir / "tl.tiff");
  const ImageStack back = load_stack(dir / "tl.tiff");
  EXPECT_EQ(back.frames, tl.frames);
  EXPECT_EQ(back.content_hash, tl.content_hash);

  const ImageStack sixteen = load_stack(fixture_path("stack16.tif"));
  save_tiff(sixteen, dir / "s16.tiff");
  EXPECT_EQ(load_stack(dir / "s16.tiff").content_hash, sixteen.content_hash);

  save_png(tl.frames[0], dir / "f0.png");
  EXPECT_EQ(load_stack(dir / "f0.png").frames[0], tl.frames[0]);
}

TEST(Imaging, Sha256EmptyInputVector) {
  EXPECT_EQ(to_hex(sha256({})), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string abc = "abc";
  EXPECT_EQ(to_hex(sha256({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()})),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Imaging, ContentHashDeterministicAndSensitive) {
  ImageStack s = testsupport::disk_timelapse();
  EXPECT_EQ(content_hash(s), content_hash(s));
  EXPECT_EQ(content_hash(s), s.content_hash);
  ImageStack t = s;
  t.frames[2].at(3, 4) = 21.0 / 255.0;
  EXPECT_NE(content_hash(t), content_hash(s));
  // Same samples, different shape.
  Frame a(2, 3, 1), b(3, 2, 1);
  EXPECT_NE(content_hash(make_stack({a})), content_hash(make_stack({b})));
  EXPECT_EQ(digest_from_hex(to_hex(s.content_hash)), s.content_hash);
  EXPECT_FALSE(digest_from_hex("xyz").has_value());
}

TEST(Imaging, ContentHashHasNoCollisionsOnRandomCorpus) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> val(0, 255);
  std::set<std::string> seen_pixels, seen_hashes;
  for (int i = 0; i < 1000; ++i) {
    Frame f(8, 8, 1);
    std::string key;
    for (auto& p : f.pixels) {
      const int v = val(rng);
      p = v / 255.0;
      key.push_back(static_cast<char>(v));
    }
    if (!seen_pixels.insert(key).second) continue;
    EXPECT_TRUE(seen_hashes.insert(to_hex(make_stack({f}).content_hash)).second);
  }
  EXPECT_EQ(seen_hashes.size(), seen_pixels.size());
}

TEST(Imaging, RasterizesSquareByPixelCentres) {
  const Polygon square{{0, 0}, {10, 0}, {10, 10}, {0, 10}};
  const BinaryMask m = rasterize_polygon(square, {0, 0, 12, 12});
  EXPECT_EQ(m.width, 12);
  EXPECT_EQ(m.height, 12);
  EXPECT_EQ(m.count(), 100u);
  EXPECT_TRUE(m.get(9, 9));
  EXPECT_FALSE(m.get(10, 9));
}

TEST(Imaging, RasterizeMatchesBruteForceOnTriangle) {
  const Polygon tri{{0, 0}, {4, 0}, {0, 4}};
  const BinaryMask m = rasterize_polygon(tri, {0, 0, 6, 6});
  EXPECT_EQ(m, brute_force_raster(tri, 6, 6));
  EXPECT_EQ(m.count(), brute_force_raster(tri, 6, 6).count());
}

TEST(Imaging, RasterizeMatchesBruteForceOnRandomPolygons) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> coord(-2.0, 22.0);
  for (int trial = 0; trial < 300; ++trial) {
    Polygon poly(3 + trial % 9);
    for (auto& p : poly) p = {std::round(coord(rng) * 4) / 4 + 0.1, std::round(coord(rng) * 4) / 4 + 0.07};
    EXPECT_EQ(rasterize_polygon(poly, {0, 0, 20, 20}), brute_force_raster(poly, 20, 20)) << trial;
  }
}

TEST(Imaging, RasterizeRejectsDegeneratePolygon) {
  EXPECT_ERROR_KIND(rasterize_polygon({{0, 0}, {5, 5}}, {0, 0, 10, 10}), ErrorKind::invalid_argument);
}

TEST(Imaging, TracesSinglePixelAsUnitSquare) {
  BinaryMask m(10, 10);
  m.set(5, 5);
  const Polygon p = trace_contour(m);
  ASSERT_EQ(p.size(), 4u);
  std::set<std::pair<double, double>> corners;
  for (const auto& v : p) corners.insert({v.x, v.y});
  EXPECT_EQ(corners, (std::set<std::pair<double, double>>{{5, 5}, {6, 5}, {6, 6}, {5, 6}}));
  EXPECT_GT(signed_area(p), 0.0);
}

TEST(Imaging, TracedBlockRasterizesToHundred) {
  BinaryMask m(14, 14, 3, 7);
  for (int y = 2; y < 12; ++y)
    for (int x = 2; x < 12; ++x) m.set(x, y);
  const Polygon p = trace_contour(m);
  EXPECT_DOUBLE_EQ(signed_area(p), 100.0);
  // Contour vertices are in image coordinates (mask origin applied).
  for (const auto& v : p) {
    EXPECT_GE(v.x, 5.0);
    EXPECT_GE(v.y, 9.0);
  }
  EXPECT_EQ(rasterize_polygon(p, {5, 9, 15, 19}).count(), 100u);
}

TEST(Imaging, TraceRejectsEmptyMask) { EXPECT_ERROR_KIND(trace_contour(BinaryMask(4, 4)), ErrorKind::invalid_argument); }

TEST(Imaging, RasterizeOfTraceReproducesLargestComponent) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 400; ++trial) {
    const int w = 24, h = 20;
    BinaryMask m(w, h);
    const int disks = 1 + trial % 4;
    for (int d = 0; d < disks; ++d) {
      const double cx = u(rng) * w, cy = u(rng) * h, r = 1.0 + u(rng) * 6.0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) m.set(x, y);
    }
    for (int k = 0; k < trial % 12; ++k) m.set(static_cast<int>(u(rng) * w), static_cast<int>(u(rng) * h));
    if (m.empty()) continue;
    const Polygon p = trace_contour(m);
    EXPECT_GT(signed_area(p), 0.0) << trial;
    EXPECT_EQ(rasterize_polygon(p, {0, 0, static_cast<double>(w), static_cast<double>(h)}), largest_filled(m))
        << "trial " << trial;
  }
}

TEST(Imaging, LabelsComponentsWithEightConnectivity) {
  BinaryMask m(5, 5);
  m.set(0, 0);
  m.set(1, 1);  // diagonal neighbour joins
  m.set(4, 4);
  const auto cl = label_components(m);
  ASSERT_EQ(cl.components.size(), 2u);
  EXPECT_EQ(cl.components[0].area, 2u);
  EXPECT_EQ(cl.components[1].area, 1u);
}

TEST(Imaging, OtsuSeparatesBimodalValues) {
  std::vector<double> v(100, 0.1);
  for (int i = 0; i < 30; ++i) v[i] = 0.9;
  const auto t = otsu_threshold(v);
  ASSERT_TRUE(t.has_value());
  EXPECT_GT(*t, 0.1);
  EXPECT_LT(*t, 0.9);
  EXPECT_FALSE(otsu_threshold(std::vector<double>(10, 0.4)).has_value());
}

TEST(Imaging, DownsampleExamples) {
  const ImageStack s = testsupport::disk_timelapse();
  EXPECT_EQ(downsample(s, 1).frames, s.frames);

  Frame c(4, 4, 1);
  std::fill(c.pixels.begin(), c.pixels.end(), 0.25);
  const Frame dc = downsample(c, 2);
  EXPECT_EQ(dc.width, 2);
  EXPECT_EQ(dc.height, 2);
  for (double v : dc.pixels) EXPECT_EQ(v, 0.25);

  Frame two(2, 2, 1);
  two.pixels = {0, 0, 1, 1};
  const Frame one = downsample(two, 2);
  ASSERT_EQ(one.pixels.size(), 1u);
  EXPECT_EQ(one.pixels[0], 0.5);

  EXPECT_ERROR_KIND(downsample(c, 0), ErrorKind::invalid_argument);
}

TEST(Imaging, DownsampleAveragesPartialEdgeBlocks) {
  Frame f(3, 5, 1);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) f.at(x, y) = x + 10 * y;
  const Frame d = downsample(f, 2);
  ASSERT_EQ(d.width, 3);
  ASSERT_EQ(d.height, 2);
  EXPECT_DOUBLE_EQ(d.at(0, 0), (0 + 1 + 10 + 11) / 4.0);
  EXPECT_DOUBLE_EQ(d.at(2, 0), (4 + 14) / 2.0);
  EXPECT_DOUBLE_EQ(d.at(2, 1), 24.0);
  EXPECT_DOUBLE_EQ(d.at(1, 1), (22 + 23) / 2.0);
}

TEST(Imaging, RoiValidation) {
  EXPECT_NO_THROW(validate_roi({0, 0, 10, 10}, 10, 10));
  EXPECT_ERROR_KIND(validate_roi({0, 0, 11, 10}, 10, 10), ErrorKind::invalid_argument);
  EXPECT_ERROR_KIND(validate_roi({5, 0, 5, 10}, 10, 10), ErrorKind::invalid_argument);
  EXPECT_ERROR_KIND(validate_roi({0.5, 0, 5, 10}, 10, 10), ErrorKind::invalid_argument);
}

TEST(Imaging, LuminanceUsesRec601) {
  Frame rgb(1, 1, 3);
  rgb.pixels = {1.0, 0.0, 0.0};
  EXPECT_NEAR(rgb.luminance(0, 0), 0.299, 1e-12);
  const Frame l = to_luminance(rgb);
  EXPECT_EQ(l.channels, 1);
  EXPECT_NEAR(l.pixels[0], 0.299, 1e-12);
}
