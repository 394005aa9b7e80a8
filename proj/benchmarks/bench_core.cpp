// Microbenchmarks for the hot paths: suppression, linking, rasterization and classical detection.

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "orgapipe/detection.hpp"
#include "orgapipe/features.hpp"
#include "orgapipe/segmentation.hpp"
#include "orgapipe/tracking.hpp"

using namespace orgapipe;

namespace {

std::vector<ScoredBox> random_boxes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, 1000.0), size(8.0, 80.0), score(0.0, 1.0);
  std::vector<ScoredBox> boxes;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    boxes.push_back({{x, y, x + size(rng), y + size(rng)}, score(rng)});
  }
  return boxes;
}

Frame disks_frame(int size, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(30.0, size - 30.0), radius(8.0, 20.0);
  Frame f(size, size, 1, 8);
  for (auto& v : f.pixels) v = 0.08;
  for (int k = 0; k < count; ++k) {
    const double cx = pos(rng), cy = pos(rng), r = radius(rng);
    for (int y = std::max(0, int(cy - r)); y < std::min(size, int(cy + r) + 1); ++y)
      for (int x = std::max(0, int(cx - r)); x < std::min(size, int(cx + r) + 1); ++x)
        if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) f.pixels[f.index(x, y)] = 0.86;
  }
  return f;
}

void BM_Nms(benchmark::State& state) {
  const auto boxes = random_boxes(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(nms(boxes));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(64, 4096)->Complexity();

void BM_Link(benchmark::State& state) {
  const int per_frame = static_cast<int>(state.range(0));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(0.0, 2000.0), jitter(-3.0, 3.0);
  std::vector<Point> centres(static_cast<std::size_t>(per_frame));
  for (auto& c : centres) c = {pos(rng), pos(rng)};
  std::vector<std::vector<DetectionRecord>> frames(10);
  DetectionId id = 1;
  for (int t = 0; t < 10; ++t)
    for (auto& c : centres) {
      c.x += jitter(rng);
      c.y += jitter(rng);
      DetectionRecord r;
      r.detection_id = id++;
      r.frame_index = t;
      r.bbox = {c.x - 5, c.y - 5, c.x + 5, c.y + 5};
      frames[static_cast<std::size_t>(t)].push_back(r);
    }
  const TrackingConfig cfg{10.0, 1, false};
  for (auto _ : state) benchmark::DoNotOptimize(link(frames, cfg));
}
BENCHMARK(BM_Link)->Arg(10)->Arg(100)->Arg(500);

void BM_Rasterize(benchmark::State& state) {
  const double r = static_cast<double>(state.range(0));
  Polygon circle;
  for (int i = 0; i < 256; ++i) {
    const double a = 2 * M_PI * i / 256;
    circle.push_back({r + 2 + r * std::cos(a), r + 2 + r * std::sin(a)});
  }
  const Rect bounds{0, 0, 2 * r + 4, 2 * r + 4};
  for (auto _ : state) benchmark::DoNotOptimize(rasterize_polygon(circle, bounds));
}
BENCHMARK(BM_Rasterize)->Arg(16)->Arg(64)->Arg(256);

void BM_ClassicalDetect(benchmark::State& state) {
  const Frame f = disks_frame(static_cast<int>(state.range(0)), 12, 3);
  for (auto _ : state) benchmark::DoNotOptimize(classical_detect(f));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(f.pixels.size()));
}
BENCHMARK(BM_ClassicalDetect)->Arg(256)->Arg(1024);

void BM_SegmentAndMeasure(benchmark::State& state) {
  const Frame f = disks_frame(512, 12, 4);
  const auto boxes = classical_detect(f);
  for (auto _ : state)
    for (const auto& b : boxes) {
      const BinaryMask m = classical_segment(f, b.rect);
      if (m.empty()) continue;
      benchmark::DoNotOptimize(geometric_features(simplify_polygon(midpoint_contour(trace_contour(m)), 1.0)));
    }
}
BENCHMARK(BM_SegmentAndMeasure);

}  // namespace

BENCHMARK_MAIN();
