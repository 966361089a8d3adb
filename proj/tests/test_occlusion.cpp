#include <gtest/gtest.h>

#include <cmath>

#include "countocc/core/rng.hpp"
#include "countocc/occlusion.hpp"

using namespace countocc;

namespace {

/// Random scene with n unit-ish boxes, all fully inside the image.
AnnotatedScene make_scene(Rng& rng, std::size_t n, int w = 640, int h = 480, double box = 24.0) {
  AnnotatedScene s;
  s.width = w;
  s.height = h;
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = rng.uniform(0.0, w - box);
    const double y0 = rng.uniform(0.0, h - box);
    s.boxes.push_back({x0, y0, x0 + box, y0 + box});
  }
  return s;
}

/// Brute-force center-in-rectangle count, independent of the mask raster.
std::size_t brute_force_occluded(const OcclusionMask& m, const AnnotatedScene& s) {
  std::size_t count = 0;
  for (const auto& b : s.boxes) {
    int px = static_cast<int>(std::floor(b.center_x()));
    int py = static_cast<int>(std::floor(b.center_y()));
    px = std::max(0, std::min(px, s.width - 1));
    py = std::max(0, std::min(py, s.height - 1));
    for (const auto& r : m.rectangles)
      if (px >= r.x && px < r.x + r.w && py >= r.y && py < r.y + r.h) {
        ++count;
        break;
      }
  }
  return count;
}

}  // namespace

TEST(TrainingMask, CountWindowArithmetic) {
  // N=10, alpha [0.15, 0.50] -> [2, 5]
  auto [lo, hi] = training_count_window(10, 0.15, 0.50);
  EXPECT_EQ(lo, 2u);
  EXPECT_EQ(hi, 5u);
  // N < 4 clamps to [1, min(2, N)]
  EXPECT_EQ(training_count_window(2, 0.15, 0.50), (std::pair<std::size_t, std::size_t>{1, 2}));
  EXPECT_EQ(training_count_window(1, 0.15, 0.50), (std::pair<std::size_t, std::size_t>{1, 1}));
  EXPECT_EQ(training_count_window(3, 0.15, 0.50), (std::pair<std::size_t, std::size_t>{1, 2}));
}

TEST(TrainingMask, AcceptedMasksRespectWindow) {
  Rng master(101);
  TrainOccConfig cfg;
  cfg.apply_probability = 1.0;
  cfg.side_min = 64;
  cfg.side_max = 160;
  std::size_t accepted = 0;
  for (int trial = 0; trial < 300; ++trial) {
    Rng scene_rng = master.derive("scene", trial);
    AnnotatedScene s = make_scene(scene_rng, 10);
    Rng mask_rng = master.derive("mask", trial);
    OcclusionMask m = sample_training_mask(s, cfg, mask_rng);
    if (m.fallback) continue;
    ++accepted;
    const std::size_t hit = brute_force_occluded(m, s);
    EXPECT_GE(hit, 2u);
    EXPECT_LE(hit, 5u);
    EXPECT_EQ(hit, m.occluded_instance_ids.size());
  }
  EXPECT_GT(accepted, 200u);  // rejection sampling should mostly succeed
}

TEST(TrainingMask, ZeroProbabilityGivesZeroMask) {
  Rng rng(5);
  AnnotatedScene s = make_scene(rng, 6);
  TrainOccConfig cfg;
  cfg.apply_probability = 0.0;
  OcclusionMask m = sample_training_mask(s, cfg, rng);
  EXPECT_TRUE(m.rectangles.empty());
  EXPECT_TRUE(m.occluded_instance_ids.empty());
  for (std::size_t i = 0; i < m.mask.size(); ++i) EXPECT_EQ(m.mask[i], 0);
}

TEST(TrainingMask, EmptySceneErrors) {
  AnnotatedScene s;
  s.width = 64;
  s.height = 64;
  TrainOccConfig cfg;
  Rng rng(1);
  EXPECT_THROW(sample_training_mask(s, cfg, rng), std::invalid_argument);
}

TEST(TrainingMask, RectanglesInsideBoundsWithSidesInRange) {
  Rng master(77);
  TrainOccConfig cfg;
  cfg.apply_probability = 1.0;
  cfg.side_min = 128;
  cfg.side_max = 256;
  for (int trial = 0; trial < 200; ++trial) {
    Rng scene_rng = master.derive("s", trial);
    AnnotatedScene s = make_scene(scene_rng, 8, 300, 200);  // image smaller than side_max
    Rng mask_rng = master.derive("m", trial);
    OcclusionMask m = sample_training_mask(s, cfg, mask_rng);
    for (const auto& r : m.rectangles) {
      EXPECT_GE(r.x, 0);
      EXPECT_GE(r.y, 0);
      EXPECT_LE(r.x + r.w, s.width);
      EXPECT_LE(r.y + r.h, s.height);
      // sides clamp to the image when it is smaller than side_min
      EXPECT_GE(r.w, std::min(cfg.side_min, s.width));
      EXPECT_LE(r.w, cfg.side_max);
      EXPECT_GE(r.h, std::min(cfg.side_min, s.height));
      EXPECT_LE(r.h, cfg.side_max);
    }
  }
}

TEST(TrainingMask, SameSeedBitIdentical) {
  Rng scene_rng(11);
  AnnotatedScene s = make_scene(scene_rng, 12);
  TrainOccConfig cfg;
  Rng a(42), b(42);
  OcclusionMask ma = sample_training_mask(s, cfg, a);
  OcclusionMask mb = sample_training_mask(s, cfg, b);
  EXPECT_EQ(ma.mask, mb.mask);
  EXPECT_EQ(ma.rectangles.size(), mb.rectangles.size());
  EXPECT_EQ(ma.occluded_instance_ids, mb.occluded_instance_ids);
}

TEST(TrainingMask, MaskRasterEqualsRectangleUnion) {
  Rng rng(13);
  AnnotatedScene s = make_scene(rng, 10);
  TrainOccConfig cfg;
  cfg.apply_probability = 1.0;
  OcclusionMask m = sample_training_mask(s, cfg, rng);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      bool in_rect = false;
      for (const auto& r : m.rectangles) in_rect = in_rect || r.contains(x, y);
      ASSERT_EQ(m.mask(y, x) != 0, in_rect);
    }
}

TEST(EvalMask, WindowN20) {
  Rng master(202);
  EvalOccConfig cfg;
  cfg.side_max = 160;
  for (int trial = 0; trial < 50; ++trial) {
    Rng scene_rng = master.derive("s", trial);
    AnnotatedScene s = make_scene(scene_rng, 20);
    Rng mask_rng = master.derive("m", trial);
    OcclusionMask m = build_eval_mask(s, cfg, mask_rng);
    if (m.window_infeasible) continue;
    const std::size_t hit = brute_force_occluded(m, s);
    EXPECT_GE(hit, 5u);
    EXPECT_LE(hit, 7u);
  }
}

TEST(EvalMask, SingleInstanceFlagsInfeasible) {
  Rng rng(303);
  AnnotatedScene s = make_scene(rng, 1);
  EvalOccConfig cfg;
  OcclusionMask m = build_eval_mask(s, cfg, rng);
  EXPECT_TRUE(m.window_infeasible);
  EXPECT_EQ(m.occluded_instance_ids.size(), 1u);
}

TEST(EvalMask, MeanFractionOverManyScenes) {
  // CARPK-like synthetic scenes: dense grids of car-sized boxes. Brute-force
  // center counting drives the derived statistic.
  Rng master(404);
  EvalOccConfig cfg;
  cfg.side_max = 200;
  double fraction_sum = 0.0;
  int feasible = 0, in_window = 0;
  const int scenes = 1000;
  for (int trial = 0; trial < scenes; ++trial) {
    Rng scene_rng = master.derive("scene", trial);
    const auto n = static_cast<std::size_t>(scene_rng.uniform_int(12, 48));
    AnnotatedScene s = make_scene(scene_rng, n, 960, 540, 36.0);
    Rng mask_rng = master.derive("mask", trial);
    OcclusionMask m = build_eval_mask(s, cfg, mask_rng);
    const double frac =
        static_cast<double>(brute_force_occluded(m, s)) / static_cast<double>(n);
    fraction_sum += frac;
    const auto lo = static_cast<std::size_t>(std::ceil(0.25 * n));
    const auto hi = static_cast<std::size_t>(std::floor(0.35 * n));
    if (lo <= hi) {
      ++feasible;
      if (frac >= 0.25 && frac <= 0.35) ++in_window;
    }
  }
  const double mean_fraction = fraction_sum / scenes;
  EXPECT_GE(mean_fraction, 0.25);
  EXPECT_LE(mean_fraction, 0.35);
  EXPECT_GE(static_cast<double>(in_window) / feasible, 0.95);
}

TEST(ApplyMask, ZeroAndFullMask) {
  Tensor<double> img({4, 6, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = 0.1 * static_cast<double>(i);
  OcclusionMask zero = OcclusionMask::empty(6, 4);
  EXPECT_EQ(apply_mask(img, zero), img);

  OcclusionMask full = OcclusionMask::empty(6, 4);
  occ_detail::paint(full, {0, 0, 6, 4});
  Tensor<double> black = apply_mask(img, full);
  for (std::size_t i = 0; i < black.size(); ++i) EXPECT_EQ(black[i], 0.0);
}

TEST(ApplyMask, RectangleRemovesExactPixelSum) {
  Tensor<double> ones({8, 8, 3}, 1.0);
  OcclusionMask m = OcclusionMask::empty(8, 8);
  occ_detail::paint(m, {2, 3, 2, 2});
  Tensor<double> out = apply_mask(ones, m);
  double sum = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) sum += out[i];
  EXPECT_DOUBLE_EQ(sum, 8.0 * 8.0 * 3.0 - 4.0 * 3.0);
}

TEST(ApplyMask, Idempotent) {
  Rng rng(7);
  Tensor<double> img({16, 16, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  AnnotatedScene s = make_scene(rng, 5, 16, 16, 4.0);
  TrainOccConfig cfg;
  cfg.apply_probability = 1.0;
  cfg.side_min = 4;
  cfg.side_max = 8;
  OcclusionMask m = sample_training_mask(s, cfg, rng);
  Tensor<double> once = apply_mask(img, m);
  EXPECT_EQ(apply_mask(once, m), once);
}

TEST(CountOccluded, SplitsAndTotals) {
  Rng rng(9);
  AnnotatedScene s = make_scene(rng, 7);
  OcclusionMask zero = OcclusionMask::empty(s.width, s.height);
  auto [vis0, occ0] = count_occluded_instances(zero, s.boxes);
  EXPECT_EQ(vis0, 7u);
  EXPECT_EQ(occ0, 0u);

  OcclusionMask full = OcclusionMask::empty(s.width, s.height);
  occ_detail::paint(full, {0, 0, s.width, s.height});
  auto [vis1, occ1] = count_occluded_instances(full, s.boxes);
  EXPECT_EQ(vis1, 0u);
  EXPECT_EQ(occ1, 7u);
}

TEST(CountOccluded, FigureOneScenario) {
  // 10 instances, one occluder hiding exactly 3 centers -> (7, 3)
  AnnotatedScene s;
  s.width = 100;
  s.height = 100;
  for (int i = 0; i < 10; ++i) {
    const double x = 5.0 + 9.0 * i;
    s.boxes.push_back({x, 5.0, x + 4.0, 9.0});  // centers at y=7, x=7+9i
  }
  OcclusionMask m = OcclusionMask::empty(100, 100);
  occ_detail::paint(m, {5, 0, 27, 20});  // covers centers x in {7, 16, 25}
  auto [vis, occ] = count_occluded_instances(m, s.boxes);
  EXPECT_EQ(vis, 7u);
  EXPECT_EQ(occ, 3u);
}
