#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "countocc/core/rng.hpp"
#include "countocc/core/tensor.hpp"

namespace countocc {

/// Axis-aligned instance box in pixel coordinates, [x_min, x_max) x [y_min, y_max).
struct BoxAnnotation {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }

  bool valid() const { return x_min < x_max && y_min < y_max; }

  BoxAnnotation clipped(int image_w, int image_h) const {
    BoxAnnotation b = *this;
    b.x_min = std::max(0.0, std::min(b.x_min, static_cast<double>(image_w)));
    b.x_max = std::max(0.0, std::min(b.x_max, static_cast<double>(image_w)));
    b.y_min = std::max(0.0, std::min(b.y_min, static_cast<double>(image_h)));
    b.y_max = std::max(0.0, std::min(b.y_max, static_cast<double>(image_h)));
    return b;
  }
};

/// Integer occluder rectangle, origin (x, y), extent w x h, fully inside the image.
struct OccluderRect {
  int x = 0, y = 0, w = 0, h = 0;

  bool contains(int px, int py) const {
    return px >= x && px < x + w && py >= y && py < y + h;
  }
};

/// One scene's ingestion unit: dimensions, instance boxes, label, exemplars.
struct AnnotatedScene {
  int width = 0, height = 0;
  std::vector<BoxAnnotation> boxes;
  std::string label;
  int class_id = 0;
  std::vector<BoxAnnotation> exemplars;

  std::size_t instance_count() const { return boxes.size(); }
};

struct TrainOccConfig {
  double apply_probability = 0.5;
  double alpha_min = 0.15;
  double alpha_max = 0.50;
  int side_min = 128;
  int side_max = 256;
  int max_attempts = 50;
};

struct EvalOccConfig {
  double target_lo = 0.25;
  double target_hi = 0.35;
  int side_max = 256;
  int max_rectangles = 0;  // 0 = uncapped; the paper does not state a count
};

/// Binary occlusion raster plus the rectangles that produced it. The raster is
/// always exactly the union of the rectangles.
struct OcclusionMask {
  int width = 0, height = 0;
  Tensor<std::uint8_t> mask;  // {H, W}, 1 = occluded
  std::vector<OccluderRect> rectangles;
  std::vector<std::size_t> occluded_instance_ids;
  bool fallback = false;           // training: random-position rectangle used
  bool window_infeasible = false;  // evaluation: target window unreachable

  bool occluded_at(int px, int py) const {
    if (px < 0 || py < 0 || px >= width || py >= height) return false;
    return mask(static_cast<std::size_t>(py), static_cast<std::size_t>(px)) != 0;
  }

  static OcclusionMask empty(int w, int h) {
    OcclusionMask m;
    m.width = w;
    m.height = h;
    m.mask = Tensor<std::uint8_t>({static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, 0);
    return m;
  }
};

namespace occ_detail {

/// Pixel that represents an instance center for the center-intersection rule.
inline std::pair<int, int> center_pixel(const BoxAnnotation& b, int image_w, int image_h) {
  int px = static_cast<int>(std::floor(b.center_x()));
  int py = static_cast<int>(std::floor(b.center_y()));
  px = std::max(0, std::min(px, image_w - 1));
  py = std::max(0, std::min(py, image_h - 1));
  return {px, py};
}

/// Center-anchored rectangle of extent w x h, shifted (not truncated) into the
/// image so the sampled sides survive; sides are pre-clamped to the image.
inline OccluderRect anchored_rect(double cx, double cy, int w, int h, int image_w, int image_h) {
  w = std::min(w, image_w);
  h = std::min(h, image_h);
  int x = static_cast<int>(std::lround(cx)) - w / 2;
  int y = static_cast<int>(std::lround(cy)) - h / 2;
  x = std::max(0, std::min(x, image_w - w));
  y = std::max(0, std::min(y, image_h - h));
  return {x, y, w, h};
}

inline void paint(OcclusionMask& m, const OccluderRect& r) {
  for (int py = r.y; py < r.y + r.h; ++py)
    for (int px = r.x; px < r.x + r.w; ++px)
      m.mask(static_cast<std::size_t>(py), static_cast<std::size_t>(px)) = 1;
  m.rectangles.push_back(r);
}

inline std::vector<std::size_t> centers_inside(const std::vector<OccluderRect>& rects,
                                               const AnnotatedScene& scene) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const auto [px, py] = center_pixel(scene.boxes[i], scene.width, scene.height);
    for (const OccluderRect& r : rects)
      if (r.contains(px, py)) {
        ids.push_back(i);
        break;
      }
  }
  return ids;
}

inline void finalize_ids(OcclusionMask& m, const AnnotatedScene& scene) {
  m.occluded_instance_ids = centers_inside(m.rectangles, scene);
}

}  // namespace occ_detail

/// Occluded-count window for a scene of N instances: [ceil(a_min N), floor(a_max N)],
/// clamped to [1, min(2, N)] for very small scenes per the training strategy.
inline std::pair<std::size_t, std::size_t> training_count_window(std::size_t n, double alpha_min,
                                                                 double alpha_max) {
  if (n < 4) return {1, std::min<std::size_t>(2, n)};
  const auto lo = static_cast<std::size_t>(std::ceil(alpha_min * static_cast<double>(n)));
  const auto hi = static_cast<std::size_t>(std::floor(alpha_max * static_cast<double>(n)));
  return {lo, hi};
}

/// Object-aware training occluder: with probability p, rejection-samples a
/// center-anchored rectangle until the number of hidden instance centers falls
/// in the target window, falling back to one random-position rectangle after
/// max_attempts; with probability 1-p returns the all-zero mask.
inline OcclusionMask sample_training_mask(const AnnotatedScene& scene, const TrainOccConfig& cfg,
                                          Rng& rng) {
  if (scene.boxes.empty()) throw std::invalid_argument("no instances to anchor");
  if (scene.width < 1 || scene.height < 1) throw std::invalid_argument("degenerate image");

  OcclusionMask m = OcclusionMask::empty(scene.width, scene.height);
  if (rng.uniform() >= cfg.apply_probability) return m;  // keep the image unchanged

  const std::size_t n = scene.boxes.size();
  const auto [n_min, n_max] = training_count_window(n, cfg.alpha_min, cfg.alpha_max);

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const BoxAnnotation& anchor = scene.boxes[rng.index(n)];
    const int w = static_cast<int>(rng.uniform_int(cfg.side_min, cfg.side_max));
    const int h = static_cast<int>(rng.uniform_int(cfg.side_min, cfg.side_max));
    const OccluderRect r =
        occ_detail::anchored_rect(anchor.center_x(), anchor.center_y(), w, h, scene.width,
                                  scene.height);
    const std::size_t hit = occ_detail::centers_inside({r}, scene).size();
    if (hit >= n_min && hit <= n_max) {
      occ_detail::paint(m, r);
      occ_detail::finalize_ids(m, scene);
      return m;
    }
  }

  // Random-position fallback; still size-constrained, count unconstrained.
  const int w = std::min(static_cast<int>(rng.uniform_int(cfg.side_min, cfg.side_max)),
                         scene.width);
  const int h = std::min(static_cast<int>(rng.uniform_int(cfg.side_min, cfg.side_max)),
                         scene.height);
  const int x = static_cast<int>(rng.uniform_int(0, scene.width - w));
  const int y = static_cast<int>(rng.uniform_int(0, scene.height - h));
  occ_detail::paint(m, {x, y, w, h});
  occ_detail::finalize_ids(m, scene);
  m.fallback = true;
  return m;
}

/// Benchmark-style evaluation occluders: a set of center-anchored rectangles
/// greedily grown until the hidden-center fraction lands in
/// [target_lo, target_hi]. When the integer window is unreachable the closest
/// achievable count (at least one instance) is used and the mask is flagged.
inline OcclusionMask build_eval_mask(const AnnotatedScene& scene, const EvalOccConfig& cfg,
                                     Rng& rng) {
  if (scene.boxes.empty()) throw std::invalid_argument("no instances to anchor");
  const std::size_t n = scene.boxes.size();

  auto k_lo = static_cast<std::size_t>(std::ceil(cfg.target_lo * static_cast<double>(n)));
  auto k_hi = static_cast<std::size_t>(std::floor(cfg.target_hi * static_cast<double>(n)));
  k_hi = std::min(k_hi, n);

  OcclusionMask m = OcclusionMask::empty(scene.width, scene.height);

  bool window_empty = k_lo > k_hi;
  if (window_empty) {
    // Closest achievable count >= 1: distance of k/n to the [lo, hi] window.
    std::size_t best_k = 1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= n; ++k) {
      const double f = static_cast<double>(k) / static_cast<double>(n);
      const double d = f < cfg.target_lo ? cfg.target_lo - f : (f > cfg.target_hi ? f - cfg.target_hi : 0.0);
      if (d < best_d) {
        best_d = d;
        best_k = k;
      }
    }
    k_lo = k_hi = best_k;
    m.window_infeasible = true;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());

  // Size ladder, largest first: prefer big structured occluders, shrink when
  // they would overshoot the window.
  const int max_side = std::max(2, std::min(cfg.side_max, std::max(scene.width, scene.height)));
  std::vector<int> ladder;
  for (double f : {1.0, 0.8, 0.62, 0.48, 0.36, 0.26, 0.18, 0.12, 0.07, 0.04}) {
    const int s = std::max(2, static_cast<int>(std::lround(f * max_side)));
    if (ladder.empty() || s < ladder.back()) ladder.push_back(s);
  }

  std::vector<char> covered(n, 0);
  std::size_t covered_count = 0;

  for (std::size_t anchor_id : order) {
    if (covered_count >= k_lo) break;
    if (cfg.max_rectangles > 0 &&
        m.rectangles.size() >= static_cast<std::size_t>(cfg.max_rectangles))
      break;
    if (covered[anchor_id]) continue;
    const BoxAnnotation& anchor = scene.boxes[anchor_id];
    const double aspect = rng.uniform(0.75, 1.3333);

    for (int s : ladder) {
      const int w = std::max(2, std::min({static_cast<int>(std::lround(s * std::sqrt(aspect))),
                                          cfg.side_max, scene.width}));
      const int h = std::max(2, std::min({static_cast<int>(std::lround(s / std::sqrt(aspect))),
                                          cfg.side_max, scene.height}));
      const OccluderRect r = occ_detail::anchored_rect(anchor.center_x(), anchor.center_y(), w, h,
                                                       scene.width, scene.height);
      // Count the union if this rectangle were added.
      std::vector<OccluderRect> trial = m.rectangles;
      trial.push_back(r);
      const std::size_t hit = occ_detail::centers_inside(trial, scene).size();
      if (hit <= k_hi) {
        occ_detail::paint(m, r);
        covered.assign(n, 0);
        covered_count = 0;
        for (std::size_t id : occ_detail::centers_inside(m.rectangles, scene)) {
          covered[id] = 1;
          ++covered_count;
        }
        break;
      }
    }
  }

  occ_detail::finalize_ids(m, scene);
  const std::size_t final_count = m.occluded_instance_ids.size();
  if (!window_empty && (final_count < k_lo || final_count > k_hi)) m.window_infeasible = true;
  return m;
}

/// X_occ = X ⊙ (1 - M): masked pixels zeroed in every channel, others copied
/// bit-exactly. Image layout {H, W, C}.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& image, const OcclusionMask& mask) {
  if (image.rank() != 3) throw std::invalid_argument("apply_mask: image must be {H,W,C}");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (h != static_cast<std::size_t>(mask.height) || w != static_cast<std::size_t>(mask.width))
    throw std::invalid_argument("apply_mask: mask/image size mismatch");
  Tensor<T> out = image;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask.mask(y, x))
        for (std::size_t ch = 0; ch < c; ++ch) out(y, x, ch) = T{0};
  return out;
}

/// Center-intersection split: instance is occluded iff its center pixel is masked.
inline std::pair<std::size_t, std::size_t> count_occluded_instances(
    const OcclusionMask& mask, const std::vector<BoxAnnotation>& boxes) {
  std::size_t occluded = 0;
  for (const BoxAnnotation& b : boxes) {
    const auto [px, py] = occ_detail::center_pixel(b, mask.width, mask.height);
    if (mask.occluded_at(px, py)) ++occluded;
  }
  return {boxes.size() - occluded, occluded};
}

}  // namespace countocc
