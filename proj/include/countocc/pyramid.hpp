#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "countocc/core/tensor.hpp"
#include "countocc/occlusion.hpp"

namespace countocc {

/// Multi-level feature stack for a single batch element. Tokens are stored
/// row-major by spatial position, i.e. level.tokens is [H*W x C] with row
/// index y*W + x; batches are handled as vectors of pyramids upstream.
template <typename T>
struct FeaturePyramid {
  struct Level {
    Tensor<T> tokens;  // [H*W x C]
    std::size_t h = 0, w = 0;

    std::size_t positions() const { return h * w; }
    std::size_t channels() const { return tokens.cols(); }
  };

  std::vector<Level> levels;

  void validate() const {
    if (levels.empty()) throw std::invalid_argument("pyramid: needs at least one level");
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (levels[l].tokens.rows() != levels[l].positions())
        throw std::invalid_argument("pyramid: token/grid mismatch at level " + std::to_string(l));
      if (l > 0 && !(levels[l].h < levels[l - 1].h && levels[l].w < levels[l - 1].w))
        throw std::invalid_argument("pyramid: spatial dims must strictly decrease");
    }
  }
};

/// Per-level binary occlusion mask, {H_l, W_l}.
struct LevelMask {
  Tensor<std::uint8_t> grid;

  std::size_t h() const { return grid.dim(0); }
  std::size_t w() const { return grid.dim(1); }

  std::size_t occluded_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) n += grid[i];
    return n;
  }
};

/// Visible/occluded decomposition of one level, row-major spatial order.
template <typename T>
struct TokenSplit {
  Tensor<T> visible_tokens;   // [N_v x C]
  Tensor<T> occluded_values;  // [N_o x C], the original features at masked cells
  std::vector<std::size_t> visible_indices;
  std::vector<std::size_t> occluded_indices;

  std::size_t n_visible() const { return visible_indices.size(); }
  std::size_t n_occluded() const { return occluded_indices.size(); }
};

/// Area-pool the full-resolution mask onto a level grid and binarize at 0.5:
/// a cell is occluded iff at least half of the image area it covers is masked.
/// Handles non-divisible grids by exact fractional coverage.
inline LevelMask downsample_mask(const OcclusionMask& mask, std::size_t level_h,
                                 std::size_t level_w) {
  if (level_h == 0 || level_w == 0) throw std::invalid_argument("downsample_mask: empty grid");
  const auto ih = static_cast<std::size_t>(mask.height);
  const auto iw = static_cast<std::size_t>(mask.width);
  LevelMask out;
  out.grid = Tensor<std::uint8_t>({level_h, level_w}, 0);

  const double sy = static_cast<double>(ih) / static_cast<double>(level_h);
  const double sx = static_cast<double>(iw) / static_cast<double>(level_w);
  for (std::size_t cy = 0; cy < level_h; ++cy) {
    const double y0 = cy * sy, y1 = (cy + 1) * sy;
    for (std::size_t cx = 0; cx < level_w; ++cx) {
      const double x0 = cx * sx, x1 = (cx + 1) * sx;
      double covered = 0.0;
      for (auto py = static_cast<std::size_t>(y0); py < ih && py < y1; ++py) {
        const double wy = std::min(y1, static_cast<double>(py + 1)) -
                          std::max(y0, static_cast<double>(py));
        if (wy <= 0) continue;
        for (auto px = static_cast<std::size_t>(x0); px < iw && px < x1; ++px) {
          const double wx = std::min(x1, static_cast<double>(px + 1)) -
                            std::max(x0, static_cast<double>(px));
          if (wx <= 0) continue;
          if (mask.mask(py, px)) covered += wy * wx;
        }
      }
      if (covered >= 0.5 * sy * sx) out.grid(cy, cx) = 1;
    }
  }
  return out;
}

/// flatten(Z[¬M]) plus the index bookkeeping needed to reassemble.
template <typename T>
TokenSplit<T> separate_tokens(const Tensor<T>& level_tokens, const LevelMask& level_mask) {
  if (level_tokens.rows() != level_mask.grid.size())
    throw std::invalid_argument("separate_tokens: token/mask size mismatch");
  TokenSplit<T> s;
  for (std::size_t i = 0; i < level_mask.grid.size(); ++i)
    (level_mask.grid[i] ? s.occluded_indices : s.visible_indices).push_back(i);

  const std::size_t c = level_tokens.cols();
  s.visible_tokens = Tensor<T>({s.visible_indices.size(), c});
  for (std::size_t i = 0; i < s.visible_indices.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) s.visible_tokens(i, j) = level_tokens(s.visible_indices[i], j);
  s.occluded_values = Tensor<T>({s.occluded_indices.size(), c});
  for (std::size_t i = 0; i < s.occluded_indices.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      s.occluded_values(i, j) = level_tokens(s.occluded_indices[i], j);
  return s;
}

/// Piecewise merge: visible positions bit-identical to the input, occluded
/// positions replaced by reconstructed tokens in occluded-index order.
template <typename T>
Tensor<T> reassemble(const Tensor<T>& level_tokens, const LevelMask& level_mask,
                     const Tensor<T>& reconstructed_tokens) {
  if (level_tokens.rows() != level_mask.grid.size())
    throw std::invalid_argument("reassemble: token/mask size mismatch");
  std::vector<std::size_t> occluded;
  for (std::size_t i = 0; i < level_mask.grid.size(); ++i)
    if (level_mask.grid[i]) occluded.push_back(i);
  if (reconstructed_tokens.rows() != occluded.size())
    throw std::invalid_argument("reassemble: reconstructed token count mismatch");

  Tensor<T> out = level_tokens;
  for (std::size_t i = 0; i < occluded.size(); ++i)
    for (std::size_t j = 0; j < level_tokens.cols(); ++j)
      out(occluded[i], j) = reconstructed_tokens(i, j);
  return out;
}

}  // namespace countocc
