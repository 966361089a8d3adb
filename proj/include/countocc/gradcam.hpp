#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "countocc/core/autodiff.hpp"
#include "countocc/core/tensor.hpp"
#include "countocc/pyramid.hpp"

namespace countocc {

using ad::bilinear_resize;

/// Builds decoder logits Y [Q x C_vocab] from per-level feature variables
/// ([H_l*W_l x C_l] each) on the given tape. The same builder serves both
/// oracle realizations.
template <typename T>
using HeadBuilder = std::function<ad::Var(ad::Tape<T>&, const std::vector<ad::Var>&)>;

/// Eq. 10 on plain logits: per query take the vocabulary maximum, average the
/// k most confident queries; k is clamped to Q.
template <typename T>
T matching_score(const Tensor<T>& logits, std::size_t k) {
  if (logits.rows() == 0 || logits.cols() == 0)
    throw std::invalid_argument("matching_score: empty logits");
  if (k < 1) throw std::invalid_argument("matching_score: k must be >= 1");
  std::vector<T> maxes(logits.rows());
  for (std::size_t q = 0; q < logits.rows(); ++q) {
    T mx = logits(q, 0);
    for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(q, c));
    maxes[q] = mx;
  }
  k = std::min(k, maxes.size());
  std::stable_sort(maxes.begin(), maxes.end(), [](T a, T b) { return a > b; });
  T s = T{0};
  for (std::size_t i = 0; i < k; ++i) s += maxes[i];
  return s / static_cast<T>(k);
}

template <typename T>
ad::Var matching_score_tape(ad::Tape<T>& tp, ad::Var logits, std::size_t k) {
  const std::size_t q = tp.value(logits).rows();
  if (q == 0) throw std::invalid_argument("matching_score: empty logits");
  return tp.topk_mean(tp.rowmax(logits), std::min(k, q));
}

/// Eq. 11: α_c = spatial mean of ∂s/∂Z_c. Gradient layout [H*W x C].
template <typename T>
std::vector<T> channel_weights(const Tensor<T>& level_gradient) {
  const std::size_t hw = level_gradient.rows(), c = level_gradient.cols();
  if (hw == 0) throw std::invalid_argument("channel_weights: empty gradient");
  std::vector<T> alpha(c, T{0});
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t j = 0; j < c; ++j) alpha[j] += level_gradient(i, j);
  for (std::size_t j = 0; j < c; ++j) alpha[j] /= static_cast<T>(hw);
  return alpha;
}

/// Eq. 12: Ω = ReLU(Σ_c α_c Z_c), returned on the level grid [h x w].
template <typename T>
Tensor<T> level_attention(const std::vector<T>& alpha, const Tensor<T>& level_tokens,
                          std::size_t h, std::size_t w) {
  if (alpha.size() != level_tokens.cols())
    throw std::invalid_argument("level_attention: channel mismatch");
  if (level_tokens.rows() != h * w)
    throw std::invalid_argument("level_attention: grid mismatch");
  Tensor<T> omega({h, w}, T{0});
  for (std::size_t i = 0; i < h * w; ++i) {
    T v = T{0};
    for (std::size_t j = 0; j < alpha.size(); ++j) v += alpha[j] * level_tokens(i, j);
    omega[i] = v > T{0} ? v : T{0};
  }
  return omega;
}

/// Single-channel attention map at input resolution with its per-level pieces.
template <typename T>
struct AttentionMap {
  Tensor<T> map;                  // G, [H x W]
  std::vector<Tensor<T>> omegas;  // per-level Ω on the level grids
  std::vector<T> betas;           // Σβ = 1
  std::vector<T> energies;        // Σ|∂s/∂Z^(l)| per level
  T score = T{0};
};

/// Softmax over per-level gradient energies (Eq. 13's β), shifted by the max
/// for stability — softmax is shift-invariant so the values are unchanged.
template <typename T>
std::vector<T> energy_softmax(const std::vector<T>& energies) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T e : energies) mx = std::max(mx, e);
  std::vector<T> beta(energies.size());
  T sum = T{0};
  for (std::size_t l = 0; l < energies.size(); ++l) {
    beta[l] = std::exp(energies[l] - mx);
    sum += beta[l];
  }
  for (T& b : beta) b /= sum;
  return beta;
}

/// Eq. 13: bilinear upsample each Ω to the output grid and mix with β
/// proportional to gradient energy.
template <typename T>
AttentionMap<T> aggregate_levels(const std::vector<Tensor<T>>& omegas,
                                 const std::vector<Tensor<T>>& level_gradients,
                                 std::size_t out_h, std::size_t out_w) {
  if (omegas.empty() || omegas.size() != level_gradients.size())
    throw std::invalid_argument("aggregate_levels: level count mismatch");
  AttentionMap<T> result;
  result.omegas = omegas;
  for (const Tensor<T>& g : level_gradients) {
    T e = T{0};
    for (std::size_t i = 0; i < g.size(); ++i) e += std::abs(g[i]);
    result.energies.push_back(e);
  }
  result.betas = energy_softmax(result.energies);
  result.map = Tensor<T>({out_h, out_w}, T{0});
  for (std::size_t l = 0; l < omegas.size(); ++l) {
    Tensor<T> up = bilinear_resize(omegas[l], out_h, out_w);
    for (std::size_t i = 0; i < up.size(); ++i) result.map[i] += result.betas[l] * up[i];
  }
  return result;
}

/// Max-normalize a map to [0, 1]; an all-zero map stays zero.
template <typename T>
void max_normalize(Tensor<T>& map) {
  T mx = T{0};
  for (std::size_t i = 0; i < map.size(); ++i) mx = std::max(mx, map[i]);
  if (mx > T{0})
    for (std::size_t i = 0; i < map.size(); ++i) map[i] /= mx;
}

/// Matching score plus its gradients w.r.t. every pyramid level.
template <typename T>
struct ScoreGradients {
  T score = T{0};
  std::vector<Tensor<T>> gradients;  // [H_l*W_l x C_l] per level
};

/// Contract for ∂s/∂Z^(l) realization; both a reverse-mode and a central
/// finite-difference implementation exist so each can audit the other.
template <typename T>
class GradientOracle {
 public:
  virtual ~GradientOracle() = default;
  virtual ScoreGradients<T> evaluate(const FeaturePyramid<T>& pyramid,
                                     const HeadBuilder<T>& head, std::size_t k) = 0;
};

template <typename T>
class AutodiffGradientOracle final : public GradientOracle<T> {
 public:
  ScoreGradients<T> evaluate(const FeaturePyramid<T>& pyramid, const HeadBuilder<T>& head,
                             std::size_t k) override {
    ad::Tape<T> tp;
    std::vector<ad::Var> leaves;
    leaves.reserve(pyramid.levels.size());
    for (const auto& level : pyramid.levels) leaves.push_back(tp.leaf(level.tokens, true));
    ad::Var logits = head(tp, leaves);
    ad::Var s = matching_score_tape(tp, logits, k);
    tp.backward(s);
    ScoreGradients<T> out;
    out.score = tp.value(s)[0];
    for (ad::Var leaf : leaves) out.gradients.push_back(tp.grad(leaf));
    return out;
  }
};

template <typename T>
class FiniteDifferenceGradientOracle final : public GradientOracle<T> {
 public:
  explicit FiniteDifferenceGradientOracle(T step = static_cast<T>(1e-5)) : step_(step) {}

  ScoreGradients<T> evaluate(const FeaturePyramid<T>& pyramid, const HeadBuilder<T>& head,
                             std::size_t k) override {
    ScoreGradients<T> out;
    out.score = score_of(pyramid, head, k);
    FeaturePyramid<T> probe = pyramid;
    for (auto& level : probe.levels) {
      Tensor<T> grad(level.tokens.shape(), T{0});
      for (std::size_t i = 0; i < level.tokens.size(); ++i) {
        const T saved = level.tokens[i];
        level.tokens[i] = saved + step_;
        const T up = score_of(probe, head, k);
        level.tokens[i] = saved - step_;
        const T down = score_of(probe, head, k);
        level.tokens[i] = saved;
        grad[i] = (up - down) / (T{2} * step_);
      }
      out.gradients.push_back(std::move(grad));
    }
    return out;
  }

 private:
  static T score_of(const FeaturePyramid<T>& pyramid, const HeadBuilder<T>& head, std::size_t k) {
    ad::Tape<T> tp;
    std::vector<ad::Var> leaves;
    for (const auto& level : pyramid.levels) leaves.push_back(tp.constant(level.tokens));
    return matching_score(tp.value(head(tp, leaves)), k);
  }

  T step_;
};

/// Full pipeline: score -> oracle gradients -> channel weights -> per-level
/// attention -> gradient-energy aggregation. Deterministic given inputs.
template <typename T>
AttentionMap<T> gradcam(const FeaturePyramid<T>& pyramid, const HeadBuilder<T>& head,
                        GradientOracle<T>& oracle, std::size_t k, std::size_t out_h,
                        std::size_t out_w, bool normalize = true) {
  ScoreGradients<T> sg = oracle.evaluate(pyramid, head, k);
  if (sg.gradients.size() != pyramid.levels.size())
    throw std::invalid_argument("gradcam: oracle level count mismatch");
  std::vector<Tensor<T>> omegas;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const auto& level = pyramid.levels[l];
    if (!sg.gradients[l].same_shape(level.tokens))
      throw std::invalid_argument("gradcam: oracle gradient shape mismatch");
    omegas.push_back(
        level_attention(channel_weights(sg.gradients[l]), level.tokens, level.h, level.w));
  }
  AttentionMap<T> map = aggregate_levels(omegas, sg.gradients, out_h, out_w);
  map.score = sg.score;
  if (normalize) max_normalize(map.map);
  return map;
}

/// Stage-2 training form of Eqs. 12–13: α and β enter as detached constants
/// while the map stays differentiable w.r.t. the level features. Mirrors the
/// value pipeline exactly (including optional max normalization).
template <typename T>
ad::Var attention_map_tape(ad::Tape<T>& tp, const std::vector<ad::Var>& level_tokens,
                           const std::vector<std::pair<std::size_t, std::size_t>>& level_dims,
                           const std::vector<std::vector<T>>& alphas,
                           const std::vector<T>& betas, std::size_t out_h, std::size_t out_w,
                           bool normalize = true) {
  if (level_tokens.size() != alphas.size() || level_tokens.size() != betas.size())
    throw std::invalid_argument("attention_map_tape: level count mismatch");
  ad::Var acc;
  for (std::size_t l = 0; l < level_tokens.size(); ++l) {
    Tensor<T> alpha_col({alphas[l].size(), 1});
    for (std::size_t j = 0; j < alphas[l].size(); ++j) alpha_col(j, 0) = alphas[l][j];
    ad::Var omega = tp.relu(tp.matmul(level_tokens[l], tp.constant(std::move(alpha_col))));
    ad::Var grid = tp.reshape(omega, {level_dims[l].first, level_dims[l].second});
    ad::Var up = tp.scale(tp.upsample_bilinear(grid, out_h, out_w), betas[l]);
    acc = l == 0 ? up : tp.add(acc, up);
  }
  if (normalize) {
    ad::Var mx = tp.max_all(acc);
    if (tp.value(mx)[0] > T{0}) acc = tp.div_scalar(acc, mx);
  }
  return acc;
}

}  // namespace countocc
