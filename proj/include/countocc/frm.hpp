#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "countocc/core/autodiff.hpp"
#include "countocc/core/rng.hpp"
#include "countocc/core/tensor.hpp"
#include "countocc/pyramid.hpp"

namespace countocc {

/// Fixed 2-D sinusoidal positional table over an h x w grid, [h*w x c].
/// Half the channels encode the row coordinate, half the column; c % 4 == 0.
template <typename T>
Tensor<T> sinusoidal_pos_table(std::size_t h, std::size_t w, std::size_t c) {
  if (c % 4 != 0) throw std::invalid_argument("pos table: channels must be divisible by 4");
  Tensor<T> pe({h * w, c}, T{0});
  const std::size_t half = c / 2;    // per-axis budget
  const std::size_t pairs = half / 2;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t row = y * w + x;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double omega =
            1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(pairs));
        pe(row, 2 * i) = static_cast<T>(std::sin(y * omega));
        pe(row, 2 * i + 1) = static_cast<T>(std::cos(y * omega));
        pe(row, half + 2 * i) = static_cast<T>(std::sin(x * omega));
        pe(row, half + 2 * i + 1) = static_cast<T>(std::cos(x * omega));
      }
    }
  return pe;
}

template <typename T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;  // [C x C] each
};

/// Per-level reconstructor parameters. pos_table is fixed (sinusoidal) and not
/// trained; everything else is.
template <typename T>
struct FrmLevelParams {
  std::size_t heads = 4;
  std::size_t grid_h = 0, grid_w = 0;
  Tensor<T> mu_mask;    // [1 x C]
  Tensor<T> pos_table;  // [H*W x C]
  AttentionParams<T> self_attn, cross_vis, cross_sem;
  Tensor<T> vt_proj;  // [D_fusion x C]
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // hidden = 4C

  std::size_t channels() const { return mu_mask.cols(); }

  void validate() const {
    const std::size_t c = channels();
    if (heads == 0 || c % heads != 0)
      throw std::invalid_argument("frm: head count must divide channel count");
    if (pos_table.rows() != grid_h * grid_w || pos_table.cols() != c)
      throw std::invalid_argument("frm: positional table shape mismatch");
  }
};

namespace frm_detail {

template <typename T>
Tensor<T> xavier(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor<T> t({rows, cols});
  const double s = std::sqrt(2.0 / static_cast<double>(rows + cols));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, s));
  return t;
}

}  // namespace frm_detail

template <typename T>
FrmLevelParams<T> make_frm_level(Rng rng, std::size_t c, std::size_t grid_h, std::size_t grid_w,
                                 std::size_t d_fusion, std::size_t heads) {
  FrmLevelParams<T> p;
  p.heads = heads;
  p.grid_h = grid_h;
  p.grid_w = grid_w;
  p.mu_mask = Tensor<T>({1, c});
  for (std::size_t i = 0; i < c; ++i) p.mu_mask[i] = static_cast<T>(rng.normal(0.0, 0.5));
  p.pos_table = sinusoidal_pos_table<T>(grid_h, grid_w, c);
  for (AttentionParams<T>* a : {&p.self_attn, &p.cross_vis, &p.cross_sem}) {
    a->wq = frm_detail::xavier<T>(rng, c, c);
    a->wk = frm_detail::xavier<T>(rng, c, c);
    a->wv = frm_detail::xavier<T>(rng, c, c);
    a->wo = frm_detail::xavier<T>(rng, c, c);
  }
  p.vt_proj = frm_detail::xavier<T>(rng, d_fusion, c);
  p.mlp_w1 = frm_detail::xavier<T>(rng, c, 4 * c);
  p.mlp_b1 = Tensor<T>({1, 4 * c}, T{0});
  p.mlp_w2 = frm_detail::xavier<T>(rng, 4 * c, c);
  p.mlp_b2 = Tensor<T>({1, c}, T{0});
  p.validate();
  return p;
}

/// Tape-resident view of the parameters (leaves or constants on one tape).
template <typename T>
struct FrmLevelVars {
  std::size_t heads = 4;
  ad::Var mu_mask;
  ad::Var sa_wq, sa_wk, sa_wv, sa_wo;
  ad::Var cv_wq, cv_wk, cv_wv, cv_wo;
  ad::Var cs_wq, cs_wk, cs_wv, cs_wo;
  ad::Var vt_proj;
  ad::Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  const Tensor<T>* pos_table = nullptr;
};

template <typename T>
FrmLevelVars<T> lift_frm_level(ad::Tape<T>& tp, FrmLevelParams<T>& p, bool requires_grad) {
  FrmLevelVars<T> v;
  v.heads = p.heads;
  v.mu_mask = tp.leaf(p.mu_mask, requires_grad);
  v.sa_wq = tp.leaf(p.self_attn.wq, requires_grad);
  v.sa_wk = tp.leaf(p.self_attn.wk, requires_grad);
  v.sa_wv = tp.leaf(p.self_attn.wv, requires_grad);
  v.sa_wo = tp.leaf(p.self_attn.wo, requires_grad);
  v.cv_wq = tp.leaf(p.cross_vis.wq, requires_grad);
  v.cv_wk = tp.leaf(p.cross_vis.wk, requires_grad);
  v.cv_wv = tp.leaf(p.cross_vis.wv, requires_grad);
  v.cv_wo = tp.leaf(p.cross_vis.wo, requires_grad);
  v.cs_wq = tp.leaf(p.cross_sem.wq, requires_grad);
  v.cs_wk = tp.leaf(p.cross_sem.wk, requires_grad);
  v.cs_wv = tp.leaf(p.cross_sem.wv, requires_grad);
  v.cs_wo = tp.leaf(p.cross_sem.wo, requires_grad);
  v.vt_proj = tp.leaf(p.vt_proj, requires_grad);
  v.mlp_w1 = tp.leaf(p.mlp_w1, requires_grad);
  v.mlp_b1 = tp.leaf(p.mlp_b1, requires_grad);
  v.mlp_w2 = tp.leaf(p.mlp_w2, requires_grad);
  v.mlp_b2 = tp.leaf(p.mlp_b2, requires_grad);
  v.pos_table = &p.pos_table;
  return v;
}

/// Multi-head scaled-dot-product attention. Queries carry their positional
/// encodings already; keys may differ from values (visible keys get positions
/// added, values stay raw tokens).
template <typename T>
ad::Var multihead_attention(ad::Tape<T>& tp, ad::Var queries, ad::Var keys, ad::Var values,
                            ad::Var wq, ad::Var wk, ad::Var wv, ad::Var wo, std::size_t heads) {
  const std::size_t c = tp.value(queries).cols();
  if (c % heads != 0) throw std::invalid_argument("attention: heads must divide channels");
  if (tp.value(keys).rows() == 0) throw std::invalid_argument("attention: empty key set");
  const std::size_t dh = c / heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  ad::Var q = tp.matmul(queries, wq);
  ad::Var k = tp.matmul(keys, wk);
  ad::Var v = tp.matmul(values, wv);

  std::vector<ad::Var> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Var qh = tp.slice_cols(q, h * dh, (h + 1) * dh);
    ad::Var kh = tp.slice_cols(k, h * dh, (h + 1) * dh);
    ad::Var vh = tp.slice_cols(v, h * dh, (h + 1) * dh);
    ad::Var scores = tp.scale(tp.matmul(qh, tp.transpose(kh)), inv_scale);
    ad::Var attn = tp.softmax_rows(scores);
    head_outs.push_back(tp.matmul(attn, vh));
  }
  ad::Var merged = heads == 1 ? head_outs[0] : tp.concat_cols(head_outs);
  return tp.matmul(merged, wo);
}

/// Ψ_sa: self-attention block over the query set, with its internal residual
/// (the cross-attention residual is added where the composition calls for it,
/// on Ψ_sa's output rather than on Q_0).
template <typename T>
ad::Var self_attention(ad::Tape<T>& tp, ad::Var queries, const FrmLevelVars<T>& p) {
  return tp.add(multihead_attention(tp, queries, queries, queries, p.sa_wq, p.sa_wk, p.sa_wv,
                                    p.sa_wo, p.heads),
                queries);
}

/// Cross-attention with residual: attend(q, k, v) = Ψ_ca(q, kv) + q, the form
/// both cross-attention stages compose.
template <typename T>
ad::Var attend(ad::Tape<T>& tp, ad::Var queries, ad::Var keys, ad::Var values, ad::Var wq,
               ad::Var wk, ad::Var wv, ad::Var wo, std::size_t heads) {
  return tp.add(multihead_attention(tp, queries, keys, values, wq, wk, wv, wo, heads), queries);
}

/// Replicate(μ_mask, N_o) + positional encodings of the occluded positions.
template <typename T>
ad::Var init_queries(ad::Tape<T>& tp, const FrmLevelVars<T>& p,
                     const std::vector<std::size_t>& occluded_indices) {
  ad::Var base = tp.broadcast_row(p.mu_mask, occluded_indices.size());
  const Tensor<T>& table = *p.pos_table;
  Tensor<T> pos({occluded_indices.size(), table.cols()});
  for (std::size_t i = 0; i < occluded_indices.size(); ++i)
    for (std::size_t j = 0; j < table.cols(); ++j) pos(i, j) = table(occluded_indices[i], j);
  return tp.add(base, tp.constant(std::move(pos)));
}

/// Everything the student graph needs back from one level's reconstruction.
template <typename T>
struct LevelReconstruction {
  TokenSplit<T> split;
  ad::Var reconstructed;  // [N_o x C]; invalid when N_o == 0
  ad::Var completed;      // [H*W x C]; equals the input when N_o == 0
};

/// One FRM block: Q_0 -> self-attention -> cross-attention to visible tokens
/// (skipped under full occlusion) -> cross-attention to the fused text-visual
/// embedding -> MLP, each cross/MLP stage with its residual.
template <typename T>
LevelReconstruction<T> reconstruct_level_tape(ad::Tape<T>& tp, const Tensor<T>& level_tokens,
                                              const LevelMask& level_mask, ad::Var z_vt,
                                              const FrmLevelVars<T>& p) {
  if (tp.value(z_vt).rows() == 0) throw std::invalid_argument("semantic guidance required");

  LevelReconstruction<T> out;
  out.split = separate_tokens(level_tokens, level_mask);
  const std::size_t n_o = out.split.n_occluded();
  if (n_o == 0) {
    out.completed = tp.constant(level_tokens);
    return out;
  }

  ad::Var q0 = init_queries(tp, p, out.split.occluded_indices);
  ad::Var sa = self_attention(tp, q0, p);

  ad::Var q_vis = sa;
  if (out.split.n_visible() > 0) {
    // keys = visible tokens + their positional encodings, values = raw tokens
    const Tensor<T>& table = *p.pos_table;
    Tensor<T> keys = out.split.visible_tokens;
    for (std::size_t i = 0; i < out.split.visible_indices.size(); ++i)
      for (std::size_t j = 0; j < keys.cols(); ++j)
        keys(i, j) += table(out.split.visible_indices[i], j);
    q_vis = attend(tp, sa, tp.constant(std::move(keys)), tp.constant(out.split.visible_tokens),
                   p.cv_wq, p.cv_wk, p.cv_wv, p.cv_wo, p.heads);
  }

  ad::Var sem = tp.matmul(z_vt, p.vt_proj);  // [N_t x C]
  ad::Var z_cond = attend(tp, q_vis, sem, sem, p.cs_wq, p.cs_wk, p.cs_wv, p.cs_wo, p.heads);

  ad::Var hidden = tp.tanh(tp.add_rowvec(tp.matmul(z_cond, p.mlp_w1), p.mlp_b1));
  ad::Var mlp = tp.add_rowvec(tp.matmul(hidden, p.mlp_w2), p.mlp_b2);
  out.reconstructed = tp.add(mlp, z_cond);
  out.completed = tp.compose_rows(level_tokens, out.reconstructed, out.split.occluded_indices);
  return out;
}

/// Value-only reconstruction of one level; returns Ẑ_occ as plain tokens.
template <typename T>
Tensor<T> reconstruct_level(const Tensor<T>& level_tokens, const LevelMask& level_mask,
                            const Tensor<T>& z_vt, FrmLevelParams<T>& params) {
  ad::Tape<T> tp;
  FrmLevelVars<T> vars = lift_frm_level(tp, params, /*requires_grad=*/false);
  LevelReconstruction<T> rec =
      reconstruct_level_tape(tp, level_tokens, level_mask, tp.constant(z_vt), vars);
  if (rec.split.n_occluded() == 0) return Tensor<T>({0, level_tokens.cols()});
  return tp.value(rec.reconstructed);
}

/// Per-level reconstruction + Eq.-6 reassembly across the pyramid; levels not
/// listed as active (or with nothing occluded) pass through untouched.
template <typename T>
FeaturePyramid<T> reconstruct_pyramid(const FeaturePyramid<T>& pyramid,
                                      const std::vector<LevelMask>& level_masks,
                                      const Tensor<T>& z_vt,
                                      std::vector<FrmLevelParams<T>>& params,
                                      const std::vector<bool>& active_levels) {
  if (level_masks.size() != pyramid.levels.size() || params.size() != pyramid.levels.size() ||
      active_levels.size() != pyramid.levels.size())
    throw std::invalid_argument("reconstruct_pyramid: per-level argument count mismatch");
  FeaturePyramid<T> out = pyramid;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    if (!active_levels[l]) continue;
    Tensor<T> rec = reconstruct_level(pyramid.levels[l].tokens, level_masks[l], z_vt, params[l]);
    if (rec.rows() == 0) continue;
    out.levels[l].tokens = reassemble(pyramid.levels[l].tokens, level_masks[l], rec);
  }
  return out;
}

}  // namespace countocc
