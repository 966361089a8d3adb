#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "countocc/core/autodiff.hpp"
#include "countocc/core/rng.hpp"
#include "countocc/core/tensor.hpp"
#include "countocc/frm.hpp"
#include "countocc/gradcam.hpp"
#include "countocc/losses.hpp"
#include "countocc/metrics.hpp"
#include "countocc/occlusion.hpp"
#include "countocc/pyramid.hpp"

namespace countocc {

/// Structural sizes of the toy pipeline. Channel plan C_l = base_channels<<l,
/// stride plan stride0<<l; the head works on the level-0 grid.
struct PipelineConfig {
  int image_h = 64, image_w = 64;
  int levels = 3;
  int stride0 = 4;
  int base_channels = 16;
  int heads = 4;
  int d_fusion = 16;
  int d_embed = 8;
  int d_head = 8;
  int vocab = 4;
  int topk = 900;
  bool normalize_attention = true;
  std::vector<bool> frm_active;  // per level; empty = all active

  std::size_t channels(int level) const {
    return static_cast<std::size_t>(base_channels) << level;
  }
  int stride(int level) const { return stride0 << level; }
  std::size_t grid_h(int level) const { return static_cast<std::size_t>(image_h / stride(level)); }
  std::size_t grid_w(int level) const { return static_cast<std::size_t>(image_w / stride(level)); }
  std::size_t head_grid() const { return grid_h(0) * grid_w(0); }

  bool level_active(int level) const {
    if (frm_active.empty()) return true;
    return frm_active[static_cast<std::size_t>(level)];
  }

  void validate() const {
    if (levels < 1) throw std::invalid_argument("config: levels must be >= 1");
    const int top_stride = stride(levels - 1);
    if (image_h % top_stride != 0 || image_w % top_stride != 0)
      throw std::invalid_argument("config: image size must be divisible by the coarsest stride");
    if (base_channels % 4 != 0)
      throw std::invalid_argument("config: base_channels must be divisible by 4");
    if (!frm_active.empty() && frm_active.size() != static_cast<std::size_t>(levels))
      throw std::invalid_argument("config: frm_active must list every level");
  }
};

// ---------------------------------------------------------------------------
// Synthetic dot scenes

struct SceneConfig {
  int width = 64, height = 64;
  int count_min = 3, count_max = 12;
  double radius_min = 3.0, radius_max = 6.0;
  int distractors_max = 3;
  int vocab = 4;
  int exemplar_count = 3;
  // discs clump around a few cluster anchors; local density then varies
  // enough that hidden counts cannot be read off the masked area alone
  int clusters_min = 1, clusters_max = 3;
  double cluster_spread = 9.0;
};

struct SyntheticScene {
  Tensor<double> image;  // {H, W, 3} in [0, 1]
  AnnotatedScene annotations;
  int count = 0;  // == annotations.boxes.size()
};

namespace harness_detail {

inline const double kPalette[8][3] = {
    {0.90, 0.20, 0.20}, {0.20, 0.85, 0.25}, {0.25, 0.35, 0.95}, {0.95, 0.85, 0.20},
    {0.85, 0.30, 0.90}, {0.20, 0.90, 0.90}, {0.95, 0.55, 0.15}, {0.75, 0.75, 0.75}};

inline void draw_disc(Tensor<double>& image, double cx, double cy, double r, const double* rgb) {
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  const int y1 = std::min(static_cast<int>(image.dim(0)) - 1, static_cast<int>(std::ceil(cy + r)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
  const int x1 = std::min(static_cast<int>(image.dim(1)) - 1, static_cast<int>(std::ceil(cx + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r)
        for (int ch = 0; ch < 3; ++ch)
          image(static_cast<std::size_t>(y), static_cast<std::size_t>(x),
                static_cast<std::size_t>(ch)) = rgb[ch];
    }
}

}  // namespace harness_detail

/// Disc scene on a mid-gray background: N target-class discs (annotated and
/// counted) plus a few unannotated distractor discs of other classes.
inline SyntheticScene generate_scene(const SceneConfig& cfg, Rng& rng) {
  if (cfg.vocab < 1 || cfg.vocab > 8) throw std::invalid_argument("scene: vocab must be in [1,8]");
  SyntheticScene s;
  s.image = Tensor<double>({static_cast<std::size_t>(cfg.height),
                            static_cast<std::size_t>(cfg.width), 3},
                           0.5);
  const int target_class = static_cast<int>(rng.uniform_int(0, cfg.vocab - 1));
  const int n = static_cast<int>(rng.uniform_int(cfg.count_min, cfg.count_max));

  s.annotations.width = cfg.width;
  s.annotations.height = cfg.height;
  s.annotations.class_id = target_class;
  s.annotations.label = "class" + std::to_string(target_class);

  struct Disc {
    double cx, cy, r;
    int cls;
  };
  std::vector<Disc> discs;
  const int n_clusters =
      static_cast<int>(rng.uniform_int(cfg.clusters_min, std::max(cfg.clusters_min,
                                                                  cfg.clusters_max)));
  std::vector<std::pair<double, double>> anchors;
  const double margin = cfg.radius_max + 1.0;
  for (int c = 0; c < n_clusters; ++c)
    anchors.emplace_back(rng.uniform(margin, cfg.width - margin),
                         rng.uniform(margin, cfg.height - margin));
  const auto place = [&](double r) {
    const auto& [ax, ay] = anchors[rng.index(anchors.size())];
    double cx = ax + rng.normal(0.0, cfg.cluster_spread);
    double cy = ay + rng.normal(0.0, cfg.cluster_spread);
    cx = std::max(r, std::min(cx, cfg.width - r));
    cy = std::max(r, std::min(cy, cfg.height - r));
    return std::pair<double, double>{cx, cy};
  };
  for (int i = 0; i < n; ++i) {
    const double r = rng.uniform(cfg.radius_min, cfg.radius_max);
    const auto [cx, cy] = place(r);
    discs.push_back({cx, cy, r, target_class});
    s.annotations.boxes.push_back({cx - r, cy - r, cx + r, cy + r});
  }
  if (cfg.vocab > 1 && cfg.distractors_max > 0) {
    const int extra = static_cast<int>(rng.uniform_int(0, cfg.distractors_max));
    for (int i = 0; i < extra; ++i) {
      const double r = rng.uniform(cfg.radius_min, cfg.radius_max);
      const auto [cx, cy] = place(r);
      int cls = static_cast<int>(rng.uniform_int(0, cfg.vocab - 2));
      if (cls >= target_class) ++cls;
      discs.push_back({cx, cy, r, cls});
    }
  }
  for (const auto& d : discs)
    harness_detail::draw_disc(s.image, d.cx, d.cy, d.r, harness_detail::kPalette[d.cls]);

  const int ex = std::min<int>(cfg.exemplar_count, n);
  for (int i = 0; i < ex; ++i) s.annotations.exemplars.push_back(s.annotations.boxes[i]);
  s.count = n;
  return s;
}

// ---------------------------------------------------------------------------
// Model parameters

template <typename T>
struct BackboneLevelParams {
  Tensor<T> w;  // [patch_dim x C_l]
  Tensor<T> b;  // [1 x C_l]
};

template <typename T>
struct ModelParams {
  std::vector<BackboneLevelParams<T>> backbone;  // frozen, shared teacher/student
  std::vector<FrmLevelParams<T>> frm;
  Tensor<T> class_embed;  // [V x d_embed]
  Tensor<T> fuse_w;       // [(d_embed + C_0) x d_fusion]
  Tensor<T> fuse_b;       // [1 x d_fusion]
  std::vector<Tensor<T>> head_proj_w;  // per level [C_l x d_head]
  Tensor<T> head_proj_b;  // [1 x d_head]
  Tensor<T> cond_w;       // [d_fusion x d_head]
  Tensor<T> guid_w;       // [d_fusion x d_head]
  Tensor<T> guid_b;       // [1 x d_head]
  Tensor<T> logit_w;      // [d_head x vocab]
  Tensor<T> logit_b;      // [1 x vocab]
  Tensor<T> count_bias;   // [1 x 1]

  /// Fixed visitation order; names are the stable checkpoint contract.
  template <typename F>
  void visit(F&& f) {
    for (std::size_t l = 0; l < backbone.size(); ++l) {
      const std::string p = "backbone.l" + std::to_string(l) + ".";
      f(p + "w", backbone[l].w, false);
      f(p + "b", backbone[l].b, false);
    }
    for (std::size_t l = 0; l < frm.size(); ++l) {
      const std::string p = "frm.l" + std::to_string(l) + ".";
      f(p + "mu_mask", frm[l].mu_mask, true);
      f(p + "pos_table", frm[l].pos_table, false);
      f(p + "sa.wq", frm[l].self_attn.wq, true);
      f(p + "sa.wk", frm[l].self_attn.wk, true);
      f(p + "sa.wv", frm[l].self_attn.wv, true);
      f(p + "sa.wo", frm[l].self_attn.wo, true);
      f(p + "cv.wq", frm[l].cross_vis.wq, true);
      f(p + "cv.wk", frm[l].cross_vis.wk, true);
      f(p + "cv.wv", frm[l].cross_vis.wv, true);
      f(p + "cv.wo", frm[l].cross_vis.wo, true);
      f(p + "cs.wq", frm[l].cross_sem.wq, true);
      f(p + "cs.wk", frm[l].cross_sem.wk, true);
      f(p + "cs.wv", frm[l].cross_sem.wv, true);
      f(p + "cs.wo", frm[l].cross_sem.wo, true);
      f(p + "vt_proj", frm[l].vt_proj, true);
      f(p + "mlp.w1", frm[l].mlp_w1, true);
      f(p + "mlp.b1", frm[l].mlp_b1, true);
      f(p + "mlp.w2", frm[l].mlp_w2, true);
      f(p + "mlp.b2", frm[l].mlp_b2, true);
    }
    f("fusion.class_embed", class_embed, true);
    f("fusion.w", fuse_w, true);
    f("fusion.b", fuse_b, true);
    for (std::size_t l = 0; l < head_proj_w.size(); ++l)
      f("head.proj.l" + std::to_string(l) + ".w", head_proj_w[l], true);
    f("head.proj_b", head_proj_b, true);
    f("head.cond_w", cond_w, true);
    f("head.guid_w", guid_w, true);
    f("head.guid_b", guid_b, true);
    f("head.logit_w", logit_w, true);
    f("head.logit_b", logit_b, true);
    f("head.count_bias", count_bias, true);
  }
};

template <typename T>
ModelParams<T> init_model(const PipelineConfig& cfg, const Rng& master) {
  cfg.validate();
  ModelParams<T> m;
  for (int l = 0; l < cfg.levels; ++l) {
    Rng r = master.derive("backbone", static_cast<std::uint64_t>(l));
    const std::size_t patch_dim =
        static_cast<std::size_t>(cfg.stride(l)) * static_cast<std::size_t>(cfg.stride(l)) * 3;
    BackboneLevelParams<T> bl;
    bl.w = Tensor<T>({patch_dim, cfg.channels(l)});
    const double s = 1.0 / std::sqrt(static_cast<double>(patch_dim));
    for (std::size_t i = 0; i < bl.w.size(); ++i) bl.w[i] = static_cast<T>(r.normal(0.0, s));
    bl.b = Tensor<T>({1, cfg.channels(l)});
    for (std::size_t i = 0; i < bl.b.size(); ++i) bl.b[i] = static_cast<T>(r.normal(0.0, 0.2));
    m.backbone.push_back(std::move(bl));

    m.frm.push_back(make_frm_level<T>(master.derive("frm", static_cast<std::uint64_t>(l)),
                                      cfg.channels(l), cfg.grid_h(l), cfg.grid_w(l),
                                      static_cast<std::size_t>(cfg.d_fusion),
                                      static_cast<std::size_t>(cfg.heads)));
  }
  Rng rf = master.derive("fusion");
  m.class_embed = frm_detail::xavier<T>(rf, static_cast<std::size_t>(cfg.vocab),
                                        static_cast<std::size_t>(cfg.d_embed));
  m.fuse_w = frm_detail::xavier<T>(rf, static_cast<std::size_t>(cfg.d_embed) + cfg.channels(0),
                                   static_cast<std::size_t>(cfg.d_fusion));
  m.fuse_b = Tensor<T>({1, static_cast<std::size_t>(cfg.d_fusion)}, T{0});
  Rng rh = master.derive("head");
  for (int l = 0; l < cfg.levels; ++l)
    m.head_proj_w.push_back(
        frm_detail::xavier<T>(rh, cfg.channels(l), static_cast<std::size_t>(cfg.d_head)));
  m.head_proj_b = Tensor<T>({1, static_cast<std::size_t>(cfg.d_head)}, T{0});
  m.cond_w = frm_detail::xavier<T>(rh, static_cast<std::size_t>(cfg.d_fusion),
                                   static_cast<std::size_t>(cfg.d_head));
  m.guid_w = frm_detail::xavier<T>(rh, static_cast<std::size_t>(cfg.d_fusion),
                                   static_cast<std::size_t>(cfg.d_head));
  m.guid_b = Tensor<T>({1, static_cast<std::size_t>(cfg.d_head)}, T{0});
  m.logit_w = frm_detail::xavier<T>(rh, static_cast<std::size_t>(cfg.d_head),
                                    static_cast<std::size_t>(cfg.vocab));
  m.logit_b = Tensor<T>({1, static_cast<std::size_t>(cfg.vocab)}, T{0});
  m.count_bias = Tensor<T>({1, 1}, T{0});
  return m;
}

// ---------------------------------------------------------------------------
// Frozen backbone

/// Strided patch-flatten + linear projection + tanh per level. Shared by
/// teacher and student; never trained.
template <typename T>
FeaturePyramid<T> backbone_forward(const Tensor<T>& image, const ModelParams<T>& m,
                                   const PipelineConfig& cfg) {
  FeaturePyramid<T> pyr;
  for (int l = 0; l < cfg.levels; ++l) {
    const int s = cfg.stride(l);
    const std::size_t gh = cfg.grid_h(l), gw = cfg.grid_w(l);
    const std::size_t patch_dim = static_cast<std::size_t>(s) * static_cast<std::size_t>(s) * 3;
    Tensor<T> patches({gh * gw, patch_dim});
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        std::size_t k = 0;
        for (int py = 0; py < s; ++py)
          for (int px = 0; px < s; ++px)
            for (int ch = 0; ch < 3; ++ch)
              patches(gy * gw + gx, k++) =
                  image(gy * s + static_cast<std::size_t>(py), gx * s + static_cast<std::size_t>(px),
                        static_cast<std::size_t>(ch));
      }
    Tensor<T> tokens = ad::Tape<T>::mm_nn(patches, m.backbone[static_cast<std::size_t>(l)].w);
    const auto& bias = m.backbone[static_cast<std::size_t>(l)].b;
    for (std::size_t i = 0; i < tokens.rows(); ++i)
      for (std::size_t j = 0; j < tokens.cols(); ++j)
        tokens(i, j) = std::tanh(tokens(i, j) + bias(0, j));
    pyr.levels.push_back({std::move(tokens), gh, gw});
  }
  return pyr;
}

// ---------------------------------------------------------------------------
// Lifted model (tape-resident trainables)

template <typename T>
struct TrainableEntry {
  std::string name;
  Tensor<T>* tensor = nullptr;
  ad::Var var;
};

template <typename T>
struct LiftedModel {
  std::vector<FrmLevelVars<T>> frm;
  ad::Var class_embed, fuse_w, fuse_b;
  std::vector<ad::Var> head_proj_w;
  ad::Var head_proj_b, cond_w, guid_w, guid_b, logit_w, logit_b, count_bias;
  std::vector<TrainableEntry<T>> trainables;  // fixed order, optimizer contract
};

template <typename T>
LiftedModel<T> lift_model(ad::Tape<T>& tp, ModelParams<T>& m, bool requires_grad) {
  LiftedModel<T> lm;
  for (auto& level : m.frm) {
    lm.frm.push_back(lift_frm_level(tp, level, requires_grad));
  }
  lm.class_embed = tp.leaf(m.class_embed, requires_grad);
  lm.fuse_w = tp.leaf(m.fuse_w, requires_grad);
  lm.fuse_b = tp.leaf(m.fuse_b, requires_grad);
  for (auto& w : m.head_proj_w) lm.head_proj_w.push_back(tp.leaf(w, requires_grad));
  lm.head_proj_b = tp.leaf(m.head_proj_b, requires_grad);
  lm.cond_w = tp.leaf(m.cond_w, requires_grad);
  lm.guid_w = tp.leaf(m.guid_w, requires_grad);
  lm.guid_b = tp.leaf(m.guid_b, requires_grad);
  lm.logit_w = tp.leaf(m.logit_w, requires_grad);
  lm.logit_b = tp.leaf(m.logit_b, requires_grad);
  lm.count_bias = tp.leaf(m.count_bias, requires_grad);

  if (requires_grad) {
    for (std::size_t l = 0; l < m.frm.size(); ++l) {
      const std::string p = "frm.l" + std::to_string(l) + ".";
      auto& fv = lm.frm[l];
      auto& fp = m.frm[l];
      lm.trainables.push_back({p + "mu_mask", &fp.mu_mask, fv.mu_mask});
      lm.trainables.push_back({p + "sa.wq", &fp.self_attn.wq, fv.sa_wq});
      lm.trainables.push_back({p + "sa.wk", &fp.self_attn.wk, fv.sa_wk});
      lm.trainables.push_back({p + "sa.wv", &fp.self_attn.wv, fv.sa_wv});
      lm.trainables.push_back({p + "sa.wo", &fp.self_attn.wo, fv.sa_wo});
      lm.trainables.push_back({p + "cv.wq", &fp.cross_vis.wq, fv.cv_wq});
      lm.trainables.push_back({p + "cv.wk", &fp.cross_vis.wk, fv.cv_wk});
      lm.trainables.push_back({p + "cv.wv", &fp.cross_vis.wv, fv.cv_wv});
      lm.trainables.push_back({p + "cv.wo", &fp.cross_vis.wo, fv.cv_wo});
      lm.trainables.push_back({p + "cs.wq", &fp.cross_sem.wq, fv.cs_wq});
      lm.trainables.push_back({p + "cs.wk", &fp.cross_sem.wk, fv.cs_wk});
      lm.trainables.push_back({p + "cs.wv", &fp.cross_sem.wv, fv.cs_wv});
      lm.trainables.push_back({p + "cs.wo", &fp.cross_sem.wo, fv.cs_wo});
      lm.trainables.push_back({p + "vt_proj", &fp.vt_proj, fv.vt_proj});
      lm.trainables.push_back({p + "mlp.w1", &fp.mlp_w1, fv.mlp_w1});
      lm.trainables.push_back({p + "mlp.b1", &fp.mlp_b1, fv.mlp_b1});
      lm.trainables.push_back({p + "mlp.w2", &fp.mlp_w2, fv.mlp_w2});
      lm.trainables.push_back({p + "mlp.b2", &fp.mlp_b2, fv.mlp_b2});
    }
    lm.trainables.push_back({"fusion.class_embed", &m.class_embed, lm.class_embed});
    lm.trainables.push_back({"fusion.w", &m.fuse_w, lm.fuse_w});
    lm.trainables.push_back({"fusion.b", &m.fuse_b, lm.fuse_b});
    for (std::size_t l = 0; l < m.head_proj_w.size(); ++l)
      lm.trainables.push_back(
          {"head.proj.l" + std::to_string(l) + ".w", &m.head_proj_w[l], lm.head_proj_w[l]});
    lm.trainables.push_back({"head.proj_b", &m.head_proj_b, lm.head_proj_b});
    lm.trainables.push_back({"head.cond_w", &m.cond_w, lm.cond_w});
    lm.trainables.push_back({"head.guid_w", &m.guid_w, lm.guid_w});
    lm.trainables.push_back({"head.guid_b", &m.guid_b, lm.guid_b});
    lm.trainables.push_back({"head.logit_w", &m.logit_w, lm.logit_w});
    lm.trainables.push_back({"head.logit_b", &m.logit_b, lm.logit_b});
    lm.trainables.push_back({"head.count_bias", &m.count_bias, lm.count_bias});
  }
  return lm;
}

// ---------------------------------------------------------------------------
// Fusion and head

/// Level-0 cells whose centers fall inside the box (the center cell as a
/// fallback for boxes smaller than one cell).
inline std::vector<std::size_t> box_cells(const BoxAnnotation& box, const PipelineConfig& cfg) {
  const int s = cfg.stride(0);
  const std::size_t gh = cfg.grid_h(0), gw = cfg.grid_w(0);
  std::vector<std::size_t> cells;
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const double cx = (gx + 0.5) * s, cy = (gy + 0.5) * s;
      if (cx >= box.x_min && cx < box.x_max && cy >= box.y_min && cy < box.y_max)
        cells.push_back(gy * gw + gx);
    }
  if (cells.empty()) {
    const auto gx = std::min<std::size_t>(gw - 1, static_cast<std::size_t>(box.center_x() / s));
    const auto gy = std::min<std::size_t>(gh - 1, static_cast<std::size_t>(box.center_y() / s));
    cells.push_back(gy * gw + gx);
  }
  return cells;
}

/// Z_vt: class-id embedding concatenated with mean-pooled exemplar-box
/// level-0 features, linearly projected into the fusion space. One fused
/// token per scene.
template <typename T>
ad::Var fusion_tape(ad::Tape<T>& tp, const Tensor<T>& level0_tokens, const AnnotatedScene& scene,
                    const LiftedModel<T>& lm, const PipelineConfig& cfg) {
  const std::size_t c0 = cfg.channels(0);
  Tensor<T> pooled({1, c0}, T{0});
  const auto& exemplars = scene.exemplars.empty() ? scene.boxes : scene.exemplars;
  if (exemplars.empty()) throw std::invalid_argument("fusion: scene has no exemplar boxes");
  for (const auto& box : exemplars) {
    const auto cells = box_cells(box, cfg);
    Tensor<T> one({1, c0}, T{0});
    for (std::size_t cell : cells)
      for (std::size_t j = 0; j < c0; ++j) one(0, j) += level0_tokens(cell, j);
    for (std::size_t j = 0; j < c0; ++j) pooled(0, j) += one(0, j) / static_cast<T>(cells.size());
  }
  for (std::size_t j = 0; j < c0; ++j) pooled(0, j) /= static_cast<T>(exemplars.size());

  ad::Var embed = tp.gather_rows(lm.class_embed, {static_cast<std::size_t>(scene.class_id)});
  ad::Var cat = tp.concat_cols({embed, tp.constant(std::move(pooled))});
  return tp.tanh(tp.add_rowvec(tp.matmul(cat, lm.fuse_w), lm.fuse_b));
}

template <typename T>
struct HeadOutputs {
  ad::Var density;  // [G x 1], non-negative
  ad::Var logits;   // [Q = G x vocab]
};

/// Counting head over the completed pyramid: per-level linear projections
/// summed on the level-0 grid, conditioned on the fused token, with a
/// softplus density and per-cell vocabulary logits.
template <typename T>
HeadOutputs<T> head_forward_tape(ad::Tape<T>& tp, const std::vector<ad::Var>& level_tokens,
                                 ad::Var z_vt, const LiftedModel<T>& lm,
                                 const PipelineConfig& cfg) {
  const std::size_t g_h = cfg.grid_h(0), g_w = cfg.grid_w(0);
  const std::size_t dh = static_cast<std::size_t>(cfg.d_head);
  ad::Var acc;
  for (int l = 0; l < cfg.levels; ++l) {
    ad::Var proj = tp.matmul(level_tokens[static_cast<std::size_t>(l)],
                             lm.head_proj_w[static_cast<std::size_t>(l)]);
    if (l > 0) {
      std::vector<ad::Var> channels;
      for (std::size_t d = 0; d < dh; ++d) {
        ad::Var col = tp.slice_cols(proj, d, d + 1);
        ad::Var grid = tp.reshape(col, {cfg.grid_h(l), cfg.grid_w(l)});
        channels.push_back(tp.reshape(tp.upsample_bilinear(grid, g_h, g_w), {g_h * g_w, 1}));
      }
      proj = tp.concat_cols(channels);
    }
    acc = l == 0 ? proj : tp.add(acc, proj);
  }
  ad::Var cond = tp.matmul(z_vt, lm.cond_w);  // [1 x d_head]
  ad::Var pre = tp.add(tp.add_rowvec(acc, lm.head_proj_b), tp.broadcast_row(cond, g_h * g_w));
  ad::Var hidden = tp.tanh(pre);

  ad::Var guidance = tp.tanh(tp.add_rowvec(tp.matmul(z_vt, lm.guid_w), lm.guid_b));
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  ad::Var sim = tp.scale(tp.matmul(hidden, tp.transpose(guidance)), inv_sqrt);
  HeadOutputs<T> out;
  // squared readout: non-negative density with no saturation plateau, so the
  // total-count supervision keeps a usable gradient at every cell
  ad::Var z = tp.add_scalar(sim, lm.count_bias);
  out.density = tp.mul(z, z);
  out.logits = tp.add_rowvec(tp.scale(tp.matmul(hidden, lm.logit_w), inv_sqrt), lm.logit_b);
  return out;
}

// ---------------------------------------------------------------------------
// Teacher/student pipelines

template <typename T>
struct PipelineGraph {
  FeaturePyramid<T> input_pyramid;  // frozen backbone output (plain values)
  std::vector<LevelMask> level_masks;
  std::vector<LevelReconstruction<T>> reconstructions;  // one per level (may be empty vars)
  std::vector<ad::Var> completed;                       // per-level tokens on tape
  ad::Var z_vt;
  HeadOutputs<T> head;
};

/// Builds one view's graph. Teacher view: mask == nullptr (clean image, no
/// FRM). Student view: occluded image, FRM on the active levels. With an
/// all-zero mask the student graph reduces to the teacher graph node for node.
template <typename T>
PipelineGraph<T> pipeline_tape(ad::Tape<T>& tp, const Tensor<T>& image,
                               const OcclusionMask* mask, const SyntheticScene& scene,
                               ModelParams<T>& params, const LiftedModel<T>& lm,
                               const PipelineConfig& cfg, bool use_frm) {
  PipelineGraph<T> g;
  const Tensor<T> input = mask ? apply_mask(image, *mask) : image;
  g.input_pyramid = backbone_forward(input, params, cfg);

  for (int l = 0; l < cfg.levels; ++l) {
    if (mask)
      g.level_masks.push_back(downsample_mask(*mask, cfg.grid_h(l), cfg.grid_w(l)));
    else
      g.level_masks.push_back(LevelMask{Tensor<std::uint8_t>({cfg.grid_h(l), cfg.grid_w(l)}, 0)});
  }

  g.z_vt = fusion_tape(tp, g.input_pyramid.levels[0].tokens, scene.annotations, lm, cfg);

  g.reconstructions.resize(static_cast<std::size_t>(cfg.levels));
  for (int l = 0; l < cfg.levels; ++l) {
    const auto& tokens = g.input_pyramid.levels[static_cast<std::size_t>(l)].tokens;
    const bool reconstruct = use_frm && cfg.level_active(l) &&
                             g.level_masks[static_cast<std::size_t>(l)].occluded_count() > 0;
    if (reconstruct) {
      auto rec = reconstruct_level_tape(tp, tokens, g.level_masks[static_cast<std::size_t>(l)],
                                        g.z_vt, lm.frm[static_cast<std::size_t>(l)]);
      g.completed.push_back(rec.completed);
      g.reconstructions[static_cast<std::size_t>(l)] = std::move(rec);
    } else {
      g.completed.push_back(tp.constant(tokens));
    }
  }
  g.head = head_forward_tape(tp, g.completed, g.z_vt, lm, cfg);
  return g;
}

/// Value-only forward (evaluation path).
template <typename T>
struct ForwardResult {
  FeaturePyramid<T> completed;
  Tensor<T> density;  // [G x 1]
  Tensor<T> logits;   // [Q x vocab]
  Tensor<T> z_vt;
  std::vector<LevelMask> level_masks;
};

template <typename T>
ForwardResult<T> forward_plain(const SyntheticScene& scene, const OcclusionMask* mask,
                               ModelParams<T>& params, const PipelineConfig& cfg, bool use_frm) {
  ad::Tape<T> tp;
  LiftedModel<T> lm = lift_model(tp, params, /*requires_grad=*/false);
  PipelineGraph<T> g = pipeline_tape(tp, scene.image, mask, scene, params, lm, cfg, use_frm);
  ForwardResult<T> r;
  for (int l = 0; l < cfg.levels; ++l)
    r.completed.levels.push_back({tp.value(g.completed[static_cast<std::size_t>(l)]),
                                  cfg.grid_h(l), cfg.grid_w(l)});
  r.density = tp.value(g.head.density);
  r.logits = tp.value(g.head.logits);
  r.z_vt = tp.value(g.z_vt);
  r.level_masks = std::move(g.level_masks);
  return r;
}

// ---------------------------------------------------------------------------
// Count prediction

struct CountSplit {
  double total = 0, visible = 0, occluded = 0;
};

/// Integrate the density map inside/outside the grid-downsampled mask;
/// total is defined as visible + occluded so additivity is exact.
template <typename T>
CountSplit split_counts(const Tensor<T>& density, const OcclusionMask& mask,
                        const PipelineConfig& cfg) {
  const LevelMask grid_mask = downsample_mask(mask, cfg.grid_h(0), cfg.grid_w(0));
  CountSplit out;
  for (std::size_t i = 0; i < density.rows(); ++i) {
    const double d = static_cast<double>(density(i, 0));
    if (grid_mask.grid[i])
      out.occluded += d;
    else
      out.visible += d;
  }
  out.total = out.visible + out.occluded;
  return out;
}

template <typename T>
CountSplit predict_counts(const SyntheticScene& scene, const OcclusionMask& mask,
                          ModelParams<T>& params, const PipelineConfig& cfg,
                          bool use_frm = true) {
  ForwardResult<T> r = forward_plain(scene, &mask, params, cfg, use_frm);
  return split_counts(r.density, mask, cfg);
}

// ---------------------------------------------------------------------------
// GradCAM plumbing for the harness

/// Head builder closing over the current parameters and a fixed fused token;
/// the oracle differentiates the matching score w.r.t. the level features.
template <typename T>
HeadBuilder<T> make_head_builder(ModelParams<T>& params, Tensor<T> z_vt_value,
                                 const PipelineConfig& cfg) {
  return [&params, z_vt = std::move(z_vt_value), &cfg](ad::Tape<T>& tp,
                                                       const std::vector<ad::Var>& levels) {
    LiftedModel<T> lm = lift_model(tp, params, /*requires_grad=*/false);
    return head_forward_tape(tp, levels, tp.constant(z_vt), lm, cfg).logits;
  };
}

/// Teacher or student attention map as values (normalization per config).
template <typename T>
AttentionMap<T> attention_map_of(const FeaturePyramid<T>& pyramid, const Tensor<T>& z_vt,
                                 ModelParams<T>& params, const PipelineConfig& cfg,
                                 GradientOracle<T>& oracle) {
  HeadBuilder<T> head = make_head_builder(params, z_vt, cfg);
  return gradcam(pyramid, head, oracle, static_cast<std::size_t>(cfg.topk),
                 static_cast<std::size_t>(cfg.image_h), static_cast<std::size_t>(cfg.image_w),
                 cfg.normalize_attention);
}

}  // namespace countocc
