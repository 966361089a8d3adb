#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "countocc/harness.hpp"
#include "countocc/runner.hpp"
#include "countocc/train.hpp"

namespace countocc {

struct CheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return error < tolerance; }
};

namespace gradcheck_detail {

/// Central difference of a scalar functional of one tensor (library-side
/// counterpart of the reverse-mode path; this is the independent route).
inline Tensor<double> central_difference(const std::function<double()>& eval,
                                         Tensor<double>& storage, double step) {
  Tensor<double> g(storage.shape());
  for (std::size_t i = 0; i < storage.size(); ++i) {
    const double saved = storage[i];
    storage[i] = saved + step;
    const double up = eval();
    storage[i] = saved - step;
    const double down = eval();
    storage[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline double scale_relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  double scale = 1.0, err = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    err = std::max(err, std::abs(a[i] - b[i]));
  }
  return err / scale;
}

/// Pipeline sizes small enough to sweep every parameter entry.
inline TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.image_size = 16;
  c.levels = 2;
  c.stride0 = 4;
  c.base_channels = 4;
  c.heads = 2;
  c.d_fusion = 4;
  c.d_embed = 4;
  c.d_head = 4;
  c.vocab = 3;
  c.topk = 8;
  c.count_min = 2;
  c.count_max = 4;
  c.radius_min = 1.5;
  c.radius_max = 3.0;
  c.distractors_max = 1;
  c.side_min = 5;
  c.side_max = 9;
  return c;
}

}  // namespace gradcheck_detail

/// Analytic gradients of the composite stage-1 objective (reconstruction +
/// counting) w.r.t. every FRM parameter entry, against central finite
/// differences at step 1e-5. Also asserts the freeze contract: backbone
/// parameters receive no update path and gradients w.r.t. them are never
/// produced.
inline std::vector<CheckResult> check_frm_stage1_gradients(std::uint64_t seed, int instances,
                                                           double step = 1e-5,
                                                           double tolerance = 1e-4) {
  std::vector<CheckResult> results;
  const TrainConfig cfg = gradcheck_detail::tiny_config(seed);
  const PipelineConfig pcfg = pipeline_config(cfg);
  const SceneConfig scfg = scene_config(cfg);
  const TrainOccConfig tocc{1.0, cfg.alpha_min, cfg.alpha_max, cfg.side_min, cfg.side_max, 50};
  const TrainHyper hyper = train_hyper(cfg);

  for (int inst = 0; inst < instances; ++inst) {
    const Rng master = Rng(seed).derive("frm_check", static_cast<std::uint64_t>(inst));
    ModelParams<double> params = init_model<double>(pcfg, master.derive("model"));
    Rng sr = master.derive("scene");
    SyntheticScene scene = generate_scene(scfg, sr);
    Rng mr = master.derive("mask");
    OcclusionMask mask = sample_training_mask(scene.annotations, tocc, mr);
    if (mask.rectangles.empty()) continue;  // p = 1 makes this unreachable

    const auto objective = [&]() {
      ad::Tape<double> tp;
      LiftedModel<double> lm = lift_model(tp, params, false);
      PipelineGraph<double> student =
          pipeline_tape(tp, scene.image, &mask, scene, params, lm, pcfg, true);
      const FeaturePyramid<double> teacher = backbone_forward(scene.image, params, pcfg);
      std::vector<ad::Var> tokens;
      for (const auto& r : student.reconstructions) tokens.push_back(r.reconstructed);
      auto recon = reconstruction_loss_tape(tp, tokens, teacher_targets(teacher, student),
                                            hyper.recon_weights);
      ad::Var count = tp.add_const(tp.sum_all(student.head.density),
                                   -static_cast<double>(scene.count));
      ad::Var total = tp.add(tp.scale(recon.total, hyper.w_recon),
                             tp.scale(tp.mul(count, count), hyper.w_count));
      return tp.value(total)[0];
    };

    // analytic pass
    ad::Tape<double> tp;
    LiftedModel<double> lm = lift_model(tp, params, true);
    PipelineGraph<double> student =
        pipeline_tape(tp, scene.image, &mask, scene, params, lm, pcfg, true);
    const FeaturePyramid<double> teacher = backbone_forward(scene.image, params, pcfg);
    std::vector<ad::Var> tokens;
    for (const auto& r : student.reconstructions) tokens.push_back(r.reconstructed);
    auto recon = reconstruction_loss_tape(tp, tokens, teacher_targets(teacher, student),
                                          hyper.recon_weights);
    ad::Var count = tp.add_const(tp.sum_all(student.head.density),
                                 -static_cast<double>(scene.count));
    ad::Var total = tp.add(tp.scale(recon.total, hyper.w_recon),
                           tp.scale(tp.mul(count, count), hyper.w_count));
    tp.backward(total);

    double worst = 0.0;
    for (const auto& entry : lm.trainables) {
      if (entry.name.rfind("frm.", 0) != 0) continue;
      const Tensor<double> numeric =
          gradcheck_detail::central_difference(objective, *entry.tensor, step);
      worst = std::max(worst,
                       gradcheck_detail::scale_relative_error(tp.grad(entry.var), numeric));
    }
    results.push_back(
        {"frm_stage1_grad[" + std::to_string(inst) + "]", worst, tolerance});

    // freeze contract: no backbone entry is trainable
    bool backbone_trainable = false;
    for (const auto& entry : lm.trainables)
      backbone_trainable = backbone_trainable || entry.name.rfind("backbone.", 0) == 0;
    results.push_back({"backbone_frozen[" + std::to_string(inst) + "]",
                       backbone_trainable ? 1.0 : 0.0, 0.5});
  }
  return results;
}

/// Gradients of L_sim and L_cst w.r.t. the student attention map against
/// central differences. Instances are regenerated until every pixel clears the
/// RoI threshold and hinge kinks by a safe margin, so the comparison happens
/// where the losses are differentiable.
inline std::vector<CheckResult> check_viseq_map_gradients(std::uint64_t seed, int instances,
                                                          double step = 1e-5,
                                                          double tolerance = 1e-4) {
  std::vector<CheckResult> results;
  const double tau = 0.5;
  LossWeights weights;
  for (int inst = 0; inst < instances; ++inst) {
    Tensor<double> g_t({8, 8}), g_s({8, 8});
    bool ok = false;
    for (std::uint64_t attempt = 0; attempt < 64 && !ok; ++attempt) {
      Rng r = Rng(seed).derive("viseq_check", static_cast<std::uint64_t>(inst) * 64 + attempt);
      for (std::size_t i = 0; i < g_t.size(); ++i) {
        g_t[i] = r.uniform(0.0, 1.0);
        g_s[i] = r.uniform(0.0, 1.0);
      }
      ok = true;
      for (std::size_t i = 0; i < g_t.size(); ++i)
        ok = ok && std::abs(g_t[i] + g_s[i] - tau) > 1e-3;
      const auto roi = roi_mask(g_t, g_s, tau);
      const RoiStats ss = roi_stats(g_s, roi);
      ok = ok && !ss.empty() && ss.stddev > 1e-3 && std::abs(0.5 * tau - ss.mean) > 1e-3;
    }

    {
      ad::Tape<double> tp;
      ad::Var gs = tp.leaf(g_s, true);
      auto sim = attention_similarity_tape<double>(tp, tp.constant(g_t), gs, weights);
      tp.backward(sim.total);
      const auto numeric = gradcheck_detail::central_difference(
          [&]() {
            ad::Tape<double> t2;
            return t2.value(
                attention_similarity_tape<double>(t2, t2.constant(g_t), t2.constant(g_s), weights)
                    .total)[0];
          },
          g_s, step);
      results.push_back({"sim_map_grad[" + std::to_string(inst) + "]",
                         gradcheck_detail::scale_relative_error(tp.grad(gs), numeric),
                         tolerance});
    }
    {
      ad::Tape<double> tp;
      ad::Var gs = tp.leaf(g_s, true);
      ad::Var cst = consistency_loss_tape<double>(tp, g_t, gs, tau);
      tp.backward(cst);
      const auto numeric = gradcheck_detail::central_difference(
          [&]() {
            ad::Tape<double> t2;
            return t2.value(consistency_loss_tape<double>(t2, g_t, t2.constant(g_s), tau))[0];
          },
          g_s, step);
      results.push_back({"cst_map_grad[" + std::to_string(inst) + "]",
                         gradcheck_detail::scale_relative_error(tp.grad(gs), numeric),
                         tolerance});
    }
  }
  return results;
}

/// Dual-oracle audit on a 2-level toy pyramid: the reverse-mode and central
/// finite-difference realizations of ∂s/∂Z must agree, and so must the
/// attention maps they induce.
inline std::vector<CheckResult> check_gradcam_dual_oracle(std::uint64_t seed, int instances = 3,
                                                          double tolerance = 1e-3) {
  std::vector<CheckResult> results;
  const TrainConfig cfg = gradcheck_detail::tiny_config(seed);
  const PipelineConfig pcfg = pipeline_config(cfg);
  const SceneConfig scfg = scene_config(cfg);
  for (int inst = 0; inst < instances; ++inst) {
    const Rng master = Rng(seed).derive("gradcam_check", static_cast<std::uint64_t>(inst));
    ModelParams<double> params = init_model<double>(pcfg, master.derive("model"));
    Rng sr = master.derive("scene");
    SyntheticScene scene = generate_scene(scfg, sr);
    ForwardResult<double> fwd = forward_plain(scene, nullptr, params, pcfg, false);
    // Background cells share bitwise-identical features, which ties the
    // per-query maxima exactly at the top-k boundary; central differences are
    // only meaningful away from those kinks, so jitter the probe pyramid.
    Rng jitter = master.derive("jitter");
    for (auto& level : fwd.completed.levels)
      for (std::size_t i = 0; i < level.tokens.size(); ++i)
        level.tokens[i] += jitter.uniform(-0.05, 0.05);

    AutodiffGradientOracle<double> ad_oracle;
    FiniteDifferenceGradientOracle<double> fd_oracle(1e-5);
    HeadBuilder<double> head = make_head_builder(params, fwd.z_vt, pcfg);
    const auto k = static_cast<std::size_t>(pcfg.topk);

    ScoreGradients<double> ga = ad_oracle.evaluate(fwd.completed, head, k);
    ScoreGradients<double> gf = fd_oracle.evaluate(fwd.completed, head, k);
    double grad_err = std::abs(ga.score - gf.score);
    for (std::size_t l = 0; l < ga.gradients.size(); ++l)
      grad_err = std::max(
          grad_err, gradcheck_detail::scale_relative_error(ga.gradients[l], gf.gradients[l]));
    results.push_back({"gradcam_dscore_dz[" + std::to_string(inst) + "]", grad_err, tolerance});

    AttentionMap<double> ma = gradcam(fwd.completed, head, ad_oracle, k,
                                      static_cast<std::size_t>(pcfg.image_h),
                                      static_cast<std::size_t>(pcfg.image_w));
    AttentionMap<double> mf = gradcam(fwd.completed, head, fd_oracle, k,
                                      static_cast<std::size_t>(pcfg.image_h),
                                      static_cast<std::size_t>(pcfg.image_w));
    double map_err = 0.0;
    for (std::size_t i = 0; i < ma.map.size(); ++i)
      map_err = std::max(map_err, std::abs(ma.map[i] - mf.map[i]));
    results.push_back({"gradcam_map_dual[" + std::to_string(inst) + "]", map_err, tolerance});
  }
  return results;
}

}  // namespace countocc
