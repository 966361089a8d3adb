#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "countocc/harness.hpp"
#include "json.hpp"

namespace countocc {

enum class VisEqGrad { kNone, kFirstOrder };

enum class OptimizerKind { kSgd, kAdam };

struct TrainHyper {
  double lr_stage1 = 0.01;
  double lr_stage2 = 0.005;
  double w_recon = 0.05;
  double w_count = 0.5;
  double w_sim = 1.0;
  double w_cst = 0.1;
  double tau = 0.5;
  LossWeights recon_weights;
  VisEqGrad viseq_grad = VisEqGrad::kFirstOrder;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  int batch_size = 2;
};

/// Flat per-step loss record; the VisEQ fields exist only in stage 2.
struct TrainLogRecord {
  int step = 0;
  int stage = 1;
  double l2 = 0, charb = 0, cos = 0, count = 0;
  std::optional<double> sim_l2, sim_cos, cst;
  double total = 0;
};

inline nlohmann::ordered_json record_to_json(const TrainLogRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["l2"] = r.l2;
  j["charb"] = r.charb;
  j["cos"] = r.cos;
  j["count"] = r.count;
  if (r.sim_l2) j["sim_l2"] = *r.sim_l2;
  if (r.sim_cos) j["sim_cos"] = *r.sim_cos;
  if (r.cst) j["cst"] = *r.cst;
  j["total"] = r.total;
  return j;
}

class NonFiniteLossError : public std::runtime_error {
 public:
  explicit NonFiniteLossError(const TrainLogRecord& record)
      : std::runtime_error("non-finite loss at step " + std::to_string(record.step) + ": " +
                           record_to_json(record).dump()) {}
};

/// First/second Adam moments keyed by parameter name (stable across steps).
template <typename T>
struct OptimizerState {
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments;
  std::int64_t step_count = 0;
};

template <typename T>
void apply_update(const std::vector<TrainableEntry<T>>& entries, ad::Tape<T>& tp, T lr,
                  const TrainHyper& hyper, OptimizerState<T>& state) {
  ++state.step_count;
  for (const auto& e : entries) {
    const Tensor<T> g = tp.grad(e.var);
    if (hyper.optimizer == OptimizerKind::kSgd) {
      for (std::size_t i = 0; i < g.size(); ++i) (*e.tensor)[i] -= lr * g[i];
      continue;
    }
    auto it = state.moments.find(e.name);
    if (it == state.moments.end())
      it = state.moments
               .emplace(e.name, std::make_pair(Tensor<T>(g.shape(), T{0}),
                                               Tensor<T>(g.shape(), T{0})))
               .first;
    auto& [m, v] = it->second;
    const T b1 = static_cast<T>(hyper.adam_beta1), b2 = static_cast<T>(hyper.adam_beta2);
    const T c1 = T{1} - std::pow(b1, static_cast<T>(state.step_count));
    const T c2 = T{1} - std::pow(b2, static_cast<T>(state.step_count));
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      (*e.tensor)[i] -=
          lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + static_cast<T>(hyper.adam_eps));
    }
  }
}

/// Per-level teacher features gathered at the student's occluded positions
/// (the Eq.-7 targets).
template <typename T>
std::vector<Tensor<T>> teacher_targets(const FeaturePyramid<T>& teacher_pyramid,
                                       const PipelineGraph<T>& student) {
  std::vector<Tensor<T>> targets;
  for (std::size_t l = 0; l < teacher_pyramid.levels.size(); ++l) {
    const auto& rec = student.reconstructions[l];
    if (!rec.reconstructed.valid()) {
      targets.emplace_back(Tensor<T>({0, teacher_pyramid.levels[l].channels()}));
      continue;
    }
    const auto& tokens = teacher_pyramid.levels[l].tokens;
    Tensor<T> t({rec.split.n_occluded(), tokens.cols()});
    for (std::size_t i = 0; i < rec.split.occluded_indices.size(); ++i)
      for (std::size_t j = 0; j < tokens.cols(); ++j)
        t(i, j) = tokens(rec.split.occluded_indices[i], j);
    targets.push_back(std::move(t));
  }
  return targets;
}

/// One optimizer step over a batch of (scene, mask) pairs. Stage 1: multi-term
/// reconstruction distillation + counting loss. Stage 2 additionally aligns
/// teacher/student attention maps (L_sim) and enforces RoI consistency
/// (L_cst). Backbone parameters are never lifted onto the tape, so they can
/// receive no update; the teacher's feature targets come from the clean view.
template <typename T>
TrainLogRecord train_step(const std::vector<const SyntheticScene*>& scenes,
                          const std::vector<const OcclusionMask*>& masks, int stage, int step,
                          ModelParams<T>& params, OptimizerState<T>& opt_state,
                          const TrainHyper& hyper, const PipelineConfig& cfg) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("train_step: stage must be 1 or 2");
  if (scenes.empty() || scenes.size() != masks.size())
    throw std::invalid_argument("train_step: empty or mismatched batch");

  ad::Tape<T> tp;
  LiftedModel<T> lm = lift_model(tp, params, /*requires_grad=*/true);

  TrainLogRecord rec;
  rec.step = step;
  rec.stage = stage;
  const bool viseq = stage == 2;
  if (viseq) {
    rec.sim_l2 = 0.0;
    rec.sim_cos = 0.0;
    rec.cst = 0.0;
  }

  ad::Var batch_total;
  AutodiffGradientOracle<T> oracle;
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const SyntheticScene& scene = *scenes[b];
    const OcclusionMask& mask = *masks[b];

    const FeaturePyramid<T> teacher_pyramid = backbone_forward(scene.image, params, cfg);
    PipelineGraph<T> student =
        pipeline_tape(tp, scene.image, &mask, scene, params, lm, cfg, /*use_frm=*/true);

    std::vector<ad::Var> student_tokens;
    for (const auto& r : student.reconstructions) student_tokens.push_back(r.reconstructed);
    ReconTermVars<T> recon = reconstruction_loss_tape(tp, student_tokens,
                                                      teacher_targets(teacher_pyramid, student),
                                                      hyper.recon_weights);

    ad::Var total_count = tp.sum_all(student.head.density);
    ad::Var count_err = tp.add_const(total_count, -static_cast<T>(scene.count));
    ad::Var count_loss = tp.mul(count_err, count_err);

    ad::Var scene_total = tp.add(tp.scale(recon.total, static_cast<T>(hyper.w_recon)),
                                 tp.scale(count_loss, static_cast<T>(hyper.w_count)));

    if (viseq) {
      // teacher view and its attention map (values; the teacher is a constant)
      ForwardResult<T> teacher = forward_plain(scene, nullptr, params, cfg, /*use_frm=*/false);
      AttentionMap<T> g_teacher =
          attention_map_of(teacher.completed, teacher.z_vt, params, cfg, oracle);

      // student map ingredients from a detached oracle pass on current values
      FeaturePyramid<T> student_values;
      std::vector<std::pair<std::size_t, std::size_t>> dims;
      for (int l = 0; l < cfg.levels; ++l) {
        student_values.levels.push_back(
            {tp.value(student.completed[static_cast<std::size_t>(l)]), cfg.grid_h(l),
             cfg.grid_w(l)});
        dims.emplace_back(cfg.grid_h(l), cfg.grid_w(l));
      }
      HeadBuilder<T> student_head = make_head_builder(params, tp.value(student.z_vt), cfg);
      ScoreGradients<T> sg =
          oracle.evaluate(student_values, student_head, static_cast<std::size_t>(cfg.topk));
      std::vector<std::vector<T>> alphas;
      std::vector<T> energies;
      for (int l = 0; l < cfg.levels; ++l) {
        alphas.push_back(channel_weights(sg.gradients[static_cast<std::size_t>(l)]));
        T e = T{0};
        const auto& grad = sg.gradients[static_cast<std::size_t>(l)];
        for (std::size_t i = 0; i < grad.size(); ++i) e += std::abs(grad[i]);
        energies.push_back(e);
      }
      const std::vector<T> betas = energy_softmax(energies);

      // On the training tape when gradients should flow, on a throwaway tape
      // when VisEQ is log-only.
      const bool flow = hyper.viseq_grad == VisEqGrad::kFirstOrder;
      ad::Tape<T> side;
      ad::Tape<T>& vt = flow ? tp : side;
      std::vector<ad::Var> map_inputs;
      if (flow) {
        map_inputs = student.completed;
      } else {
        for (int l = 0; l < cfg.levels; ++l)
          map_inputs.push_back(
              side.constant(student_values.levels[static_cast<std::size_t>(l)].tokens));
      }
      ad::Var g_student = attention_map_tape(vt, map_inputs, dims, alphas, betas,
                                             static_cast<std::size_t>(cfg.image_h),
                                             static_cast<std::size_t>(cfg.image_w),
                                             cfg.normalize_attention);
      SimTermVars<T> sim = attention_similarity_tape(vt, vt.constant(g_teacher.map), g_student,
                                                     hyper.recon_weights);
      ad::Var cst = consistency_loss_tape(vt, g_teacher.map, g_student, static_cast<T>(hyper.tau));
      *rec.sim_l2 += static_cast<double>(vt.value(sim.l2)[0]) / scenes.size();
      *rec.sim_cos += static_cast<double>(vt.value(sim.cos)[0]) / scenes.size();
      if (cst.valid()) *rec.cst += static_cast<double>(vt.value(cst)[0]) / scenes.size();
      if (flow) {
        scene_total = tp.add(scene_total, tp.scale(sim.total, static_cast<T>(hyper.w_sim)));
        if (cst.valid())
          scene_total = tp.add(scene_total, tp.scale(cst, static_cast<T>(hyper.w_cst)));
      }
    }

    rec.l2 += static_cast<double>(tp.value(recon.l2)[0]) / scenes.size();
    rec.charb += static_cast<double>(tp.value(recon.charb)[0]) / scenes.size();
    rec.cos += static_cast<double>(tp.value(recon.cos)[0]) / scenes.size();
    rec.count += static_cast<double>(tp.value(count_loss)[0]) / scenes.size();

    batch_total = b == 0 ? scene_total : tp.add(batch_total, scene_total);
  }

  ad::Var objective = tp.scale(batch_total, T{1} / static_cast<T>(scenes.size()));
  rec.total = static_cast<double>(tp.value(objective)[0]);
  if (!std::isfinite(rec.total)) throw NonFiniteLossError(rec);

  tp.backward(objective);
  const T lr = static_cast<T>(stage == 1 ? hyper.lr_stage1 : hyper.lr_stage2);
  apply_update(lm.trainables, tp, lr, hyper, opt_state);
  return rec;
}

}  // namespace countocc
