#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "countocc/core/autodiff.hpp"
#include "countocc/core/tensor.hpp"

namespace countocc {

struct LossWeights {
  double lambda_l2 = 1.0;
  double lambda_cos = 1.0;
  double lambda_char = 1.0;
  double eps_char = 1e-3;
};

/// Weighted contributions of the three reconstruction terms; they sum to the
/// total exactly (total is computed as (l2 + charb) + cos).
template <typename T>
struct ReconTermVars {
  ad::Var l2, charb, cos, total;
};

struct LossBreakdown {
  double l2 = 0, charb = 0, cos = 0, total = 0;
};

namespace loss_detail {

/// Row mask flagging rows where both operands have nonzero norm; zero-norm
/// rows take cosine similarity 0 by convention (contribution λ_cos · 1).
template <typename T>
void cosine_guards(const Tensor<T>& sn, const Tensor<T>& tn, Tensor<T>& keep, Tensor<T>& patch) {
  keep = Tensor<T>({sn.rows(), 1});
  patch = Tensor<T>({sn.rows(), 1});
  for (std::size_t i = 0; i < sn.rows(); ++i) {
    const bool ok = sn(i, 0) > T{0} && tn(i, 0) > T{0};
    keep(i, 0) = ok ? T{1} : T{0};
    patch(i, 0) = ok ? T{0} : T{1};
  }
}

/// Σ_rows (1 - cos(S_i, T_i)) with the zero-norm convention, on tape.
template <typename T>
ad::Var cosine_distance_rows(ad::Tape<T>& tp, ad::Var s, ad::Var t_const) {
  ad::Var dot = tp.rowsum(tp.mul(s, t_const));
  ad::Var sn = tp.rowsum(tp.mul(s, s));
  ad::Var tn = tp.rowsum(tp.mul(t_const, t_const));
  Tensor<T> keep, patch;
  cosine_guards(tp.value(sn), tp.value(tn), keep, patch);
  ad::Var keep_c = tp.constant(keep);
  ad::Var normprod = tp.sqrt(tp.mul(sn, tn));
  ad::Var np_safe = tp.add(tp.mul(normprod, keep_c), tp.constant(patch));
  ad::Var cossim = tp.clamp(tp.div(tp.mul(dot, keep_c), np_safe), T{-1}, T{1});
  return tp.sum_all(tp.const_minus(T{1}, cossim));
}

}  // namespace loss_detail

/// Eq.-9 composite over aligned per-level token sets: Σ_ℓ Σ_{i∈𝒪}
/// λ_l2‖Δ‖² + λ_char √(‖Δ‖²+ε²) + λ_cos (1 − cos). Student entries are tape
/// variables, teacher entries frozen targets. Empty levels contribute nothing.
template <typename T>
ReconTermVars<T> reconstruction_loss_tape(ad::Tape<T>& tp, const std::vector<ad::Var>& student,
                                          const std::vector<Tensor<T>>& teacher,
                                          const LossWeights& w) {
  if (student.size() != teacher.size())
    throw std::invalid_argument("reconstruction_loss: level count mismatch");
  ad::Var l2 = tp.scalar(T{0});
  ad::Var charb = tp.scalar(T{0});
  ad::Var cos = tp.scalar(T{0});
  const T eps2 = static_cast<T>(w.eps_char) * static_cast<T>(w.eps_char);

  for (std::size_t l = 0; l < student.size(); ++l) {
    if (!student[l].valid() || teacher[l].rows() == 0) continue;
    const Tensor<T>& target = teacher[l];
    if (!tp.value(student[l]).same_shape(target))
      throw std::invalid_argument("reconstruction_loss: student/teacher shape mismatch");
    ad::Var t_const = tp.constant(target);
    ad::Var delta = tp.sub(student[l], t_const);
    ad::Var sq = tp.rowsum(tp.mul(delta, delta));  // per-position ‖Δ‖²
    if (w.lambda_l2 != 0.0) l2 = tp.add(l2, tp.sum_all(sq));
    if (w.lambda_char != 0.0)
      charb = tp.add(charb, tp.sum_all(tp.sqrt(tp.add_const(sq, eps2))));
    if (w.lambda_cos != 0.0)
      cos = tp.add(cos, loss_detail::cosine_distance_rows(tp, student[l], t_const));
  }

  ReconTermVars<T> out;
  out.l2 = tp.scale(l2, static_cast<T>(w.lambda_l2));
  out.charb = tp.scale(charb, static_cast<T>(w.lambda_char));
  out.cos = tp.scale(cos, static_cast<T>(w.lambda_cos));
  out.total = tp.add(tp.add(out.l2, out.charb), out.cos);
  return out;
}

/// Value-only reconstruction loss with per-term breakdown.
template <typename T>
LossBreakdown reconstruction_loss(const std::vector<Tensor<T>>& student,
                                  const std::vector<Tensor<T>>& teacher, const LossWeights& w) {
  ad::Tape<T> tp;
  std::vector<ad::Var> svars;
  svars.reserve(student.size());
  for (const Tensor<T>& s : student)
    svars.push_back(s.rows() == 0 ? ad::Var{} : tp.constant(s));
  ReconTermVars<T> terms = reconstruction_loss_tape(tp, svars, teacher, w);
  return LossBreakdown{static_cast<double>(tp.value(terms.l2)[0]),
                       static_cast<double>(tp.value(terms.charb)[0]),
                       static_cast<double>(tp.value(terms.cos)[0]),
                       static_cast<double>(tp.value(terms.total)[0])};
}

template <typename T>
struct SimTermVars {
  ad::Var l2, cos, total;
};

/// Eq.-14 attention similarity for one batch element: pixelwise ℓ2 plus one
/// cosine distance over the flattened maps.
template <typename T>
SimTermVars<T> attention_similarity_tape(ad::Tape<T>& tp, ad::Var teacher_map, ad::Var student_map,
                                         const LossWeights& w) {
  const auto& tv = tp.value(teacher_map);
  const std::size_t n = tv.size();
  ad::Var t_flat = tp.reshape(teacher_map, {1, n});
  ad::Var s_flat = tp.reshape(student_map, {1, n});
  ad::Var delta = tp.sub(t_flat, s_flat);
  SimTermVars<T> out;
  out.l2 = tp.scale(tp.sum_all(tp.mul(delta, delta)), static_cast<T>(w.lambda_l2));
  out.cos = tp.scale(loss_detail::cosine_distance_rows(tp, s_flat, t_flat),
                     static_cast<T>(w.lambda_cos));
  out.total = tp.add(out.l2, out.cos);
  return out;
}

/// Value-only attention similarity; breakdown fields l2/cos, charb unused.
template <typename T>
LossBreakdown attention_similarity_loss(const Tensor<T>& teacher_map,
                                        const Tensor<T>& student_map, const LossWeights& w) {
  if (!teacher_map.same_shape(student_map))
    throw std::invalid_argument("attention_similarity: map shape mismatch");
  ad::Tape<T> tp;
  SimTermVars<T> terms =
      attention_similarity_tape(tp, tp.constant(teacher_map), tp.constant(student_map), w);
  LossBreakdown b;
  b.l2 = static_cast<double>(tp.value(terms.l2)[0]);
  b.cos = static_cast<double>(tp.value(terms.cos)[0]);
  b.total = static_cast<double>(tp.value(terms.total)[0]);
  return b;
}

/// Eq. 15: 1 where G_T + G_S ≥ τ.
template <typename T>
Tensor<std::uint8_t> roi_mask(const Tensor<T>& teacher_map, const Tensor<T>& student_map, T tau) {
  if (!teacher_map.same_shape(student_map))
    throw std::invalid_argument("roi_mask: map shape mismatch");
  Tensor<std::uint8_t> m(teacher_map.shape(), 0);
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = (teacher_map[i] + student_map[i] >= tau) ? 1 : 0;
  return m;
}

/// Masked mean and population standard deviation (Eq. 16); flagged empty when
/// the RoI has no pixels.
struct RoiStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t roi_size = 0;

  bool empty() const { return roi_size == 0; }
};

template <typename T>
RoiStats roi_stats(const Tensor<T>& map, const Tensor<std::uint8_t>& mask) {
  if (map.size() != mask.size()) throw std::invalid_argument("roi_stats: mask size mismatch");
  RoiStats s;
  double sum = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (mask[i]) {
      sum += static_cast<double>(map[i]);
      ++s.roi_size;
    }
  if (s.roi_size == 0) return s;
  s.mean = sum / static_cast<double>(s.roi_size);
  double ss = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (mask[i]) {
      const double d = static_cast<double>(map[i]) - s.mean;
      ss += d * d;
    }
  s.stddev = std::sqrt(ss / static_cast<double>(s.roi_size));
  return s;
}

/// Eq. 17 over a batch of stat pairs: E[σ_T + σ_S + max(0, τ/2 − μ_T) +
/// max(0, τ/2 − μ_S)]; empty-RoI elements contribute 0 to the expectation.
inline double consistency_loss(const std::vector<RoiStats>& teacher,
                               const std::vector<RoiStats>& student, double tau) {
  if (teacher.size() != student.size() || teacher.empty())
    throw std::invalid_argument("consistency_loss: batch mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].empty() || student[i].empty()) continue;
    total += teacher[i].stddev + student[i].stddev +
             std::max(0.0, 0.5 * tau - teacher[i].mean) +
             std::max(0.0, 0.5 * tau - student[i].mean);
  }
  return total / static_cast<double>(teacher.size());
}

/// Tape form of one element's consistency contribution, differentiable w.r.t.
/// the student map; the RoI mask is a value-level threshold and the teacher
/// side enters as a constant. Returns an invalid Var when the RoI is empty.
template <typename T>
ad::Var consistency_loss_tape(ad::Tape<T>& tp, const Tensor<T>& teacher_map, ad::Var student_map,
                              T tau) {
  Tensor<std::uint8_t> roi = roi_mask(teacher_map, tp.value(student_map), tau);
  std::size_t m = 0;
  for (std::size_t i = 0; i < roi.size(); ++i) m += roi[i];
  if (m == 0) return ad::Var{};

  const RoiStats ts = roi_stats(teacher_map, roi);
  const double teacher_part = ts.stddev + std::max(0.0, 0.5 * tau - ts.mean);

  Tensor<T> mask_t(teacher_map.shape());
  for (std::size_t i = 0; i < roi.size(); ++i) mask_t[i] = roi[i] ? T{1} : T{0};
  ad::Var mask_c = tp.constant(std::move(mask_t));
  const T inv_m = T{1} / static_cast<T>(m);

  ad::Var masked = tp.mul(student_map, mask_c);
  ad::Var mu = tp.scale(tp.sum_all(masked), inv_m);
  ad::Var dev = tp.mul(tp.sub_scalar(student_map, mu), mask_c);
  ad::Var sigma = tp.sqrt(tp.scale(tp.sum_all(tp.mul(dev, dev)), inv_m));
  ad::Var hinge = tp.relu(tp.const_minus(static_cast<T>(0.5) * tau, mu));
  return tp.add(tp.add(sigma, hinge), tp.scalar(static_cast<T>(teacher_part)));
}

}  // namespace countocc
