#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "countocc/core/tensor.hpp"

namespace countocc::ad {

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

namespace detail {

/// Source taps and weights for bilinear resampling, align_corners = false.
template <typename T>
std::vector<std::array<std::pair<std::size_t, T>, 4>> bilinear_taps(std::size_t in_h,
                                                                    std::size_t in_w,
                                                                    std::size_t out_h,
                                                                    std::size_t out_w) {
  std::vector<std::array<std::pair<std::size_t, T>, 4>> taps(out_h * out_w);
  const T sy = static_cast<T>(in_h) / static_cast<T>(out_h);
  const T sx = static_cast<T>(in_w) / static_cast<T>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    T fy = (static_cast<T>(oy) + T{0.5}) * sy - T{0.5};
    fy = std::max(T{0}, std::min(fy, static_cast<T>(in_h - 1)));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const T wy = fy - static_cast<T>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      T fx = (static_cast<T>(ox) + T{0.5}) * sx - T{0.5};
      fx = std::max(T{0}, std::min(fx, static_cast<T>(in_w - 1)));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const T wx = fx - static_cast<T>(x0);
      taps[oy * out_w + ox] = {{{y0 * in_w + x0, (T{1} - wy) * (T{1} - wx)},
                                {y0 * in_w + x1, (T{1} - wy) * wx},
                                {y1 * in_w + x0, wy * (T{1} - wx)},
                                {y1 * in_w + x1, wy * wx}}};
    }
  }
  return taps;
}

}  // namespace detail

/// Plain bilinear resize of a single-channel [h x w] map.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& in, std::size_t out_h, std::size_t out_w) {
  Tensor<T> out({out_h, out_w}, T{0});
  const auto taps = detail::bilinear_taps<T>(in.rows(), in.cols(), out_h, out_w);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    T v = T{0};
    for (const auto& [src, w] : taps[o]) v += w * in[src];
    out[o] = v;
  }
  return out;
}

/// Reverse-mode tape over rank-2 tensors. Scalars are [1x1], row vectors
/// [1xn], column vectors [mx1]. One tape = one forward graph; backward() may
/// be called once per tape after the graph is built.
template <typename T>
class Tape {
 public:
  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), {}, requires_grad, nullptr);
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var scalar(T value, bool requires_grad = false) {
    return leaf(Tensor<T>({1, 1}, value), requires_grad);
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }

  /// Gradient of the last backward() root w.r.t. v. Zero tensor if v never
  /// received a contribution.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{});
    return n.grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(std::move(out), {a, b}, any_grad({a, b}), [a, b](Tape& tp, const Tensor<T>& g) {
      tp.accumulate(a, g);
      tp.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(std::move(out), {a, b}, any_grad({a, b}), [a, b](Tape& tp, const Tensor<T>& g) {
      tp.accumulate(a, g);
      Tensor<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -gb[i];
      tp.accumulate(b, gb);
    });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(std::move(out), {a, b}, any_grad({a, b}), [a, b](Tape& tp, const Tensor<T>& g) {
      const Tensor<T>& va = tp.value(a);
      const Tensor<T>& vb2 = tp.value(b);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= vb2[i];
      tp.accumulate(a, ga);
      Tensor<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= va[i];
      tp.accumulate(b, gb);
    });
  }

  Var div(Var a, Var b) {
    check_same(a, b, "div");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= vb[i];
    return push(std::move(out), {a, b}, any_grad({a, b}), [a, b](Tape& tp, const Tensor<T>& g) {
      const Tensor<T>& va = tp.value(a);
      const Tensor<T>& vb2 = tp.value(b);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= vb2[i];
      tp.accumulate(a, ga);
      Tensor<T> gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= -va[i] / (vb2[i] * vb2[i]);
      tp.accumulate(b, gb);
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    return push(std::move(out), {a}, any_grad({a}), [a, c](Tape& tp, const Tensor<T>& g) {
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= c;
      tp.accumulate(a, ga);
    });
  }

  Var add_const(Var a, T c) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
    return push(std::move(out), {a}, any_grad({a}),
                [a](Tape& tp, const Tensor<T>& g) { tp.accumulate(a, g); });
  }

  /// c - a, elementwise.
  Var const_minus(T c, Var a) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c - out[i];
    return push(std::move(out), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = -ga[i];
      tp.accumulate(a, ga);
    });
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > T{0} ? out[i] : T{0};
    return push(std::move(out), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      const Tensor<T>& va = tp.value(a);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = va[i] > T{0} ? ga[i] : T{0};
      tp.accumulate(a, ga);
    });
  }

  Var tanh(Var a) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    const std::uint32_t self_hint = next_id();
    return push(std::move(out), {a}, any_grad({a}),
                [a, self_hint](Tape& tp, const Tensor<T>& g) {
                  const Tensor<T>& y = tp.nodes_[self_hint].value;
                  Tensor<T> ga = g;
                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= T{1} - y[i] * y[i];
                  tp.accumulate(a, ga);
                });
  }

  Var softplus(Var a) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T x = out[i];
      out[i] = x > T{30} ? x : std::log1p(std::exp(x));
    }
    return push(std::move(out), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      const Tensor<T>& va = tp.value(a);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= T{1} / (T{1} + std::exp(-va[i]));
      tp.accumulate(a, ga);
    });
  }

  /// Elementwise square root; the subgradient at exactly zero is taken as 0.
  Var sqrt(Var a) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
    const std::uint32_t self_hint = next_id();
    return push(std::move(out), {a}, any_grad({a}),
                [a, self_hint](Tape& tp, const Tensor<T>& g) {
                  const Tensor<T>& y = tp.nodes_[self_hint].value;
                  Tensor<T> ga = g;
                  for (std::size_t i = 0; i < ga.size(); ++i)
                    ga[i] = y[i] > T{0} ? ga[i] / (T{2} * y[i]) : T{0};
                  tp.accumulate(a, ga);
                });
  }

  /// Clamp to [lo, hi]; gradient passes only where the input is strictly
  /// inside the interval.
  Var clamp(Var a, T lo, T hi) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
    return push(std::move(out), {a}, any_grad({a}), [a, lo, hi](Tape& tp, const Tensor<T>& g) {
      const Tensor<T>& va = tp.value(a);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (!(va[i] > lo && va[i] < hi)) ga[i] = T{0};
      tp.accumulate(a, ga);
    });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
      throw std::invalid_argument("matmul: shape mismatch " + shape_string(va.shape()) + " x " +
                                  shape_string(vb.shape()));
    return push(mm_nn(va, vb), {a, b}, any_grad({a, b}), [a, b](Tape& tp, const Tensor<T>& g) {
      // dA = g * B^T, dB = A^T * g
      if (tp.nodes_[a.id].requires_grad) tp.accumulate(a, mm_nt(g, tp.value(b)));
      if (tp.nodes_[b.id].requires_grad) tp.accumulate(b, mm_tn(tp.value(a), g));
    });
  }

  Var transpose(Var a) {
    const Tensor<T>& va = value(a);
    Tensor<T> out({va.cols(), va.rows()});
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(j, i) = va(i, j);
    return push(std::move(out), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      Tensor<T> ga({g.cols(), g.rows()});
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(j, i) = g(i, j);
      tp.accumulate(a, ga);
    });
  }

  /// a[m x n] + v[1 x n], broadcast over rows.
  Var add_rowvec(Var a, Var v) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vv = value(v);
    if (vv.rows() != 1 || vv.cols() != va.cols())
      throw std::invalid_argument("add_rowvec: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) += vv(0, j);
    return push(std::move(out), {a, v}, any_grad({a, v}), [a, v](Tape& tp, const Tensor<T>& g) {
      tp.accumulate(a, g);
      Tensor<T> gv({1, g.cols()}, T{0});
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gv(0, j) += g(i, j);
      tp.accumulate(v, gv);
    });
  }

  /// Replicate row vector v[1 x n] into m rows.
  Var broadcast_row(Var v, std::size_t m) {
    const Tensor<T>& vv = value(v);
    if (vv.rows() != 1) throw std::invalid_argument("broadcast_row: expects [1 x n]");
    Tensor<T> out({m, vv.cols()});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < vv.cols(); ++j) out(i, j) = vv(0, j);
    return push(std::move(out), {v}, any_grad({v}), [v](Tape& tp, const Tensor<T>& g) {
      Tensor<T> gv({1, g.cols()}, T{0});
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gv(0, j) += g(i, j);
      tp.accumulate(v, gv);
    });
  }

  // ---- softmax / reductions ----

  Var softmax_rows(Var a) {
    const Tensor<T>& va = value(a);
    Tensor<T> out = va;
    for (std::size_t i = 0; i < va.rows(); ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < va.cols(); ++j) mx = std::max(mx, va(i, j));
      T sum = T{0};
      for (std::size_t j = 0; j < va.cols(); ++j) {
        out(i, j) = std::exp(va(i, j) - mx);
        sum += out(i, j);
      }
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) /= sum;
    }
    const std::uint32_t self_hint = next_id();
    return push(std::move(out), {a}, any_grad({a}),
                [a, self_hint](Tape& tp, const Tensor<T>& g) {
                  const Tensor<T>& y = tp.nodes_[self_hint].value;
                  Tensor<T> ga = g;
                  for (std::size_t i = 0; i < y.rows(); ++i) {
                    T dot = T{0};
                    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
                    for (std::size_t j = 0; j < y.cols(); ++j)
                      ga(i, j) = y(i, j) * (g(i, j) - dot);
                  }
                  tp.accumulate(a, ga);
                });
  }

  Var rowsum(Var a) {
    const Tensor<T>& va = value(a);
    Tensor<T> out({va.rows(), 1}, T{0});
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, 0) += va(i, j);
    return push(std::move(out), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      const Tensor<T>& va2 = tp.value(a);
      Tensor<T> ga(va2.shape());
      for (std::size_t i = 0; i < va2.rows(); ++i)
        for (std::size_t j = 0; j < va2.cols(); ++j) ga(i, j) = g(i, 0);
      tp.accumulate(a, ga);
    });
  }

  Var sum_all(Var a) {
    const Tensor<T>& va = value(a);
    T s = T{0};
    for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
    return push(Tensor<T>({1, 1}, s), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      Tensor<T> ga(tp.value(a).shape(), g[0]);
      tp.accumulate(a, ga);
    });
  }

  Var mean_all(Var a) {
    const std::size_t n = value(a).size();
    return scale(sum_all(a), T{1} / static_cast<T>(n));
  }

  /// Row-wise maximum, [m x n] -> [m x 1]; gradient routes to the first
  /// maximal entry of each row.
  Var rowmax(Var a) {
    const Tensor<T>& va = value(a);
    Tensor<T> out({va.rows(), 1});
    std::vector<std::size_t> arg(va.rows(), 0);
    for (std::size_t i = 0; i < va.rows(); ++i) {
      T mx = va(i, 0);
      std::size_t am = 0;
      for (std::size_t j = 1; j < va.cols(); ++j)
        if (va(i, j) > mx) {
          mx = va(i, j);
          am = j;
        }
      out(i, 0) = mx;
      arg[i] = am;
    }
    return push(std::move(out), {a}, any_grad({a}),
                [a, arg = std::move(arg)](Tape& tp, const Tensor<T>& g) {
                  Tensor<T> ga(tp.value(a).shape(), T{0});
                  for (std::size_t i = 0; i < arg.size(); ++i) ga(i, arg[i]) = g(i, 0);
                  tp.accumulate(a, ga);
                });
  }

  Var max_all(Var a) {
    const Tensor<T>& va = value(a);
    std::size_t am = 0;
    for (std::size_t i = 1; i < va.size(); ++i)
      if (va[i] > va[am]) am = i;
    return push(Tensor<T>({1, 1}, va[am]), {a}, any_grad({a}),
                [a, am](Tape& tp, const Tensor<T>& g) {
                  Tensor<T> ga(tp.value(a).shape(), T{0});
                  ga[am] = g[0];
                  tp.accumulate(a, ga);
                });
  }

  /// Mean of the k largest entries of a column vector [m x 1]. Selection is
  /// by value, ties broken by lower index; k must be <= m.
  Var topk_mean(Var a, std::size_t k) {
    const Tensor<T>& va = value(a);
    if (va.cols() != 1) throw std::invalid_argument("topk_mean: expects [m x 1]");
    if (k < 1 || k > va.rows()) throw std::invalid_argument("topk_mean: bad k");
    std::vector<std::size_t> idx(va.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return va[x] > va[y]; });
    idx.resize(k);
    T s = T{0};
    for (std::size_t i : idx) s += va[i];
    s /= static_cast<T>(k);
    return push(Tensor<T>({1, 1}, s), {a}, any_grad({a}),
                [a, k, idx = std::move(idx)](Tape& tp, const Tensor<T>& g) {
                  Tensor<T> ga(tp.value(a).shape(), T{0});
                  const T w = g[0] / static_cast<T>(k);
                  for (std::size_t i : idx) ga[i] += w;
                  tp.accumulate(a, ga);
                });
  }

  // ---- structural ----

  Var gather_rows(Var a, std::vector<std::size_t> rows) {
    const Tensor<T>& va = value(a);
    Tensor<T> out({rows.size(), va.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) = va(rows[i], j);
    return push(std::move(out), {a}, any_grad({a}),
                [a, rows = std::move(rows)](Tape& tp, const Tensor<T>& g) {
                  Tensor<T> ga(tp.value(a).shape(), T{0});
                  for (std::size_t i = 0; i < rows.size(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) ga(rows[i], j) += g(i, j);
                  tp.accumulate(a, ga);
                });
  }

  /// Copy of the constant `base` with rows[i] replaced by row i of `tokens`.
  /// The base is not differentiated; this is the Eq.-6-style piecewise merge.
  Var compose_rows(const Tensor<T>& base, Var tokens, std::vector<std::size_t> rows) {
    const Tensor<T>& vt = value(tokens);
    if (vt.rows() != rows.size() || (vt.rows() > 0 && vt.cols() != base.cols()))
      throw std::invalid_argument("compose_rows: token shape mismatch");
    Tensor<T> out = base;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < base.cols(); ++j) out(rows[i], j) = vt(i, j);
    return push(std::move(out), {tokens}, any_grad({tokens}),
                [tokens, rows = std::move(rows)](Tape& tp, const Tensor<T>& g) {
                  Tensor<T> gt({rows.size(), g.cols()});
                  for (std::size_t i = 0; i < rows.size(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) gt(i, j) = g(rows[i], j);
                  tp.accumulate(tokens, gt);
                });
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor<T>& va = value(a);
    if (c0 >= c1 || c1 > va.cols()) throw std::invalid_argument("slice_cols: bad range");
    Tensor<T> out({va.rows(), c1 - c0});
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = va(i, j);
    return push(std::move(out), {a}, any_grad({a}), [a, c0](Tape& tp, const Tensor<T>& g) {
      Tensor<T> ga(tp.value(a).shape(), T{0});
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, c0 + j) = g(i, j);
      tp.accumulate(a, ga);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    std::size_t rows = value(parts[0]).rows(), cols = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Tensor<T> out({rows, cols});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor<T>& vp = value(p);
      offsets.push_back(off);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < vp.cols(); ++j) out(i, off + j) = vp(i, j);
      off += vp.cols();
    }
    bool rg = false;
    for (Var p : parts) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(out), parts, rg,
                [parts, offsets = std::move(offsets)](Tape& tp, const Tensor<T>& g) {
                  for (std::size_t p = 0; p < parts.size(); ++p) {
                    const Tensor<T>& vp = tp.value(parts[p]);
                    Tensor<T> gp(vp.shape());
                    for (std::size_t i = 0; i < vp.rows(); ++i)
                      for (std::size_t j = 0; j < vp.cols(); ++j) gp(i, j) = g(i, offsets[p] + j);
                    tp.accumulate(parts[p], gp);
                  }
                });
  }

  Var reshape(Var a, std::vector<std::size_t> shape) {
    Tensor<T> out = value(a).reshaped(shape);
    return push(std::move(out), {a}, any_grad({a}), [a](Tape& tp, const Tensor<T>& g) {
      tp.accumulate(a, g.reshaped(tp.value(a).shape()));
    });
  }

  /// Bilinear upsampling of a single-channel [h x w] map to [H x W],
  /// align_corners = false. Backward is the exact adjoint.
  Var upsample_bilinear(Var a, std::size_t out_h, std::size_t out_w) {
    const Tensor<T>& va = value(a);
    const std::size_t in_h = va.rows(), in_w = va.cols();
    return push(bilinear_resize(va, out_h, out_w), {a}, any_grad({a}),
                [a, in_h, in_w, out_h, out_w](Tape& tp, const Tensor<T>& g) {
                  Tensor<T> ga({in_h, in_w}, T{0});
                  const auto taps = detail::bilinear_taps<T>(in_h, in_w, out_h, out_w);
                  for (std::size_t o = 0; o < taps.size(); ++o)
                    for (const auto& [src, w] : taps[o]) ga[src] += w * g[o];
                  tp.accumulate(a, ga);
                });
  }

  // ---- matrix (+|-|*|/) scalar variable [1 x 1] ----

  Var add_scalar(Var a, Var s) {
    check_scalar(s, "add_scalar");
    Tensor<T> out = value(a);
    const T sv = value(s)[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sv;
    return push(std::move(out), {a, s}, any_grad({a, s}), [a, s](Tape& tp, const Tensor<T>& g) {
      tp.accumulate(a, g);
      T total = T{0};
      for (std::size_t i = 0; i < g.size(); ++i) total += g[i];
      tp.accumulate(s, Tensor<T>({1, 1}, total));
    });
  }

  Var sub_scalar(Var a, Var s) {
    check_scalar(s, "sub_scalar");
    Tensor<T> out = value(a);
    const T sv = value(s)[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= sv;
    return push(std::move(out), {a, s}, any_grad({a, s}), [a, s](Tape& tp, const Tensor<T>& g) {
      tp.accumulate(a, g);
      T total = T{0};
      for (std::size_t i = 0; i < g.size(); ++i) total += g[i];
      tp.accumulate(s, Tensor<T>({1, 1}, -total));
    });
  }

  Var mul_scalar(Var a, Var s) {
    check_scalar(s, "mul_scalar");
    Tensor<T> out = value(a);
    const T sv = value(s)[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
    return push(std::move(out), {a, s}, any_grad({a, s}), [a, s](Tape& tp, const Tensor<T>& g) {
      const T sv2 = tp.value(s)[0];
      const Tensor<T>& va = tp.value(a);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= sv2;
      tp.accumulate(a, ga);
      T total = T{0};
      for (std::size_t i = 0; i < g.size(); ++i) total += g[i] * va[i];
      tp.accumulate(s, Tensor<T>({1, 1}, total));
    });
  }

  Var div_scalar(Var a, Var s) {
    check_scalar(s, "div_scalar");
    Tensor<T> out = value(a);
    const T sv = value(s)[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= sv;
    return push(std::move(out), {a, s}, any_grad({a, s}), [a, s](Tape& tp, const Tensor<T>& g) {
      const T sv2 = tp.value(s)[0];
      const Tensor<T>& va = tp.value(a);
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= sv2;
      tp.accumulate(a, ga);
      T total = T{0};
      for (std::size_t i = 0; i < g.size(); ++i) total += g[i] * va[i];
      tp.accumulate(s, Tensor<T>({1, 1}, -total / (sv2 * sv2)));
    });
  }

  // ---- backward ----

  void backward(Var root) {
    const Tensor<T>& rv = value(root);
    if (rv.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (Node& n : nodes_) n.grad = Tensor<T>{};
    nodes_[root.id].grad = Tensor<T>(rv.shape(), T{1});
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward || !n.requires_grad) continue;
      n.backward(*this, n.grad);
    }
  }

  // dense kernels, shared with the backward closures
  static Tensor<T> mm_nn(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c({a.rows(), b.cols()}, T{0});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t l = 0; l < a.cols(); ++l) {
        const T av = a(i, l);
        if (av == T{0}) continue;
        for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += av * b(l, j);
      }
    return c;
  }

  static Tensor<T> mm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c({a.rows(), b.rows()}, T{0});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < b.rows(); ++j) {
        T s = T{0};
        for (std::size_t l = 0; l < a.cols(); ++l) s += a(i, l) * b(j, l);
        c(i, j) = s;
      }
    return c;
  }

  static Tensor<T> mm_tn(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c({a.cols(), b.cols()}, T{0});
    for (std::size_t l = 0; l < a.rows(); ++l)
      for (std::size_t i = 0; i < a.cols(); ++i) {
        const T av = a(l, i);
        if (av == T{0}) continue;
        for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += av * b(l, j);
      }
    return c;
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::function<void(Tape&, const Tensor<T>&)> backward;
    Tensor<T> grad;
  };

  std::uint32_t next_id() const { return static_cast<std::uint32_t>(nodes_.size()); }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (nodes_[v.id].requires_grad) return true;
    return false;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_string(value(a).shape()) + " vs " +
                                  shape_string(value(b).shape()));
  }

  void check_scalar(Var s, const char* op) const {
    if (value(s).size() != 1) throw std::invalid_argument(std::string(op) + ": not a scalar");
  }

  Var push(Tensor<T> value, const std::vector<Var>& /*parents*/, bool requires_grad,
           std::function<void(Tape&, const Tensor<T>&)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void accumulate(Var v, const Tensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  std::vector<Node> nodes_;
};

}  // namespace countocc::ad
