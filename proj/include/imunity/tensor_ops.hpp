#pragma once

// Differentiable ops over TensorT. Every op is a pure function of its inputs;
// when a Tape* is supplied and any input is tracked, a backward rule is
// recorded. Passing tape == nullptr runs the op in inference mode (no record,
// output untracked), which is also how subgraphs are detached.

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <vector>

#include "imunity/tensor.hpp"

namespace imunity::ad {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using MapCM = Eigen::Map<const MatRM<S>>;

template <typename S>
bool any_tracked(std::initializer_list<const TensorT<S>*> ts) {
  for (auto* t : ts)
    if (t->tracked()) return true;
  return false;
}

template <typename S, typename Fn>
void record(Tape<S>* tape, std::initializer_list<const TensorT<S>*> inputs, TensorT<S>& out,
            Fn&& fn) {
  if (!tape || !any_tracked<S>(inputs)) return;
  std::vector<std::shared_ptr<TensorImpl<S>>> ins;
  ins.reserve(inputs.size());
  for (auto* t : inputs) ins.push_back(t->impl_);
  out.set_tracked(true);
  tape->push(std::move(ins), out.impl_, std::function<void()>(std::forward<Fn>(fn)));
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// col[(ci*kh + r)*kw + c][ho*Wo + wo] = src[ci][ho*s + r - p][wo*s + c - p]
template <typename S>
void im2col(const S* src, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            S* col) {
  for (int ci = 0; ci < C; ++ci) {
    for (int r = 0; r < kh; ++r) {
      for (int c = 0; c < kw; ++c) {
        S* dst = col + ((static_cast<std::int64_t>(ci) * kh + r) * kw + c) *
                           (static_cast<std::int64_t>(Ho) * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          const int y = ho * stride + r - pad;
          if (y < 0 || y >= H) {
            std::memset(dst + static_cast<std::int64_t>(ho) * Wo, 0, sizeof(S) * static_cast<std::size_t>(Wo));
            continue;
          }
          const S* row = src + (static_cast<std::int64_t>(ci) * H + y) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int x = wo * stride + c - pad;
            dst[static_cast<std::int64_t>(ho) * Wo + wo] = (x < 0 || x >= W) ? S(0) : row[x];
          }
        }
      }
    }
  }
}

// Adjoint scatter of im2col; accumulates into dst.
template <typename S>
void col2im(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            S* dst) {
  for (int ci = 0; ci < C; ++ci) {
    for (int r = 0; r < kh; ++r) {
      for (int c = 0; c < kw; ++c) {
        const S* src = col + ((static_cast<std::int64_t>(ci) * kh + r) * kw + c) *
                                 (static_cast<std::int64_t>(Ho) * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          const int y = ho * stride + r - pad;
          if (y < 0 || y >= H) continue;
          S* row = dst + (static_cast<std::int64_t>(ci) * H + y) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int x = wo * stride + c - pad;
            if (x >= 0 && x < W) row[x] += src[static_cast<std::int64_t>(ho) * Wo + wo];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::record<S>(tape, {&a, &b}, out, [ai = a.impl_, bi = b.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (ai->tracked)
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
    if (bi->tracked)
      for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
  });
  return out;
}

template <typename S>
TensorT<S> sub(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::record<S>(tape, {&a, &b}, out, [ai = a.impl_, bi = b.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (ai->tracked)
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
    if (bi->tracked)
      for (std::size_t i = 0; i < n; ++i) bi->grad[i] -= oi->grad[i];
  });
  return out;
}

template <typename S>
TensorT<S> mul(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::record<S>(tape, {&a, &b}, out, [ai = a.impl_, bi = b.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (ai->tracked)
      for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
    if (bi->tracked)
      for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
  });
  return out;
}

template <typename S>
TensorT<S> scale(Tape<S>* tape, const TensorT<S>& x, S factor) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * factor;
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_, factor]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * factor;
  });
  return out;
}

template <typename S>
TensorT<S> add_scalar(Tape<S>* tape, const TensorT<S>& x, S c) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + c;
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

template <typename S>
TensorT<S> square(Tape<S>* tape, const TensorT<S>& x) {
  return mul(tape, x, x);
}

template <typename S>
TensorT<S> exp_t(Tape<S>* tape, const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    out.data()[i] = std::exp(x.data()[i]);
    if (!std::isfinite(static_cast<double>(out.data()[i])))
      throw NumericError("exp overflow at input " + std::to_string(static_cast<double>(x.data()[i])));
  }
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * oi->data[i];
  });
  return out;
}

// Natural log; inputs must be positive (clamp first when they may not be).
template <typename S>
TensorT<S> log_t(Tape<S>* tape, const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!(x.data()[i] > S(0))) throw NumericError("log of non-positive value");
    out.data()[i] = std::log(x.data()[i]);
  }
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] / xi->data[i];
  });
  return out;
}

template <typename S>
TensorT<S> abs_t(Tape<S>* tape, const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::abs(x.data()[i]);
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) {
        const S s = xi->data[i] > S(0) ? S(1) : (xi->data[i] < S(0) ? S(-1) : S(0));
        xi->grad[i] += oi->grad[i] * s;
      }
  });
  return out;
}

// max(x, lo); gradient passes where x >= lo.
template <typename S>
TensorT<S> clamp_min(Tape<S>* tape, const TensorT<S>& x, S lo) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::max(x.data()[i], lo);
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_, lo]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i)
        if (xi->data[i] >= lo) xi->grad[i] += oi->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> leaky_relu(Tape<S>* tape, const TensorT<S>& x, S slope) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] >= S(0) ? x.data()[i] : slope * x.data()[i];
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_, slope]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i)
        xi->grad[i] += oi->grad[i] * (xi->data[i] >= S(0) ? S(1) : slope);
  });
  return out;
}

template <typename S>
TensorT<S> sigmoid_t(Tape<S>* tape, const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const S v = x.data()[i];
    out.data()[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                              : std::exp(v) / (S(1) + std::exp(v));
  }
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) {
        const S y = oi->data[i];
        xi->grad[i] += oi->grad[i] * y * (S(1) - y);
      }
  });
  return out;
}

template <typename S>
TensorT<S> tanh_t(Tape<S>* tape, const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::tanh(x.data()[i]);
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    const std::size_t n = oi->data.size();
    if (xi->tracked)
      for (std::size_t i = 0; i < n; ++i) {
        const S y = oi->data[i];
        xi->grad[i] += oi->grad[i] * (S(1) - y * y);
      }
  });
  return out;
}

template <typename S>
TensorT<S> softmax(Tape<S>* tape, const TensorT<S>& x, int axis) {
  const Shape& sh = x.shape();
  if (axis < 0) axis += static_cast<int>(sh.size());
  if (axis < 0 || axis >= static_cast<int>(sh.size()))
    throw ShapeError("softmax: axis out of range for " + shape_str(sh));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(sh.size()); ++i) inner *= sh[static_cast<std::size_t>(i)];
  const std::int64_t K = sh[static_cast<std::size_t>(axis)];

  TensorT<S> out = TensorT<S>::zeros(sh);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const auto at = [&](std::int64_t k) { return (o * K + k) * inner + in; };
      S mx = x.data()[at(0)];
      for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, x.data()[at(k)]);
      S sum = S(0);
      for (std::int64_t k = 0; k < K; ++k) {
        const S e = std::exp(x.data()[at(k)] - mx);
        out.data()[at(k)] = e;
        sum += e;
      }
      for (std::int64_t k = 0; k < K; ++k) out.data()[at(k)] /= sum;
    }
  }
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_, outer, inner, K]() {
    if (!xi->tracked) return;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const auto at = [&](std::int64_t k) { return (o * K + k) * inner + in; };
        S dot = S(0);
        for (std::int64_t k = 0; k < K; ++k) dot += oi->grad[at(k)] * oi->data[at(k)];
        for (std::int64_t k = 0; k < K; ++k)
          xi->grad[at(k)] += oi->data[at(k)] * (oi->grad[at(k)] - dot);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(Tape<S>* tape, const TensorT<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  TensorT<S> out = TensorT<S>::from(std::move(new_shape), x.values());
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    if (!xi->tracked) return;
    for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

template <typename S>
TensorT<S> concat(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b, int axis) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError("concat: rank mismatch");
  if (axis < 0) axis += static_cast<int>(sa.size());
  for (int i = 0; i < static_cast<int>(sa.size()); ++i)
    if (i != axis && sa[static_cast<std::size_t>(i)] != sb[static_cast<std::size_t>(i)])
      throw ShapeError("concat: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sa[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(sa.size()); ++i) inner *= sa[static_cast<std::size_t>(i)];
  const std::int64_t A = sa[static_cast<std::size_t>(axis)], B = sb[static_cast<std::size_t>(axis)];

  Shape so = sa;
  so[static_cast<std::size_t>(axis)] = static_cast<int>(A + B);
  TensorT<S> out = TensorT<S>::zeros(so);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (A + B) * inner, a.data() + o * A * inner,
                sizeof(S) * static_cast<std::size_t>(A * inner));
    std::memcpy(out.data() + (o * (A + B) + A) * inner, b.data() + o * B * inner,
                sizeof(S) * static_cast<std::size_t>(B * inner));
  }
  detail::record<S>(tape, {&a, &b}, out,
                    [ai = a.impl_, bi = b.impl_, oi = out.impl_, outer, inner, A, B]() {
    for (std::int64_t o = 0; o < outer; ++o) {
      if (ai->tracked)
        for (std::int64_t i = 0; i < A * inner; ++i)
          ai->grad[o * A * inner + i] += oi->grad[o * (A + B) * inner + i];
      if (bi->tracked)
        for (std::int64_t i = 0; i < B * inner; ++i)
          bi->grad[o * B * inner + i] += oi->grad[(o * (A + B) + A) * inner + i];
    }
  });
  return out;
}

// [N,D] -> [N,D,h,w] with each vector entry broadcast over the spatial grid.
template <typename S>
TensorT<S> tile_spatial(Tape<S>* tape, const TensorT<S>& v, int h, int w) {
  if (v.shape().size() != 2) throw ShapeError("tile_spatial expects [N,D], got " + shape_str(v.shape()));
  const int N = v.dim(0), D = v.dim(1);
  TensorT<S> out = TensorT<S>::zeros({N, D, h, w});
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  for (std::int64_t nd = 0; nd < static_cast<std::int64_t>(N) * D; ++nd)
    for (std::int64_t i = 0; i < hw; ++i) out.data()[nd * hw + i] = v.data()[nd];
  detail::record<S>(tape, {&v}, out, [vi = v.impl_, oi = out.impl_, N, D, hw]() {
    if (!vi->tracked) return;
    for (std::int64_t nd = 0; nd < static_cast<std::int64_t>(N) * D; ++nd) {
      S acc = S(0);
      for (std::int64_t i = 0; i < hw; ++i) acc += oi->grad[nd * hw + i];
      vi->grad[nd] += acc;
    }
  });
  return out;
}

template <typename S>
TensorT<S> global_avg_pool(Tape<S>* tape, const TensorT<S>& x) {
  if (x.shape().size() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W], got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  TensorT<S> out = TensorT<S>::zeros({N, C});
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    S acc = S(0);
    for (std::int64_t i = 0; i < hw; ++i) acc += x.data()[nc * hw + i];
    out.data()[nc] = acc / static_cast<S>(hw);
  }
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_, N, C, hw]() {
    if (!xi->tracked) return;
    const S inv = S(1) / static_cast<S>(hw);
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
      const S g = oi->grad[nc] * inv;
      for (std::int64_t i = 0; i < hw; ++i) xi->grad[nc * hw + i] += g;
    }
  });
  return out;
}

// out[i] = x[i, idx[i]]
template <typename S>
TensorT<S> take_per_row(Tape<S>* tape, const TensorT<S>& x, const std::vector<int>& idx) {
  if (x.shape().size() != 2) throw ShapeError("take_per_row expects [N,D], got " + shape_str(x.shape()));
  const int N = x.dim(0), D = x.dim(1);
  if (static_cast<int>(idx.size()) != N) throw ShapeError("take_per_row: index count != rows");
  TensorT<S> out = TensorT<S>::zeros({N});
  for (int i = 0; i < N; ++i) {
    if (idx[static_cast<std::size_t>(i)] < 0 || idx[static_cast<std::size_t>(i)] >= D)
      throw ShapeError("take_per_row: index out of range");
    out.data()[i] = x.data()[static_cast<std::int64_t>(i) * D + idx[static_cast<std::size_t>(i)]];
  }
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_, idx, D]() {
    if (!xi->tracked) return;
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      xi->grad[static_cast<std::int64_t>(i) * D + idx[i]] += oi->grad[i];
  });
  return out;
}

template <typename S>
TensorT<S> sum_all(Tape<S>* tape, const TensorT<S>& x) {
  S acc = S(0);
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) acc += x.data()[i];
  TensorT<S> out = TensorT<S>::scalar(acc);
  detail::record<S>(tape, {&x}, out, [xi = x.impl_, oi = out.impl_]() {
    if (!xi->tracked) return;
    const S g = oi->grad[0];
    for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
  });
  return out;
}

template <typename S>
TensorT<S> mean_all(Tape<S>* tape, const TensorT<S>& x) {
  TensorT<S> s = sum_all(tape, x);
  return scale(tape, s, S(1) / static_cast<S>(x.size()));
}

// ---------------------------------------------------------------------------
// Linear layers
// ---------------------------------------------------------------------------

// y = x . W^T + b    x:[N,Din]  W:[Dout,Din]  b:[Dout]
template <typename S>
TensorT<S> dense(Tape<S>* tape, const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2)
    throw ShapeError("dense expects 2-D input and weights");
  const int N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  if (w.dim(1) != Din)
    throw ShapeError("dense: input width " + std::to_string(Din) + " != weight width " +
                     std::to_string(w.dim(1)));
  if (b.size() != Dout) throw ShapeError("dense: bias size != output width");

  TensorT<S> out = TensorT<S>::zeros({N, Dout});
  {
    detail::MapCM<S> X(x.data(), N, Din), W(w.data(), Dout, Din);
    detail::MapM<S> Y(out.data(), N, Dout);
    Y.noalias() = X * W.transpose();
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < Dout; ++j) out.data()[static_cast<std::int64_t>(i) * Dout + j] += b.data()[j];
  }
  detail::record<S>(tape, {&x, &w, &b}, out,
                    [xi = x.impl_, wi = w.impl_, bi = b.impl_, oi = out.impl_, N, Din, Dout]() {
    detail::MapCM<S> X(xi->data.data(), N, Din), W(wi->data.data(), Dout, Din),
        dY(oi->grad.data(), N, Dout);
    if (xi->tracked) {
      detail::MapM<S> dX(xi->grad.data(), N, Din);
      dX.noalias() += dY * W;
    }
    if (wi->tracked) {
      detail::MapM<S> dW(wi->grad.data(), Dout, Din);
      dW.noalias() += dY.transpose() * X;
    }
    if (bi->tracked)
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < Dout; ++j) bi->grad[static_cast<std::size_t>(j)] += dY(i, j);
  });
  return out;
}

// Cross-correlation. x:[N,Cin,H,W]  w:[Cout,Cin,kh,kw]  b:[Cout]
template <typename S>
TensorT<S> conv2d(Tape<S>* tape, const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                  int stride, int pad) {
  if (x.shape().size() != 4) throw ShapeError("conv2d expects [N,C,H,W] input, got " + shape_str(x.shape()));
  if (w.shape().size() != 4) throw ShapeError("conv2d expects [Cout,Cin,kh,kw] weights, got " + shape_str(w.shape()));
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: input channels " + std::to_string(Cin) + " != weight channels " +
                     std::to_string(w.dim(1)));
  if (b.size() != Cout) throw ShapeError("conv2d: bias size != output channels");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + shape_str(x.shape()));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const std::int64_t K = static_cast<std::int64_t>(Cin) * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;

  TensorT<S> out = TensorT<S>::zeros({N, Cout, Ho, Wo});
  AlignedVec<S> col(static_cast<std::size_t>(K * P));
  for (int n = 0; n < N; ++n) {
    detail::im2col(x.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw,
                   stride, pad, Ho, Wo, col.data());
    detail::MapCM<S> Wm(w.data(), Cout, K), C(col.data(), K, P);
    detail::MapM<S> O(out.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
    O.noalias() = Wm * C;
    for (int co = 0; co < Cout; ++co) O.row(co).array() += b.data()[co];
  }
  detail::record<S>(tape, {&x, &w, &b}, out,
                    [xi = x.impl_, wi = w.impl_, bi = b.impl_, oi = out.impl_, N, Cin, H, W, Cout,
                     kh, kw, stride, pad, Ho, Wo, K, P]() {
    AlignedVec<S> col(static_cast<std::size_t>(K * P));
    for (int n = 0; n < N; ++n) {
      detail::MapCM<S> dO(oi->grad.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
      if (bi->tracked)
        for (int co = 0; co < Cout; ++co) bi->grad[static_cast<std::size_t>(co)] += dO.row(co).sum();
      if (wi->tracked) {
        detail::im2col(xi->data.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W,
                       kh, kw, stride, pad, Ho, Wo, col.data());
        detail::MapCM<S> C(col.data(), K, P);
        detail::MapM<S> dW(wi->grad.data(), Cout, K);
        dW.noalias() += dO * C.transpose();
      }
      if (xi->tracked) {
        detail::MapCM<S> Wm(wi->data.data(), Cout, K);
        detail::MapM<S> Cg(col.data(), K, P);
        Cg.noalias() = Wm.transpose() * dO;
        detail::col2im(col.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                       xi->grad.data() + static_cast<std::int64_t>(n) * Cin * H * W);
      }
    }
  });
  return out;
}

// Adjoint of conv2d in its input slot; doubles spatial extent at stride 2.
// x:[N,Cin,H,W]  w:[Cin,Cout,kh,kw]  b:[Cout];  out: (H-1)*stride - 2*pad + kh
template <typename S>
TensorT<S> conv2d_transposed(Tape<S>* tape, const TensorT<S>& x, const TensorT<S>& w,
                             const TensorT<S>& b, int stride, int pad) {
  if (x.shape().size() != 4) throw ShapeError("conv2d_transposed expects [N,C,H,W] input, got " + shape_str(x.shape()));
  if (w.shape().size() != 4) throw ShapeError("conv2d_transposed expects [Cin,Cout,kh,kw] weights, got " + shape_str(w.shape()));
  const int N = x.dim(0), Cin = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const int Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != Cin)
    throw ShapeError("conv2d_transposed: input channels " + std::to_string(Cin) +
                     " != weight channels " + std::to_string(w.dim(0)));
  if (b.size() != Cout) throw ShapeError("conv2d_transposed: bias size != output channels");
  const int Ho = (Hi - 1) * stride - 2 * pad + kh;
  const int Wo = (Wi - 1) * stride - 2 * pad + kw;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d_transposed: empty output extent");
  const std::int64_t K = static_cast<std::int64_t>(Cout) * kh * kw;
  const std::int64_t P = static_cast<std::int64_t>(Hi) * Wi;

  // In the adjoint picture the output plays the conv input role.
  TensorT<S> out = TensorT<S>::zeros({N, Cout, Ho, Wo});
  AlignedVec<S> col(static_cast<std::size_t>(K * P));
  for (int n = 0; n < N; ++n) {
    detail::MapCM<S> Wm(w.data(), Cin, K), Xm(x.data() + static_cast<std::int64_t>(n) * Cin * P, Cin, P);
    detail::MapM<S> C(col.data(), K, P);
    C.noalias() = Wm.transpose() * Xm;
    detail::col2im(col.data(), Cout, Ho, Wo, kh, kw, stride, pad, Hi, Wi,
                   out.data() + static_cast<std::int64_t>(n) * Cout * Ho * Wo);
    S* och = out.data() + static_cast<std::int64_t>(n) * Cout * Ho * Wo;
    for (int co = 0; co < Cout; ++co)
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i)
        och[co * static_cast<std::int64_t>(Ho) * Wo + i] += b.data()[co];
  }
  detail::record<S>(tape, {&x, &w, &b}, out,
                    [xi = x.impl_, wi = w.impl_, bi = b.impl_, oi = out.impl_, N, Cin, Hi, Wi,
                     Cout, kh, kw, stride, pad, Ho, Wo, K, P]() {
    AlignedVec<S> col(static_cast<std::size_t>(K * P));
    const std::int64_t outHW = static_cast<std::int64_t>(Ho) * Wo;
    for (int n = 0; n < N; ++n) {
      const S* g = oi->grad.data() + static_cast<std::int64_t>(n) * Cout * outHW;
      if (bi->tracked)
        for (int co = 0; co < Cout; ++co) {
          S acc = S(0);
          for (std::int64_t i = 0; i < outHW; ++i) acc += g[co * outHW + i];
          bi->grad[static_cast<std::size_t>(co)] += acc;
        }
      if (xi->tracked || wi->tracked)
        detail::im2col(g, Cout, Ho, Wo, kh, kw, stride, pad, Hi, Wi, col.data());
      detail::MapCM<S> C(col.data(), K, P);
      if (xi->tracked) {
        detail::MapCM<S> Wm(wi->data.data(), Cin, K);
        detail::MapM<S> dX(xi->grad.data() + static_cast<std::int64_t>(n) * Cin * P, Cin, P);
        dX.noalias() += Wm * C;
      }
      if (wi->tracked) {
        detail::MapCM<S> Xm(xi->data.data() + static_cast<std::int64_t>(n) * Cin * P, Cin, P);
        detail::MapM<S> dW(wi->grad.data(), Cin, K);
        dW.noalias() += Xm * C.transpose();
      }
    }
  });
  return out;
}

// Per-sample, per-channel standardization over the spatial grid, then a
// learned per-channel affine. x:[N,C,H,W]  gain,shift:[C]
template <typename S>
TensorT<S> instance_norm2d(Tape<S>* tape, const TensorT<S>& x, const TensorT<S>& gain,
                           const TensorT<S>& shift, S eps = S(1e-5)) {
  if (x.shape().size() != 4) throw ShapeError("instance_norm2d expects [N,C,H,W], got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  if (gain.size() != C || shift.size() != C)
    throw ShapeError("instance_norm2d: gain/shift size != channels");

  TensorT<S> out = TensorT<S>::zeros(x.shape());
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const S* xs = x.data() + nc * hw;
    S* ys = out.data() + nc * hw;
    S mean = S(0);
    for (std::int64_t i = 0; i < hw; ++i) mean += xs[i];
    mean /= static_cast<S>(hw);
    S var = S(0);
    for (std::int64_t i = 0; i < hw; ++i) {
      const S d = xs[i] - mean;
      var += d * d;
    }
    var /= static_cast<S>(hw);
    const S inv = S(1) / std::sqrt(var + eps);
    const S g = gain.data()[nc % C], sh = shift.data()[nc % C];
    for (std::int64_t i = 0; i < hw; ++i) ys[i] = (xs[i] - mean) * inv * g + sh;
  }
  detail::record<S>(tape, {&x, &gain, &shift}, out,
                    [xi = x.impl_, gi = gain.impl_, si = shift.impl_, oi = out.impl_, N, C, hw, eps]() {
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
      const S* xs = xi->data.data() + nc * hw;
      const S* dys = oi->grad.data() + nc * hw;
      const int c = static_cast<int>(nc % C);
      S mean = S(0);
      for (std::int64_t i = 0; i < hw; ++i) mean += xs[i];
      mean /= static_cast<S>(hw);
      S var = S(0);
      for (std::int64_t i = 0; i < hw; ++i) {
        const S d = xs[i] - mean;
        var += d * d;
      }
      var /= static_cast<S>(hw);
      const S inv = S(1) / std::sqrt(var + eps);
      const S g = gi->data[static_cast<std::size_t>(c)];
      S sum_dy = S(0), sum_dy_xhat = S(0);
      for (std::int64_t i = 0; i < hw; ++i) {
        const S xhat = (xs[i] - mean) * inv;
        sum_dy += dys[i];
        sum_dy_xhat += dys[i] * xhat;
      }
      if (gi->tracked) gi->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
      if (si->tracked) si->grad[static_cast<std::size_t>(c)] += sum_dy;
      if (xi->tracked) {
        S* dxs = xi->grad.data() + nc * hw;
        const S m = static_cast<S>(hw);
        for (std::int64_t i = 0; i < hw; ++i) {
          const S xhat = (xs[i] - mean) * inv;
          dxs[i] += g * inv * (dys[i] - sum_dy / m - xhat * sum_dy_xhat / m);
        }
      }
    }
  });
  return out;
}

}  // namespace imunity::ad
