#pragma once

// Differentiable tensor operations recorded on a Tape. All feature maps are
// NCHW; convolutions are direct loops whose per-output accumulation order is
// independent of the batch size.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tssam/autograd.hpp"

namespace tssam::ops {

namespace detail {

inline void check_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.numel(); i < n; ++i) d[i] += s[i];
}

struct Dims4 {
  std::size_t b, c, h, w;
};
inline Dims4 dims(const Shape& s) { return {s[0], s[1], s[2], s[3]}; }

template <class T>
void conv_forward(const T* x, Dims4 in, const T* w, std::size_t co_n, std::size_t k, const T* bias, T* out) {
  const std::size_t pad = k / 2, hw = in.h * in.w;
  for (std::size_t b = 0; b < in.b; ++b) {
    for (std::size_t co = 0; co < co_n; ++co) {
      T* o = out + (b * co_n + co) * hw;
      const T bv = bias ? bias[co] : T{0};
      for (std::size_t i = 0; i < hw; ++i) o[i] = bv;
      for (std::size_t ci = 0; ci < in.c; ++ci) {
        const T* xi = x + (b * in.c + ci) * hw;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T wv = w[((co * in.c + ci) * k + ky) * k + kx];
            if (wv == T{0}) continue;
            for (std::size_t y = 0; y < in.h; ++y) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(in.h)) continue;
              const std::size_t x0 = kx < pad ? pad - kx : 0;
              const std::size_t x1 = std::min(in.w, in.w + pad - kx);
              const T* row = xi + std::size_t(iy) * in.w;
              T* orow = o + y * in.w;
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wv * row[xx + kx - pad];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward(const T* x, Dims4 in, const T* w, std::size_t co_n, std::size_t k, const T* dy, T* dx, T* dw,
                   T* db) {
  const std::size_t pad = k / 2, hw = in.h * in.w;
  for (std::size_t b = 0; b < in.b; ++b) {
    for (std::size_t co = 0; co < co_n; ++co) {
      const T* g = dy + (b * co_n + co) * hw;
      if (db)
        for (std::size_t i = 0; i < hw; ++i) db[co] += g[i];
      for (std::size_t ci = 0; ci < in.c; ++ci) {
        const T* xi = x + (b * in.c + ci) * hw;
        T* dxi = dx ? dx + (b * in.c + ci) * hw : nullptr;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((co * in.c + ci) * k + ky) * k + kx;
            const T wv = w[widx];
            T acc = 0;
            for (std::size_t y = 0; y < in.h; ++y) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y + ky) - std::ptrdiff_t(pad);
              if (iy < 0 || iy >= std::ptrdiff_t(in.h)) continue;
              const std::size_t x0 = kx < pad ? pad - kx : 0;
              const std::size_t x1 = std::min(in.w, in.w + pad - kx);
              const T* grow = g + y * in.w;
              const T* row = xi + std::size_t(iy) * in.w;
              if (dxi) {
                T* drow = dxi + std::size_t(iy) * in.w;
                for (std::size_t xx = x0; xx < x1; ++xx) drow[xx + kx - pad] += wv * grow[xx];
              }
              if (dw)
                for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * row[xx + kx - pad];
            }
            if (dw) dw[widx] += acc;
          }
        }
      }
    }
  }
}

/// Per-axis linear interpolation table for half-pixel-centred upsampling.
struct LerpAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<double> frac;
};

inline LerpAxis lerp_axis(std::size_t in, std::size_t out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.frac.resize(out);
  const double scale = double(in) / double(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = std::min(std::size_t(src), in - 1);
    a.i0[o] = lo;
    a.i1[o] = std::min(lo + 1, in - 1);
    a.frac[o] = src - double(lo);
  }
  return a;
}

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  return (h ^ v) * 0x100000001b3ULL;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail::add_into(t.grad(a), g);
    if (t.requires_grad(b)) detail::add_into(t.grad(b), g);
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  Tape<T>& tape = *x.tape;
  if (tape.track_kinks()) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto& xv = x.value();
    for (std::size_t i = 0; i < xv.numel(); ++i) h = detail::mix(h, xv[i] > T{0} ? 1 : 0);
    tape.note_decision(h);
  }
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (xv[i] > T{0}) gx[i] += g[i];
  });
}

template <class T>
Var<T> gelu(Var<T> x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T v = xv[i];
      const T d = T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * d;
    }
  });
}

template <class T>
Var<T> tanh(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = std::tanh(v);
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

/// Mean over every element; result has shape (1).
template <class T>
Var<T> mean_all(Var<T> x) {
  const auto& xv = x.value();
  T s = 0;
  for (T v : xv.values()) s += v;
  const T n = T(xv.numel());
  return x.tape->record(Tensor<T>({1}, s / n), {x}, [x, n](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0] / n;
    for (auto& v : t.grad(x).values()) v += g;
  });
}

// ---------------------------------------------------------------- layout

/// Channel concatenation; `a` occupies the leading channels.
template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  expect_rank4(a.shape(), "concat_channels");
  expect_rank4(b.shape(), "concat_channels");
  const auto da = detail::dims(a.shape()), db = detail::dims(b.shape());
  if (da.b != db.b || da.h != db.h || da.w != db.w)
    throw ShapeError("concat_channels: incompatible " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t hw = da.h * da.w, ct = da.c + db.c;
  Tensor<T> out({da.b, ct, da.h, da.w});
  for (std::size_t n = 0; n < da.b; ++n) {
    std::copy_n(a.value().data() + n * da.c * hw, da.c * hw, out.data() + n * ct * hw);
    std::copy_n(b.value().data() + n * db.c * hw, db.c * hw, out.data() + (n * ct + da.c) * hw);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, da, db, hw, ct](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t n = 0; n < da.b; ++n) {
      if (t.requires_grad(a)) {
        T* ga = t.grad(a).data() + n * da.c * hw;
        const T* src = g.data() + n * ct * hw;
        for (std::size_t i = 0; i < da.c * hw; ++i) ga[i] += src[i];
      }
      if (t.requires_grad(b)) {
        T* gb = t.grad(b).data() + n * db.c * hw;
        const T* src = g.data() + (n * ct + da.c) * hw;
        for (std::size_t i = 0; i < db.c * hw; ++i) gb[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------- convolution

/// Stride-1 "same" convolution with odd square kernel. w: (Co,Ci,k,k), bias: (Co) or absent.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias = std::nullopt) {
  expect_rank4(x.shape(), "conv2d input");
  expect_rank4(w.shape(), "conv2d weight");
  const auto in = detail::dims(x.shape());
  const std::size_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != in.c)
    throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, weight expects " +
                     std::to_string(w.dim(1)) + " (weight " + to_string(w.shape()) + ")");
  if (k != w.dim(3) || k % 2 == 0) throw ShapeError("conv2d: kernel must be odd and square, got " + to_string(w.shape()));
  if (bias && bias->shape() != Shape{co}) throw ShapeError("conv2d: bias shape " + to_string(bias->shape()));
  Tensor<T> out({in.b, co, in.h, in.w});
  detail::conv_forward(x.value().data(), in, w.value().data(), co, k, bias ? bias->value().data() : nullptr,
                       out.data());
  auto fn = [x, w, bias, in, co, k](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    T* dx = t.requires_grad(x) ? t.grad(x).data() : nullptr;
    T* dw = t.requires_grad(w) ? t.grad(w).data() : nullptr;
    T* db = bias && t.requires_grad(*bias) ? t.grad(*bias).data() : nullptr;
    detail::conv_backward(t.value(x).data(), in, t.value(w).data(), co, k, g.data(), dx, dw, db);
  };
  if (bias) return x.tape->record(std::move(out), {x, w, *bias}, fn);
  return x.tape->record(std::move(out), {x, w}, fn);
}

/// Per-pixel linear map over channels. w: (Co,Ci), bias: (Co).
template <class T>
Var<T> linear_channels(Var<T> x, Var<T> w, Var<T> bias) {
  expect_rank4(x.shape(), "linear_channels input");
  if (w.shape().size() != 2) throw ShapeError("linear_channels: weight must be (out,in), got " + to_string(w.shape()));
  const auto in = detail::dims(x.shape());
  const std::size_t co = w.dim(0);
  if (w.dim(1) != in.c)
    throw ShapeError("linear_channels: input has " + std::to_string(in.c) + " channels, weight is " +
                     to_string(w.shape()));
  if (bias.shape() != Shape{co}) throw ShapeError("linear_channels: bias shape " + to_string(bias.shape()));
  Tensor<T> out({in.b, co, in.h, in.w});
  detail::conv_forward(x.value().data(), in, w.value().data(), co, 1, bias.value().data(), out.data());
  return x.tape->record(std::move(out), {x, w, bias}, [x, w, bias, in, co](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    T* dx = t.requires_grad(x) ? t.grad(x).data() : nullptr;
    T* dw = t.requires_grad(w) ? t.grad(w).data() : nullptr;
    T* db = t.requires_grad(bias) ? t.grad(bias).data() : nullptr;
    detail::conv_backward(t.value(x).data(), in, t.value(w).data(), co, 1, g.data(), dx, dw, db);
  });
}

/// Transposed convolution, kernel 2, stride 2: exact spatial doubling.
/// w: (Ci,Co,2,2), bias: (Co).
template <class T>
Var<T> conv_transpose2x2(Var<T> x, Var<T> w, Var<T> bias) {
  expect_rank4(x.shape(), "conv_transpose2x2 input");
  const auto in = detail::dims(x.shape());
  if (w.shape().size() != 4 || w.dim(0) != in.c || w.dim(2) != 2 || w.dim(3) != 2)
    throw ShapeError("conv_transpose2x2: weight " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  const std::size_t co = w.dim(1);
  if (bias.shape() != Shape{co}) throw ShapeError("conv_transpose2x2: bias shape " + to_string(bias.shape()));
  const std::size_t oh = in.h * 2, ow = in.w * 2;
  Tensor<T> out({in.b, co, oh, ow});
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < in.h; ++i)
        for (std::size_t j = 0; j < in.w; ++j)
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj) {
              T acc = bv[o];
              for (std::size_t c = 0; c < in.c; ++c) acc += xv.at(n, c, i, j) * wv.at(c, o, di, dj);
              out.at(n, o, 2 * i + di, 2 * j + dj) = acc;
            }
  return x.tape->record(std::move(out), {x, w, bias}, [x, w, bias, in, co](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    Tensor<T>* gw = t.requires_grad(w) ? &t.grad(w) : nullptr;
    Tensor<T>* gb = t.requires_grad(bias) ? &t.grad(bias) : nullptr;
    for (std::size_t n = 0; n < in.b; ++n)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < in.h; ++i)
          for (std::size_t j = 0; j < in.w; ++j)
            for (std::size_t di = 0; di < 2; ++di)
              for (std::size_t dj = 0; dj < 2; ++dj) {
                const T gv = g.at(n, o, 2 * i + di, 2 * j + dj);
                if (gb) (*gb)[o] += gv;
                for (std::size_t c = 0; c < in.c; ++c) {
                  if (gx) gx->at(n, c, i, j) += gv * wv.at(c, o, di, dj);
                  if (gw) gw->at(c, o, di, dj) += gv * xv.at(n, c, i, j);
                }
              }
  });
}

/// Non-overlapping patch projection (kernel = stride = patch). w: (C,Ci,p,p), bias: (C).
template <class T>
Var<T> patch_embed(Var<T> x, Var<T> w, Var<T> bias) {
  expect_rank4(x.shape(), "patch_embed input");
  const auto in = detail::dims(x.shape());
  const std::size_t p = w.dim(2), c = w.dim(0);
  if (in.h % p != 0) throw ShapeError("patch_embed: height " + std::to_string(in.h) + " is not divisible by " + std::to_string(p));
  if (in.w % p != 0) throw ShapeError("patch_embed: width " + std::to_string(in.w) + " is not divisible by " + std::to_string(p));
  if (w.dim(1) != in.c || w.dim(3) != p)
    throw ShapeError("patch_embed: weight " + to_string(w.shape()) + " incompatible with input " + to_string(x.shape()));
  const std::size_t oh = in.h / p, ow = in.w / p;
  Tensor<T> out({in.b, c, oh, ow});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t o = 0; o < c; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T acc = bias.value()[o];
          for (std::size_t ci = 0; ci < in.c; ++ci)
            for (std::size_t ky = 0; ky < p; ++ky) {
              const T* row = &xv.at(n, ci, i * p + ky, j * p);
              const T* wrow = &wv.at(o, ci, ky, 0);
              for (std::size_t kx = 0; kx < p; ++kx) acc += wrow[kx] * row[kx];
            }
          out.at(n, o, i, j) = acc;
        }
  return x.tape->record(std::move(out), {x, w, bias}, [x, w, bias, in, p, c, oh, ow](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
    Tensor<T>* gw = t.requires_grad(w) ? &t.grad(w) : nullptr;
    Tensor<T>* gb = t.requires_grad(bias) ? &t.grad(bias) : nullptr;
    for (std::size_t n = 0; n < in.b; ++n)
      for (std::size_t o = 0; o < c; ++o)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const T gv = g.at(n, o, i, j);
            if (gb) (*gb)[o] += gv;
            for (std::size_t ci = 0; ci < in.c; ++ci)
              for (std::size_t ky = 0; ky < p; ++ky)
                for (std::size_t kx = 0; kx < p; ++kx) {
                  if (gx) gx->at(n, ci, i * p + ky, j * p + kx) += gv * wv.at(o, ci, ky, kx);
                  if (gw) gw->at(o, ci, ky, kx) += gv * xv.at(n, ci, i * p + ky, j * p + kx);
                }
          }
  });
}

// ---------------------------------------------------------------- resampling

template <class T>
Var<T> avg_pool2x2(Var<T> x) {
  expect_rank4(x.shape(), "avg_pool2x2");
  const auto in = detail::dims(x.shape());
  if (in.h % 2 || in.w % 2) throw ShapeError("avg_pool2x2: odd spatial dims " + to_string(x.shape()));
  Tensor<T> out({in.b, in.c, in.h / 2, in.w / 2});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t c = 0; c < in.c; ++c)
      for (std::size_t i = 0; i < in.h / 2; ++i)
        for (std::size_t j = 0; j < in.w / 2; ++j)
          out.at(n, c, i, j) = (xv.at(n, c, 2 * i, 2 * j) + xv.at(n, c, 2 * i, 2 * j + 1) +
                                xv.at(n, c, 2 * i + 1, 2 * j) + xv.at(n, c, 2 * i + 1, 2 * j + 1)) /
                               T(4);
  return x.tape->record(std::move(out), {x}, [x, in](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t n = 0; n < in.b; ++n)
      for (std::size_t c = 0; c < in.c; ++c)
        for (std::size_t i = 0; i < in.h; ++i)
          for (std::size_t j = 0; j < in.w; ++j) gx.at(n, c, i, j) += g.at(n, c, i / 2, j / 2) / T(4);
  });
}

/// 2x2 stride-2 max pooling; ties resolve to the first element in raster order.
template <class T>
Var<T> max_pool2x2(Var<T> x) {
  expect_rank4(x.shape(), "max_pool2x2");
  const auto in = detail::dims(x.shape());
  if (in.h % 2 || in.w % 2) throw ShapeError("max_pool2x2: odd spatial dims " + to_string(x.shape()));
  Tensor<T> out({in.b, in.c, in.h / 2, in.w / 2});
  std::vector<std::uint8_t> arg(out.numel());
  const auto& xv = x.value();
  std::size_t k = 0;
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t c = 0; c < in.c; ++c)
      for (std::size_t i = 0; i < in.h / 2; ++i)
        for (std::size_t j = 0; j < in.w / 2; ++j, ++k) {
          std::uint8_t best = 0;
          T m = xv.at(n, c, 2 * i, 2 * j);
          for (std::uint8_t q = 1; q < 4; ++q) {
            const T v = xv.at(n, c, 2 * i + q / 2, 2 * j + q % 2);
            if (v > m) m = v, best = q;
          }
          out[k] = m;
          arg[k] = best;
        }
  Tape<T>& tape = *x.tape;
  if (tape.track_kinks()) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto a : arg) h = detail::mix(h, a);
    tape.note_decision(h);
  }
  return tape.record(std::move(out), {x}, [x, in, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    std::size_t k = 0;
    for (std::size_t n = 0; n < in.b; ++n)
      for (std::size_t c = 0; c < in.c; ++c)
        for (std::size_t i = 0; i < in.h / 2; ++i)
          for (std::size_t j = 0; j < in.w / 2; ++j, ++k)
            gx.at(n, c, 2 * i + arg[k] / 2, 2 * j + arg[k] % 2) += g[k];
  });
}

/// Bilinear resize to (oh, ow) with half-pixel centres (corner alignment off).
template <class T>
Var<T> resize_bilinear(Var<T> x, std::size_t oh, std::size_t ow) {
  expect_rank4(x.shape(), "resize_bilinear");
  const auto in = detail::dims(x.shape());
  auto ay = detail::lerp_axis(in.h, oh);
  auto ax = detail::lerp_axis(in.w, ow);
  Tensor<T> out({in.b, in.c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t c = 0; c < in.c; ++c)
      for (std::size_t i = 0; i < oh; ++i) {
        const T fy = T(ay.frac[i]);
        for (std::size_t j = 0; j < ow; ++j) {
          const T fx = T(ax.frac[j]);
          const T top = xv.at(n, c, ay.i0[i], ax.i0[j]) * (T(1) - fx) + xv.at(n, c, ay.i0[i], ax.i1[j]) * fx;
          const T bot = xv.at(n, c, ay.i1[i], ax.i0[j]) * (T(1) - fx) + xv.at(n, c, ay.i1[i], ax.i1[j]) * fx;
          out.at(n, c, i, j) = top * (T(1) - fy) + bot * fy;
        }
      }
  return x.tape->record(std::move(out), {x}, [x, in, oh, ow, ay, ax](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t n = 0; n < in.b; ++n)
      for (std::size_t c = 0; c < in.c; ++c)
        for (std::size_t i = 0; i < oh; ++i) {
          const T fy = T(ay.frac[i]);
          for (std::size_t j = 0; j < ow; ++j) {
            const T fx = T(ax.frac[j]);
            const T gv = g.at(n, c, i, j);
            gx.at(n, c, ay.i0[i], ax.i0[j]) += gv * (T(1) - fy) * (T(1) - fx);
            gx.at(n, c, ay.i0[i], ax.i1[j]) += gv * (T(1) - fy) * fx;
            gx.at(n, c, ay.i1[i], ax.i0[j]) += gv * fy * (T(1) - fx);
            gx.at(n, c, ay.i1[i], ax.i1[j]) += gv * fy * fx;
          }
        }
  });
}

template <class T>
Var<T> upsample_bilinear(Var<T> x, std::size_t factor) {
  expect_rank4(x.shape(), "upsample_bilinear");
  return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

// ---------------------------------------------------------------- normalisation

/// Layer normalisation over the channel vector at each pixel.
template <class T>
Var<T> layer_norm_channels(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  expect_rank4(x.shape(), "layer_norm_channels");
  const auto in = detail::dims(x.shape());
  if (gamma.shape() != Shape{in.c} || beta.shape() != Shape{in.c})
    throw ShapeError("layer_norm_channels: affine shape mismatch for " + to_string(x.shape()));
  const std::size_t hw = in.h * in.w;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv(in.b * hw);
  const auto& xv = x.value();
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      T mean = 0;
      for (std::size_t c = 0; c < in.c; ++c) mean += xv[(n * in.c + c) * hw + p];
      mean /= T(in.c);
      T var = 0;
      for (std::size_t c = 0; c < in.c; ++c) {
        const T d = xv[(n * in.c + c) * hw + p] - mean;
        var += d * d;
      }
      var /= T(in.c);
      const T is = T(1) / std::sqrt(var + eps);
      inv[n * hw + p] = is;
      for (std::size_t c = 0; c < in.c; ++c) {
        const std::size_t k = (n * in.c + c) * hw + p;
        xhat[k] = (xv[k] - mean) * is;
        out[k] = xhat[k] * gamma.value()[c] + beta.value()[c];
      }
    }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, in, hw, xhat = std::move(xhat), inv = std::move(inv)](Tape<T>& t,
                                                                                               std::size_t self) {
                          const auto& g = t.grad(self);
                          const auto& gm = t.value(gamma);
                          if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                            auto& gg = t.grad(gamma);
                            auto& gb = t.grad(beta);
                            for (std::size_t n = 0; n < in.b; ++n)
                              for (std::size_t c = 0; c < in.c; ++c)
                                for (std::size_t p = 0; p < hw; ++p) {
                                  const std::size_t k = (n * in.c + c) * hw + p;
                                  gg[c] += g[k] * xhat[k];
                                  gb[c] += g[k];
                                }
                          }
                          if (!t.requires_grad(x)) return;
                          auto& gx = t.grad(x);
                          for (std::size_t n = 0; n < in.b; ++n)
                            for (std::size_t p = 0; p < hw; ++p) {
                              T m1 = 0, m2 = 0;
                              for (std::size_t c = 0; c < in.c; ++c) {
                                const std::size_t k = (n * in.c + c) * hw + p;
                                const T d = g[k] * gm[c];
                                m1 += d;
                                m2 += d * xhat[k];
                              }
                              m1 /= T(in.c);
                              m2 /= T(in.c);
                              for (std::size_t c = 0; c < in.c; ++c) {
                                const std::size_t k = (n * in.c + c) * hw + p;
                                gx[k] += inv[n * hw + p] * (g[k] * gm[c] - m1 - xhat[k] * m2);
                              }
                            }
                        });
}

/// Batch normalisation over (B,H,W) per channel.
///
/// Train mode normalises with biased batch statistics and folds the unbiased
/// variance into the running buffers with weight `momentum`. Eval mode uses the
/// running buffers and leaves them untouched.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                  T momentum, T eps) {
  expect_rank4(x.shape(), "batch_norm");
  const auto in = detail::dims(x.shape());
  if (gamma.shape() != Shape{in.c} || beta.shape() != Shape{in.c} || running_mean.shape() != Shape{in.c} ||
      running_var.shape() != Shape{in.c})
    throw ShapeError("batch_norm: parameter shapes do not match " + std::to_string(in.c) + " channels");
  if (train && in.b < 2)
    throw ShapeError("batch_norm: train mode needs batch >= 2 for batch statistics, got batch " +
                     std::to_string(in.b));
  const std::size_t hw = in.h * in.w;
  const T count = T(in.b * hw);
  std::vector<T> mean(in.c), inv(in.c);
  const auto& xv = x.value();
  for (std::size_t c = 0; c < in.c; ++c) {
    if (train) {
      T s = 0;
      for (std::size_t n = 0; n < in.b; ++n)
        for (std::size_t p = 0; p < hw; ++p) s += xv[(n * in.c + c) * hw + p];
      const T m = s / count;
      T v = 0;
      for (std::size_t n = 0; n < in.b; ++n)
        for (std::size_t p = 0; p < hw; ++p) {
          const T d = xv[(n * in.c + c) * hw + p] - m;
          v += d * d;
        }
      const T biased = v / count;
      mean[c] = m;
      inv[c] = T(1) / std::sqrt(biased + eps);
      const T unbiased = count > T(1) ? v / (count - T(1)) : biased;
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean[c] = running_mean[c];
      inv[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  const auto& gm = gamma.value();
  const auto& bt = beta.value();
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t c = 0; c < in.c; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t k = (n * in.c + c) * hw + p;
        xhat[k] = (xv[k] - mean[c]) * inv[c];
        out[k] = xhat[k] * gm[c] + bt[c];
      }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, in, hw, count, train, xhat = std::move(xhat), inv = std::move(inv)](Tape<T>& t,
                                                                                          std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gm = t.value(gamma);
        std::vector<T> sum_g(in.c, T(0)), sum_gx(in.c, T(0));
        for (std::size_t n = 0; n < in.b; ++n)
          for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t k = (n * in.c + c) * hw + p;
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (t.requires_grad(gamma)) {
          auto& gg = t.grad(gamma);
          for (std::size_t c = 0; c < in.c; ++c) gg[c] += sum_gx[c];
        }
        if (t.requires_grad(beta)) {
          auto& gb = t.grad(beta);
          for (std::size_t c = 0; c < in.c; ++c) gb[c] += sum_g[c];
        }
        if (!t.requires_grad(x)) return;
        auto& gx = t.grad(x);
        for (std::size_t n = 0; n < in.b; ++n)
          for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t k = (n * in.c + c) * hw + p;
              if (train)
                gx[k] += gm[c] * inv[c] * (g[k] - sum_g[c] / count - xhat[k] * sum_gx[c] / count);
              else
                gx[k] += g[k] * gm[c] * inv[c];
            }
      });
}

// ---------------------------------------------------------------- attention

/// Multi-head softmax self-attention over the h*w tokens of a fused qkv map.
/// qkv: (B, 3C, h, w) holding queries, keys and values in that channel order.
template <class T>
Var<T> self_attention(Var<T> qkv, std::size_t heads) {
  expect_rank4(qkv.shape(), "self_attention");
  const auto in = detail::dims(qkv.shape());
  if (in.c % 3 != 0) throw ShapeError("self_attention: qkv channels not divisible by 3: " + to_string(qkv.shape()));
  const std::size_t c = in.c / 3;
  if (heads == 0 || c % heads != 0)
    throw ShapeError("self_attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) +
                     " heads");
  const std::size_t hd = c / heads, L = in.h * in.w;
  const T sc = T(1) / std::sqrt(T(hd));
  const auto& v = qkv.value();
  auto q_at = [&](std::size_t n, std::size_t hh, std::size_t d, std::size_t l) {
    return v[(n * in.c + hh * hd + d) * L + l];
  };
  auto k_at = [&](std::size_t n, std::size_t hh, std::size_t d, std::size_t l) {
    return v[(n * in.c + c + hh * hd + d) * L + l];
  };
  auto v_at = [&](std::size_t n, std::size_t hh, std::size_t d, std::size_t l) {
    return v[(n * in.c + 2 * c + hh * hd + d) * L + l];
  };
  Tensor<T> probs({in.b, heads, L, L});
  Tensor<T> out({in.b, c, in.h, in.w});
  for (std::size_t n = 0; n < in.b; ++n)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < L; ++i) {
        T* row = &probs.at(n, hh, i, 0);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          T s = 0;
          for (std::size_t d = 0; d < hd; ++d) s += q_at(n, hh, d, i) * k_at(n, hh, d, j);
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < L; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < L; ++j) row[j] /= z;
        for (std::size_t d = 0; d < hd; ++d) {
          T acc = 0;
          for (std::size_t j = 0; j < L; ++j) acc += row[j] * v_at(n, hh, d, j);
          out[(n * c + hh * hd + d) * L + i] = acc;
        }
      }
  return qkv.tape->record(
      std::move(out), {qkv}, [qkv, in, c, hd, L, heads, sc, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& v = t.value(qkv);
        auto& gq = t.grad(qkv);
        std::vector<T> dp(L);
        for (std::size_t n = 0; n < in.b; ++n)
          for (std::size_t hh = 0; hh < heads; ++hh) {
            const std::size_t qo = n * in.c + hh * hd, ko = qo + c, vo = qo + 2 * c;
            for (std::size_t i = 0; i < L; ++i) {
              const T* row = &probs.at(n, hh, i, 0);
              // dV and dP
              T dot = 0;
              for (std::size_t j = 0; j < L; ++j) {
                T s = 0;
                for (std::size_t d = 0; d < hd; ++d) {
                  const T go = g[(n * c + hh * hd + d) * L + i];
                  s += go * v[(vo + d) * L + j];
                  gq[(vo + d) * L + j] += row[j] * go;
                }
                dp[j] = s;
                dot += s * row[j];
              }
              for (std::size_t j = 0; j < L; ++j) {
                const T ds = row[j] * (dp[j] - dot) * sc;
                if (ds == T(0)) continue;
                for (std::size_t d = 0; d < hd; ++d) {
                  gq[(qo + d) * L + i] += ds * v[(ko + d) * L + j];
                  gq[(ko + d) * L + j] += ds * v[(qo + d) * L + i];
                }
              }
            }
          }
      });
}

}  // namespace tssam::ops
