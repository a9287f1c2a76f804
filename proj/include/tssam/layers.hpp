#pragma once

// Store-backed building blocks shared by the side modules. Each block owns the
// entries under its name prefix:
//   <p>.weight, <p>.bias                       convolution / linear
//   <p>.bn.weight, <p>.bn.bias                 batch-norm affine
//   <p>.bn.running_mean, <p>.bn.running_var    batch-norm buffers

#include <cmath>
#include <string>

#include "tssam/ops.hpp"
#include "tssam/params.hpp"
#include "tssam/rng.hpp"

namespace tssam::layers {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <class T>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  return random_uniform<T>(std::move(shape), rng, -bound, bound);
}

template <class T>
void declare_conv(ParamStore<T>& store, const std::string& p, std::size_t cin, std::size_t cout, std::size_t k,
                  Rng& rng, bool frozen = false) {
  store.add(p + ".weight", uniform_fan_in<T>({cout, cin, k, k}, cin * k * k, rng), frozen);
  store.add(p + ".bias", uniform_fan_in<T>({cout}, cin * k * k, rng), frozen);
}

template <class T>
Var<T> conv(Context<T>& ctx, const std::string& p, Var<T> x) {
  return ops::conv2d<T>(x, ctx.param(p + ".weight"), ctx.param(p + ".bias"));
}

template <class T>
void declare_linear(ParamStore<T>& store, const std::string& p, std::size_t cin, std::size_t cout, Rng& rng,
                    bool frozen = false) {
  store.add(p + ".weight", uniform_fan_in<T>({cout, cin}, cin, rng), frozen);
  store.add(p + ".bias", uniform_fan_in<T>({cout}, cin, rng), frozen);
}

template <class T>
Var<T> linear(Context<T>& ctx, const std::string& p, Var<T> x) {
  return ops::linear_channels(x, ctx.param(p + ".weight"), ctx.param(p + ".bias"));
}

template <class T>
void declare_batch_norm(ParamStore<T>& store, const std::string& p, std::size_t c, bool frozen = false) {
  store.add(p + ".weight", Tensor<T>({c}, T(1)), frozen);
  store.add(p + ".bias", Tensor<T>({c}, T(0)), frozen);
  store.add(p + ".running_mean", Tensor<T>({c}, T(0)), frozen, EntryKind::buffer);
  store.add(p + ".running_var", Tensor<T>({c}, T(1)), frozen, EntryKind::buffer);
}

template <class T>
Var<T> batch_norm(Context<T>& ctx, const std::string& p, Var<T> x) {
  return ops::batch_norm(x, ctx.param(p + ".weight"), ctx.param(p + ".bias"), ctx.buffer(p + ".running_mean"),
                         ctx.buffer(p + ".running_var"), ctx.training(), T(kBatchNormMomentum), T(kBatchNormEps));
}

/// conv(k x k) -> batch norm -> ReLU.
template <class T>
void declare_conv_block(ParamStore<T>& store, const std::string& p, std::size_t cin, std::size_t cout,
                        std::size_t k, Rng& rng, bool frozen = false) {
  declare_conv(store, p, cin, cout, k, rng, frozen);
  declare_batch_norm(store, p + ".bn", cout, frozen);
}

template <class T>
Var<T> conv_block(Context<T>& ctx, const std::string& p, Var<T> x) {
  return ops::relu(batch_norm(ctx, p + ".bn", conv(ctx, p, x)));
}

}  // namespace tssam::layers
