#pragma once

// Multi-scale refinement module. Each layer projects a tapped backbone feature
// to C' channels, upsamples it to H/8 (one 2x2/stride-2 transposed conv) and to
// H/4 (two chained transposed convs with batch norm + ReLU between), gates each
// scale pixel-wise and adds the result into a running two-scale hierarchy.

#include <array>
#include <string>

#include "tssam/config.hpp"
#include "tssam/layers.hpp"

namespace tssam::mrm {

template <class T>
using Hierarchy = std::array<Var<T>, 2>;  // [0]: H/8, [1]: H/4

inline std::string layer_prefix(std::size_t l) { return "mrm.layers." + std::to_string(l); }

template <class T>
void declare_deconv(ParamStore<T>& store, const std::string& p, std::size_t cin, std::size_t cout, Rng& rng) {
  store.add(p + ".weight", layers::uniform_fan_in<T>({cin, cout, 2, 2}, cout * 4, rng), false);
  store.add(p + ".bias", layers::uniform_fan_in<T>({cout}, cout * 4, rng), false);
}

/// Gating unit: Linear(C'->C') -> ReLU -> Linear(C'->C') -> tanh, applied per pixel.
template <class T>
void declare_gate(ParamStore<T>& store, const std::string& p, std::size_t width, Rng& rng) {
  layers::declare_linear(store, p + ".fc1", width, width, rng);
  layers::declare_linear(store, p + ".fc2", width, width, rng);
}

template <class T>
void declare_layer(ParamStore<T>& store, std::size_t l, const ModelConfig& cfg, Rng& rng) {
  const auto p = layer_prefix(l);
  const std::size_t cr = cfg.refine_width;
  layers::declare_conv_block(store, p + ".project", cfg.backbone.embed_dim, cr, 1, rng);
  declare_deconv(store, p + ".up2", cr, cr, rng);
  declare_deconv(store, p + ".up4a", cr, cr, rng);
  layers::declare_batch_norm(store, p + ".up4a.bn", cr);
  declare_deconv(store, p + ".up4b", cr, cr, rng);
  declare_gate(store, p + ".gate1", cr, rng);
  declare_gate(store, p + ".gate2", cr, rng);
}

template <class T>
void declare(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const auto taps = resolved_taps(cfg);
  for (std::size_t l = 0; l < taps.size(); ++l) declare_layer(store, l, cfg, rng);
}

template <class T>
Var<T> deconv(Context<T>& ctx, const std::string& p, Var<T> x) {
  return ops::conv_transpose2x2(x, ctx.param(p + ".weight"), ctx.param(p + ".bias"));
}

/// (B,C,h,w) -> {(B,C',2h,2w), (B,C',4h,4w)}.
template <class T>
Hierarchy<T> project_and_upsample(Context<T>& ctx, std::size_t l, Var<T> vit) {
  expect_rank4(vit.shape(), "mrm project_and_upsample");
  const auto p = layer_prefix(l);
  auto proj = layers::conv_block(ctx, p + ".project", vit);
  auto up2 = deconv(ctx, p + ".up2", proj);
  auto mid = ops::relu(layers::batch_norm(ctx, p + ".up4a.bn", deconv(ctx, p + ".up4a", proj)));
  auto up4 = deconv(ctx, p + ".up4b", mid);
  return {up2, up4};
}

/// tanh(fc2(relu(fc1(x)))) * x at every pixel.
template <class T>
Var<T> gate(Context<T>& ctx, const std::string& p, Var<T> x) {
  auto w = ops::tanh(layers::linear(ctx, p + ".fc2", ops::relu(layers::linear(ctx, p + ".fc1", x))));
  return ops::mul(w, x);
}

template <class T>
Hierarchy<T> zero_hierarchy(Tape<T>& tape, std::size_t batch, std::size_t width, std::size_t h16, std::size_t w16) {
  return {tape.constant(Tensor<T>({batch, width, 2 * h16, 2 * w16})),
          tape.constant(Tensor<T>({batch, width, 4 * h16, 4 * w16}))};
}

template <class T>
Hierarchy<T> mrm_step(Context<T>& ctx, std::size_t l, Var<T> vit, const Hierarchy<T>& prev) {
  expect_rank4(vit.shape(), "mrm_step");
  auto up = project_and_upsample(ctx, l, vit);
  Hierarchy<T> next;
  for (std::size_t k = 0; k < 2; ++k) {
    if (prev[k].shape() != up[k].shape())
      throw ShapeError("mrm layer " + std::to_string(l) + ": hierarchy scale " + std::to_string(k + 1) + " has shape " +
                       to_string(prev[k].shape()) + ", expected " + to_string(up[k].shape()));
    next[k] = ops::add(gate(ctx, layer_prefix(l) + ".gate" + std::to_string(k + 1), up[k]), prev[k]);
  }
  return next;
}

}  // namespace tssam::mrm
