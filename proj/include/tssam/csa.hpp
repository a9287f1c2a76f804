#pragma once

// Convolutional side adapter. Layer 0 seeds the side stream from the patch
// embedding; layers 1..N run against the input of backbone block j-1, and layer
// N+1 runs against the final encoder output, giving depth + 2 layers.
//
//   vit_next = vit + expand(side)        expand:   1x1 conv block, C1 -> C
//   side_next = compress(vit_next)       compress: 1x1 conv block, C  -> C1

#include <string>

#include "tssam/config.hpp"
#include "tssam/layers.hpp"

namespace tssam::csa {

inline std::string layer_prefix(std::size_t i) { return "csa.layers." + std::to_string(i); }

template <class T>
void declare(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.backbone.embed_dim, c1 = cfg.side_width;
  if (cfg.csa_init == CsaInit::projection) layers::declare_conv(store, "csa.init", c, c1, 1, rng);
  for (std::size_t i = 1; i <= cfg.backbone.depth + 1; ++i) {
    layers::declare_conv_block(store, layer_prefix(i) + ".expand", c1, c, 1, rng);
    layers::declare_conv_block(store, layer_prefix(i) + ".compress", c, c1, 1, rng);
  }
}

/// Initial side feature (B,C1,h,w): zeros, or a learned 1x1 projection of the patch embedding.
template <class T>
Var<T> csa_init(Context<T>& ctx, const ModelConfig& cfg, Var<T> patch_feat) {
  expect_rank4(patch_feat.shape(), "csa_init");
  if (cfg.csa_init == CsaInit::projection) return layers::conv(ctx, "csa.init", patch_feat);
  return ctx.tape().constant(Tensor<T>({patch_feat.dim(0), cfg.side_width, patch_feat.dim(2), patch_feat.dim(3)}));
}

template <class T>
struct StepResult {
  Var<T> vit_next;
  Var<T> side_next;
};

template <class T>
StepResult<T> csa_step(Context<T>& ctx, std::size_t layer, Var<T> side, Var<T> vit) {
  expect_rank4(side.shape(), "csa_step side");
  expect_rank4(vit.shape(), "csa_step backbone");
  if (side.dim(0) != vit.dim(0) || side.dim(2) != vit.dim(2) || side.dim(3) != vit.dim(3))
    throw ShapeError("csa layer " + std::to_string(layer) + ": side stream " + to_string(side.shape()) +
                     " does not align with backbone stream " + to_string(vit.shape()));
  const auto p = layer_prefix(layer);
  auto vit_next = ops::add(vit, layers::conv_block(ctx, p + ".expand", side));
  auto side_next = layers::conv_block(ctx, p + ".compress", vit_next);
  return {vit_next, side_next};
}

}  // namespace tssam::csa
