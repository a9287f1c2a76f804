#pragma once

// Frozen ViT-style stand-in encoder: a 16x16 patch projection followed by
// pre-norm attention + MLP blocks at (H/16, W/16) resolution. Every entry is
// declared frozen under the "backbone." prefix.

#include <optional>
#include <string>
#include <vector>

#include "tssam/config.hpp"
#include "tssam/layers.hpp"

namespace tssam::backbone {

inline std::string block_prefix(std::size_t j) { return "backbone.blocks." + std::to_string(j); }

template <class T>
Tensor<T> truncated_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

template <class T>
void declare(ParamStore<T>& store, const BackboneConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.embed_dim, p = cfg.patch_size, m = cfg.mlp_hidden();
  store.add("backbone.patch_embed.weight", truncated_normal<T>({c, 3, p, p}, rng), true);
  store.add("backbone.patch_embed.bias", Tensor<T>({c}), true);
  for (std::size_t j = 0; j < cfg.depth; ++j) {
    const auto b = block_prefix(j);
    store.add(b + ".norm1.weight", Tensor<T>({c}, T(1)), true);
    store.add(b + ".norm1.bias", Tensor<T>({c}), true);
    store.add(b + ".attn.qkv.weight", truncated_normal<T>({3 * c, c}, rng), true);
    store.add(b + ".attn.qkv.bias", Tensor<T>({3 * c}), true);
    store.add(b + ".attn.proj.weight", truncated_normal<T>({c, c}, rng), true);
    store.add(b + ".attn.proj.bias", Tensor<T>({c}), true);
    store.add(b + ".norm2.weight", Tensor<T>({c}, T(1)), true);
    store.add(b + ".norm2.bias", Tensor<T>({c}), true);
    store.add(b + ".mlp.fc1.weight", truncated_normal<T>({m, c}, rng), true);
    store.add(b + ".mlp.fc1.bias", Tensor<T>({m}), true);
    store.add(b + ".mlp.fc2.weight", truncated_normal<T>({c, m}, rng), true);
    store.add(b + ".mlp.fc2.bias", Tensor<T>({c}), true);
  }
}

/// (B,3,H,W) -> (B,C,H/16,W/16).
template <class T>
Var<T> patch_embed(Context<T>& ctx, Var<T> image) {
  expect_rank4(image.shape(), "backbone.patch_embed");
  if (image.dim(1) != 3) throw ShapeError("backbone.patch_embed: expected 3 input channels, got " + to_string(image.shape()));
  if (!image.value().all_finite()) throw NumericError("backbone.patch_embed: non-finite input image");
  return ops::patch_embed(image, ctx.param("backbone.patch_embed.weight"), ctx.param("backbone.patch_embed.bias"));
}

/// One pre-norm transformer block; shape preserving.
template <class T>
Var<T> block_forward(Context<T>& ctx, const BackboneConfig& cfg, std::size_t j, Var<T> x) {
  const auto b = block_prefix(j);
  if (!x.value().all_finite()) throw NumericError("backbone block " + std::to_string(j) + ": non-finite input");
  auto h = ops::layer_norm_channels(x, ctx.param(b + ".norm1.weight"), ctx.param(b + ".norm1.bias"));
  h = layers::linear(ctx, b + ".attn.qkv", h);
  h = ops::self_attention(h, cfg.num_heads);
  h = layers::linear(ctx, b + ".attn.proj", h);
  x = ops::add(x, h);
  h = ops::layer_norm_channels(x, ctx.param(b + ".norm2.weight"), ctx.param(b + ".norm2.bias"));
  h = ops::gelu(layers::linear(ctx, b + ".mlp.fc1", h));
  h = layers::linear(ctx, b + ".mlp.fc2", h);
  auto out = ops::add(x, h);
  if (!out.value().all_finite()) throw NumericError("backbone block " + std::to_string(j) + ": non-finite activations");
  return out;
}

template <class T>
struct Activations {
  Var<T> embedded;              // patch embedding output
  std::vector<Var<T>> per_block;  // after block j, before the next injection
  Var<T> final;
};

/// Full encoder pass. `injections`, when given, holds one optional additive
/// map per block, added to that block's input.
template <class T>
Activations<T> encoder_forward(Context<T>& ctx, const BackboneConfig& cfg, Var<T> image,
                               const std::vector<std::optional<Var<T>>>* injections = nullptr) {
  if (injections && injections->size() != cfg.depth)
    throw ShapeError("encoder_forward: expected " + std::to_string(cfg.depth) + " injection slots, got " +
                     std::to_string(injections->size()));
  Activations<T> acts;
  acts.embedded = patch_embed(ctx, image);
  auto x = acts.embedded;
  for (std::size_t j = 0; j < cfg.depth; ++j) {
    if (injections && (*injections)[j]) {
      const auto& inj = *(*injections)[j];
      if (inj.shape() != x.shape())
        throw ShapeError("encoder_forward: injection for block " + std::to_string(j) + " has shape " +
                         to_string(inj.shape()) + ", expected " + to_string(x.shape()));
      x = ops::add(x, inj);
    }
    x = block_forward(ctx, cfg, j, x);
    acts.per_block.push_back(x);
  }
  acts.final = x;
  return acts;
}

}  // namespace tssam::backbone
