#pragma once

// Feature fusion decoder. Two injection stages walk the side stream up the
// resolution ladder H/16 -> H/8 -> H/4; each stage first concatenates pooled
// "key" features at the current resolution, upsamples 2x, then concatenates the
// full hierarchical feature. A bilinear 4x upsample and a 1x1 conv produce
// one-channel logits at full resolution.

#include <string>
#include <vector>

#include "tssam/config.hpp"
#include "tssam/layers.hpp"
#include "tssam/mrm.hpp"

namespace tssam::ffd {

inline std::string stage_prefix(std::size_t s) { return "ffd.stage" + std::to_string(s); }

template <class T>
void declare(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t c1 = cfg.side_width, cr = cfg.refine_width, ck = cfg.key_width();
  layers::declare_conv_block(store, "ffd.in_proj", c1, c1, 1, rng);
  for (std::size_t k = 1; k <= 2; ++k) layers::declare_conv_block(store, "ffd.key_proj" + std::to_string(k), cr, ck, 1, rng);
  for (std::size_t s = 1; s <= 2; ++s) {
    layers::declare_conv_block(store, stage_prefix(s) + ".key_conv", c1 + ck, c1, 3, rng);
    layers::declare_conv_block(store, stage_prefix(s) + ".full_conv", c1 + cr, c1, 3, rng);
  }
  layers::declare_conv(store, "ffd.head", c1, 1, 1, rng);
}

/// avgpool2x2(proj(x)) + maxpool2x2(proj(x)); halves the resolution.
template <class T>
Var<T> key_pool(Context<T>& ctx, const std::string& proj, Var<T> x) {
  expect_rank4(x.shape(), "key_pool");
  if (x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("key_pool: odd spatial dims " + to_string(x.shape()));
  auto p = layers::conv_block(ctx, proj, x);
  return ops::add(ops::avg_pool2x2(p), ops::max_pool2x2(p));
}

/// Stream feature first, injected feature second in both concatenations.
template <class T>
Var<T> inject_stage(Context<T>& ctx, std::size_t stage, Var<T> x, Var<T> key, Var<T> full) {
  const auto name = "ffd stage " + std::to_string(stage);
  expect_rank4(x.shape(), name);
  if (key.shape().size() != 4 || key.dim(0) != x.dim(0) || key.dim(2) != x.dim(2) || key.dim(3) != x.dim(3))
    throw ShapeError(name + ": key feature " + to_string(key.shape()) + " not at stream resolution " + to_string(x.shape()));
  if (full.shape().size() != 4 || full.dim(0) != x.dim(0) || full.dim(2) != 2 * x.dim(2) || full.dim(3) != 2 * x.dim(3))
    throw ShapeError(name + ": full feature " + to_string(full.shape()) + " not at double the stream resolution " +
                     to_string(x.shape()));
  const auto p = stage_prefix(stage);
  auto y = layers::conv_block(ctx, p + ".key_conv", ops::concat_channels(x, key));
  y = ops::upsample_bilinear(y, 2);
  return layers::conv_block(ctx, p + ".full_conv", ops::concat_channels(y, full));
}

/// Resolution ladder check: the expected spatial dims of a rung.
inline void check_rung(const Shape& s, std::size_t h, std::size_t w, const std::string& rung) {
  if (s.size() != 4 || s[2] != h || s[3] != w)
    throw ShapeError("ffd resolution ladder broken at " + rung + ": got " + to_string(s) + ", expected spatial (" +
                     std::to_string(h) + "," + std::to_string(w) + ")");
}

template <class T>
Var<T> ffd_forward(Context<T>& ctx, Var<T> side, const mrm::Hierarchy<T>& hier, std::vector<Shape>* ladder = nullptr) {
  expect_rank4(side.shape(), "ffd input");
  const std::size_t h = side.dim(2), w = side.dim(3);
  check_rung(hier[0].shape(), 2 * h, 2 * w, "hierarchy H/8");
  check_rung(hier[1].shape(), 4 * h, 4 * w, "hierarchy H/4");
  auto x = layers::conv_block(ctx, "ffd.in_proj", side);
  if (ladder) ladder->push_back(x.shape());
  x = inject_stage(ctx, 1, x, key_pool(ctx, "ffd.key_proj1", hier[0]), hier[0]);
  check_rung(x.shape(), 2 * h, 2 * w, "stage 1 output");
  if (ladder) ladder->push_back(x.shape());
  x = inject_stage(ctx, 2, x, key_pool(ctx, "ffd.key_proj2", hier[1]), hier[1]);
  check_rung(x.shape(), 4 * h, 4 * w, "stage 2 output");
  if (ladder) ladder->push_back(x.shape());
  auto logits = layers::conv(ctx, "ffd.head", ops::upsample_bilinear(x, 4));
  check_rung(logits.shape(), 16 * h, 16 * w, "head output");
  if (ladder) ladder->push_back(logits.shape());
  return logits;
}

}  // namespace tssam::ffd
