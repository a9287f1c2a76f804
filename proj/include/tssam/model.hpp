#pragma once

// Full two-stream model. The side stream (CSA) is interleaved with the frozen
// encoder; refinement taps read the post-injection block outputs; the fusion
// decoder combines the side stream with the hierarchy.
//
// Component toggles (ablation wiring):
//   csa + mrm/ffd   full model
//   csa only        side stream -> fallback decoder
//   mrm/ffd only    unmodified encoder; "bridge" 1x1 block maps the final
//                   encoder feature to C1 in place of the side stream
//   neither         final encoder feature -> fallback decoder
// The fallback decoder is a 1x1 conv block to C1, a bilinear 16x upsample and a
// 1x1 conv to one logit channel.

#include <cmath>
#include <string>
#include <vector>

#include "tssam/backbone.hpp"
#include "tssam/config.hpp"
#include "tssam/csa.hpp"
#include "tssam/ffd.hpp"
#include "tssam/mrm.hpp"

namespace tssam {

template <class T>
struct ForwardTrace {
  std::vector<Tensor<T>> backbone_blocks;  // encoder output after each block
  std::vector<Shape> ladder;               // decoder resolution rungs
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, ParamStore<T> store) : cfg_(std::move(cfg)), store_(std::move(store)) { validate(cfg_); }

  static Model build(const ModelConfig& cfg) {
    validate(cfg);
    ParamStore<T> store;
    Rng rng(cfg.seed);
    backbone::declare(store, cfg.backbone, rng);
    const std::size_t c = cfg.backbone.embed_dim, c1 = cfg.side_width;
    if (cfg.csa_enabled) csa::declare(store, cfg, rng);
    if (cfg.mrm_ffd_enabled) {
      mrm::declare(store, cfg, rng);
      if (!cfg.csa_enabled) layers::declare_conv_block(store, "bridge.proj", c, c1, 1, rng);
      ffd::declare(store, cfg, rng);
    } else {
      layers::declare_conv_block(store, "fallback.proj", cfg.csa_enabled ? c1 : c, c1, 1, rng);
      layers::declare_conv(store, "fallback.head", c1, 1, 1, rng);
    }
    const auto head = cfg.mrm_ffd_enabled ? "ffd.head.bias" : "fallback.head.bias";
    store.value(head).fill(T(std::log(cfg.head_prior / (1.0 - cfg.head_prior))));
    return Model(cfg, std::move(store));
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }

  /// Logits (B,1,H,W) for an image batch (B,3,H,W) with values in [0,1].
  Var<T> forward(Context<T>& ctx, Var<T> image, ForwardTrace<T>* trace = nullptr) const {
    expect_rank4(image.shape(), "model input");
    for (T v : image.value().values())
      if (!(v >= T(0) && v <= T(1))) throw ValidationError("model input: image values must lie in [0,1]");
    const auto& bb = cfg_.backbone;

    auto x = backbone::patch_embed(ctx, image);
    const auto embedded = x;
    std::vector<Var<T>> per_block;
    Var<T> side{};
    if (cfg_.csa_enabled) {
      side = csa::csa_init(ctx, cfg_, x);
      for (std::size_t j = 0; j < bb.depth; ++j) {
        auto r = csa::csa_step(ctx, j + 1, side, x);
        side = r.side_next;
        x = backbone::block_forward(ctx, bb, j, r.vit_next);
        per_block.push_back(x);
      }
      side = csa::csa_step(ctx, bb.depth + 1, side, x).side_next;
    } else {
      for (std::size_t j = 0; j < bb.depth; ++j) {
        x = backbone::block_forward(ctx, bb, j, x);
        per_block.push_back(x);
      }
    }
    if (trace)
      for (const auto& v : per_block) trace->backbone_blocks.push_back(v.value());

    if (!cfg_.mrm_ffd_enabled) {
      auto h = layers::conv_block(ctx, "fallback.proj", cfg_.csa_enabled ? side : x);
      return layers::conv(ctx, "fallback.head", ops::upsample_bilinear(h, 16));
    }

    const auto taps = resolved_taps(cfg_);
    auto hier = mrm::zero_hierarchy(ctx.tape(), x.dim(0), cfg_.refine_width, x.dim(2), x.dim(3));
    for (std::size_t l = 0; l < taps.size(); ++l)
      hier = mrm::mrm_step(ctx, l, taps[l] < 0 ? embedded : per_block[std::size_t(taps[l])], hier);
    auto stream = cfg_.csa_enabled ? side : layers::conv_block(ctx, "bridge.proj", x);
    std::vector<Shape> ladder;
    auto logits = ffd::ffd_forward(ctx, stream, hier, &ladder);
    if (logits.dim(2) != image.dim(2) || logits.dim(3) != image.dim(3))
      throw ShapeError("model: logits " + to_string(logits.shape()) + " do not match input " + to_string(image.shape()));
    if (trace) trace->ladder = std::move(ladder);
    return logits;
  }

  /// Eval-mode logits without recording gradients.
  Tensor<T> predict(const Tensor<T>& image, ForwardTrace<T>* trace = nullptr) {
    Tape<T> tape(false);
    Context<T> ctx(tape, store_, Mode::eval);
    return forward(ctx, tape.constant(image), trace).value();
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
};

}  // namespace tssam
