#pragma once

#include <cstddef>

#include "tssam/config.hpp"

namespace oracle {

using tssam::ModelConfig;

// closed-form parameter counts, written out from the layer definitions
struct Counts {
  std::size_t backbone = 0, csa = 0, mrm = 0, ffd = 0, bridge = 0, fallback = 0;
  std::size_t trainable() const { return csa + mrm + ffd + bridge + fallback; }
  std::size_t all() const { return backbone + trainable(); }
};

inline std::size_t conv_bn(std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + cout + 2 * cout; }

inline Counts formula(const ModelConfig& cfg) {
  const auto& b = cfg.backbone;
  const std::size_t c = b.embed_dim, m = b.mlp_hidden(), c1 = cfg.side_width, cp = cfg.refine_width, ck = cfg.key_width();
  Counts n;
  n.backbone = c * 3 * 256 + c + b.depth * (2 * c + 3 * c * c + 3 * c + c * c + c + 2 * c + m * c + m + c * m + c);
  if (cfg.csa_enabled) {
    n.csa = (cfg.csa_layers() - 1) * (conv_bn(c1, c, 1) + conv_bn(c, c1, 1));
    if (cfg.csa_init == tssam::CsaInit::projection) n.csa += c * c1 + c1;
  }
  if (cfg.mrm_ffd_enabled) {
    const std::size_t per_layer = conv_bn(c, cp, 1) + (cp * cp * 4 + cp) + (cp * cp * 4 + cp + 2 * cp) + (cp * cp * 4 + cp) +
                                  2 * 2 * (cp * cp + cp);
    n.mrm = tssam::resolved_taps(cfg).size() * per_layer;
    n.ffd = conv_bn(c1, c1, 1) + 2 * conv_bn(cp, ck, 1) + 2 * (conv_bn(c1 + ck, c1, 3) + conv_bn(c1 + cp, c1, 3)) + c1 + 1;
    if (!cfg.csa_enabled) n.bridge = conv_bn(c, c1, 1);
  } else {
    n.fallback = conv_bn(cfg.csa_enabled ? c1 : c, c1, 1) + c1 + 1;
  }
  return n;
}

}  // namespace oracle
