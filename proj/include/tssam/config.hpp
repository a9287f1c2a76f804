#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tssam/errors.hpp"

namespace tssam {

struct BackboneConfig {
  std::size_t embed_dim = 32;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  std::size_t patch_size = 16;

  std::size_t mlp_hidden() const { return std::size_t(std::lround(double(embed_dim) * mlp_ratio)); }
};

enum class CsaInit { zeros, projection };

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t side_width = 16;   // C1
  std::size_t refine_width = 8;  // C'
  bool csa_enabled = true;
  bool mrm_ffd_enabled = true;
  /// Backbone block indices tapped by the refinement stream; -1 taps the patch
  /// embedding. Empty means the default evenly spaced schedule.
  std::vector<int> mrm_tap_indices;
  std::size_t mrm_layers = 0;  // used only when mrm_tap_indices is empty; 0 = depth
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::uint64_t seed = 0;
  CsaInit csa_init = CsaInit::zeros;
  /// Initial foreground probability of the output head: its bias starts at logit(prior).
  double head_prior = 0.1;

  std::size_t key_width() const { return refine_width; }
  std::size_t csa_layers() const { return csa_enabled ? backbone.depth + 2 : 0; }
};

enum class Task { cod, sod, shadow };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::cod: return "cod";
    case Task::sod: return "sod";
    case Task::shadow: return "shadow";
  }
  return "cod";
}

inline Task parse_task(const std::string& s) {
  if (s == "cod") return Task::cod;
  if (s == "sod") return Task::sod;
  if (s == "shadow") return Task::shadow;
  throw ConfigError("unknown task '" + s + "' (expected cod|sod|shadow)");
}

struct TrainConfig {
  double lr0 = 0.0008;
  std::size_t epochs = 80;
  std::size_t batch_size = 4;
  Task task = Task::cod;
  std::uint64_t seed = 0;
  bool grad_check = false;
  std::size_t checkpoint_every = 0;  // optimizer steps; 0 = only the final checkpoint
};

/// Evenly spaced taps ending at the last block; one extra layer taps the patch embedding.
inline std::vector<int> default_taps(std::size_t depth, std::size_t layers) {
  if (layers == 0) layers = depth;
  if (layers > depth + 1)
    throw ConfigError("mrm_layers " + std::to_string(layers) + " exceeds depth + 1 = " + std::to_string(depth + 1));
  std::vector<int> taps;
  if (layers == depth + 1) {
    taps.push_back(-1);
    for (std::size_t j = 0; j < depth; ++j) taps.push_back(int(j));
    return taps;
  }
  for (std::size_t i = 0; i < layers; ++i) taps.push_back(int((i + 1) * depth / layers) - 1);
  return taps;
}

inline std::vector<int> resolved_taps(const ModelConfig& c) {
  return c.mrm_tap_indices.empty() ? default_taps(c.backbone.depth, c.mrm_layers) : c.mrm_tap_indices;
}

inline void validate(const ModelConfig& c) {
  const auto& b = c.backbone;
  if (b.patch_size != 16) throw ConfigError("backbone.patch_size must be 16, got " + std::to_string(b.patch_size));
  if (b.embed_dim == 0 || b.depth == 0 || b.num_heads == 0)
    throw ConfigError("backbone embed_dim, depth and num_heads must be positive");
  if (b.embed_dim % b.num_heads != 0)
    throw ConfigError("backbone.embed_dim " + std::to_string(b.embed_dim) + " not divisible by num_heads " +
                      std::to_string(b.num_heads));
  if (!(b.mlp_ratio > 0) || b.mlp_hidden() == 0) throw ConfigError("backbone.mlp_ratio must be positive");
  if (c.side_width == 0 || c.refine_width == 0) throw ConfigError("side_width and refine_width must be positive");
  if (!(c.head_prior > 0.0 && c.head_prior < 1.0)) throw ConfigError("head_prior must lie in (0,1)");
  if (c.image_height == 0 || c.image_height % 16 != 0)
    throw ConfigError("image height " + std::to_string(c.image_height) + " must be a positive multiple of 16");
  if (c.image_width == 0 || c.image_width % 16 != 0)
    throw ConfigError("image width " + std::to_string(c.image_width) + " must be a positive multiple of 16");
  if (c.mrm_ffd_enabled) {
    const auto taps = resolved_taps(c);
    if (taps.empty()) throw ConfigError("mrm_tap_indices must not be empty");
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] < -1 || taps[i] >= int(b.depth))
        throw ConfigError("mrm tap index " + std::to_string(taps[i]) + " outside [-1, depth)");
      if (i > 0 && taps[i] <= taps[i - 1]) throw ConfigError("mrm_tap_indices must be strictly increasing");
    }
  }
}

inline void validate(const TrainConfig& t) {
  if (!(t.lr0 > 0) || !std::isfinite(t.lr0)) throw ConfigError("lr0 must be positive");
  if (t.batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch-norm statistics)");
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class V>
void read(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  detail::reject_unknown(j,
                         {"backbone", "side_width", "refine_width", "csa_enabled", "mrm_ffd_enabled",
                          "mrm_tap_indices", "mrm_layers", "image_size", "seed", "csa_init", "head_prior"},
                         "model");
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    detail::reject_unknown(b, {"embed_dim", "depth", "num_heads", "mlp_ratio", "patch_size"}, "model.backbone");
    detail::read(b, "embed_dim", c.backbone.embed_dim, "model.backbone");
    detail::read(b, "depth", c.backbone.depth, "model.backbone");
    detail::read(b, "num_heads", c.backbone.num_heads, "model.backbone");
    detail::read(b, "mlp_ratio", c.backbone.mlp_ratio, "model.backbone");
    detail::read(b, "patch_size", c.backbone.patch_size, "model.backbone");
  }
  detail::read(j, "side_width", c.side_width, "model");
  detail::read(j, "refine_width", c.refine_width, "model");
  detail::read(j, "csa_enabled", c.csa_enabled, "model");
  detail::read(j, "mrm_ffd_enabled", c.mrm_ffd_enabled, "model");
  detail::read(j, "mrm_tap_indices", c.mrm_tap_indices, "model");
  detail::read(j, "mrm_layers", c.mrm_layers, "model");
  detail::read(j, "seed", c.seed, "model");
  detail::read(j, "head_prior", c.head_prior, "model");
  if (j.contains("image_size")) {
    std::vector<std::size_t> hw;
    detail::read(j, "image_size", hw, "model");
    if (hw.size() != 2) throw ConfigError("model.image_size must be [H, W]");
    c.image_height = hw[0];
    c.image_width = hw[1];
  }
  if (j.contains("csa_init")) {
    std::string s;
    detail::read(j, "csa_init", s, "model");
    if (s == "zeros") c.csa_init = CsaInit::zeros;
    else if (s == "projection") c.csa_init = CsaInit::projection;
    else throw ConfigError("model.csa_init must be zeros|projection, got '" + s + "'");
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["backbone"] = {{"embed_dim", c.backbone.embed_dim},
                   {"depth", c.backbone.depth},
                   {"num_heads", c.backbone.num_heads},
                   {"mlp_ratio", c.backbone.mlp_ratio},
                   {"patch_size", c.backbone.patch_size}};
  j["side_width"] = c.side_width;
  j["refine_width"] = c.refine_width;
  j["csa_enabled"] = c.csa_enabled;
  j["mrm_ffd_enabled"] = c.mrm_ffd_enabled;
  j["mrm_tap_indices"] = c.mrm_tap_indices;
  j["mrm_layers"] = c.mrm_layers;
  j["image_size"] = {c.image_height, c.image_width};
  j["seed"] = c.seed;
  j["csa_init"] = c.csa_init == CsaInit::zeros ? "zeros" : "projection";
  j["head_prior"] = c.head_prior;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  detail::reject_unknown(j, {"lr0", "epochs", "batch_size", "task", "seed", "grad_check", "checkpoint_every"},
                         "train");
  detail::read(j, "lr0", t.lr0, "train");
  detail::read(j, "epochs", t.epochs, "train");
  detail::read(j, "batch_size", t.batch_size, "train");
  detail::read(j, "seed", t.seed, "train");
  detail::read(j, "grad_check", t.grad_check, "train");
  detail::read(j, "checkpoint_every", t.checkpoint_every, "train");
  if (j.contains("task")) {
    std::string s;
    detail::read(j, "task", s, "train");
    t.task = parse_task(s);
  }
  validate(t);
  return t;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"lr0", t.lr0},           {"epochs", t.epochs},         {"batch_size", t.batch_size},
          {"task", to_string(t.task)}, {"seed", t.seed},          {"grad_check", t.grad_check},
          {"checkpoint_every", t.checkpoint_every}};
}

}  // namespace tssam
