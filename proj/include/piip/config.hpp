#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "piip/common.hpp"

namespace piip {

enum class AttentionType { kDeformable, kRegular };
enum class Direction {
  kAdjacentBidirectional,
  kAdjacentDownOnly,   // information flows from higher-res branch j+1 into j
  kAdjacentUpOnly,     // information flows from lower-res branch j into j+1
  kChainOneWay,        // sequential 1 -> 2 -> ... -> M, updated features fed on
  kAllPairsBidirectional
};
enum class RunMode { kDense, kClassifyPretrain, kClassifyFinetune };

struct BranchConfig {
  int depth = 12;
  int dim = 768;
  int heads = 12;
  int patch = 16;
  int resolution = 224;
  double mlp_ratio = 4.0;
  bool use_cls_token = false;
  int attn_window = 0;  // 0 = global attention; else window side in tokens

  int grid() const { return resolution / patch; }
  int spatial_tokens() const { return grid() * grid(); }
  int tokens() const { return spatial_tokens() + (use_cls_token ? 1 : 0); }
  int mlp_hidden() const { return static_cast<int>(std::lround(mlp_ratio * dim)); }
};

struct InteractionSpec {
  int count = 12;
  AttentionType attention = AttentionType::kDeformable;
  Direction direction = Direction::kAdjacentBidirectional;
  int sample_points = 4;     // K offsets per query per head (deformable)
  double ffn_ratio = 0.25;
  double value_ratio = 0.5;  // deformable value/output width relative to D
  bool scalar_gates = false; // gamma/tau as scalars instead of per-channel
};

struct PiipConfig {
  std::string name = "custom";
  std::vector<BranchConfig> branches;  // Branch 1 (most params) first
  InteractionSpec interactions;
  RunMode mode = RunMode::kDense;
  std::vector<bool> merge_subset;  // which branches feed the merge
  int num_classes = 1000;
  bool ablation = false;  // lifts the parameter-inverted ordering rule

  int branch_count() const { return static_cast<int>(branches.size()); }
  // number of executable segments per branch
  int blocks() const { return interactions.count > 0 ? interactions.count : 1; }
  int largest_grid() const { return branches.back().grid(); }

  int interaction_ffn_hidden(int dim) const {
    return static_cast<int>(std::ceil(interactions.ffn_ratio * dim));
  }
  int deform_value_dim(int dim) const {
    return static_cast<int>(std::lround(interactions.value_ratio * dim));
  }
};

// Parameter count of one branch tower (weights independent of other modules).
inline std::uint64_t branch_param_count(const BranchConfig& b) {
  const std::uint64_t d = static_cast<std::uint64_t>(b.dim);
  const std::uint64_t m = static_cast<std::uint64_t>(b.mlp_hidden());
  std::uint64_t per_layer = d * 3 * d + 3 * d   // qkv
                            + d * d + d         // out proj
                            + 4 * d             // two layer norms
                            + d * m + m         // mlp in
                            + m * d + d;        // mlp out
  std::uint64_t total = per_layer * b.depth;
  total += 3ull * b.patch * b.patch * d + d;  // patch projection
  total += 2 * d;                             // final norm
  if (b.use_cls_token) total += d;
  return total;  // position embedding counted separately
}

inline void validate(const PiipConfig& cfg) {
  if (cfg.branches.empty()) throw ConfigError("config: at least one branch required");
  const int n = cfg.interactions.count;
  if (n < 0) throw ConfigError("config: interaction count must be >= 0");
  for (size_t j = 0; j < cfg.branches.size(); ++j) {
    const auto& b = cfg.branches[j];
    const std::string tag = "branch " + std::to_string(j + 1);
    if (b.dim <= 0 || b.depth <= 0 || b.heads <= 0 || b.patch <= 0 || b.resolution <= 0)
      throw ConfigError("config: " + tag + " has non-positive size field");
    if (b.dim % b.heads != 0)
      throw ConfigError("config: " + tag + " dim " + std::to_string(b.dim) +
                        " not divisible by heads " + std::to_string(b.heads));
    if (b.resolution % b.patch != 0)
      throw ConfigError("config: " + tag + " resolution " + std::to_string(b.resolution) +
                        " not divisible by patch " + std::to_string(b.patch));
    if (n > 0 && b.depth % n != 0)
      throw ConfigError("config: " + tag + " depth " + std::to_string(b.depth) +
                        " not divisible by interaction count " + std::to_string(n));
    if (b.attn_window > 0) {
      if (b.grid() % b.attn_window != 0)
        throw ConfigError("config: " + tag + " token grid " + std::to_string(b.grid()) +
                          " not divisible by attention window " +
                          std::to_string(b.attn_window));
      if (b.use_cls_token)
        throw ConfigError("config: " + tag + " cannot combine windowed attention "
                          "with a class token");
    }
  }
  for (size_t j = 1; j < cfg.branches.size(); ++j) {
    if (cfg.branches[j].resolution <= cfg.branches[j - 1].resolution)
      throw ConfigError("config: branch resolutions must be strictly increasing "
                        "(branch " + std::to_string(j + 1) + ")");
    if (!cfg.ablation &&
        branch_param_count(cfg.branches[j]) >= branch_param_count(cfg.branches[j - 1]))
      throw ConfigError(
          "config: parameter-inverted ordering violated: branch " +
          std::to_string(j + 1) + " has >= parameters of branch " + std::to_string(j) +
          " (tag the config as an ablation variant to allow this)");
  }
  if (cfg.mode != RunMode::kClassifyFinetune) {
    for (size_t j = 0; j < cfg.branches.size(); ++j) {
      if (cfg.branches[j].use_cls_token)
        throw ConfigError("config: class tokens are only used in classify_finetune mode");
    }
  }
  if (cfg.mode == RunMode::kDense || cfg.mode == RunMode::kClassifyPretrain) {
    if (cfg.merge_subset.size() != cfg.branches.size())
      throw ConfigError("config: merge_subset length must equal branch count");
    bool any = false;
    for (bool m : cfg.merge_subset) any = any || m;
    if (!any) throw ConfigError("config: merge_subset must select at least one branch");
  }
  if (cfg.interactions.attention == AttentionType::kDeformable) {
    for (size_t j = 0; j < cfg.branches.size(); ++j) {
      const auto& b = cfg.branches[j];
      const int dv = cfg.deform_value_dim(b.dim);
      if (dv <= 0 || dv % b.heads != 0)
        throw ConfigError("config: deformable value dim " + std::to_string(dv) +
                          " of branch " + std::to_string(j + 1) +
                          " not divisible by heads " + std::to_string(b.heads));
    }
  }
  if (cfg.num_classes <= 0 && cfg.mode != RunMode::kDense)
    throw ConfigError("config: num_classes must be positive in classify modes");
}

// Branch pairs touched by one interaction point, in canonical order.
// Pairs are adjacent (j, j+1) except all-pairs, which adds the remaining ones.
inline std::vector<std::pair<int, int>> interaction_pairs(const PiipConfig& cfg) {
  std::vector<std::pair<int, int>> pairs;
  const int m = cfg.branch_count();
  for (int j = 0; j + 1 < m; ++j) pairs.push_back({j, j + 1});
  if (cfg.interactions.direction == Direction::kAllPairsBidirectional) {
    for (int a = 0; a < m; ++a)
      for (int b = a + 2; b < m; ++b) pairs.push_back({a, b});
  }
  return pairs;
}

// Whether a given direction of a pair carries an instantiated half-unit.
// dir 0: branch `lo` queries (kv = hi); dir 1: branch `hi` queries (kv = lo).
inline bool direction_active(const PiipConfig& cfg, int /*lo*/, int /*hi*/, int dir) {
  switch (cfg.interactions.direction) {
    case Direction::kAdjacentBidirectional:
    case Direction::kAllPairsBidirectional:
      return true;
    case Direction::kAdjacentDownOnly:
      return dir == 0;  // higher-res features feed the lower-res branch
    case Direction::kAdjacentUpOnly:
      return dir == 1;
    case Direction::kChainOneWay:
      return dir == 1;  // 1 -> 2 -> ... -> M
  }
  return true;
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

// Published reference costs attached to a preset, when available, so the CLI
// can print deviations next to computed numbers.
struct ReferenceCosts {
  bool valid = false;
  std::vector<double> branch_params;  // per branch
  double interaction_params = 0, merge_params = 0;
  std::vector<double> branch_macs;
  double interaction_macs = 0, merge_macs = 0;
  double total_macs = 0;
};

inline ReferenceCosts preset_reference(const std::string& name) {
  ReferenceCosts r;
  if (name == "piip-b") {
    r.valid = true;
    r.branch_params = {59.6e6, 15.1e6, 4.0e6};
    r.interaction_params = 21.2e6;
    r.merge_params = 0.3e6;
    r.branch_macs = {3.8e9, 4.3e9, 4.9e9};
    r.interaction_macs = 5.1e9;
    r.merge_macs = 0.2e9;
    r.total_macs = 18.4e9;
  } else if (name == "vit-b") {
    r.valid = true;
    r.branch_macs = {17.5e9};
    r.total_macs = 17.5e9;
  } else if (name == "vit-l") {
    r.valid = true;
    r.branch_macs = {61.6e9};
    r.total_macs = 61.6e9;
  } else if (name == "piip-tsb") {
    r.valid = true;
    r.total_macs = 17.4e9;
  } else if (name == "piip-sbl") {
    r.valid = true;
    r.total_macs = 39.0e9;
  }
  return r;
}

inline BranchConfig vit_t(int res) { return {12, 192, 3, 16, res, 4.0, false, 0}; }
inline BranchConfig vit_s(int res) { return {12, 384, 6, 16, res, 4.0, false, 0}; }
inline BranchConfig vit_b(int res) { return {12, 768, 12, 16, res, 4.0, false, 0}; }
inline BranchConfig vit_l(int res) { return {24, 1024, 16, 16, res, 4.0, false, 0}; }

inline PiipConfig preset(const std::string& name) {
  PiipConfig cfg;
  cfg.name = name;
  auto cls_on = [](std::vector<BranchConfig> bs) {
    for (auto& b : bs) b.use_cls_token = true;
    return bs;
  };
  if (name == "piip-micro") {
    cfg.branches = {{2, 16, 2, 4, 16, 4.0, false, 0},
                    {2, 8, 2, 4, 32, 4.0, false, 0},
                    {2, 4, 1, 4, 64, 4.0, false, 0}};
    cfg.interactions.count = 2;
    cfg.mode = RunMode::kDense;
    cfg.merge_subset = {true, true, true};
    cfg.num_classes = 8;
  } else if (name == "piip-b") {
    cfg.branches = {{12, 640, 8, 16, 128, 4.0, false, 0},
                    {12, 320, 4, 16, 256, 4.0, false, 0},
                    {12, 160, 2, 16, 512, 4.0, false, 16}};
    cfg.interactions.count = 12;
    cfg.mode = RunMode::kClassifyPretrain;
    cfg.merge_subset = {true, true, true};
  } else if (name == "piip-tsb") {
    cfg.branches = cls_on({vit_b(128), vit_s(192), vit_t(368)});
    cfg.interactions.count = 12;
    cfg.mode = RunMode::kClassifyFinetune;
  } else if (name == "piip-sbl") {
    cfg.branches = cls_on({vit_l(96), vit_b(160), vit_s(320)});
    cfg.interactions.count = 12;
    cfg.mode = RunMode::kClassifyFinetune;
  } else if (name == "piip-tsbl") {
    cfg.branches = cls_on({vit_l(448), vit_b(672), vit_s(1120), vit_t(1568)});
    cfg.interactions.count = 12;
    cfg.mode = RunMode::kClassifyFinetune;
  } else if (name == "vit-b") {
    cfg.branches = cls_on({vit_b(224)});
    cfg.interactions.count = 0;
    cfg.mode = RunMode::kClassifyFinetune;
  } else if (name == "vit-l") {
    cfg.branches = cls_on({vit_l(224)});
    cfg.interactions.count = 0;
    cfg.mode = RunMode::kClassifyFinetune;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  validate(cfg);
  return cfg;
}

inline std::vector<std::string> preset_names() {
  return {"piip-micro", "piip-b", "piip-tsb", "piip-sbl", "piip-tsbl", "vit-b", "vit-l"};
}

}  // namespace piip
