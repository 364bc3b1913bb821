#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "piip/interaction.hpp"
#include "piip/merge.hpp"

namespace piip {

template <typename T>
struct Model {
  PiipConfig cfg;
  std::vector<BranchWeights<T>> branches;
  std::vector<InteractionPointWeights<T>> interactions;  // one per block
  MergeWeights<T> merge;
  // flat registry in creation order; drives init, checkpoints and updates
  std::vector<std::pair<std::string, Tensor<T>>> params;

  void zero_grad() {
    for (auto& [name, t] : params) t.zero_grad();
  }
  std::uint64_t param_count() const {
    std::uint64_t n = 0;
    for (auto& [name, t] : params) n += static_cast<std::uint64_t>(t.numel());
    return n;
  }
};

namespace detail_model {

template <typename T>
struct Builder {
  Model<T>& model;
  std::mt19937_64 rng;
  double init_std = 0.02;

  Tensor<T> weight(const std::string& name, std::vector<int> shape) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    fill_trunc_normal(t, init_std, rng);
    model.params.push_back({name, t});
    return t;
  }
  Tensor<T> zeros(const std::string& name, std::vector<int> shape) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    model.params.push_back({name, t});
    return t;
  }
  Tensor<T> ones(const std::string& name, std::vector<int> shape) {
    Tensor<T> t = Tensor<T>::full(std::move(shape), T(1), true);
    model.params.push_back({name, t});
    return t;
  }
};

template <typename T>
void build_direction(Builder<T>& b, DirectionWeights<T>& w, const std::string& pfx,
                     const PiipConfig& cfg, int dq, int dkv, int heads) {
  const int k = cfg.interactions.sample_points;
  w.fc_w = b.weight(pfx + "/fc_w", {dkv, dq});
  w.fc_b = b.zeros(pfx + "/fc_b", {dq});
  w.q_ln_g = b.ones(pfx + "/q_ln_g", {dq});
  w.q_ln_b = b.zeros(pfx + "/q_ln_b", {dq});
  w.kv_ln_g = b.ones(pfx + "/kv_ln_g", {dq});
  w.kv_ln_b = b.zeros(pfx + "/kv_ln_b", {dq});
  if (cfg.interactions.attention == AttentionType::kDeformable) {
    const int dv = cfg.deform_value_dim(dq);
    w.val_w = b.weight(pfx + "/val_w", {dq, dv});
    w.val_b = b.zeros(pfx + "/val_b", {dv});
    // zero-init offsets/logits: the unit starts at the zero-offset collapse
    w.off_w = b.zeros(pfx + "/off_w", {dq, heads * k * 2});
    w.off_b = b.zeros(pfx + "/off_b", {heads * k * 2});
    w.logit_w = b.zeros(pfx + "/logit_w", {dq, heads * k});
    w.logit_b = b.zeros(pfx + "/logit_b", {heads * k});
    w.attn_out_w = b.weight(pfx + "/attn_out_w", {dv, dq});
    w.attn_out_b = b.zeros(pfx + "/attn_out_b", {dq});
  } else {
    w.q_w = b.weight(pfx + "/q_w", {dq, dq});
    w.q_b = b.zeros(pfx + "/q_b", {dq});
    w.k_w = b.weight(pfx + "/k_w", {dq, dq});
    w.k_b = b.zeros(pfx + "/k_b", {dq});
    w.v_w = b.weight(pfx + "/v_w", {dq, dq});
    w.v_b = b.zeros(pfx + "/v_b", {dq});
    w.o_w = b.weight(pfx + "/o_w", {dq, dq});
    w.o_b = b.zeros(pfx + "/o_b", {dq});
  }
  const int hidden = cfg.interaction_ffn_hidden(dq);
  w.ffn_ln_g = b.ones(pfx + "/ffn_ln_g", {dq});
  w.ffn_ln_b = b.zeros(pfx + "/ffn_ln_b", {dq});
  w.ffn1_w = b.weight(pfx + "/ffn1_w", {dq, hidden});
  w.ffn1_b = b.zeros(pfx + "/ffn1_b", {hidden});
  w.ffn2_w = b.weight(pfx + "/ffn2_w", {hidden, dq});
  w.ffn2_b = b.zeros(pfx + "/ffn2_b", {dq});
  const int gate_dim = cfg.interactions.scalar_gates ? 1 : dq;
  w.gamma = b.zeros(pfx + "/gamma", {gate_dim});
  w.tau = b.zeros(pfx + "/tau", {gate_dim});
}

}  // namespace detail_model

// Deterministic construction: trunc-normal(0.02) weights, zero gates and
// offset/logit projections, unit norm gains.
template <typename T>
Model<T> build_model(const PiipConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Model<T> model;
  model.cfg = cfg;
  detail_model::Builder<T> b{model, std::mt19937_64(seed)};

  const int m = cfg.branch_count();
  for (int j = 0; j < m; ++j) {
    const auto& bc = cfg.branches[static_cast<size_t>(j)];
    const std::string pfx = "branch_" + std::to_string(j + 1);
    BranchWeights<T> w;
    w.patch_w = b.weight(pfx + "/patch_w", {3 * bc.patch * bc.patch, bc.dim});
    w.patch_b = b.zeros(pfx + "/patch_b", {bc.dim});
    w.pos = b.weight(pfx + "/pos", {bc.spatial_tokens(), bc.dim});
    if (bc.use_cls_token) w.cls = b.weight(pfx + "/cls", {1, bc.dim});
    for (int l = 0; l < bc.depth; ++l) {
      const std::string lp = pfx + "/layer_" + std::to_string(l);
      LayerWeights<T> lw;
      lw.ln1_g = b.ones(lp + "/ln1_g", {bc.dim});
      lw.ln1_b = b.zeros(lp + "/ln1_b", {bc.dim});
      lw.qkv_w = b.weight(lp + "/qkv_w", {bc.dim, 3 * bc.dim});
      lw.qkv_b = b.zeros(lp + "/qkv_b", {3 * bc.dim});
      lw.out_w = b.weight(lp + "/out_w", {bc.dim, bc.dim});
      lw.out_b = b.zeros(lp + "/out_b", {bc.dim});
      lw.ln2_g = b.ones(lp + "/ln2_g", {bc.dim});
      lw.ln2_b = b.zeros(lp + "/ln2_b", {bc.dim});
      lw.mlp1_w = b.weight(lp + "/mlp1_w", {bc.dim, bc.mlp_hidden()});
      lw.mlp1_b = b.zeros(lp + "/mlp1_b", {bc.mlp_hidden()});
      lw.mlp2_w = b.weight(lp + "/mlp2_w", {bc.mlp_hidden(), bc.dim});
      lw.mlp2_b = b.zeros(lp + "/mlp2_b", {bc.dim});
      w.layers.push_back(std::move(lw));
    }
    w.final_ln_g = b.ones(pfx + "/final_ln_g", {bc.dim});
    w.final_ln_b = b.zeros(pfx + "/final_ln_b", {bc.dim});
    if (cfg.mode == RunMode::kClassifyFinetune) {
      w.head_w = b.weight("head/branch_" + std::to_string(j + 1) + "_w",
                          {bc.dim, cfg.num_classes});
      w.head_b = b.zeros("head/branch_" + std::to_string(j + 1) + "_b",
                         {cfg.num_classes});
    }
    model.branches.push_back(std::move(w));
  }

  if (cfg.interactions.count > 0 && m > 1) {
    auto pairs = interaction_pairs(cfg);
    for (int i = 0; i < cfg.interactions.count; ++i) {
      InteractionPointWeights<T> point;
      for (auto [lo, hi] : pairs) {
        UnitWeights<T> unit;
        unit.lo = lo;
        unit.hi = hi;
        const std::string up = "interactions/p" + std::to_string(i) + "/pair_" +
                               std::to_string(lo + 1) + "_" + std::to_string(hi + 1);
        const int dlo = cfg.branches[static_cast<size_t>(lo)].dim;
        const int dhi = cfg.branches[static_cast<size_t>(hi)].dim;
        if (direction_active(cfg, lo, hi, 0)) {
          unit.active[0] = true;
          detail_model::build_direction(b, unit.dir[0], up + "/to_lo", cfg, dlo, dhi,
                                        cfg.branches[static_cast<size_t>(lo)].heads);
        }
        if (direction_active(cfg, lo, hi, 1)) {
          unit.active[1] = true;
          detail_model::build_direction(b, unit.dir[1], up + "/to_hi", cfg, dhi, dlo,
                                        cfg.branches[static_cast<size_t>(hi)].heads);
        }
        point.units.push_back(std::move(unit));
      }
      model.interactions.push_back(std::move(point));
    }
  }

  if (cfg.mode == RunMode::kDense || cfg.mode == RunMode::kClassifyPretrain) {
    const int d1 = cfg.branches[0].dim;
    for (int j = 0; j < m; ++j) {
      const int dj = cfg.branches[static_cast<size_t>(j)].dim;
      const std::string pp = "merging/proj_" + std::to_string(j + 1);
      BranchProj<T> p;
      if (cfg.mode == RunMode::kDense) {
        p.conv1_w = b.weight(pp + "/conv1_w", {dj * 9, d1});
        p.conv1_b = b.zeros(pp + "/conv1_b", {d1});
        p.gn1_g = b.ones(pp + "/gn1_g", {d1});
        p.gn1_b = b.zeros(pp + "/gn1_b", {d1});
        p.conv2_w = b.weight(pp + "/conv2_w", {d1 * 9, d1});
        p.conv2_b = b.zeros(pp + "/conv2_b", {d1});
        p.gn2_g = b.ones(pp + "/gn2_g", {d1});
        p.gn2_b = b.zeros(pp + "/gn2_b", {d1});
      } else {
        if (dj != d1) {
          p.lin_w = b.weight(pp + "/lin_w", {dj, d1});
          p.lin_b = b.zeros(pp + "/lin_b", {d1});
        }
        p.gn_g = b.ones(pp + "/gn_g", {d1});
        p.gn_b = b.zeros(pp + "/gn_b", {d1});
      }
      model.merge.proj.push_back(std::move(p));
    }
    model.merge.w = b.zeros("merging/w", {m});
    // 1/M start keeps the merged scale comparable to a single branch
    for (auto& v : model.merge.w.data()) v = static_cast<T>(1.0 / m);
    if (cfg.mode == RunMode::kClassifyPretrain) {
      model.merge.head_ln_g = b.ones("head/ln_g", {d1});
      model.merge.head_ln_b = b.zeros("head/ln_b", {d1});
      model.merge.head_w = b.weight("head/fc_w", {d1, cfg.num_classes});
      model.merge.head_b = b.zeros("head/fc_b", {cfg.num_classes});
    }
  }
  return model;
}

// Runs the standalone tower of branch j on an already-resized input image.
template <typename T>
BranchFeature<T> run_branch(const Model<T>& model, int j, const Tensor<T>& image) {
  const auto& bc = model.cfg.branches[static_cast<size_t>(j)];
  const auto& bw = model.branches[static_cast<size_t>(j)];
  BranchFeature<T> f = patch_embed(image, bc, bw);
  const int nblocks = model.cfg.blocks();
  for (int i = 0; i < nblocks; ++i) {
    f = branch_forward_segment(f, bc, bw, i, nblocks);
  }
  return f;
}

template <typename T>
struct ForwardResult {
  Tensor<T> output;  // dense: [D1,G,G] map; classify: [classes] logits
  std::vector<BranchFeature<T>> branch_features;  // final per-branch features
};

// Full forward: resize to each branch resolution, run segments block-by-block
// with interaction points between them, then merge or average heads.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& image) {
  const PiipConfig& cfg = model.cfg;
  const int m = cfg.branch_count();
  const int rmax = cfg.branches.back().resolution;
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != rmax ||
      image.dim(2) != rmax) {
    throw ConfigError("forward: expected image [3x" + std::to_string(rmax) + "x" +
                      std::to_string(rmax) + "], got " + shape_str(image.shape()));
  }
  std::vector<BranchFeature<T>> feats(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j) {
    cost::Scope scope("branch_" + std::to_string(j + 1));
    const auto& bc = cfg.branches[static_cast<size_t>(j)];
    Tensor<T> input = ops::bilinear_resize(image, bc.resolution, bc.resolution);
    feats[static_cast<size_t>(j)] =
        patch_embed(input, bc, model.branches[static_cast<size_t>(j)]);
  }
  const int nblocks = cfg.blocks();
  const bool interact = !model.interactions.empty();
  for (int i = 0; i < nblocks; ++i) {
    for (int j = 0; j < m; ++j) {
      cost::Scope scope("branch_" + std::to_string(j + 1));
      feats[static_cast<size_t>(j)] = branch_forward_segment(
          feats[static_cast<size_t>(j)], cfg.branches[static_cast<size_t>(j)],
          model.branches[static_cast<size_t>(j)], i, nblocks);
    }
    if (interact) {
      cost::Scope scope("interactions");
      feats = schedule_interactions(feats, model.interactions, i, cfg);
    }
  }
  for (int j = 0; j < m; ++j) {
    cost::Scope scope("branch_" + std::to_string(j + 1));
    const auto& bw = model.branches[static_cast<size_t>(j)];
    feats[static_cast<size_t>(j)].tokens =
        ops::layer_norm(feats[static_cast<size_t>(j)].tokens, bw.final_ln_g, bw.final_ln_b);
  }

  ForwardResult<T> result;
  result.branch_features = feats;
  if (cfg.mode == RunMode::kClassifyFinetune) {
    cost::Scope scope("head");
    std::vector<Tensor<T>> logits;
    for (int j = 0; j < m; ++j) {
      const auto& f = feats[static_cast<size_t>(j)];
      const auto& bw = model.branches[static_cast<size_t>(j)];
      Tensor<T> pooled = f.has_cls ? ops::reshape(ops::narrow(f.tokens, 0, 0, 1),
                                                  {1, f.tokens.dim(1)})
                                   : ops::reshape(ops::mean_rows(f.tokens),
                                                  {1, f.tokens.dim(1)});
      Tensor<T> l = ops::linear(pooled, bw.head_w, bw.head_b);
      logits.push_back(ops::reshape(l, {cfg.num_classes}));
    }
    result.output = cls_logits_average(logits);
  } else {
    Tensor<T> merged;
    {
      cost::Scope scope("merging");
      merged = branch_merge(feats, model.merge, cfg, cfg.merge_subset);
    }
    if (cfg.mode == RunMode::kClassifyPretrain) {
      cost::Scope scope("head");
      const int d1 = cfg.branches[0].dim;
      const int g = cfg.largest_grid();
      Tensor<T> tokens = ops::reshape(ops::permute(merged, {1, 2, 0}), {g * g, d1});
      Tensor<T> pooled = ops::reshape(ops::mean_rows(tokens), {1, d1});
      Tensor<T> normed = ops::layer_norm(pooled, model.merge.head_ln_g, model.merge.head_ln_b);
      Tensor<T> l = ops::linear(normed, model.merge.head_w, model.merge.head_b);
      result.output = ops::reshape(l, {cfg.num_classes});
    } else {
      result.output = merged;
    }
  }
  if (!all_finite(result.output)) {
    throw NumericError("forward produced non-finite outputs");
  }
  return result;
}

}  // namespace piip
