#pragma once

#include <vector>

#include "piip/config.hpp"
#include "piip/vit.hpp"

namespace piip {

// Largest divisor of c that is <= cap; GroupNorm group count helper.
inline int gn_groups(int c, int cap = 32) {
  for (int g = std::min(cap, c); g >= 1; --g) {
    if (c % g == 0) return g;
  }
  return 1;
}

// Group count for token-wise GroupNorm; keeps at least 2 channels per group.
inline int gn_groups_tokens(int c) { return gn_groups(c, std::max(1, c / 2)); }

template <typename T>
struct BranchProj {
  // dense variant: conv3x3 -> GN -> GELU -> conv3x3 -> GN
  Tensor<T> conv1_w, conv1_b, gn1_g, gn1_b;
  Tensor<T> conv2_w, conv2_b, gn2_g, gn2_b;
  // linear variant: per-token linear -> GN (linear omitted when D_j == D_1)
  Tensor<T> lin_w, lin_b, gn_g, gn_b;
};

template <typename T>
struct MergeWeights {
  std::vector<BranchProj<T>> proj;  // one per branch
  Tensor<T> w;                      // [M] learnable scalar weights
  // classify_pretrain head: final LayerNorm + linear on pooled merged map
  Tensor<T> head_ln_g, head_ln_b, head_w, head_b;
};

// Two-convolution projection with GroupNorm for dense prediction.
template <typename T>
Tensor<T> proj_dense(const Tensor<T>& x, const BranchProj<T>& p) {
  const int d1 = p.conv1_w.dim(1);
  Tensor<T> h = ops::conv3x3(x, p.conv1_w, p.conv1_b);
  h = ops::group_norm(h, 0, gn_groups(d1), p.gn1_g, p.gn1_b);
  h = ops::gelu(h);
  h = ops::conv3x3(h, p.conv2_w, p.conv2_b);
  return ops::group_norm(h, 0, gn_groups(d1), p.gn2_g, p.gn2_b);
}

// Per-token linear map then GroupNorm over channels.
template <typename T>
Tensor<T> proj_linear(const Tensor<T>& x, const BranchProj<T>& p) {
  Tensor<T> h = p.lin_w.defined() ? ops::linear(x, p.lin_w, p.lin_b) : x;
  const int d1 = h.dim(1);
  return ops::group_norm(h, 1, gn_groups_tokens(d1), p.gn_g, p.gn_b);
}

// Projects every selected branch to D_1, upsamples to the largest grid and
// sums with the learnable scalar weights. Inputs are final-block features
// with class tokens already stripped. Output is [D_1, G, G].
template <typename T>
Tensor<T> branch_merge(const std::vector<BranchFeature<T>>& features,
                       const MergeWeights<T>& merge, const PiipConfig& cfg,
                       const std::vector<bool>& subset) {
  const int m = cfg.branch_count();
  if (static_cast<int>(subset.size()) != m) {
    throw ConfigError("branch_merge: subset mask length mismatch");
  }
  bool any = false;
  for (bool s : subset) any = any || s;
  if (!any) throw ConfigError("branch_merge: empty branch subset");
  const bool dense = cfg.mode == RunMode::kDense;
  const int g = cfg.largest_grid();
  const int d1 = cfg.branches[0].dim;
  Tensor<T> out;
  for (int j = 0; j < m; ++j) {
    if (!subset[static_cast<size_t>(j)]) continue;
    const auto& f = features[static_cast<size_t>(j)];
    Tensor<T> sp = f.has_cls ? ops::narrow(f.tokens, 0, 1, f.spatial_tokens())
                             : f.tokens;
    Tensor<T> projected;
    if (dense) {
      Tensor<T> map = ops::permute(ops::reshape(sp, {f.gh, f.gw, cfg.branches[static_cast<size_t>(j)].dim}),
                                   {2, 0, 1});
      projected = proj_dense(map, merge.proj[static_cast<size_t>(j)]);
    } else {
      Tensor<T> tok = proj_linear(sp, merge.proj[static_cast<size_t>(j)]);
      projected = ops::permute(ops::reshape(tok, {f.gh, f.gw, d1}), {2, 0, 1});
    }
    Tensor<T> up = ops::bilinear_resize(projected, g, g);
    Tensor<T> wj = ops::narrow(merge.w, 0, j, 1);  // [1], scalar gate
    Tensor<T> scaled = ops::mul_gate(ops::reshape(up, {d1 * g * g, 1}), wj);
    scaled = ops::reshape(scaled, {d1, g, g});
    out = out.defined() ? ops::add(out, scaled) : scaled;
  }
  return out;
}

// Arithmetic mean of per-branch logit vectors.
template <typename T>
Tensor<T> cls_logits_average(const std::vector<Tensor<T>>& per_branch_logits) {
  if (per_branch_logits.empty()) throw ConfigError("logit average: empty input");
  const int c = per_branch_logits[0].numel();
  for (auto& l : per_branch_logits) {
    if (l.numel() != c)
      throw ConfigError("logit average: class count mismatch (" +
                        std::to_string(l.numel()) + " vs " + std::to_string(c) + ")");
  }
  Tensor<T> sum = per_branch_logits[0];
  for (size_t i = 1; i < per_branch_logits.size(); ++i)
    sum = ops::add(sum, per_branch_logits[i]);
  return ops::scale(sum, static_cast<T>(1.0 / per_branch_logits.size()));
}

}  // namespace piip
