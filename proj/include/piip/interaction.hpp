#pragma once

#include <utility>
#include <vector>

#include "piip/config.hpp"
#include "piip/vit.hpp"

namespace piip {

// Weights of one attention direction inside an interaction unit:
// branch `query` attends into branch `kv`.
template <typename T>
struct DirectionWeights {
  Tensor<T> fc_w, fc_b;        // D_kv -> D_q, key/value dimension projection
  Tensor<T> q_ln_g, q_ln_b;
  Tensor<T> kv_ln_g, kv_ln_b;
  // deformable attention
  Tensor<T> val_w, val_b;      // D_q -> Dv
  Tensor<T> off_w, off_b;      // D_q -> heads*K*2, zero-initialized
  Tensor<T> logit_w, logit_b;  // D_q -> heads*K, zero-initialized
  Tensor<T> attn_out_w, attn_out_b;  // Dv -> D_q
  // regular attention
  Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;  // all D_q -> D_q
  // gated FFN tail
  Tensor<T> ffn_ln_g, ffn_ln_b;
  Tensor<T> ffn1_w, ffn1_b, ffn2_w, ffn2_b;
  Tensor<T> gamma, tau;        // zero-initialized gates
};

// One unit connecting a branch pair; directions[0] updates the lower-index
// branch, directions[1] the higher-index one. Inactive halves stay empty.
template <typename T>
struct UnitWeights {
  int lo = 0, hi = 0;
  DirectionWeights<T> dir[2];
  bool active[2] = {false, false};
};

template <typename T>
struct InteractionPointWeights {
  std::vector<UnitWeights<T>> units;
};

namespace detail_inter {

// Reference points of a query grid: patch centers in normalized [0,1]^2,
// repeated K times per query, row-major. (x, y) per row.
template <typename T>
Tensor<T> reference_points(int gh, int gw, int k) {
  std::vector<T> pts(static_cast<size_t>(gh) * gw * k * 2);
  size_t o = 0;
  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) {
      for (int s = 0; s < k; ++s) {
        pts[o++] = static_cast<T>((c + 0.5) / gw);
        pts[o++] = static_cast<T>((r + 0.5) / gh);
      }
    }
  }
  return Tensor<T>::from_data({gh * gw * k, 2}, std::move(pts));
}

}  // namespace detail_inter

// Multi-head cross-attention with dense scores; kv must already carry the
// query dim (post FC).
template <typename T>
Tensor<T> regular_cross_attention(const Tensor<T>& query, const Tensor<T>& kv,
                                  const DirectionWeights<T>& w, int heads) {
  const int d = query.dim(1);
  if (d % heads != 0) {
    throw ConfigError("regular cross-attention: dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const int dh = d / heads;
  const int nq = query.dim(0), nk = kv.dim(0);
  auto to_heads = [&](const Tensor<T>& t, int n) {
    return ops::permute(ops::reshape(t, {n, heads, dh}), {1, 0, 2});
  };
  Tensor<T> q = to_heads(ops::linear(query, w.q_w, w.q_b), nq);
  Tensor<T> k = to_heads(ops::linear(kv, w.k_w, w.k_b), nk);
  Tensor<T> v = to_heads(ops::linear(kv, w.v_w, w.v_b), nk);
  Tensor<T> scores = ops::scale(ops::matmul(q, k, false, true),
                                static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> attn = ops::softmax_lastdim(scores);
  Tensor<T> ctx = ops::matmul(attn, v);  // [h, nq, dh]
  Tensor<T> merged = ops::reshape(ops::permute(ctx, {1, 0, 2}), {nq, d});
  return ops::linear(merged, w.o_w, w.o_b);
}

// Deformable cross-attention: each query predicts K offsets and K logits per
// head, samples the projected value map bilinearly at reference + offset and
// aggregates with softmax weights. Normalized coordinates keep the op
// resolution-agnostic; offsets are scaled by 1/kv-grid-size.
template <typename T>
Tensor<T> deformable_cross_attention(const Tensor<T>& query, const Tensor<T>& kv,
                                     int q_gh, int q_gw, int kv_gh, int kv_gw,
                                     const DirectionWeights<T>& w, int heads, int k,
                                     int value_dim) {
  const int d = query.dim(1);
  const int nq = query.dim(0);
  if (nq != q_gh * q_gw) {
    throw ConfigError("deformable cross-attention: query rows " + std::to_string(nq) +
                      " do not match grid metadata " + std::to_string(q_gh) + "x" +
                      std::to_string(q_gw) + " (class tokens must not be routed in)");
  }
  if (kv.dim(0) != kv_gh * kv_gw) {
    throw ConfigError("deformable cross-attention: kv rows do not match grid metadata");
  }
  const int dv = value_dim / heads;
  Tensor<T> value = ops::linear(kv, w.val_w, w.val_b);  // [nkv, Dv]
  Tensor<T> vmap = ops::permute(ops::reshape(value, {kv_gh, kv_gw, value_dim}),
                                {2, 0, 1});  // [Dv, gh, gw]
  Tensor<T> offsets = ops::linear(query, w.off_w, w.off_b);   // [nq, h*K*2]
  Tensor<T> logits = ops::linear(query, w.logit_w, w.logit_b);  // [nq, h*K]
  Tensor<T> weights = ops::softmax_lastdim(ops::reshape(logits, {nq, heads, k}));
  Tensor<T> wperm = ops::permute(weights, {1, 0, 2});  // [h, nq, K]
  Tensor<T> offs = ops::permute(ops::reshape(offsets, {nq, heads, k, 2}),
                                {1, 0, 2, 3});  // [h, nq, K, 2]
  Tensor<T> ref = detail_inter::reference_points<T>(q_gh, q_gw, k);
  const T off_scale = static_cast<T>(1.0 / kv_gw);
  std::vector<Tensor<T>> head_outs;
  for (int hd = 0; hd < heads; ++hd) {
    Tensor<T> off_h = ops::reshape(ops::narrow(offs, 0, hd, 1), {nq * k, 2});
    Tensor<T> pts = ops::add(ref, ops::scale(off_h, off_scale));
    Tensor<T> vhead = ops::narrow(vmap, 0, hd * dv, dv);  // [dv, gh, gw]
    Tensor<T> sampled = ops::grid_sample_bilinear(vhead, pts);  // [nq*K, dv]
    Tensor<T> s3 = ops::reshape(sampled, {nq, k, dv});
    Tensor<T> w_h = ops::reshape(ops::narrow(wperm, 0, hd, 1), {nq, k});
    head_outs.push_back(ops::weighted_sum_mid(s3, w_h));  // [nq, dv]
  }
  Tensor<T> merged = ops::concat(head_outs, 1);  // [nq, Dv]
  return ops::linear(merged, w.attn_out_w, w.attn_out_b);
}

// One direction of the gated interaction:
//   F_hat   = F_q + gamma * Attention(norm(F_q), norm(FC(F_kv)))
//   F_tilde = F_hat + tau * FFN(norm(F_hat))
// Operates on spatial tokens only; the caller strips/passes class tokens.
template <typename T>
Tensor<T> interaction_direction(const Tensor<T>& q_sp, const Tensor<T>& kv_sp,
                                int q_gh, int q_gw, int kv_gh, int kv_gw,
                                const DirectionWeights<T>& w,
                                const PiipConfig& cfg, int q_heads) {
  Tensor<T> kv_proj = ops::linear(kv_sp, w.fc_w, w.fc_b);
  Tensor<T> qn = ops::layer_norm(q_sp, w.q_ln_g, w.q_ln_b);
  Tensor<T> kvn = ops::layer_norm(kv_proj, w.kv_ln_g, w.kv_ln_b);
  Tensor<T> attn;
  if (cfg.interactions.attention == AttentionType::kDeformable) {
    attn = deformable_cross_attention(qn, kvn, q_gh, q_gw, kv_gh, kv_gw, w, q_heads,
                                      cfg.interactions.sample_points,
                                      cfg.deform_value_dim(q_sp.dim(1)));
  } else {
    attn = regular_cross_attention(qn, kvn, w, q_heads);
  }
  Tensor<T> f_hat = ops::add(q_sp, ops::mul_gate(attn, w.gamma));
  Tensor<T> hn = ops::layer_norm(f_hat, w.ffn_ln_g, w.ffn_ln_b);
  Tensor<T> ffn = ops::linear(ops::gelu(ops::linear(hn, w.ffn1_w, w.ffn1_b)),
                              w.ffn2_w, w.ffn2_b);
  return ops::add(f_hat, ops::mul_gate(ffn, w.tau));
}

namespace detail_inter {

template <typename T>
Tensor<T> spatial_tokens(const BranchFeature<T>& f) {
  if (!f.has_cls) return f.tokens;
  return ops::narrow(f.tokens, 0, 1, f.spatial_tokens());
}

template <typename T>
Tensor<T> reattach_cls(const BranchFeature<T>& f, const Tensor<T>& spatial) {
  if (!f.has_cls) return spatial;
  Tensor<T> cls_row = ops::narrow(f.tokens, 0, 0, 1);
  return ops::concat<T>({cls_row, spatial}, 0);
}

}  // namespace detail_inter

// Both directions of one unit evaluated from the same block outputs.
// Returns updated spatial tokens (or empty tensors for inactive directions).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> interaction_unit(const BranchFeature<T>& f_lo,
                                                 const BranchFeature<T>& f_hi,
                                                 const UnitWeights<T>& w,
                                                 const PiipConfig& cfg) {
  Tensor<T> lo_sp = detail_inter::spatial_tokens(f_lo);
  Tensor<T> hi_sp = detail_inter::spatial_tokens(f_hi);
  Tensor<T> lo_out, hi_out;
  if (w.active[0]) {
    lo_out = interaction_direction(lo_sp, hi_sp, f_lo.gh, f_lo.gw, f_hi.gh, f_hi.gw,
                                   w.dir[0], cfg, cfg.branches[static_cast<size_t>(w.lo)].heads);
  }
  if (w.active[1]) {
    hi_out = interaction_direction(hi_sp, lo_sp, f_hi.gh, f_hi.gw, f_lo.gh, f_lo.gw,
                                   w.dir[1], cfg, cfg.branches[static_cast<size_t>(w.hi)].heads);
  }
  return {lo_out, hi_out};
}

// Applies all units of one interaction point. Every unit reads the original
// block outputs; per-branch updates are the sum of the units' deltas, applied
// in canonical unit order so evaluation order cannot change the result.
// chain_one_way instead feeds each updated branch into the next unit.
template <typename T>
std::vector<BranchFeature<T>> schedule_interactions(
    const std::vector<BranchFeature<T>>& features,
    const std::vector<InteractionPointWeights<T>>& points, int block_index,
    const PiipConfig& cfg, const std::vector<int>* eval_order = nullptr) {
  const auto& point = points[static_cast<size_t>(block_index)];
  const int m = cfg.branch_count();
  std::vector<BranchFeature<T>> out = features;

  if (cfg.interactions.direction == Direction::kChainOneWay) {
    for (const auto& unit : point.units) {
      auto [lo_out, hi_out] = interaction_unit(out[static_cast<size_t>(unit.lo)],
                                               out[static_cast<size_t>(unit.hi)], unit, cfg);
      if (hi_out.defined()) {
        out[static_cast<size_t>(unit.hi)].tokens =
            detail_inter::reattach_cls(out[static_cast<size_t>(unit.hi)], hi_out);
      }
    }
    return out;
  }

  const size_t nunits = point.units.size();
  std::vector<Tensor<T>> lo_res(nunits), hi_res(nunits);
  std::vector<int> order(nunits);
  for (size_t i = 0; i < nunits; ++i) order[i] = static_cast<int>(i);
  if (eval_order) order = *eval_order;
  for (int ui : order) {
    const auto& unit = point.units[static_cast<size_t>(ui)];
    auto [lo_out, hi_out] = interaction_unit(features[static_cast<size_t>(unit.lo)],
                                             features[static_cast<size_t>(unit.hi)], unit, cfg);
    lo_res[static_cast<size_t>(ui)] = lo_out;
    hi_res[static_cast<size_t>(ui)] = hi_out;
  }
  // canonical-order delta accumulation per branch
  std::vector<Tensor<T>> acc(static_cast<size_t>(m));
  auto apply = [&](int branch, const Tensor<T>& updated) {
    if (!updated.defined()) return;
    Tensor<T> base = detail_inter::spatial_tokens(features[static_cast<size_t>(branch)]);
    Tensor<T> delta = ops::sub(updated, base);
    auto& slot = acc[static_cast<size_t>(branch)];
    slot = slot.defined() ? ops::add(slot, delta) : delta;
  };
  for (size_t ui = 0; ui < nunits; ++ui) {
    const auto& unit = point.units[ui];
    apply(unit.lo, lo_res[ui]);
    apply(unit.hi, hi_res[ui]);
  }
  for (int j = 0; j < m; ++j) {
    if (!acc[static_cast<size_t>(j)].defined()) continue;
    Tensor<T> base = detail_inter::spatial_tokens(features[static_cast<size_t>(j)]);
    Tensor<T> updated = ops::add(base, acc[static_cast<size_t>(j)]);
    out[static_cast<size_t>(j)].tokens =
        detail_inter::reattach_cls(features[static_cast<size_t>(j)], updated);
  }
  return out;
}

}  // namespace piip
