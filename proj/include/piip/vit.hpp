#pragma once

#include <string>
#include <vector>

#include "piip/config.hpp"
#include "piip/ops.hpp"

namespace piip {

// Token grid with spatial metadata.
template <typename T>
struct BranchFeature {
  Tensor<T> tokens;  // [(gh*gw + cls) x D]
  int gh = 0, gw = 0;
  bool has_cls = false;

  int spatial_tokens() const { return gh * gw; }
  int token_count() const { return spatial_tokens() + (has_cls ? 1 : 0); }
};

template <typename T>
struct LayerWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> qkv_w, qkv_b;   // [D, 3D]
  Tensor<T> out_w, out_b;   // [D, D]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> mlp1_w, mlp1_b; // [D, H]
  Tensor<T> mlp2_w, mlp2_b; // [H, D]
};

template <typename T>
struct BranchWeights {
  Tensor<T> patch_w, patch_b;  // [3*P*P, D], [D]
  Tensor<T> pos;               // [g*g, D], spatial positions only
  Tensor<T> cls;               // [1, D] when used
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_ln_g, final_ln_b;
  Tensor<T> head_w, head_b;    // classify_finetune per-branch head
};

// Interpolates a stored position embedding to a new token grid by channelwise
// bilinear resize; the source grid must be square.
template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pos, int new_gh, int new_gw) {
  if (pos.rank() != 2) throw ConfigError("pos embed must be [tokens, D]");
  const int n = pos.dim(0), d = pos.dim(1);
  const int g0 = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (g0 * g0 != n) {
    throw ConfigError("pos embed token count " + std::to_string(n) +
                      " is not a square grid");
  }
  if (g0 == new_gh && g0 == new_gw) return pos;
  Tensor<T> grid = ops::permute(ops::reshape(pos, {g0, g0, d}), {2, 0, 1});
  Tensor<T> resized = ops::bilinear_resize(grid, new_gh, new_gw);
  return ops::reshape(ops::permute(resized, {1, 2, 0}), {new_gh * new_gw, d});
}

// Tokenizes an image: non-overlapping P x P patches, linear projection,
// position embedding, optional class token prepended at row 0.
template <typename T>
BranchFeature<T> patch_embed(const Tensor<T>& image, const BranchConfig& cfg,
                             const BranchWeights<T>& w) {
  if (image.rank() != 3 || image.dim(1) != cfg.resolution ||
      image.dim(2) != cfg.resolution) {
    throw ConfigError("patch_embed: image " + shape_str(image.shape()) +
                      " does not match configured resolution " +
                      std::to_string(cfg.resolution));
  }
  const int g = cfg.grid();
  Tensor<T> patches = ops::im2col(image, cfg.patch, cfg.patch, cfg.patch, 0);
  Tensor<T> tokens = ops::linear(patches, w.patch_w, w.patch_b);  // [g*g, D]
  tokens = ops::add(tokens, w.pos);
  if (cfg.use_cls_token) {
    tokens = ops::concat<T>({w.cls, tokens}, 0);
  }
  BranchFeature<T> f;
  f.tokens = tokens;
  f.gh = g;
  f.gw = g;
  f.has_cls = cfg.use_cls_token;
  return f;
}

namespace detail_vit {

// Standard multi-head self-attention over a [.., n, D] token block.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const LayerWeights<T>& w, int heads) {
  const int n = x.dim(-2);
  const int d = x.dim(-1);
  const int dh = d / heads;
  std::vector<int> batch(x.shape().begin(), x.shape().end() - 2);
  const int nb = static_cast<int>(numel_of(batch));
  Tensor<T> qkv = ops::linear(x, w.qkv_w, w.qkv_b);  // [.., n, 3D]
  Tensor<T> q = ops::narrow(qkv, -1, 0, d);
  Tensor<T> k = ops::narrow(qkv, -1, d, d);
  Tensor<T> v = ops::narrow(qkv, -1, 2 * d, d);
  auto to_heads = [&](const Tensor<T>& t) {
    Tensor<T> r = ops::reshape(t, {nb, n, heads, dh});
    return ops::permute(r, {0, 2, 1, 3});  // [nb, h, n, dh]
  };
  Tensor<T> qh = to_heads(q), kh = to_heads(k), vh = to_heads(v);
  Tensor<T> scores = ops::scale(ops::matmul(qh, kh, false, true),
                                static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> attn = ops::softmax_lastdim(scores);       // rows sum to 1 per query
  Tensor<T> ctx = ops::matmul(attn, vh);               // [nb, h, n, dh]
  Tensor<T> merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {nb, n, d});
  Tensor<T> out = ops::linear(merged, w.out_w, w.out_b);
  std::vector<int> out_shape = batch;
  out_shape.push_back(n);
  out_shape.push_back(d);
  return ops::reshape(out, out_shape);
}

// Partitions a [g*g, D] spatial token tensor into [nw, win*win, D] windows.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& tokens, int g, int win) {
  const int d = tokens.dim(1);
  const int s = g / win;
  Tensor<T> t = ops::reshape(tokens, {s, win, s, win, d});
  t = ops::permute(t, {0, 2, 1, 3, 4});  // [s, s, win, win, d]
  return ops::reshape(t, {s * s, win * win, d});
}

template <typename T>
Tensor<T> window_unpartition(const Tensor<T>& wins, int g, int win, int d) {
  const int s = g / win;
  Tensor<T> t = ops::reshape(wins, {s, s, win, win, d});
  t = ops::permute(t, {0, 2, 1, 3, 4});
  return ops::reshape(t, {g * g, d});
}

}  // namespace detail_vit

// One pre-norm transformer layer: x + MHSA(LN(x)), then + MLP(LN(.)).
// With attn_window > 0 attention is evaluated inside non-overlapping windows.
template <typename T>
BranchFeature<T> vit_layer(const BranchFeature<T>& x, const BranchConfig& cfg,
                           const LayerWeights<T>& w, int layer_index) {
  Tensor<T> normed = ops::layer_norm(x.tokens, w.ln1_g, w.ln1_b);
  Tensor<T> attn_out;
  if (cfg.attn_window > 0) {
    const int win = cfg.attn_window;
    Tensor<T> wins = detail_vit::window_partition(normed, x.gh, win);
    Tensor<T> ctx = detail_vit::mhsa(wins, w, cfg.heads);
    attn_out = detail_vit::window_unpartition(ctx, x.gh, win, cfg.dim);
  } else {
    attn_out = detail_vit::mhsa(normed, w, cfg.heads);
  }
  Tensor<T> h = ops::add(x.tokens, attn_out);
  Tensor<T> normed2 = ops::layer_norm(h, w.ln2_g, w.ln2_b);
  Tensor<T> mlp = ops::linear(ops::gelu(ops::linear(normed2, w.mlp1_w, w.mlp1_b)),
                              w.mlp2_w, w.mlp2_b);
  Tensor<T> out = ops::add(h, mlp);
  if (!all_finite(out)) {
    throw NumericError("non-finite activations after layer " +
                       std::to_string(layer_index));
  }
  BranchFeature<T> r = x;
  r.tokens = out;
  return r;
}

// Applies the layers of block `block_index` (depth/N consecutive layers).
template <typename T>
BranchFeature<T> branch_forward_segment(const BranchFeature<T>& x,
                                        const BranchConfig& cfg,
                                        const BranchWeights<T>& w, int block_index,
                                        int num_blocks) {
  if (block_index < 0 || block_index >= num_blocks) {
    throw ConfigError("segment index " + std::to_string(block_index) +
                      " out of range [0," + std::to_string(num_blocks) + ")");
  }
  const int per_block = cfg.depth / num_blocks;
  BranchFeature<T> f = x;
  for (int l = block_index * per_block; l < (block_index + 1) * per_block; ++l) {
    f = vit_layer(f, cfg, w.layers[static_cast<size_t>(l)], l);
  }
  return f;
}

}  // namespace piip
