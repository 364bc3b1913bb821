#pragma once

#include <string>

#include "piip/config.hpp"
#include "piip/cost.hpp"
#include "piip/model.hpp"

namespace piip {

namespace detail_cost {

using u64 = std::uint64_t;

inline u64 direction_params(const PiipConfig& cfg, int dq, int dkv, int heads) {
  const u64 q = static_cast<u64>(dq), kv = static_cast<u64>(dkv);
  const u64 hid = static_cast<u64>(cfg.interaction_ffn_hidden(dq));
  const u64 hk = static_cast<u64>(heads) * cfg.interactions.sample_points;
  u64 p = kv * q + q;  // fc
  p += 6 * q;          // q/kv/ffn layer norms
  if (cfg.interactions.attention == AttentionType::kDeformable) {
    const u64 dv = static_cast<u64>(cfg.deform_value_dim(dq));
    p += q * dv + dv;            // value projection
    p += q * hk * 2 + hk * 2;    // offsets
    p += q * hk + hk;            // sampling logits
    p += dv * q + q;             // attention output
  } else {
    p += 4 * (q * q + q);        // q/k/v/o projections
  }
  p += q * hid + hid + hid * q + q;  // ffn
  p += 2 * (cfg.interactions.scalar_gates ? 1 : q);  // gamma, tau
  return p;
}

inline u64 direction_macs(const PiipConfig& cfg, int dq, int dkv, int heads,
                          u64 nq, u64 nkv) {
  const u64 q = static_cast<u64>(dq), kv = static_cast<u64>(dkv);
  const u64 hid = static_cast<u64>(cfg.interaction_ffn_hidden(dq));
  const u64 k = static_cast<u64>(cfg.interactions.sample_points);
  const u64 h = static_cast<u64>(heads);
  u64 macs = nkv * kv * q;  // fc
  if (cfg.interactions.attention == AttentionType::kDeformable) {
    const u64 dv = static_cast<u64>(cfg.deform_value_dim(dq));
    macs += nkv * q * dv;        // value projection
    macs += nq * q * h * k * 2;  // offsets
    macs += nq * q * h * k;      // sampling logits
    macs += 4 * nq * k * dv;     // bilinear sampling
    macs += nq * dv * q;         // attention output
  } else {
    macs += (nq + 2 * nkv) * q * q;  // q/k/v projections
    macs += 2 * nq * nkv * q;        // scores + context
    macs += nq * q * q;              // output projection
  }
  macs += 2 * nq * q * hid;  // ffn
  return macs;
}

// One transformer layer; n = token rows fed through it (incl. class token).
inline u64 layer_macs(const BranchConfig& b) {
  const u64 n = static_cast<u64>(b.tokens());
  const u64 d = static_cast<u64>(b.dim);
  const u64 hid = static_cast<u64>(b.mlp_hidden());
  u64 macs = 4 * n * d * d;  // qkv + output projections
  if (b.attn_window > 0) {
    macs += 2 * n * static_cast<u64>(b.attn_window) * b.attn_window * d;
  } else {
    macs += 2 * n * n * d;  // scores + context
  }
  macs += 2 * n * d * hid;  // mlp
  return macs;
}

}  // namespace detail_cost

// Closed-form parameter and MAC accounting, row for row what the forward pass
// executes on an image at the largest branch resolution.
inline CostReport count_costs(const PiipConfig& cfg) {
  using detail_cost::u64;
  validate(cfg);
  CostReport report;
  const int m = cfg.branch_count();
  const int rmax = cfg.branches.back().resolution;
  const int bigg = cfg.largest_grid();
  const int d1 = cfg.branches[0].dim;

  for (int j = 0; j < m; ++j) {
    const auto& b = cfg.branches[static_cast<size_t>(j)];
    CostRow& row = report.row("branch_" + std::to_string(j + 1));
    row.params = branch_param_count(b);
    u64 macs = 0;
    if (b.resolution != rmax) macs += 4ull * 3 * b.resolution * b.resolution;
    macs += static_cast<u64>(b.spatial_tokens()) * 3 * b.patch * b.patch * b.dim;
    macs += static_cast<u64>(b.depth) * detail_cost::layer_macs(b);
    row.macs = macs;
    report.row("branch_" + std::to_string(j + 1) + "_pos_embed").params =
        static_cast<u64>(b.spatial_tokens()) * b.dim;
  }

  {
    CostRow& row = report.row("interactions");
    if (cfg.interactions.count > 0 && m > 1) {
      u64 p = 0, macs = 0;
      for (auto [lo, hi] : interaction_pairs(cfg)) {
        const auto& blo = cfg.branches[static_cast<size_t>(lo)];
        const auto& bhi = cfg.branches[static_cast<size_t>(hi)];
        if (direction_active(cfg, lo, hi, 0)) {
          p += detail_cost::direction_params(cfg, blo.dim, bhi.dim, blo.heads);
          macs += detail_cost::direction_macs(cfg, blo.dim, bhi.dim, blo.heads,
                                              static_cast<u64>(blo.spatial_tokens()),
                                              static_cast<u64>(bhi.spatial_tokens()));
        }
        if (direction_active(cfg, lo, hi, 1)) {
          p += detail_cost::direction_params(cfg, bhi.dim, blo.dim, bhi.heads);
          macs += detail_cost::direction_macs(cfg, bhi.dim, blo.dim, bhi.heads,
                                              static_cast<u64>(bhi.spatial_tokens()),
                                              static_cast<u64>(blo.spatial_tokens()));
        }
      }
      row.params = p * cfg.interactions.count;
      row.macs = macs * cfg.interactions.count;
    }
  }

  if (cfg.mode == RunMode::kDense || cfg.mode == RunMode::kClassifyPretrain) {
    CostRow& row = report.row("merging");
    u64 p = 0, macs = 0;
    for (int j = 0; j < m; ++j) {
      const auto& b = cfg.branches[static_cast<size_t>(j)];
      const u64 dj = static_cast<u64>(b.dim);
      const u64 g2 = static_cast<u64>(b.spatial_tokens());
      if (cfg.mode == RunMode::kDense) {
        p += dj * 9 * d1 + d1 + 2ull * d1;          // conv1 + GN
        p += static_cast<u64>(d1) * 9 * d1 + d1 + 2ull * d1;  // conv2 + GN
        if (cfg.merge_subset[static_cast<size_t>(j)]) {
          macs += g2 * dj * 9 * d1 + g2 * static_cast<u64>(d1) * 9 * d1;
        }
      } else {
        if (b.dim != d1) p += dj * d1 + d1;
        p += 2ull * d1;  // GroupNorm
        if (cfg.merge_subset[static_cast<size_t>(j)] && b.dim != d1) {
          macs += g2 * dj * d1;
        }
      }
      if (cfg.merge_subset[static_cast<size_t>(j)] && b.grid() != bigg) {
        macs += 4ull * d1 * bigg * bigg;
      }
    }
    p += static_cast<u64>(m);  // merge weights
    row.params = p;
    row.macs = macs;
  }

  {
    CostRow& row = report.row("head");
    if (cfg.mode == RunMode::kClassifyFinetune) {
      u64 p = 0, macs = 0;
      for (const auto& b : cfg.branches) {
        p += static_cast<u64>(b.dim) * cfg.num_classes + cfg.num_classes;
        macs += static_cast<u64>(b.dim) * cfg.num_classes;
      }
      row.params = p;
      row.macs = macs;
    } else if (cfg.mode == RunMode::kClassifyPretrain) {
      row.params = 2ull * d1 + static_cast<u64>(d1) * cfg.num_classes + cfg.num_classes;
      row.macs = static_cast<u64>(d1) * cfg.num_classes;
    }
  }
  return report;
}

// MACs actually executed by one forward pass, grouped by cost scope.
template <typename T>
CostReport instrumented_macs(const Model<T>& model) {
  NoGradGuard guard;
  cost::Enable enable;
  const int r = model.cfg.branches.back().resolution;
  Tensor<T> image = Tensor<T>::zeros({3, r, r});
  for (int i = 0; i < image.numel(); ++i) {
    image.data()[static_cast<size_t>(i)] = static_cast<T>(0.25 + 0.5 * ((i * 2654435761u) % 997) / 997.0);
  }
  forward(model, image);
  CostReport report;
  for (const auto& [name, macs] : cost::counter().rows) report.row(name).macs = macs;
  return report;
}

// Per-row parameter totals of a built model, mapped onto the report row names
// used by count_costs (position embeddings split out of the branch rows).
template <typename T>
CostReport registry_params(const Model<T>& model) {
  CostReport report;
  for (const auto& [name, t] : model.params) {
    std::string row = name.substr(0, name.find('/'));
    if (name.size() > 4 && name.compare(name.size() - 4, 4, "/pos") == 0) {
      row += "_pos_embed";
    }
    report.row(row).params += static_cast<std::uint64_t>(t.numel());
  }
  return report;
}

}  // namespace piip
