#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "piip/cost.hpp"
#include "piip/tensor.hpp"

namespace piip {
namespace ops {

using detail::make_result;

// ---------------------------------------------------------------------------
// element-wise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
  std::vector<T> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        for (int p = 0; p < 2; ++p) {
          auto& par = *n.parents[p];
          if (!par.requires_grad) continue;
          par.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) par.grad[i] += n.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
  std::vector<T> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
        }
        auto& pb = *n.parents[1];
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
  }
  std::vector<T> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i)
            pa.grad[i] += n.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i)
            pb.grad[i] += n.grad[i] * pa.data[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](TensorNode<T>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * s;
  });
}

// x[..., D] + b[D]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const int d = x.dim(-1);
  if (b.rank() != 1 || b.dim(0) != d) {
    throw DimError("add_bias: bias " + shape_str(b.shape()) +
                   " does not match last dim of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data());
  const auto& bd = b.data();
  const size_t rows = out.size() / static_cast<size_t>(d);
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out[r * d + j] += bd[static_cast<size_t>(j)];
  return make_result<T>(
      x.shape(), std::move(out), {x, b}, [d, rows](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
        }
        auto& pb = *n.parents[1];
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j)
              pb.grad[static_cast<size_t>(j)] += n.grad[r * static_cast<size_t>(d) + j];
        }
      });
}

// x[..., D] * g where g is [D] (per-channel gate) or [1] (scalar gate)
template <typename T>
Tensor<T> mul_gate(const Tensor<T>& x, const Tensor<T>& g) {
  const int d = x.dim(-1);
  const bool scalar = (g.numel() == 1);
  if (!scalar && (g.rank() != 1 || g.dim(0) != d)) {
    throw DimError("mul_gate: gate " + shape_str(g.shape()) +
                   " incompatible with " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data());
  const auto& gd = g.data();
  const size_t rows = out.size() / static_cast<size_t>(d);
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j)
      out[r * d + j] *= scalar ? gd[0] : gd[static_cast<size_t>(j)];
  return make_result<T>(
      x.shape(), std::move(out), {x, g},
      [d, rows, scalar](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j)
              px.grad[r * d + j] +=
                  n.grad[r * d + j] * (scalar ? pg.data[0] : pg.data[j]);
        }
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) {
              T contrib = n.grad[r * d + j] * px.data[r * d + j];
              pg.grad[scalar ? 0 : static_cast<size_t>(j)] += contrib;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace raw {

// c[m,n] += op(a) * op(b), row-major
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int n, int k, bool ta, bool tb) {
  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      T* crow = c + static_cast<size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const T av = arow[kk];
        const T* brow = b + static_cast<size_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<size_t>(j) * k;
        T acc = T(0);
        for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int kk = 0; kk < k; ++kk) {
      const T* arow = a + static_cast<size_t>(kk) * m;
      const T* brow = b + static_cast<size_t>(kk) * n;
      for (int i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<size_t>(j) * k;
        T acc = T(0);
        for (int kk = 0; kk < k; ++kk)
          acc += a[static_cast<size_t>(kk) * m + i] * brow[kk];
        crow[j] += acc;
      }
    }
  }
}

}  // namespace raw

// Batched matmul on the last two dims. Leading batch dims must match, or one
// side may be a plain 2-D matrix shared across the batch (weights).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  const int ra = a.rank(), rb = b.rank();
  if (ra < 2 || rb < 2) {
    throw DimError("matmul: both operands must have rank >= 2, got " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int am = a.dim(ra - 2), an = a.dim(ra - 1);
  const int bm = b.dim(rb - 2), bn = b.dim(rb - 1);
  const int m = trans_a ? an : am;
  const int ka = trans_a ? am : an;
  const int kb = trans_b ? bn : bm;
  const int n = trans_b ? bm : bn;
  if (ka != kb) {
    throw DimError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                   (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                   (trans_b ? "^T" : ""));
  }
  std::vector<int> abatch(a.shape().begin(), a.shape().end() - 2);
  std::vector<int> bbatch(b.shape().begin(), b.shape().end() - 2);
  const bool a_batched = !abatch.empty();
  const bool b_batched = !bbatch.empty();
  if (a_batched && b_batched && abatch != bbatch) {
    throw DimError("matmul: batch dims disagree, " + shape_str(a.shape()) +
                   " x " + shape_str(b.shape()));
  }
  std::vector<int> batch = a_batched ? abatch : bbatch;
  std::int64_t nbatch = numel_of(batch);

  std::vector<int> out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<size_t>(nbatch) * m * n, T(0));

  const T* ad = a.data().data();
  const T* bd = b.data().data();
  const size_t astride = a_batched ? static_cast<size_t>(am) * an : 0;
  const size_t bstride = b_batched ? static_cast<size_t>(bm) * bn : 0;
  for (std::int64_t q = 0; q < nbatch; ++q) {
    raw::gemm_acc(ad + q * astride, bd + q * bstride,
                  out.data() + static_cast<size_t>(q) * m * n, m, n, ka, trans_a,
                  trans_b);
  }
  cost::add_macs(static_cast<std::uint64_t>(nbatch) * m * n * ka);

  const int k = ka;
  return make_result<T>(
      out_shape, std::move(out), {a, b},
      [m, n, k, nbatch, astride, bstride, trans_a, trans_b, am, an, bm,
       bn](TensorNode<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const T* g = node.grad.data();
        const T* ad = pa.data.data();
        const T* bd = pb.data.data();
        const size_t gstride = static_cast<size_t>(m) * n;
        if (pa.requires_grad) {
          pa.ensure_grad();
          T* ga = pa.grad.data();
          for (std::int64_t q = 0; q < nbatch; ++q) {
            const T* gq = g + q * gstride;
            const T* bq = bd + q * bstride;
            T* gaq = ga + q * astride;
            // dA = dC * op(B)^T   (A not transposed)
            // dA = op(B) * dC^T   (A transposed)
            if (!trans_a) {
              raw::gemm_acc(gq, bq, gaq, m, k, n, false, !trans_b);
            } else {
              raw::gemm_acc(bq, gq, gaq, am, an, trans_b ? bm : bn, trans_b, true);
            }
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          T* gb = pb.grad.data();
          for (std::int64_t q = 0; q < nbatch; ++q) {
            const T* gq = g + q * gstride;
            const T* aq = ad + q * astride;
            T* gbq = gb + q * bstride;
            if (!trans_b) {
              raw::gemm_acc(aq, gq, gbq, k, n, m, !trans_a, false);
            } else {
              raw::gemm_acc(gq, aq, gbq, bm, bn, m, true, trans_a);
            }
          }
        }
      });
}

// y = x * W + b, with W[k,n] shared across leading dims of x[..., k]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
  if (numel_of(new_shape) != x.numel()) {
    throw DimError("reshape: " + shape_str(x.shape()) + " -> " +
                   shape_str(new_shape) + " changes element count");
  }
  std::vector<T> out(x.data());
  return make_result<T>(std::move(new_shape), std::move(out), {x},
                        [](TensorNode<T>& n) {
                          auto& p = *n.parents[0];
                          if (!p.requires_grad) return;
                          p.ensure_grad();
                          for (size_t i = 0; i < n.grad.size(); ++i)
                            p.grad[i] += n.grad[i];
                        });
}

namespace detail_perm {

inline std::vector<std::int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[static_cast<size_t>(i)] = s[i + 1] * shape[i + 1];
  return s;
}

template <typename T>
void permute_copy(const T* src, T* dst, const std::vector<int>& in_shape,
                  const std::vector<int>& perm, bool accumulate_back) {
  // dst index order = permuted axes; accumulate_back scatters dst->src grads
  const size_t r = in_shape.size();
  std::vector<int> out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  auto in_strides = strides_of(in_shape);
  std::int64_t total = numel_of(in_shape);
  std::vector<int> idx(r, 0);
  for (std::int64_t o = 0; o < total; ++o) {
    std::int64_t src_off = 0;
    for (size_t i = 0; i < r; ++i)
      src_off += static_cast<std::int64_t>(idx[i]) * in_strides[static_cast<size_t>(perm[i])];
    if (accumulate_back) {
      dst[src_off] += src[o];
    } else {
      dst[o] = src[src_off];
    }
    for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
}

}  // namespace detail_perm

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> perm) {
  if (static_cast<int>(perm.size()) != x.rank()) {
    throw DimError("permute: axes list length mismatch for " + shape_str(x.shape()));
  }
  std::vector<int> out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = x.dim(perm[i]);
  std::vector<T> out(static_cast<size_t>(x.numel()));
  detail_perm::permute_copy(x.data().data(), out.data(), x.shape(), perm, false);
  auto in_shape = x.shape();
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [in_shape, perm](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        detail_perm::permute_copy(n.grad.data(), p.grad.data(), in_shape, perm, true);
      });
}

// Contiguous slice along one axis.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int dim, int start, int len) {
  const int r = x.rank();
  if (dim < 0) dim += r;
  if (dim < 0 || dim >= r || start < 0 || len <= 0 || start + len > x.dim(dim)) {
    throw DimError("narrow: invalid slice [" + std::to_string(start) + "," +
                   std::to_string(start + len) + ") of dim " + std::to_string(dim) +
                   " in " + shape_str(x.shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= x.dim(i);
  for (int i = dim + 1; i < r; ++i) inner *= x.dim(i);
  const std::int64_t d = x.dim(dim);
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(dim)] = len;
  std::vector<T> out(static_cast<size_t>(outer * len * inner));
  const T* src = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* s = src + (o * d + start) * inner;
    std::copy(s, s + static_cast<std::int64_t>(len) * inner,
              out.begin() + o * len * inner);
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [outer, inner, d, start, len](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          T* dst = p.grad.data() + (o * d + start) * inner;
          const T* g = n.grad.data() + o * len * inner;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * inner; ++i)
            dst[i] += g[i];
        }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int dim) {
  if (parts.empty()) throw DimError("concat: empty input list");
  const int r = parts[0].rank();
  if (dim < 0) dim += r;
  std::vector<int> out_shape = parts[0].shape();
  int total_d = 0;
  for (auto& p : parts) {
    for (int i = 0; i < r; ++i) {
      if (i != dim && p.dim(i) != out_shape[static_cast<size_t>(i)]) {
        throw DimError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                       shape_str(out_shape));
      }
    }
    total_d += p.dim(dim);
  }
  out_shape[static_cast<size_t>(dim)] = total_d;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = dim + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];
  std::vector<T> out(static_cast<size_t>(numel_of(out_shape)));
  std::vector<int> part_d;
  for (auto& p : parts) part_d.push_back(p.dim(dim));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const std::int64_t pd = part_d[pi];
      const T* src = parts[pi].data().data() + o * pd * inner;
      std::copy(src, src + pd * inner,
                out.begin() + (o * total_d + off) * inner);
      off += pd;
    }
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), parts,
      [outer, inner, total_d, part_d](TensorNode<T>& n) {
        std::int64_t off = 0;
        for (size_t pi = 0; pi < n.parents.size(); ++pi) {
          auto& p = *n.parents[pi];
          const std::int64_t pd = part_d[pi];
          if (p.requires_grad) {
            p.ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
              const T* g = n.grad.data() + (o * total_d + off) * inner;
              T* dst = p.grad.data() + o * pd * inner;
              for (std::int64_t i = 0; i < pd * inner; ++i) dst[i] += g[i];
            }
          }
          off += pd;
        }
      });
}

// ---------------------------------------------------------------------------
// normalizations and nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const int d = x.dim(-1);
  if (d == 0) throw DimError("softmax: empty last dim in " + shape_str(x.shape()));
  std::vector<T> out(x.data());
  const size_t rows = out.size() / static_cast<size_t>(d);
  for (size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * d;
    T mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < d; ++j) row[j] /= sum;
  }
  auto keep = out;  // softmax output needed in backward
  return make_result<T>(
      x.shape(), std::move(out), {x},
      [d, rows, y = std::move(keep)](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * d;
          const T* gr = n.grad.data() + r * d;
          T dot = T(0);
          for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
          T* pg = p.grad.data() + r * d;
          for (int j = 0; j < d; ++j) pg[j] += yr[j] * (gr[j] - dot);
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-6)) {
  const int d = x.dim(-1);
  if (d == 0) throw DimError("layer_norm: zero-width last dim");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimError("layer_norm: gain/bias size must equal last dim " +
                   std::to_string(d));
  }
  const size_t rows = static_cast<size_t>(x.numel()) / d;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  std::vector<T> xhat(out.size());
  std::vector<T> inv_sigma(rows);
  const T* xd = x.data().data();
  const T* gd = gain.data().data();
  const T* bd = bias.data().data();
  for (size_t r = 0; r < rows; ++r) {
    const T* row = xd + r * d;
    T mean = T(0);
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      T c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    T is = T(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (int j = 0; j < d; ++j) {
      T h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [d, rows, xh = std::move(xhat), is = std::move(inv_sigma)](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        const T* g = n.grad.data();
        const T* gd = pg.data.data();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * d;
          const T* hr = xh.data() + r * d;
          if (pg.requires_grad || pb.requires_grad) {
            for (int j = 0; j < d; ++j) {
              if (pg.requires_grad) pg.grad[static_cast<size_t>(j)] += gr[j] * hr[j];
              if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += gr[j];
            }
          }
          if (px.requires_grad) {
            T m1 = T(0), m2 = T(0);
            for (int j = 0; j < d; ++j) {
              T dh = gr[j] * gd[j];
              m1 += dh;
              m2 += dh * hr[j];
            }
            m1 /= d;
            m2 /= d;
            T* dst = px.grad.data() + r * d;
            for (int j = 0; j < d; ++j) {
              T dh = gr[j] * gd[j];
              dst[j] += (dh - m1 - hr[j] * m2) * is[r];
            }
          }
        }
      });
}

// GroupNorm over a channel axis; normalization extent is (C/groups) * inner,
// per outer sample per group. Covers both token layouts ([n, C], inner=1)
// and map layouts ([C, H, W], inner=H*W). Affine is per channel.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int channel_dim, int groups,
                     const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
  const int r = x.rank();
  if (channel_dim < 0) channel_dim += r;
  const int c = x.dim(channel_dim);
  if (groups < 1 || c % groups != 0) {
    throw DimError("group_norm: groups " + std::to_string(groups) +
                   " must divide channels " + std::to_string(c));
  }
  if (gain.numel() != c || bias.numel() != c) {
    throw DimError("group_norm: affine params must have size " + std::to_string(c));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < channel_dim; ++i) outer *= x.dim(i);
  for (int i = channel_dim + 1; i < r; ++i) inner *= x.dim(i);
  const int cg = c / groups;
  const std::int64_t ext = static_cast<std::int64_t>(cg) * inner;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  std::vector<T> xhat(out.size());
  std::vector<T> inv_sigma(static_cast<size_t>(outer * groups));
  const T* xd = x.data().data();
  const T* gd = gain.data().data();
  const T* bd = bias.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (int g = 0; g < groups; ++g) {
      const std::int64_t base = (o * c + static_cast<std::int64_t>(g) * cg) * inner;
      T mean = T(0);
      for (std::int64_t i = 0; i < ext; ++i) mean += xd[base + i];
      mean /= static_cast<T>(ext);
      T var = T(0);
      for (std::int64_t i = 0; i < ext; ++i) {
        T ct = xd[base + i] - mean;
        var += ct * ct;
      }
      var /= static_cast<T>(ext);
      T is = T(1) / std::sqrt(var + eps);
      inv_sigma[static_cast<size_t>(o * groups + g)] = is;
      for (std::int64_t i = 0; i < ext; ++i) {
        std::int64_t ch = static_cast<std::int64_t>(g) * cg + i / inner;
        T h = (xd[base + i] - mean) * is;
        xhat[static_cast<size_t>(base + i)] = h;
        out[static_cast<size_t>(base + i)] = h * gd[ch] + bd[ch];
      }
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [outer, groups, cg, inner, c, ext, xh = std::move(xhat),
       is = std::move(inv_sigma)](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        const T* g = n.grad.data();
        const T* gd = pg.data.data();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          for (int gi = 0; gi < groups; ++gi) {
            const std::int64_t base = (o * c + static_cast<std::int64_t>(gi) * cg) * inner;
            if (pg.requires_grad || pb.requires_grad) {
              for (std::int64_t i = 0; i < ext; ++i) {
                std::int64_t ch = static_cast<std::int64_t>(gi) * cg + i / inner;
                if (pg.requires_grad)
                  pg.grad[static_cast<size_t>(ch)] += g[base + i] * xh[static_cast<size_t>(base + i)];
                if (pb.requires_grad) pb.grad[static_cast<size_t>(ch)] += g[base + i];
              }
            }
            if (px.requires_grad) {
              T m1 = T(0), m2 = T(0);
              for (std::int64_t i = 0; i < ext; ++i) {
                std::int64_t ch = static_cast<std::int64_t>(gi) * cg + i / inner;
                T dh = g[base + i] * gd[ch];
                m1 += dh;
                m2 += dh * xh[static_cast<size_t>(base + i)];
              }
              m1 /= static_cast<T>(ext);
              m2 /= static_cast<T>(ext);
              const T isv = is[static_cast<size_t>(o * groups + gi)];
              for (std::int64_t i = 0; i < ext; ++i) {
                std::int64_t ch = static_cast<std::int64_t>(gi) * cg + i / inner;
                T dh = g[base + i] * gd[ch];
                px.grad[static_cast<size_t>(base + i)] +=
                    (dh - m1 - xh[static_cast<size_t>(base + i)] * m2) * isv;
              }
            }
          }
        }
      });
}

// Exact erf-based GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.data());
  for (auto& v : out) {
    double xv = static_cast<double>(v);
    v = static_cast<T>(xv * 0.5 * (1.0 + std::erf(xv / std::sqrt(2.0))));
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double xv = static_cast<double>(p.data[i]);
      double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
      p.grad[i] += n.grad[i] * static_cast<T>(cdf + xv * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions and loss
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_result<T>({1}, {acc}, {x}, [](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += n.grad[0];
  });
}

// mean over all leading dims: x[..., D] -> [D]
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  const int d = x.dim(-1);
  const size_t rows = static_cast<size_t>(x.numel()) / d;
  std::vector<T> out(static_cast<size_t>(d), T(0));
  const T* xd = x.data().data();
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += xd[r * d + j];
  for (auto& v : out) v /= static_cast<T>(rows);
  return make_result<T>({d}, std::move(out), {x}, [d, rows](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T inv = T(1) / static_cast<T>(rows);
    for (size_t r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j)
        p.grad[r * d + j] += n.grad[static_cast<size_t>(j)] * inv;
  });
}

// mean cross-entropy over a batch of logit rows
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimError("cross_entropy: logits must be [B,C]");
  const int bsz = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != bsz) {
    throw DimError("cross_entropy: label count mismatch");
  }
  const T* ld = logits.data().data();
  std::vector<T> probs(static_cast<size_t>(bsz) * c);
  T loss = T(0);
  for (int i = 0; i < bsz; ++i) {
    const T* row = ld + static_cast<size_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      probs[static_cast<size_t>(i) * c + j] = std::exp(row[j] - mx);
      sum += probs[static_cast<size_t>(i) * c + j];
    }
    for (int j = 0; j < c; ++j) probs[static_cast<size_t>(i) * c + j] /= sum;
    loss -= std::log(probs[static_cast<size_t>(i) * c + labels[static_cast<size_t>(i)]] +
                     static_cast<T>(1e-30));
  }
  loss /= static_cast<T>(bsz);
  return make_result<T>(
      {1}, {loss}, {logits},
      [bsz, c, labels, pr = std::move(probs)](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = n.grad[0] / static_cast<T>(bsz);
        for (int i = 0; i < bsz; ++i)
          for (int j = 0; j < c; ++j) {
            T delta = (j == labels[static_cast<size_t>(i)]) ? T(1) : T(0);
            p.grad[static_cast<size_t>(i) * c + j] +=
                g * (pr[static_cast<size_t>(i) * c + j] - delta);
          }
      });
}

// Sum_k w[n,k] * x[n,k,d] -> [n,d]; sampling-weight aggregation.
template <typename T>
Tensor<T> weighted_sum_mid(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 3 || w.rank() != 2 || x.dim(0) != w.dim(0) || x.dim(1) != w.dim(1)) {
    throw DimError("weighted_sum_mid: expected x[n,k,d], w[n,k], got " +
                   shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const int n = x.dim(0), k = x.dim(1), d = x.dim(2);
  std::vector<T> out(static_cast<size_t>(n) * d, T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (int i = 0; i < n; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const T wv = wd[static_cast<size_t>(i) * k + kk];
      const T* xr = xd + (static_cast<size_t>(i) * k + kk) * d;
      T* orow = out.data() + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) orow[j] += wv * xr[j];
    }
  return make_result<T>(
      {n, d}, std::move(out), {x, w}, [n, k, d](TensorNode<T>& node) {
        auto& px = *node.parents[0];
        auto& pw = *node.parents[1];
        const T* g = node.grad.data();
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (int i = 0; i < n; ++i) {
          const T* gr = g + static_cast<size_t>(i) * d;
          for (int kk = 0; kk < k; ++kk) {
            const size_t xoff = (static_cast<size_t>(i) * k + kk) * d;
            if (px.requires_grad) {
              const T wv = pw.data[static_cast<size_t>(i) * k + kk];
              for (int j = 0; j < d; ++j) px.grad[xoff + j] += gr[j] * wv;
            }
            if (pw.requires_grad) {
              T acc = T(0);
              for (int j = 0; j < d; ++j) acc += gr[j] * px.data[xoff + j];
              pw.grad[static_cast<size_t>(i) * k + kk] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// image / sampling ops
// ---------------------------------------------------------------------------

// Bilinear resize, align-corners=false, border clamp. Same-size input is an
// exact identity (and registers no MACs); otherwise 4 MACs per output value.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, int out_h, int out_w) {
  if (img.rank() != 3) throw DimError("bilinear_resize: expected [C,H,W]");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h < 1 || out_w < 1) {
    throw DimError("bilinear_resize: output size must be >= 1, got " +
                   std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  if (out_h == h && out_w == w) {
    std::vector<T> out(img.data());
    return make_result<T>(img.shape(), std::move(out), {img}, [](TensorNode<T>& n) {
      auto& p = *n.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
  }
  struct Tap {
    int i0, i1;
    T t;
  };
  std::vector<Tap> ys(static_cast<size_t>(out_h)), xs(static_cast<size_t>(out_w));
  auto make_tap = [](int o, int out_n, int in_n) {
    double f = (o + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
    int i0 = static_cast<int>(std::floor(f));
    double t = f - i0;
    int i0c = std::clamp(i0, 0, in_n - 1);
    int i1c = std::clamp(i0 + 1, 0, in_n - 1);
    return Tap{i0c, i1c, static_cast<T>(t)};
  };
  for (int y = 0; y < out_h; ++y) ys[static_cast<size_t>(y)] = make_tap(y, out_h, h);
  for (int x = 0; x < out_w; ++x) xs[static_cast<size_t>(x)] = make_tap(x, out_w, w);
  std::vector<T> out(static_cast<size_t>(c) * out_h * out_w);
  const T* src = img.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = src + static_cast<size_t>(ch) * h * w;
    T* oplane = out.data() + static_cast<size_t>(ch) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const Tap& ty = ys[static_cast<size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const Tap& tx = xs[static_cast<size_t>(x)];
        T v00 = plane[ty.i0 * w + tx.i0], v01 = plane[ty.i0 * w + tx.i1];
        T v10 = plane[ty.i1 * w + tx.i0], v11 = plane[ty.i1 * w + tx.i1];
        T top = v00 + tx.t * (v01 - v00);
        T bot = v10 + tx.t * (v11 - v10);
        oplane[y * out_w + x] = top + ty.t * (bot - top);
      }
    }
  }
  cost::add_macs(4ull * c * out_h * out_w);
  return make_result<T>(
      {c, out_h, out_w}, std::move(out), {img},
      [c, h, w, out_h, out_w, ys = std::move(ys), xs = std::move(xs)](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
          T* gplane = p.grad.data() + static_cast<size_t>(ch) * h * w;
          const T* g = n.grad.data() + static_cast<size_t>(ch) * out_h * out_w;
          for (int y = 0; y < out_h; ++y) {
            const auto& ty = ys[static_cast<size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
              const auto& tx = xs[static_cast<size_t>(x)];
              const T gv = g[y * out_w + x];
              gplane[ty.i0 * w + tx.i0] += gv * (T(1) - ty.t) * (T(1) - tx.t);
              gplane[ty.i0 * w + tx.i1] += gv * (T(1) - ty.t) * tx.t;
              gplane[ty.i1 * w + tx.i0] += gv * ty.t * (T(1) - tx.t);
              gplane[ty.i1 * w + tx.i1] += gv * ty.t * tx.t;
            }
          }
        }
      });
}

// Samples value[C,H,W] at P points given in normalized [0,1] coordinates
// (x then y per row); border clamp; differentiable in value and points.
// Pixel centers sit at ((i+0.5)/W, (j+0.5)/H).
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& value, const Tensor<T>& points) {
  if (value.rank() != 3) throw DimError("grid_sample: value must be [C,H,W]");
  if (points.rank() != 2 || points.dim(1) != 2) {
    throw DimError("grid_sample: points must be [P,2], got " +
                   shape_str(points.shape()));
  }
  const int c = value.dim(0), h = value.dim(1), w = value.dim(2);
  const int np = points.dim(0);
  std::vector<T> out(static_cast<size_t>(np) * c);
  const T* vd = value.data().data();
  const T* pd = points.data().data();
  for (int i = 0; i < np; ++i) {
    const double fx = static_cast<double>(pd[2 * i]) * w - 0.5;
    const double fy = static_cast<double>(pd[2 * i + 1]) * h - 0.5;
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const T tx = static_cast<T>(fx - x0);
    const T ty = static_cast<T>(fy - y0);
    const int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
    const int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
    for (int ch = 0; ch < c; ++ch) {
      const T* plane = vd + static_cast<size_t>(ch) * h * w;
      T v00 = plane[y0c * w + x0c], v01 = plane[y0c * w + x1c];
      T v10 = plane[y1c * w + x0c], v11 = plane[y1c * w + x1c];
      T top = v00 + tx * (v01 - v00);
      T bot = v10 + tx * (v11 - v10);
      out[static_cast<size_t>(i) * c + ch] = top + ty * (bot - top);
    }
  }
  cost::add_macs(4ull * np * c);
  return make_result<T>(
      {np, c}, std::move(out), {value, points},
      [c, h, w, np](TensorNode<T>& n) {
        auto& pv = *n.parents[0];
        auto& pp = *n.parents[1];
        const T* vd = pv.data.data();
        const T* pd = pp.data.data();
        if (pv.requires_grad) pv.ensure_grad();
        if (pp.requires_grad) pp.ensure_grad();
        for (int i = 0; i < np; ++i) {
          const double fx = static_cast<double>(pd[2 * i]) * w - 0.5;
          const double fy = static_cast<double>(pd[2 * i + 1]) * h - 0.5;
          const int x0 = static_cast<int>(std::floor(fx));
          const int y0 = static_cast<int>(std::floor(fy));
          const T tx = static_cast<T>(fx - x0);
          const T ty = static_cast<T>(fy - y0);
          const int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
          const int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
          T dfx = T(0), dfy = T(0);
          for (int ch = 0; ch < c; ++ch) {
            const T g = n.grad[static_cast<size_t>(i) * c + ch];
            const T* plane = vd + static_cast<size_t>(ch) * h * w;
            T v00 = plane[y0c * w + x0c], v01 = plane[y0c * w + x1c];
            T v10 = plane[y1c * w + x0c], v11 = plane[y1c * w + x1c];
            if (pv.requires_grad) {
              T* gplane = pv.grad.data() + static_cast<size_t>(ch) * h * w;
              gplane[y0c * w + x0c] += g * (T(1) - ty) * (T(1) - tx);
              gplane[y0c * w + x1c] += g * (T(1) - ty) * tx;
              gplane[y1c * w + x0c] += g * ty * (T(1) - tx);
              gplane[y1c * w + x1c] += g * ty * tx;
            }
            if (pp.requires_grad) {
              // clamped neighbor pairs cancel at borders, zeroing the slope
              dfx += g * ((T(1) - ty) * (v01 - v00) + ty * (v11 - v10));
              dfy += g * ((T(1) - tx) * (v10 - v00) + tx * (v11 - v01));
            }
          }
          if (pp.requires_grad) {
            pp.grad[2 * static_cast<size_t>(i)] += dfx * static_cast<T>(w);
            pp.grad[2 * static_cast<size_t>(i) + 1] += dfy * static_cast<T>(h);
          }
        }
      });
}

// Unfolds x[C,H,W] into rows of kh*kw patches: [out_h*out_w, C*kh*kw].
// Used for patch embedding (stride == k, pad 0) and 3x3 convs (stride 1, pad 1).
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad) {
  if (x.rank() != 3) throw DimError("im2col: expected [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw DimError("im2col: kernel larger than padded input");
  const int cols = c * kh * kw;
  std::vector<T> out(static_cast<size_t>(oh) * ow * cols, T(0));
  const T* xd = x.data().data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* row = out.data() + (static_cast<size_t>(oy) * ow + ox) * cols;
      for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
              row[(ch * kh + ky) * kw + kx] =
                  xd[(static_cast<size_t>(ch) * h + iy) * w + ix];
            }
          }
        }
      }
    }
  }
  return make_result<T>(
      {oh * ow, cols}, std::move(out), {x},
      [c, h, w, kh, kw, stride, pad, oh, ow, cols](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T* row = n.grad.data() + (static_cast<size_t>(oy) * ow + ox) * cols;
            for (int ch = 0; ch < c; ++ch) {
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                    p.grad[(static_cast<size_t>(ch) * h + iy) * w + ix] +=
                        row[(ch * kh + ky) * kw + kx];
                  }
                }
              }
            }
          }
        }
      });
}

// 3x3 same-padding convolution expressed as im2col + matmul.
// weight is stored as [C_in*9, C_out]; x is [C_in,H,W]; result [C_out,H,W].
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const int h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(1);
  if (weight.dim(0) != x.dim(0) * 9) {
    throw DimError("conv3x3: weight rows " + std::to_string(weight.dim(0)) +
                   " do not match input channels " + std::to_string(x.dim(0)));
  }
  Tensor<T> cols = im2col(x, 3, 3, 1, 1);               // [H*W, C_in*9]
  Tensor<T> y = add_bias(matmul(cols, weight), bias);   // [H*W, C_out]
  Tensor<T> map = permute(reshape(y, {h, w, cout}), {2, 0, 1});
  return map;
}

}  // namespace ops
}  // namespace piip
