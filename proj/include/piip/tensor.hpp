#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "piip/common.hpp"

namespace piip {

namespace detail {
inline thread_local bool g_grad_enabled = true;
}

// Disables graph recording for the enclosed region (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

// Shared-storage dense tensor participating in reverse-mode autodiff.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(numel_of(n->shape)), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    return node_->shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  T item() const {
    if (numel() != 1) throw DimError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Reverse pass from a scalar. The tape (topological order) is built once
  // and consumed once; backward_fn handles are released as they run.
  void backward() const;

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of the forward graph, replayed once in reverse.
template <typename T>
struct GradTape {
  // shared ownership: replay drops parent links as it goes, so the tape must
  // keep every recorded node alive until the reverse pass is done
  std::vector<std::shared_ptr<TensorNode<T>>> order;

  static GradTape build(const std::shared_ptr<TensorNode<T>>& root) {
    GradTape tape;
    std::unordered_set<TensorNode<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<std::shared_ptr<TensorNode<T>>, size_t>> stack;
    stack.push_back({root, 0});
    seen.insert(root.get());
    while (!stack.empty()) {
      TensorNode<T>* node = stack.back().first.get();
      const size_t idx = stack.back().second;
      if (idx < node->parents.size()) {
        stack.back().second = idx + 1;  // advance before push_back reallocates
        const std::shared_ptr<TensorNode<T>>& p = node->parents[idx];
        if (p->requires_grad && !seen.count(p.get())) {
          seen.insert(p.get());
          stack.push_back({p, 0});
        }
      } else {
        tape.order.push_back(stack.back().first);
        stack.pop_back();
      }
    }
    return tape;
  }
};

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw DimError("backward() requires a scalar loss");
  if (!std::isfinite(static_cast<double>(node_->data[0]))) {
    throw NumericError("backward() called on non-finite loss");
  }
  auto tape = GradTape<T>::build(node_);
  node_->ensure_grad();
  node_->grad[0] = T(1);
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    TensorNode<T>* n = it->get();
    if (n->backward_fn) {
      n->backward_fn(*n);
      n->backward_fn = nullptr;  // consumed exactly once
      n->parents.clear();
    }
  }
}

namespace detail {

template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<T> data,
                      std::vector<Tensor<T>> parents,
                      std::function<void(TensorNode<T>&)> bw) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (g_grad_enabled) {
    for (auto& p : parents) {
      if (p.node()->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (n->requires_grad) {
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward_fn = std::move(bw);
    }
  }
  return Tensor<T>(std::move(n));
}

}  // namespace detail

// Deterministic truncated-normal fill (|x| <= 2*std), used for weight init.
template <typename T, typename Rng>
void fill_trunc_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) {
    double x;
    do {
      x = dist(rng);
    } while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace piip
