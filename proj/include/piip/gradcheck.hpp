#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "piip/tensor.hpp"

namespace piip {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double analytic = 0.0, numeric = 0.0;
  int checked = 0;

  bool ok(double tol) const { return max_rel_err < tol; }
};

// Compares reverse-mode gradients of `loss_fn` against central differences on
// a sample of coordinates per named tensor. Meant for T = double.
template <typename T>
GradCheckResult grad_check(
    const std::function<Tensor<T>()>& loss_fn,
    std::vector<std::pair<std::string, Tensor<T>>>& params,
    double h = 1e-5, int samples_per_tensor = 200, std::uint64_t seed = 1234) {
  for (auto& [name, t] : params) t.zero_grad();
  Tensor<T> loss = loss_fn();
  loss.backward();

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (auto& [name, t] : params) {
    const int n = t.numel();
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    if (n > samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<size_t>(samples_per_tensor));
    }
    for (int i : idx) {
      const T saved = t.data()[static_cast<size_t>(i)];
      T* slot = &t.data()[static_cast<size_t>(i)];
      *slot = saved + static_cast<T>(h);
      double up;
      {
        NoGradGuard guard;
        up = static_cast<double>(loss_fn().item());
      }
      *slot = saved - static_cast<T>(h);
      double down;
      {
        NoGradGuard guard;
        down = static_cast<double>(loss_fn().item());
      }
      *slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(t.grad()[static_cast<size_t>(i)]);
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

// Kicks every parameter off its symmetric initialization so gradients flow
// through gates and deformable offsets land away from interpolation kinks.
template <typename T>
void randomize_params(std::vector<std::pair<std::string, Tensor<T>>>& params,
                      double std_dev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std_dev);
  for (auto& [name, t] : params) {
    for (int i = 0; i < t.numel(); ++i) {
      t.data()[static_cast<size_t>(i)] += static_cast<T>(dist(rng));
    }
  }
}

}  // namespace piip
