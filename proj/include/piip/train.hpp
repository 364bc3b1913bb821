#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "piip/configfile.hpp"
#include "piip/model.hpp"

namespace piip {

template <typename T>
struct Sample {
  Tensor<T> image;  // [3, res, res]
  int label = 0;
};

// Synthetic 8-class texture set: 4 orientations x 2 spatial frequencies of a
// sine grating with random phase, mild amplitude jitter and pixel noise. The
// random phase removes any fixed pixel-to-class correlation, so a linear
// classifier on raw pixels stays near chance while spectral features solve it.
template <typename T>
std::vector<Sample<T>> make_grating_dataset(int count, int res, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.15);
  std::vector<Sample<T>> data;
  data.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int label = i % 8;  // balanced
    const double angle = (label % 4) * (3.14159265358979323846 / 4.0);
    const double freq = (label < 4 ? 2.0 : 5.0) * 2.0 * 3.14159265358979323846 / res;
    const double phase = unif(rng) * 2.0 * 3.14159265358979323846;
    const double amp = 0.8 + 0.4 * unif(rng);
    const double cx = std::cos(angle), sx = std::sin(angle);
    Tensor<T> img = Tensor<T>::zeros({3, res, res});
    T* d = img.data().data();
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        const double v = amp * std::sin(freq * (cx * x + sx * y) + phase);
        for (int c = 0; c < 3; ++c) {
          d[(static_cast<size_t>(c) * res + y) * res + x] =
              static_cast<T>(v + noise(rng));
        }
      }
    }
    data.push_back({img, label});
  }
  return data;
}

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;  // one buffer per registered parameter
};

template <typename T>
void sgd_step(std::vector<std::pair<std::string, Tensor<T>>>& params,
              SgdState<T>& state, double lr, double momentum) {
  if (state.velocity.empty()) {
    for (auto& [name, t] : params)
      state.velocity.emplace_back(static_cast<size_t>(t.numel()), T(0));
  }
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& t = params[pi].second;
    auto& vel = state.velocity[pi];
    const auto& g = t.grad();
    for (size_t i = 0; i < vel.size(); ++i) {
      vel[i] = static_cast<T>(momentum) * vel[i] + g[i];
      t.data()[i] -= static_cast<T>(lr) * vel[i];
    }
  }
}

inline double cosine_lr(double base, int epoch, int total_epochs) {
  if (total_epochs <= 1) return base;
  const double t = static_cast<double>(epoch) / (total_epochs - 1);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <typename T>
int predict(const Model<T>& model, const Tensor<T>& image) {
  NoGradGuard guard;
  Tensor<T> logits = forward(model, image).output;
  const auto& d = logits.data();
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

template <typename T>
double accuracy(const Model<T>& model, const std::vector<Sample<T>>& data) {
  if (data.empty()) return 0.0;
  int hits = 0;
  for (const auto& s : data) hits += predict(model, s.image) == s.label ? 1 : 0;
  return static_cast<double>(hits) / data.size();
}

struct EpochMetrics {
  int epoch = 0;
  double train_acc = 0, test_acc = 0, loss = 0, lr = 0;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  double final_train_acc = 0, final_test_acc = 0;

  std::string metrics_csv() const {
    std::ostringstream out;
    out << "epoch,train_acc,test_acc,loss,lr\n";
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.train_acc << ',' << e.test_acc << ',' << e.loss
          << ',' << e.lr << '\n';
    }
    return out.str();
  }
};

// Mini-batch SGD with momentum and a cosine learning-rate schedule. The
// per-sample graphs of one batch are joined through a stacked logits tensor.
template <typename T>
TrainReport train_toy(Model<T>& model, const std::vector<Sample<T>>& train_data,
                      const std::vector<Sample<T>>& test_data, const TrainConfig& tc,
                      bool verbose = false, std::ostream* log = nullptr) {
  std::mt19937_64 rng(tc.seed);
  SgdState<T> state;
  TrainReport report;
  std::vector<int> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = cosine_lr(tc.lr, epoch, tc.epochs);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int batches = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(tc.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
      std::vector<Tensor<T>> logit_rows;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        const auto& s = train_data[static_cast<size_t>(order[i])];
        Tensor<T> logits = forward(model, s.image).output;
        logit_rows.push_back(ops::reshape(logits, {1, static_cast<int>(logits.numel())}));
        labels.push_back(s.label);
      }
      Tensor<T> batch_logits = logit_rows.size() == 1
                                   ? logit_rows[0]
                                   : ops::concat(logit_rows, 0);
      Tensor<T> loss = ops::cross_entropy_mean(batch_logits, labels);
      model.zero_grad();
      loss.backward();
      sgd_step(model.params, state, lr, tc.momentum);
      loss_sum += static_cast<double>(loss.item());
      ++batches;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.loss = batches > 0 ? loss_sum / batches : 0.0;
    em.lr = lr;
    em.train_acc = accuracy(model, train_data);
    em.test_acc = accuracy(model, test_data);
    report.epochs.push_back(em);
    if (verbose && log) {
      *log << "epoch " << epoch << "  loss " << em.loss << "  train_acc "
           << em.train_acc << "  test_acc " << em.test_acc << "  lr " << em.lr
           << "\n";
    }
  }
  if (!report.epochs.empty()) {
    report.final_train_acc = report.epochs.back().train_acc;
    report.final_test_acc = report.epochs.back().test_acc;
  }
  return report;
}

struct BaselineResult {
  double train_acc = 0, test_acc = 0;
};

// Multinomial logistic regression on raw pixels; the comparison baseline.
// With far more pixels than samples it can shatter the training set, so the
// honest comparison is held-out accuracy, where random grating phases leave a
// linear pixel model near chance.
template <typename T>
BaselineResult logistic_baseline(const std::vector<Sample<T>>& data,
                                 const std::vector<Sample<T>>& test, int classes,
                                 int epochs, double lr, std::uint64_t seed) {
  if (data.empty()) return {};
  const int dim = static_cast<int>(data[0].image.numel());
  std::mt19937_64 rng(seed);
  Tensor<T> w = Tensor<T>::zeros({dim, classes}, true);
  fill_trunc_normal(w, 0.01, rng);
  Tensor<T> b = Tensor<T>::zeros({classes}, true);
  std::vector<std::pair<std::string, Tensor<T>>> params = {{"w", w}, {"b", b}};
  SgdState<T> state;
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += 32) {
      const size_t end = std::min(order.size(), start + 32);
      std::vector<Tensor<T>> rows;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        const auto& s = data[static_cast<size_t>(order[i])];
        rows.push_back(ops::reshape(s.image, {1, dim}));
        labels.push_back(s.label);
      }
      Tensor<T> x = rows.size() == 1 ? rows[0] : ops::concat(rows, 0);
      Tensor<T> loss = ops::cross_entropy_mean(ops::linear(x, w, b), labels);
      for (auto& [name, t] : params) t.zero_grad();
      loss.backward();
      sgd_step(params, state, cosine_lr(lr, epoch, epochs), 0.9);
    }
  }
  NoGradGuard guard;
  auto measure = [&](const std::vector<Sample<T>>& set) {
    if (set.empty()) return 0.0;
    int hits = 0;
    for (const auto& s : set) {
      Tensor<T> logits = ops::linear(ops::reshape(s.image, {1, dim}), w, b);
      const auto& d = logits.data();
      const int pred = static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
      hits += pred == s.label ? 1 : 0;
    }
    return static_cast<double>(hits) / set.size();
  };
  return {measure(data), measure(test)};
}

// The classification model used by the toy trainer: the micro preset switched
// to per-branch classification heads with mean token pooling.
inline PiipConfig toy_config() {
  PiipConfig cfg = preset("piip-micro");
  cfg.name = "piip-micro-toy";
  cfg.mode = RunMode::kClassifyFinetune;
  cfg.merge_subset.clear();
  cfg.num_classes = 8;
  validate(cfg);
  return cfg;
}

}  // namespace piip
