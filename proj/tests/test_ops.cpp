#include <cmath>
#include <random>

#include <doctest.h>

#include "piip/gradcheck.hpp"
#include "piip/ops.hpp"

using piip::Tensor;
namespace ops = piip::ops;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng,
                             bool requires_grad = true, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// reference triple-loop product with optional transposes, one batch
void naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                  std::vector<double>& c, int m, int n, int k, bool ta, bool tb) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int p = 0; p < k; ++p) {
        const double av = ta ? a[static_cast<size_t>(p) * m + i]
                             : a[static_cast<size_t>(i) * k + p];
        const double bv = tb ? b[static_cast<size_t>(j) * k + p]
                             : b[static_cast<size_t>(p) * n + j];
        acc += av * bv;
      }
      c[static_cast<size_t>(i) * n + j] = acc;
    }
  }
}

double check_grads(const std::function<Tensor<double>()>& loss,
                   std::vector<std::pair<std::string, Tensor<double>>> params) {
  auto r = piip::grad_check<double>(loss, params, 1e-6, 400, 99);
  return r.max_rel_err;
}

}  // namespace

TEST_CASE("matmul matches the triple-loop oracle for all transpose modes") {
  std::mt19937_64 rng(1);
  const int m = 5, n = 4, k = 3;
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tensor<double> a = random_tensor(ta ? std::vector<int>{k, m} : std::vector<int>{m, k}, rng);
      Tensor<double> b = random_tensor(tb ? std::vector<int>{n, k} : std::vector<int>{k, n}, rng);
      Tensor<double> c = ops::matmul(a, b, ta, tb);
      std::vector<double> want(static_cast<size_t>(m) * n);
      naive_matmul(a.data(), b.data(), want, m, n, k, ta, tb);
      for (size_t i = 0; i < want.size(); ++i) {
        CHECK(c.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("batched matmul broadcasts a 2-D operand over the batch") {
  std::mt19937_64 rng(2);
  Tensor<double> a = random_tensor({2, 3, 4, 5}, rng);
  Tensor<double> b = random_tensor({5, 6}, rng);
  Tensor<double> c = ops::matmul(a, b);
  REQUIRE(c.shape() == std::vector<int>{2, 3, 4, 6});
  for (int q = 0; q < 6; ++q) {
    std::vector<double> ab(a.data().begin() + q * 20, a.data().begin() + (q + 1) * 20);
    std::vector<double> want(24);
    naive_matmul(ab, b.data(), want, 4, 6, 5, false, false);
    for (size_t i = 0; i < want.size(); ++i) {
      CHECK(c.data()[static_cast<size_t>(q) * 24 + i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul gradients for every transpose mode") {
  std::mt19937_64 rng(3);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tensor<double> a = random_tensor(ta ? std::vector<int>{3, 4} : std::vector<int>{4, 3}, rng);
      Tensor<double> b = random_tensor(tb ? std::vector<int>{5, 3} : std::vector<int>{3, 5}, rng);
      auto loss = [&] {
        Tensor<double> c = ops::matmul(a, b, ta, tb);
        return ops::sum_all(ops::mul(c, c));
      };
      CHECK(check_grads(loss, {{"a", a}, {"b", b}}) < 1e-7);
    }
  }
}

TEST_CASE("batched matmul gradient with broadcast side") {
  std::mt19937_64 rng(4);
  Tensor<double> a = random_tensor({3, 2, 4}, rng);
  Tensor<double> b = random_tensor({4, 5}, rng);
  auto loss = [&] {
    Tensor<double> c = ops::matmul(a, b);
    return ops::sum_all(ops::mul(c, c));
  };
  CHECK(check_grads(loss, {{"a", a}, {"b", b}}) < 1e-7);
}

TEST_CASE("layer_norm matches the closed form") {
  Tensor<double> x = Tensor<double>::from_data({1, 4}, {1.0, 2.0, 3.0, 4.0});
  Tensor<double> g = Tensor<double>::full({4}, 2.0);
  Tensor<double> b = Tensor<double>::full({4}, 0.5);
  Tensor<double> y = ops::layer_norm(x, g, b);
  const double mean = 2.5, var = 1.25;  // population statistics
  for (int i = 0; i < 4; ++i) {
    const double want = 2.0 * ((i + 1) - mean) / std::sqrt(var + 1e-6) + 0.5;
    CHECK(y.data()[static_cast<size_t>(i)] == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("softmax rows are normalized and match exp/sum") {
  Tensor<double> x = Tensor<double>::from_data({2, 3}, {0.1, 1.2, -0.4, 5.0, 5.0, 5.0});
  Tensor<double> y = ops::softmax_lastdim(x);
  for (int r = 0; r < 2; ++r) {
    double sum = 0;
    for (int c = 0; c < 3; ++c) sum += y.data()[static_cast<size_t>(r) * 3 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  double z = std::exp(0.1) + std::exp(1.2) + std::exp(-0.4);
  CHECK(y.data()[0] == doctest::Approx(std::exp(0.1) / z).epsilon(1e-12));
  CHECK(y.data()[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("gelu agrees with the erf closed form") {
  Tensor<double> x = Tensor<double>::from_data({3}, {-1.0, 0.0, 1.0});
  Tensor<double> y = ops::gelu(x);
  auto ref = [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };
  CHECK(y.data()[0] == doctest::Approx(ref(-1.0)).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(0.0));
  CHECK(y.data()[2] == doctest::Approx(ref(1.0)).epsilon(1e-12));
}

TEST_CASE("bilinear_resize 2x2 -> 4x4 matches hand-computed taps") {
  Tensor<double> img = Tensor<double>::from_data({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  Tensor<double> up = ops::bilinear_resize(img, 4, 4);
  // align-corners=false: source coord = (i + 0.5) / 2 - 0.5 -> {-0.25, 0.25, 0.75, 1.25}
  const std::vector<double> want = {
      0.0, 0.25, 0.75, 1.0,
      0.5, 0.75, 1.25, 1.5,
      1.5, 1.75, 2.25, 2.5,
      2.0, 2.25, 2.75, 3.0};
  REQUIRE(up.numel() == 16);
  for (size_t i = 0; i < want.size(); ++i) {
    CHECK(up.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("bilinear_resize to the same size is the identity") {
  std::mt19937_64 rng(5);
  Tensor<double> img = random_tensor({2, 3, 3}, rng, false);
  Tensor<double> same = ops::bilinear_resize(img, 3, 3);
  for (size_t i = 0; i < img.data().size(); ++i) {
    CHECK(same.data()[i] == img.data()[i]);
  }
}

TEST_CASE("grid_sample_bilinear matches a four-neighbor oracle") {
  std::mt19937_64 rng(6);
  Tensor<double> value = random_tensor({2, 3, 4}, rng, false);
  const int h = 3, w = 4;
  Tensor<double> pts = Tensor<double>::from_data({2, 2}, {0.37, 0.62, 0.91, 0.13});
  Tensor<double> out = ops::grid_sample_bilinear(value, pts);
  for (int i = 0; i < 2; ++i) {
    const double fx = pts.data()[static_cast<size_t>(i) * 2] * w - 0.5;
    const double fy = pts.data()[static_cast<size_t>(i) * 2 + 1] * h - 0.5;
    const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    const double tx = fx - x0, ty = fy - y0;
    auto at = [&](int c, int y, int x) {
      y = std::clamp(y, 0, h - 1);
      x = std::clamp(x, 0, w - 1);
      return value.data()[(static_cast<size_t>(c) * h + y) * w + x];
    };
    for (int c = 0; c < 2; ++c) {
      const double top = at(c, y0, x0) * (1 - tx) + at(c, y0, x0 + 1) * tx;
      const double bot = at(c, y0 + 1, x0) * (1 - tx) + at(c, y0 + 1, x0 + 1) * tx;
      const double want = top * (1 - ty) + bot * ty;
      CHECK(out.data()[static_cast<size_t>(i) * 2 + c] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv3x3 matches a naive six-loop convolution") {
  std::mt19937_64 rng(7);
  const int cin = 3, cout = 2, h = 4, w = 5;
  Tensor<double> x = random_tensor({cin, h, w}, rng, false);
  Tensor<double> wt = random_tensor({cin * 9, cout}, rng, false);
  Tensor<double> bias = random_tensor({cout}, rng, false);
  Tensor<double> y = ops::conv3x3(x, wt, bias);
  REQUIRE(y.shape() == std::vector<int>{cout, h, w});
  for (int oc = 0; oc < cout; ++oc) {
    for (int oy = 0; oy < h; ++oy) {
      for (int ox = 0; ox < w; ++ox) {
        double acc = bias.data()[static_cast<size_t>(oc)];
        for (int ic = 0; ic < cin; ++ic) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              // im2col column order: channel-major, then kernel row, column
              const size_t col = (static_cast<size_t>(ic) * 3 + ky) * 3 + kx;
              acc += x.data()[(static_cast<size_t>(ic) * h + iy) * w + ix] *
                     wt.data()[col * cout + oc];
            }
          }
        }
        CHECK(y.data()[(static_cast<size_t>(oc) * h + oy) * w + ox] ==
              doctest::Approx(acc).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("gradients of the remaining primitives") {
  std::mt19937_64 rng(8);
  Tensor<double> x = random_tensor({3, 4}, rng);
  Tensor<double> g4 = random_tensor({4}, rng);
  Tensor<double> b4 = random_tensor({4}, rng);

  SUBCASE("add_bias and mul_gate") {
    auto loss = [&] {
      Tensor<double> y = ops::mul_gate(ops::add_bias(x, b4), g4);
      return ops::sum_all(ops::mul(y, y));
    };
    CHECK(check_grads(loss, {{"x", x}, {"b", b4}, {"g", g4}}) < 1e-7);
  }
  SUBCASE("layer_norm") {
    auto loss = [&] {
      Tensor<double> y = ops::layer_norm(x, g4, b4);
      return ops::sum_all(ops::mul(y, ops::gelu(y)));
    };
    CHECK(check_grads(loss, {{"x", x}, {"g", g4}, {"b", b4}}) < 1e-6);
  }
  SUBCASE("group_norm over channel maps") {
    Tensor<double> img = random_tensor({4, 3, 3}, rng);
    Tensor<double> gg = random_tensor({4}, rng);
    Tensor<double> gb = random_tensor({4}, rng);
    auto loss = [&] {
      Tensor<double> y = ops::group_norm(img, 0, 2, gg, gb);
      return ops::sum_all(ops::mul(y, y));
    };
    CHECK(check_grads(loss, {{"img", img}, {"g", gg}, {"b", gb}}) < 1e-6);
  }
  SUBCASE("softmax and cross entropy") {
    auto loss = [&] { return ops::cross_entropy_mean(x, {1, 3, 0}); };
    CHECK(check_grads(loss, {{"x", x}}) < 1e-7);
  }
  SUBCASE("permute, narrow, concat, reshape") {
    Tensor<double> y = random_tensor({2, 3, 4}, rng);
    auto loss = [&] {
      Tensor<double> p = ops::permute(y, {2, 0, 1});        // [4,2,3]
      Tensor<double> n = ops::narrow(p, 0, 1, 2);           // [2,2,3]
      Tensor<double> c = ops::concat<double>({n, n}, 2);    // [2,2,6]
      Tensor<double> r = ops::reshape(c, {4, 6});
      return ops::sum_all(ops::mul(r, r));
    };
    CHECK(check_grads(loss, {{"y", y}}) < 1e-7);
  }
  SUBCASE("mean_rows and weighted_sum_mid") {
    Tensor<double> v = random_tensor({3, 2, 5}, rng);
    Tensor<double> w = random_tensor({3, 2}, rng);
    auto loss = [&] {
      Tensor<double> s = ops::weighted_sum_mid(v, w);  // [3,5]
      Tensor<double> mr = ops::mean_rows(s);           // [5]
      return ops::sum_all(ops::mul(mr, mr));
    };
    CHECK(check_grads(loss, {{"v", v}, {"w", w}}) < 1e-7);
  }
  SUBCASE("bilinear_resize") {
    Tensor<double> img = random_tensor({2, 3, 3}, rng);
    auto loss = [&] {
      Tensor<double> up = ops::bilinear_resize(img, 5, 4);
      return ops::sum_all(ops::mul(up, up));
    };
    CHECK(check_grads(loss, {{"img", img}}) < 1e-7);
  }
  SUBCASE("grid_sample value and point gradients") {
    Tensor<double> value = random_tensor({2, 4, 4}, rng);
    // keep points off exact pixel-center kinks, where the bilinear surface
    // is not differentiable and finite differences disagree
    Tensor<double> pts = Tensor<double>::from_data({3, 2},
        {0.31, 0.44, 0.72, 0.18, 0.55, 0.83}, true);
    auto loss = [&] {
      Tensor<double> s = ops::grid_sample_bilinear(value, pts);
      return ops::sum_all(ops::mul(s, s));
    };
    CHECK(check_grads(loss, {{"value", value}, {"pts", pts}}) < 1e-6);
  }
  SUBCASE("im2col and conv3x3") {
    Tensor<double> img = random_tensor({2, 3, 3}, rng);
    Tensor<double> wt = random_tensor({18, 2}, rng);
    Tensor<double> bias = random_tensor({2}, rng);
    auto loss = [&] {
      Tensor<double> y = ops::conv3x3(img, wt, bias);
      return ops::sum_all(ops::mul(y, y));
    };
    CHECK(check_grads(loss, {{"img", img}, {"wt", wt}, {"bias", bias}}) < 1e-6);
  }
}

TEST_CASE("group_norm with one group equals layer_norm over the row") {
  std::mt19937_64 rng(9);
  Tensor<double> x = random_tensor({3, 6}, rng, false);
  Tensor<double> g = Tensor<double>::full({6}, 1.0);
  Tensor<double> b = Tensor<double>::zeros({6});
  Tensor<double> gn = ops::group_norm(x, 1, 1, g, b);
  Tensor<double> ln = ops::layer_norm(x, g, b);
  for (size_t i = 0; i < gn.data().size(); ++i) {
    CHECK(gn.data()[i] == doctest::Approx(ln.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("backward rejects non-scalar and non-finite losses") {
  Tensor<double> x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(x.backward(), piip::DimError);
  Tensor<double> inf = Tensor<double>::from_data({1}, {INFINITY}, true);
  CHECK_THROWS_AS(inf.backward(), piip::NumericError);
}
