#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "g2aps/common/rng.hpp"
#include "g2aps/nn/ops.hpp"
#include "g2aps/nn/optim.hpp"
#include "g2aps/nn/tensor.hpp"

using namespace g2aps;
using namespace g2aps::nn;

namespace {

std::vector<float> randn(std::size_t n, Rng& rng, float scale = 1.0f) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal()) * scale;
  return v;
}

// Fixed random projection of any tensor to a scalar, so every output
// element contributes to the checked gradient.
Tensor project(const Tensor& y, const std::vector<float>& w) {
  const int n = static_cast<int>(y.numel());
  const Tensor flat = reshape(y, {1, n});
  const Tensor wt = Tensor::from({1, n}, w);
  return linear(flat, wt, Tensor::from({1}, {0.0f}));
}

// Float32 central differences on every input element; returns the
// norm-wise relative error of the analytic gradient.
double gradient_error(Tensor& x, const std::function<Tensor()>& f, float h = 1e-2f) {
  x.zero_grad();
  f().backward();
  const std::vector<float> analytic(x.grad().begin(), x.grad().end());
  REQUIRE(analytic.size() == x.numel());
  double diff = 0, norm_a = 0, norm_f = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float v = x.mutable_values()[i];
    x.mutable_values()[i] = v + h;
    double up, down;
    {
      NoGradGuard g;
      up = f().item();
      x.mutable_values()[i] = v - h;
      down = f().item();
    }
    x.mutable_values()[i] = v;
    const double fd = (up - down) / (2.0 * h);
    diff += (fd - analytic[i]) * (fd - analytic[i]);
    norm_a += analytic[i] * analytic[i];
    norm_f += fd * fd;
  }
  const double scale = std::sqrt(std::max(norm_a, norm_f));
  return scale == 0 ? 0 : std::sqrt(diff) / scale;
}

}  // namespace

TEST_CASE("conv2d forward against direct summation") {
  Rng rng(1);
  const Tensor x = Tensor::from({2, 3, 6, 5}, randn(2 * 3 * 6 * 5, rng));
  const Tensor w = Tensor::from({4, 3, 3, 3}, randn(4 * 3 * 3 * 3, rng));
  const Tensor b = Tensor::from({4}, randn(4, rng));
  const Tensor y = conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == Shape{2, 4, 3, 3});
  for (int n = 0; n < 2; ++n) {
    for (int o = 0; o < 4; ++o) {
      for (int oy = 0; oy < 3; ++oy) {
        for (int ox = 0; ox < 3; ++ox) {
          double s = b.values()[static_cast<std::size_t>(o)];
          for (int c = 0; c < 3; ++c) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                s += x.values()[static_cast<std::size_t>(((n * 3 + c) * 6 + iy) * 5 + ix)] *
                     w.values()[static_cast<std::size_t>(((o * 3 + c) * 3 + ky) * 3 + kx)];
              }
            }
          }
          CHECK(y.values()[static_cast<std::size_t>(((n * 4 + o) * 3 + oy) * 3 + ox)] == doctest::Approx(s).epsilon(1e-5));
        }
      }
    }
  }
}

TEST_CASE("op gradients match finite differences") {
  Rng rng(7);
  SUBCASE("conv2d input, weight and bias") {
    Tensor x = Tensor::from({2, 2, 5, 5}, randn(100, rng), true);
    Tensor w = Tensor::from({3, 2, 3, 3}, randn(54, rng, 0.5f), true);
    Tensor b = Tensor::from({3}, randn(3, rng), true);
    const auto pw = randn(2 * 3 * 3 * 3, rng);
    auto f = [&] { return project(conv2d(x, w, b, 2, 1), pw); };
    CHECK(gradient_error(x, f) < 1e-2);
    CHECK(gradient_error(w, f) < 1e-2);
    CHECK(gradient_error(b, f) < 1e-2);
  }
  SUBCASE("max_pool2d") {
    Tensor x = Tensor::from({1, 2, 6, 6}, randn(72, rng), true);
    const auto pw = randn(2 * 3 * 3, rng);
    CHECK(gradient_error(x, [&] { return project(max_pool2d(x, 3, 2, 1), pw); }, 1e-3f) < 1e-2);
  }
  SUBCASE("relu, add, scale") {
    Tensor a = Tensor::from({3, 4}, randn(12, rng), true);
    Tensor b = Tensor::from({3, 4}, randn(12, rng), true);
    const auto pw = randn(12, rng);
    auto f = [&] { return project(scale(relu(add(a, b)), 1.5f), pw); };
    CHECK(gradient_error(a, f, 1e-3f) < 1e-2);
    CHECK(gradient_error(b, f, 1e-3f) < 1e-2);
  }
  SUBCASE("linear") {
    Tensor x = Tensor::from({4, 5}, randn(20, rng), true);
    Tensor w = Tensor::from({3, 5}, randn(15, rng), true);
    Tensor b = Tensor::from({3}, randn(3, rng), true);
    const auto pw = randn(12, rng);
    auto f = [&] { return project(linear(x, w, b), pw); };
    CHECK(gradient_error(x, f) < 1e-2);
    CHECK(gradient_error(w, f) < 1e-2);
    CHECK(gradient_error(b, f) < 1e-2);
  }
  SUBCASE("global and grid average pooling") {
    Tensor x = Tensor::from({2, 3, 7, 7}, randn(294, rng), true);
    const auto p1 = randn(6, rng), p2 = randn(2 * 3 * 4, rng), p3 = randn(2 * 3 * 9, rng);
    CHECK(gradient_error(x, [&] { return project(global_avg_pool(x), p1); }) < 1e-2);
    CHECK(gradient_error(x, [&] { return project(grid_avg_pool(x, 2), p2); }) < 1e-2);
    CHECK(gradient_error(x, [&] { return project(grid_avg_pool(x, 3), p3); }) < 1e-2);
  }
  SUBCASE("l2_normalize_rows") {
    Tensor x = Tensor::from({3, 4}, randn(12, rng), true);
    const auto pw = randn(12, rng);
    CHECK(gradient_error(x, [&] { return project(l2_normalize_rows(x), pw); }, 1e-3f) < 1e-2);
  }
  SUBCASE("concat_rows, index_rows, gather_flat") {
    Tensor a = Tensor::from({2, 3}, randn(6, rng), true);
    Tensor b = Tensor::from({3, 3}, randn(9, rng), true);
    const std::vector<int> rows{4, 0, 0, 2};
    const std::vector<int> flat{1, 5, 5, 8};
    const auto p1 = randn(12, rng), p2 = randn(4, rng);
    auto f1 = [&] { return project(index_rows(concat_rows({a, b}), rows), p1); };
    auto f2 = [&] { return project(gather_flat(b, flat), p2); };
    CHECK(gradient_error(a, f1) < 1e-2);
    CHECK(gradient_error(b, f1) < 1e-2);
    CHECK(gradient_error(b, f2) < 1e-2);
  }
  SUBCASE("softmax_cross_entropy, bce_with_logits, smooth_l1") {
    Tensor z = Tensor::from({4, 3}, randn(12, rng), true);
    const std::vector<int> t{2, -1, 0, 1};
    CHECK(gradient_error(z, [&] { return softmax_cross_entropy(z, t); }) < 1e-2);
    const std::vector<int> idx{0, 3, 7, 11};
    const std::vector<float> tgt{1, 0, 1, 0};
    CHECK(gradient_error(z, [&] { return bce_with_logits(z, idx, tgt); }) < 1e-2);
    const auto targets = randn(12, rng);
    const std::vector<int> rows{0, 2, 3};
    CHECK(gradient_error(z, [&] { return smooth_l1(z, targets, rows, 1.0f / 9, 4.0f); }, 1e-3f) < 1e-2);
  }
  SUBCASE("matrix_function bridge") {
    Tensor x = Tensor::from({2, 3}, randn(6, rng), true);
    auto f = [&] {
      return matrix_function({x}, [](const std::vector<Eigen::MatrixXd>& in, std::vector<Eigen::MatrixXd>& g) {
        g[0] = 3.0 * in[0].array().square().matrix();
        return in[0].array().cube().sum();
      });
    };
    CHECK(gradient_error(x, f, 1e-3f) < 1e-2);
  }
}

TEST_CASE("loss op values") {
  const Tensor z = Tensor::from({2, 2}, {0.0f, 0.0f, 2.0f, 0.0f});
  const std::vector<int> t{1, 0};
  const double expect = (std::log(2.0) + std::log(1.0 + std::exp(-2.0))) / 2.0;
  CHECK(softmax_cross_entropy(z, t).item() == doctest::Approx(expect).epsilon(1e-6));

  const std::vector<int> none{-1, -1};
  const Tensor zero = softmax_cross_entropy(Tensor::from({2, 2}, {1, 2, 3, 4}, true), none);
  CHECK(zero.item() == 0.0f);
  CHECK_FALSE(zero.requires_grad());

  const Tensor p = Tensor::from({1, 4}, {0.0f, 0.05f, 1.0f, -2.0f});
  const std::vector<float> tgt{0, 0, 0, 0};
  const std::vector<int> rows{0};
  const float beta = 0.1f;
  const double sl1 = 0 + 0.5 * 0.05 * 0.05 / beta + (1.0 - 0.05) + (2.0 - 0.05);
  CHECK(smooth_l1(p, tgt, rows, beta, 2.0f).item() == doctest::Approx(sl1 / 2).epsilon(1e-6));
}

TEST_CASE("weighted_sum skips undefined terms") {
  const Tensor a = Tensor::scalar(2.0f), b = Tensor::scalar(3.0f);
  CHECK(weighted_sum({{a, 0.5f}, {Tensor(), 10.0f}, {b, 2.0f}}).item() == doctest::Approx(7.0));
}

TEST_CASE("detach and no-grad semantics") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  const Tensor d = detach(x);
  CHECK_FALSE(d.requires_grad());
  CHECK(std::equal(d.values().begin(), d.values().end(), x.values().begin()));
  const Tensor y = add(scale(x, 2.0f), d);
  project(y, {1, 1, 1, 1}).backward();
  for (float g : x.grad()) CHECK(g == 2.0f);

  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(scale(x, 2.0f).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(scale(x, 2.0f).requires_grad());
}

TEST_CASE("gradient accumulates over shared uses") {
  Tensor x = Tensor::from({1, 3}, {1, -2, 3}, true);
  const Tensor y = add(x, x);
  project(y, {1, 1, 1}).backward();
  for (float g : x.grad()) CHECK(g == 2.0f);
}

TEST_CASE("grid_avg_pool with grid 1 equals global average pooling") {
  Rng rng(3);
  const Tensor x = Tensor::from({2, 3, 5, 4}, randn(120, rng));
  const Tensor a = global_avg_pool(x), b = grid_avg_pool(x, 1);
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-6));
  CHECK_THROWS_AS(grid_avg_pool(x, 5), std::invalid_argument);
}

TEST_CASE("grid_avg_pool bins overlap on odd sizes") {
  std::vector<float> v(9);
  std::iota(v.begin(), v.end(), 0.0f);
  const Tensor y = grid_avg_pool(Tensor::from({1, 1, 3, 3}, v), 2);
  // Rows {0,1} and {1,2}, same for columns.
  CHECK(y.values()[0] == doctest::Approx((0 + 1 + 3 + 4) / 4.0));
  CHECK(y.values()[3] == doctest::Approx((4 + 5 + 7 + 8) / 4.0));
}

TEST_CASE("Sgd follows the momentum / weight decay update order") {
  Tensor p = Tensor::from({2}, {1.0f, -1.0f}, true);
  Sgd opt({{"p", p}}, 0.9, 0.1);
  const double lr = 0.5;
  double v0 = 0, v1 = 0, p0 = 1, p1 = -1;
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    project(scale(p, 2.0f), {1.0f, 1.0f}).backward();
    opt.step(lr);
    const double g0 = 2 + 0.1 * p0, g1 = 2 + 0.1 * p1;
    v0 = step == 0 ? g0 : 0.9 * v0 + g0;
    v1 = step == 0 ? g1 : 0.9 * v1 + g1;
    p0 -= lr * v0;
    p1 -= lr * v1;
    CHECK(p.values()[0] == doctest::Approx(p0).epsilon(1e-5));
    CHECK(p.values()[1] == doctest::Approx(p1).epsilon(1e-5));
  }
}

TEST_CASE("Sgd leaves parameters without gradient untouched") {
  Tensor used = Tensor::from({1}, {1.0f}, true);
  Tensor unused = Tensor::from({1}, {5.0f}, true);
  Sgd opt({{"used", used}, {"unused", unused}}, 0.9, 5e-4);
  project(used, {1.0f}).backward();
  opt.step(0.1);
  CHECK(unused.values()[0] == 5.0f);
  CHECK(opt.momentum_buffers()[1].empty());
  CHECK(used.values()[0] != 1.0f);
}

TEST_CASE("clip_grad_norm rescales to the bound") {
  Tensor a = Tensor::from({2}, {0, 0}, true), b = Tensor::from({1}, {0}, true);
  project(concat_rows({reshape(a, {2, 1}), reshape(b, {1, 1})}), {3.0f, 4.0f, 12.0f}).backward();
  const ParameterList ps{{"a", a}, {"b", b}};
  CHECK(clip_grad_norm(ps, 100.0) == doctest::Approx(13.0));
  CHECK(a.grad()[0] == doctest::Approx(3.0));
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(13.0));
  CHECK(a.grad()[0] == doctest::Approx(3.0 / 13));
  CHECK(b.grad()[0] == doctest::Approx(12.0 / 13));
}
