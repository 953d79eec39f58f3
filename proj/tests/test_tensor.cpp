#include <doctest.h>

#include <cmath>

#include "infrayolo/error.hpp"
#include "infrayolo/ops.hpp"
#include "infrayolo/optim.hpp"
#include "testing.hpp"

using namespace infrayolo;
using infrayolo::testing::grad_check;
using infrayolo::testing::max_abs_diff;

TEST_CASE("tensor construction checks data length") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), Error);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
  t.set_requires_grad(true);
  CHECK(t.mutable_grad().size() == 6);
}

TEST_CASE("conv2d output extent and receptive field") {
  CHECK(effective_kernel_extent(3, 4) == 9);
  CHECK(effective_kernel_extent(3, 3) == 7);
  Conv2dOptions o{2, 1, 1};
  CHECK(conv_output_extent(96, 3, o) == 48);
}

TEST_CASE("1x1 identity conv returns its input") {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::uniform({1, 1, 5, 4}, rng, -2, 2);
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, w, Tensor());
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d matches a nested-loop oracle") {
  std::mt19937_64 rng(3);
  struct Case {
    Shape x, w;
    int stride, pad, dil;
    bool bias;
  };
  const Case cases[] = {
      {{2, 3, 5, 5}, {4, 3, 3, 3}, 1, 2, 2, false},
      {{2, 3, 7, 6}, {5, 3, 3, 3}, 2, 1, 1, true},
      {{1, 4, 9, 9}, {2, 4, 3, 3}, 1, 4, 4, true},
      {{3, 2, 4, 4}, {3, 2, 1, 1}, 1, 0, 1, false},
      {{1, 1, 8, 8}, {1, 1, 5, 5}, 3, 2, 1, true},
  };
  for (const auto& c : cases) {
    Tensor x = Tensor::uniform(c.x, rng, -1, 1);
    Tensor w = Tensor::uniform(c.w, rng, -1, 1);
    Tensor b = c.bias ? Tensor::uniform({c.w[0]}, rng, -1, 1) : Tensor();
    Tensor y = conv2d(x, w, b, {c.stride, c.pad, c.dil});
    Tensor ref = infrayolo::testing::conv2d_loops(x, w, b, c.stride, c.pad, c.dil);
    REQUIRE(y.shape() == ref.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      const double a = y.at(static_cast<std::size_t>(i)), r = ref.at(static_cast<std::size_t>(i));
      CHECK(std::abs(a - r) <= 1e-12 * std::max(1.0, std::abs(r)));
    }
  }
}

TEST_CASE("conv2d shape errors name the dimension") {
  std::mt19937_64 rng(3);
  Tensor x = Tensor::uniform({1, 3, 5, 5}, rng, -1, 1);
  Tensor w = Tensor::uniform({2, 4, 3, 3}, rng, -1, 1);
  try {
    conv2d(x, w, Tensor());
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Shape);
    CHECK(std::string(e.what()).find("dim 1") != std::string::npos);
  }
}

TEST_CASE("dilated conv impulse response spans n + (n-1)(d-1)") {
  for (int d = 1; d <= 4; ++d) {
    const int n = 3, size = 21, centre = 10;
    Tensor x = Tensor::zeros({1, 1, size, size});
    x.mutable_data()[centre * size + centre] = 1.0;
    Tensor w = Tensor::full({1, 1, n, n}, 1.0);
    Tensor y = conv2d(x, w, Tensor(), {1, d, d});
    int lo = size, hi = -1;
    for (int i = 0; i < size; ++i)
      if (y.at(static_cast<std::size_t>(i * size + centre)) != 0.0) {
        lo = std::min(lo, i);
        hi = std::max(hi, i);
      }
    CHECK(hi - lo + 1 == effective_kernel_extent(n, d));
  }
}

TEST_CASE("conv1d") {
  Tensor x({1, 1, 3}, {1, 2, 3});
  Tensor id({1, 1, 3}, {0, 1, 0});
  CHECK(max_abs_diff(conv1d(x, id), x) == 0.0);
  Tensor avg({1, 1, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  Tensor y = conv1d(x, avg);
  CHECK(y.at(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(y.at(1) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(y.at(2) == doctest::Approx(5.0 / 3).epsilon(1e-14));
  CHECK_THROWS_AS(conv1d(x, Tensor({1, 1, 2}, {1, 1})), Error);

  std::mt19937_64 rng(5);
  auto r = grad_check([](const std::vector<Tensor>& in) { return conv1d(in[0], in[1]); },
                      {Tensor::uniform({2, 1, 9}, rng, -1, 1), Tensor::uniform({1, 1, 3}, rng, -1, 1)});
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("batch norm semantics") {
  SUBCASE("already normalized batch passes through") {
    Tensor x({4, 1, 1, 1}, {1, -1, 1, -1});
    BatchNormState bn{Tensor::full({1}, 1.0), Tensor::zeros({1}), Tensor::zeros({1}), Tensor::full({1}, 1.0), 1e-12};
    Tensor y = batch_norm(x, bn, true);
    CHECK(max_abs_diff(x, y) < 1e-9);
  }
  SUBCASE("gamma zero gives constant beta") {
    std::mt19937_64 rng(2);
    Tensor x = Tensor::uniform({3, 2, 4, 4}, rng, -3, 3);
    BatchNormState bn{Tensor({2}, {0.0, 1.0}), Tensor({2}, {0.7, 0.0}), Tensor::zeros({2}), Tensor::full({2}, 1.0)};
    for (bool training : {true, false}) {
      Tensor y = batch_norm(x, bn, training);
      for (std::int64_t b = 0; b < 3; ++b)
        for (int i = 0; i < 16; ++i) CHECK(y.at(static_cast<std::size_t>(b * 32 + i)) == 0.7);
    }
  }
  SUBCASE("running statistics follow the moving average") {
    Tensor x({2, 1, 1, 2}, {1, 2, 3, 4});
    BatchNormState bn{Tensor::full({1}, 1.0), Tensor::zeros({1}), Tensor::zeros({1}), Tensor::full({1}, 1.0)};
    batch_norm(x, bn, true);
    CHECK(bn.running_mean.at(0) == doctest::Approx(0.03 * 2.5));
    CHECK(bn.running_var.at(0) == doctest::Approx(0.97 + 0.03 * (5.0 / 3.0)));
  }
  SUBCASE("empty batch rejected in training mode") {
    BatchNormState bn{Tensor::full({1}, 1.0), Tensor::zeros({1}), Tensor::zeros({1}), Tensor::full({1}, 1.0)};
    CHECK_THROWS_AS(batch_norm(Tensor::zeros({0, 1, 2, 2}), bn, true), Error);
  }
}

TEST_CASE("pooling and upsampling") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(adaptive_avg_pool(x).at(0) == 2.5);
  CHECK(adaptive_avg_pool(Tensor::full({1, 2, 3, 5}, 4.25)).at(1) == 4.25);
  CHECK(max_abs_diff(upsample_nearest(x, 1), x) == 0.0);
  Tensor u = upsample_nearest(Tensor({1, 1, 1, 1}, {7}), 2);
  CHECK(u.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(u.at(static_cast<std::size_t>(i)) == 7);
  CHECK_THROWS_AS(upsample_nearest(x, 0), Error);

  Tensor v({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(upsample_nearest(v, 3)));
  for (double g : v.grad()) CHECK(g == 9.0);
  Tensor p({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(adaptive_avg_pool(p)));
  for (double g : p.grad()) CHECK(g == doctest::Approx(1.0 / 6));
}

TEST_CASE("elementwise suite") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  std::mt19937_64 rng(9);
  Tensor x = Tensor::uniform({2, 6, 3, 3}, rng, -5, 5);
  auto [a, b] = split_halves(x, 1);
  CHECK(a.shape() == Shape{2, 3, 3, 3});
  Tensor back = concat({a, b}, 1);
  CHECK(max_abs_diff(back, x) == 0.0);
  CHECK_THROWS_AS(concat({a, Tensor::zeros({2, 3, 3, 4})}, 1), Error);
  CHECK_THROWS_AS(split_halves(x, 4), Error);

  Tensor ls = log_softmax(x, 1);
  for (std::int64_t bb = 0; bb < 2; ++bb)
    for (int p = 0; p < 9; ++p) {
      double s = 0.0;
      for (int c = 0; c < 6; ++c) s += std::exp(ls.at(static_cast<std::size_t>((bb * 6 + c) * 9 + p)));
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  Tensor lr = leaky_relu(Tensor({2}, {-1.0, 2.0}), 0.1);
  CHECK(lr.at(0) == -0.1);
  CHECK(lr.at(1) == 2.0);
}

TEST_CASE("backward contract") {
  Tensor x({3}, {1, 2, 3}, true);
  Tensor loss = sum(x);
  backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);
  CHECK_THROWS_AS(backward(loss), Error);
  Tensor y({3}, {1, 2, 3}, true);
  Tensor z = scale(y, 2.0);
  CHECK_THROWS_AS(backward(z), Error);
  Tape::current().clear();
}

TEST_CASE("finite-difference checks for every op") {
  std::mt19937_64 rng(11);
  auto U = [&](const Shape& s) { return Tensor::uniform(s, rng, -1, 1); };
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    Fn f;
    std::vector<Tensor> in;
  };
  std::vector<Case> cases;
  cases.push_back({"conv2d", [](auto& v) { return conv2d(v[0], v[1], v[2], {1, 2, 2}); },
                   {U({2, 3, 5, 5}), U({2, 3, 3, 3}), U({2})}});
  cases.push_back({"conv2d_s2", [](auto& v) { return conv2d(v[0], v[1], Tensor(), {2, 1, 1}); },
                   {U({1, 2, 6, 7}), U({3, 2, 3, 3})}});
  cases.push_back({"batch_norm_train",
                   [](auto& v) {
                     BatchNormState bn{v[1], v[2], Tensor::zeros({3}), Tensor::full({3}, 1.0)};
                     return batch_norm(v[0], bn, true);
                   },
                   {U({2, 3, 3, 3}), U({3}), U({3})}});
  cases.push_back({"batch_norm_eval",
                   [](auto& v) {
                     BatchNormState bn{v[1], v[2], Tensor({2}, {0.1, -0.2}), Tensor({2}, {0.5, 2.0})};
                     return batch_norm(v[0], bn, false);
                   },
                   {U({2, 2, 3, 2}), U({2}), U({2})}});
  cases.push_back({"pool", [](auto& v) { return adaptive_avg_pool(v[0]); }, {U({2, 3, 4, 3})}});
  cases.push_back({"upsample", [](auto& v) { return upsample_nearest(v[0], 2); }, {U({1, 2, 3, 3})}});
  cases.push_back({"add", [](auto& v) { return add(v[0], v[1]); }, {U({2, 3}), U({2, 3})}});
  cases.push_back({"add_n", [](auto& v) { return add_n({v[0], v[1], v[2]}); }, {U({4}), U({4}), U({4})}});
  cases.push_back({"sub", [](auto& v) { return sub(v[0], v[1]); }, {U({2, 3}), U({2, 3})}});
  cases.push_back({"mul_broadcast", [](auto& v) { return mul(v[0], v[1]); }, {U({2, 3, 4, 4}), U({2, 3, 1, 1})}});
  cases.push_back({"mul_broadcast2", [](auto& v) { return mul(v[0], v[1]); }, {U({2, 1, 4, 4}), U({2, 3, 1, 1})}});
  cases.push_back({"scale", [](auto& v) { return scale(v[0], -1.7); }, {U({5})}});
  cases.push_back({"add_scalar", [](auto& v) { return add_scalar(v[0], 0.3); }, {U({5})}});
  cases.push_back({"square", [](auto& v) { return square(v[0]); }, {U({5})}});
  cases.push_back({"sigmoid", [](auto& v) { return sigmoid(v[0]); }, {U({2, 5})}});
  cases.push_back({"leaky_relu", [](auto& v) { return leaky_relu(v[0], 0.1); }, {U({3, 7})}});
  cases.push_back({"log_softmax", [](auto& v) { return log_softmax(v[0], 1); }, {U({2, 4, 3})}});
  cases.push_back({"log_softmax_last", [](auto& v) { return log_softmax(v[0], -1); }, {U({3, 5})}});
  cases.push_back({"concat", [](auto& v) { return concat({v[0], v[1]}, 1); }, {U({2, 2, 3}), U({2, 3, 3})}});
  cases.push_back({"split", [](auto& v) { return mul(split_halves(v[0], 1).second, split_halves(v[0], 1).first); },
                   {U({2, 4, 3})}});
  cases.push_back({"slice", [](auto& v) { return slice(v[0], 2, 1, 2); }, {U({2, 2, 4})}});
  cases.push_back({"reshape", [](auto& v) { return reshape(v[0], {6, 2}); }, {U({2, 3, 2})}});
  cases.push_back({"index_select", [](auto& v) { return index_select(v[0], 1, {2, 0}); }, {U({2, 3, 2})}});
  cases.push_back({"index_scatter", [](auto& v) { return index_scatter(v[0], 1, {3, 0}, 5); }, {U({2, 2, 2})}});
  cases.push_back({"mean", [](auto& v) { return mean(v[0]); }, {U({3, 4})}});
  cases.push_back({"conv1d", [](auto& v) { return conv1d(v[0], v[1]); }, {U({2, 1, 8}), U({1, 1, 3})}});
  for (auto& c : cases) {
    CAPTURE(c.name);
    auto r = grad_check(c.f, c.in);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("sgd") {
  SUBCASE("zero gradient leaves parameters") {
    Tensor p({2}, {1.0, -2.0}, true);
    p.zero_grad();
    Sgd opt({0.9, 0.0});
    opt.add_param(p);
    opt.step(0.1);
    CHECK(p.at(0) == 1.0);
    CHECK(p.at(1) == -2.0);
  }
  SUBCASE("plain step") {
    Tensor p({1}, {1.0}, true);
    p.mutable_grad()[0] = 1.0;
    sgd_step({p}, 0.1);
    CHECK(p.at(0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK_THROWS_AS(sgd_step({p}, 0.0), Error);
  }
  SUBCASE("quadratic bowl") {
    Tensor p({3}, {4.0, -3.0, 1.0}, true);
    const double target[3] = {1.0, 2.0, -0.5};
    Sgd opt({0.9, 0.0});
    opt.add_param(p);
    int steps = 0;
    for (; steps < 1000; ++steps) {
      opt.zero_grad();
      Tensor t({3}, {target[0], target[1], target[2]});
      backward(sum(square(sub(p, t))));
      opt.step(0.05);
      double e = 0.0;
      for (int i = 0; i < 3; ++i) e = std::max(e, std::abs(p.at(static_cast<std::size_t>(i)) - target[i]));
      if (e < 1e-6) break;
    }
    CHECK(steps < 1000);
  }
}
