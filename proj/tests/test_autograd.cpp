#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "tavlo/autograd.hpp"
#include "tavlo/nn.hpp"

using namespace tavlo;
using ad::Var;
using gradcheck::randn;

namespace {

// Projects an op output to a scalar with fixed random weights.
Var<double> project(const Var<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ad::weighted_sum(y, randn(y.shape(), rng));
}

void expect_grad_ok(std::vector<Var<double>*> vars, const std::function<Var<double>()>& f,
                    gradcheck::Options o = {}) {
  o.step = 1e-5;
  o.tol = 1e-6;
  const auto st = gradcheck::check(std::move(vars), f, o);
  EXPECT_GT(st.checked, 0u);
  EXPECT_EQ(st.within, st.checked) << "worst relative error " << st.worst;
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  std::mt19937_64 rng(1);
  Var<double> a(randn({3, 4}, rng), true), b(randn({3, 4}, rng), true);
  expect_grad_ok({&a, &b}, [&] { return project(ad::add(a, b)); });
  expect_grad_ok({&a}, [&] { return project(ad::scale(a, 2.5)); });
  expect_grad_ok({&a}, [&] { return project(ad::gelu(a)); });
  expect_grad_ok({&a}, [&] { return ad::sum(a); });
  // keep relu inputs away from the kink
  for (auto& x : a.mutable_value().vec()) x += x > 0 ? 0.1 : -0.1;
  expect_grad_ok({&a}, [&] { return project(ad::relu(a)); });
}

TEST(Autograd, ShapeOps) {
  std::mt19937_64 rng(2);
  Var<double> a(randn({2, 3, 4}, rng), true), b(randn({2, 2, 4}, rng), true);
  expect_grad_ok({&a}, [&] { return project(ad::reshape(a, {6, 4})); });
  expect_grad_ok({&a, &b}, [&] { return project(ad::concat(a, b, 1)); });
  expect_grad_ok({&a}, [&] { return project(ad::slice(a, 2, 1, 3)); });
  Var<double> c(randn({2, 3, 5, 2}, rng), true);
  expect_grad_ok({&c}, [&] { return project(ad::swap_middle(c)); });
  Var<double> d(randn({3, 1}, rng), true);
  expect_grad_ok({&d}, [&] { return project(ad::broadcast_to(d, {2, 3, 4})); });
}

TEST(Autograd, SwapMiddleTransposes) {
  Tensor<double> t({1, 2, 3, 1});
  for (std::size_t i = 0; i < 6; ++i) t[i] = double(i);
  const auto s = ad::swap_middle(Var<double>(t)).value();
  EXPECT_EQ(s.shape(), (Shape{1, 3, 2, 1}));
  EXPECT_EQ(s.vec(), (Storage<double>{0, 3, 1, 4, 2, 5}));
}

TEST(Autograd, LinearAndLayerNorm) {
  std::mt19937_64 rng(3);
  Var<double> x(randn({2, 3, 5}, rng), true), w(randn({5, 4}, rng), true),
      b(randn({4}, rng), true);
  expect_grad_ok({&x, &w, &b}, [&] { return project(ad::linear(x, w, &b)); });
  Var<double> g(randn({5}, rng), true), be(randn({5}, rng), true);
  expect_grad_ok({&x, &g, &be}, [&] { return project(ad::layer_norm(x, g, be)); });
}

TEST(Autograd, Conv2dMatchesDirectLoopAndGradients) {
  std::mt19937_64 rng(4);
  const ad::Conv2dGeometry geo{3, 2, 2, 1, 1, 0};
  Var<double> x(randn({2, 5, 4, 3}, rng), true), w(randn({3 * 2 * 3, 4}, rng), true),
      b(randn({4}, rng), true);
  const auto y = ad::conv2d(x, w, b, geo).value();
  const std::size_t Ho = (5 + 2 - 3) / 2 + 1, Wo = (4 - 2) / 1 + 1;
  ASSERT_EQ(y.shape(), (Shape{2, Ho, Wo, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t co = 0; co < 4; ++co) {
          double acc = b.value()[co];
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 2; ++kx)
              for (std::size_t ci = 0; ci < 3; ++ci) {
                const long iy = long(oy * 2 + ky) - 1, ix = long(ox + kx);
                if (iy < 0 || iy >= 5) continue;
                acc += x.value()[((n * 5 + iy) * 4 + ix) * 3 + ci] *
                       w.value()[((ky * 2 + kx) * 3 + ci) * 4 + co];
              }
          EXPECT_NEAR(y[((n * Ho + oy) * Wo + ox) * 4 + co], acc, 1e-12);
        }
  expect_grad_ok({&x, &w, &b}, [&] { return project(ad::conv2d(x, w, b, geo)); });
}

TEST(Autograd, Conv2dEdgePaddingRepeatsBorderPixels) {
  std::mt19937_64 rng(41);
  ad::Conv2dGeometry geo{3, 3, 2, 2, 1, 1, true};
  Var<double> x(randn({1, 4, 4, 2}, rng), true), w(randn({3 * 3 * 2, 3}, rng), true),
      b(randn({3}, rng), true);
  const auto y = ad::conv2d(x, w, b, geo).value();
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 3}));
  auto clampi = [](long i) { return std::clamp(i, 0L, 3L); };
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox)
      for (std::size_t co = 0; co < 3; ++co) {
        double acc = b.value()[co];
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx)
            for (std::size_t ci = 0; ci < 2; ++ci) {
              const long iy = clampi(long(oy * 2 + ky) - 1), ix = clampi(long(ox * 2 + kx) - 1);
              acc += x.value()[(iy * 4 + ix) * 2 + ci] * w.value()[((ky * 3 + kx) * 2 + ci) * 3 + co];
            }
        EXPECT_NEAR(y[(oy * 2 + ox) * 3 + co], acc, 1e-12);
      }
  expect_grad_ok({&x, &w, &b}, [&] { return project(ad::conv2d(x, w, b, geo)); });

  // a constant image stays constant under edge padding, unlike zero padding
  Var<double> c(Tensor<double>({1, 4, 4, 2}, 0.7));
  const auto yc = ad::conv2d(c, w, b, geo).value();
  for (std::size_t p = 1; p < 4; ++p)
    for (std::size_t co = 0; co < 3; ++co) EXPECT_NEAR(yc[p * 3 + co], yc[co], 1e-12);
}

TEST(Autograd, AttentionMatchesSoftmaxFormulaAndGradients) {
  std::mt19937_64 rng(5);
  Var<double> q(randn({2, 4, 6}, rng), true), k(randn({2, 4, 6}, rng), true),
      v(randn({2, 4, 6}, rng), true);
  const std::size_t heads = 2, dh = 3;
  const auto out = ad::attention(q, k, v, heads).value();
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> e(4);
        double z = 0;
        for (std::size_t j = 0; j < 4; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c)
            dot += q.value()[(g * 4 + i) * 6 + h * dh + c] * k.value()[(g * 4 + j) * 6 + h * dh + c];
          z += e[j] = std::exp(dot / std::sqrt(double(dh)));
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < 4; ++j) acc += e[j] / z * v.value()[(g * 4 + j) * 6 + h * dh + c];
          EXPECT_NEAR(out[(g * 4 + i) * 6 + h * dh + c], acc, 1e-12);
        }
      }
  expect_grad_ok({&q, &k, &v}, [&] { return project(ad::attention(q, k, v, heads)); });
}

TEST(Autograd, AttentionRowsSumToOneForLargeInputs) {
  std::mt19937_64 rng(6);
  const auto q = randn({1, 5, 8}, rng, 100.0), k = randn({1, 5, 8}, rng, 100.0);
  const auto p = ad::attention_probabilities(q, k, 2);
  for (std::size_t r = 0; r < 2 * 5; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      ASSERT_TRUE(std::isfinite(p[r * 5 + j]));
      s += p[r * 5 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Autograd, DropoutKeepsExpectationAndIsIdentityAtZero) {
  std::mt19937_64 rng(7);
  Var<double> a(Tensor<double>({20000}, 1.0));
  EXPECT_EQ(ad::dropout(a, 0.0, rng).node(), a.node());
  const auto y = ad::dropout(a, 0.25, rng).value();
  double s = 0;
  for (double x : y.vec()) {
    EXPECT_TRUE(x == 0.0 || std::abs(x - 4.0 / 3.0) < 1e-12);
    s += x;
  }
  EXPECT_NEAR(s / 20000, 1.0, 0.03);
}

TEST(Autograd, NoGradSkipsGraph) {
  Var<double> a(Tensor<double>({2}, 1.0), true);
  ad::NoGradGuard ng;
  EXPECT_FALSE(ad::add(a, a).requires_grad());
}

TEST(Autograd, SharedInputAccumulates) {
  Var<double> a(Tensor<double>({3}, 2.0), true);
  auto y = ad::sum(ad::add(a, ad::scale(a, 3.0)));
  ad::backward(y);
  for (double g : a.grad().vec()) EXPECT_DOUBLE_EQ(g, 4.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::ParameterSet<double> ps;
  auto w = ps.add("w", Tensor<double>({2}, 1.0));
  nn::Adam<double> opt(ps, {});
  w.grad()[0] = 0.5;
  w.grad()[1] = -3.0;
  opt.step(ps, 0.1);
  EXPECT_NEAR(w.value()[0], 0.9, 1e-6);
  EXPECT_NEAR(w.value()[1], 1.1, 1e-6);
}

TEST(Adam, ClippingReturnsPreClipNorm) {
  nn::ParameterSet<double> ps;
  auto w = ps.add("w", Tensor<double>({2}, 0.0));
  nn::AdamOptions o;
  o.grad_clip = 1.0;
  nn::Adam<double> opt(ps, o);
  w.grad()[0] = 3.0;
  w.grad()[1] = 4.0;
  EXPECT_DOUBLE_EQ(opt.step(ps, 0.01), 5.0);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.1 * 3.0 / 5.0, 1e-12);
}

TEST(ParameterSet, RejectsDuplicateNames) {
  nn::ParameterSet<float> ps;
  ps.add("a", Tensor<float>({1}));
  EXPECT_THROW(ps.add("a", Tensor<float>({1})), InvalidConfig);
  EXPECT_THROW(ps.at("b"), InvalidInput);
}
