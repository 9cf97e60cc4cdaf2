#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tavlo/objective.hpp"

using namespace tavlo;
using namespace tavlo::obj;
using ad::Var;
using gradcheck::randn;

namespace {

oracle::Batch to_oracle(const Tensor<double>& a, const Tensor<double>& v) {
  oracle::Batch b{a.dim(0), a.dim(1), v.size() / (a.dim(0) * a.dim(1) * a.dim(2)), a.dim(2),
                  a.vec(), v.vec()};
  return b;
}

Tensor<double> unit_vec(std::size_t D, std::size_t k) {
  Tensor<double> t({D});
  t[k] = 1.0;
  return t;
}

}  // namespace

TEST(PositiveResponse, ExactMatchAtOneLocation) {
  Tensor<double> a({4}, 0.0);
  a[1] = 2.0;
  Tensor<double> v({2, 2, 4});
  v[(1 * 2 + 0) * 4 + 1] = 5.0;  // parallel to a
  v[0 * 4 + 0] = 1.0;            // orthogonal
  v[1 * 4 + 2] = 1.0;
  v[3 * 4 + 3] = 1.0;
  EXPECT_DOUBLE_EQ(positive_response(a, v), 1.0);
  v[(1 * 2 + 0) * 4 + 1] = 0.0;
  v[(1 * 2 + 0) * 4 + 0] = 1.0;
  EXPECT_DOUBLE_EQ(positive_response(a, v), 0.0);
}

TEST(NegativeResponse, MeanOfCosines) {
  const auto a = unit_vec(3, 0);
  Tensor<double> v({2, 2, 3});
  for (std::size_t p = 0; p < 4; ++p) v[p * 3] = 1.0;
  EXPECT_DOUBLE_EQ(negative_response(a, v), 1.0);
  v[0] = v[3] = -1.0;
  EXPECT_DOUBLE_EQ(negative_response(a, v), 0.0);
}

TEST(Responses, MatchLoopOraclesOnRandomGrids) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = randn({8}, rng), v = randn({3, 3, 8}, rng);
    oracle::Batch b{1, 1, 9, 8, a.vec(), v.vec()};
    EXPECT_NEAR(positive_response(a, v), oracle::positive(b, 0, 0), 1e-9);
    EXPECT_NEAR(negative_response(a, v), oracle::negative(b, 0, 0, 0, false), 1e-9);
  }
}

TEST(Responses, ZeroVectorCountsAndGivesZero) {
  Diagnostics d;
  Tensor<double> a({3});
  EXPECT_EQ(positive_response(a, Tensor<double>({2, 3}, 1.0), &d), 0.0);
  EXPECT_EQ(d.zero_norm_count, 2u);
  EXPECT_THROW(positive_response(a, Tensor<double>({2, 4}, 1.0)), InvalidInput);
}

TEST(Loss, SingleClipBatchIsExactlyZero) {
  std::mt19937_64 rng(2);
  const auto a = randn({1, 3, 5}, rng), v = randn({1, 3, 2, 2, 5}, rng);
  EXPECT_EQ(loss_a2v(a, v), 0.0);
  EXPECT_EQ(loss_total(a, v), 0.0);
}

TEST(Loss, IdenticalUnitVectorsGiveLogTwo) {
  Tensor<double> a({2, 1, 4}), v({2, 1, 2, 2, 4});
  for (std::size_t i = 0; i < 2; ++i) a[i * 4] = 1.0;
  for (std::size_t i = 0; i < 8; ++i) v[i * 4] = 1.0;
  EXPECT_NEAR(loss_a2v(a, v), std::log(2.0), 1e-6);
  EXPECT_NEAR(loss_total(a, v), 2 * std::log(2.0), 1e-6);
}

TEST(Loss, MatchesLoopOracleOnRandomBatches) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + rng() % 4, T = 1 + rng() % 3, H = 1 + rng() % 3, W = 1 + rng() % 3;
    const auto a = randn({B, T, 6}, rng), v = randn({B, T, H, W, 6}, rng);
    const auto b = to_oracle(a, v);
    EXPECT_NEAR(loss_a2v(a, v), oracle::loss_a2v(b), 1e-7);
    EXPECT_NEAR(loss_total(a, v), oracle::loss_total(b), 1e-7);
    EXPECT_NEAR(loss_total(a, v, NegativeBag::kMax), oracle::loss_total(b, true), 1e-7);
  }
}

TEST(Loss, FloatPathAgreesWithDouble) {
  std::mt19937_64 rng(4);
  const auto a = randn({3, 2, 8}, rng), v = randn({3, 2, 2, 2, 8}, rng);
  EXPECT_NEAR(loss_total(a.cast<float>(), v.cast<float>()), loss_total(a, v), 1e-5);
}

TEST(Loss, InvariantToBatchPermutation) {
  std::mt19937_64 rng(5);
  const std::size_t B = 4, T = 2, P = 4, D = 6;
  const auto a = randn({B, T, D}, rng), v = randn({B, T, P, D}, rng);
  std::vector<std::size_t> perm = {2, 0, 3, 1};
  Tensor<double> ap(a.shape()), vp(v.shape());
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(a.data() + perm[i] * T * D, T * D, ap.data() + i * T * D);
    std::copy_n(v.data() + perm[i] * T * P * D, T * P * D, vp.data() + i * T * P * D);
  }
  EXPECT_NEAR(loss_total(a, v), loss_total(ap, vp), 1e-7);
}

TEST(Loss, InvariantToPerClipScaling) {
  std::mt19937_64 rng(6);
  const std::size_t B = 3, T = 2, P = 4, D = 5;
  const auto a = randn({B, T, D}, rng), v = randn({B, T, P, D}, rng);
  auto as = a, vs = v;
  for (std::size_t i = 0; i < T * D; ++i) as[1 * T * D + i] *= 7.5;
  for (std::size_t i = 0; i < T * P * D; ++i) vs[1 * T * P * D + i] *= 0.01;
  EXPECT_NEAR(loss_total(a, v), loss_total(as, vs), 1e-6);
}

TEST(Loss, ImprovingBestPositiveLowersLoss) {
  // clip 0's audio is e0; its best location rotates toward e0 with angle theta
  const std::size_t D = 4;
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 10; ++k) {
    const double theta = M_PI / 2 * (1.0 - k / 10.0);
    Tensor<double> a({2, 1, D}), v({2, 1, 2, D});
    a[0] = 1.0;
    a[D + 1] = 1.0;
    v[0] = std::cos(theta);
    v[2] = std::sin(theta);
    v[D + 3] = 1.0;  // second location, orthogonal
    v[2 * D + 1] = 1.0;
    v[3 * D + 2] = 1.0;
    const double l = loss_a2v(a, v);
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(Loss, MaxBagDiffersFromMeanBag) {
  std::mt19937_64 rng(7);
  int differ = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = randn({3, 2, 6}, rng), v = randn({3, 2, 2, 2, 6}, rng);
    differ += std::abs(loss_total(a, v) - loss_total(a, v, NegativeBag::kMax)) > 1e-6;
  }
  EXPECT_GE(differ, 45);
}

TEST(Loss, NonFiniteRepresentationNamesLocation) {
  Tensor<double> a({2, 2, 3}, 1.0), v({2, 2, 2, 3}, 1.0);
  a[(1 * 2 + 1) * 3] = std::numeric_limits<double>::infinity();
  try {
    loss_total(a, v);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("clip 1, t=1"), std::string::npos);
  }
}

TEST(Loss, ZeroVectorsStayFinite) {
  Diagnostics d;
  Tensor<double> a({2, 1, 3}), v({2, 1, 2, 3}, 1.0);
  EXPECT_TRUE(std::isfinite(loss_total(a, v, NegativeBag::kMean, &d)));
  EXPECT_GT(d.zero_norm_count, 0u);
}

TEST(Loss, GradientMatchesFiniteDifferencesAwayFromTies) {
  std::mt19937_64 rng(8);
  const std::size_t B = 2, T = 2, P = 4, D = 8;
  gradcheck::Stats total;
  for (int trial = 0; trial < 5; ++trial) {
    Var<double> a(randn({B, T, D}, rng), true), v(randn({B, T, 2, 2, D}, rng), true);
    const auto ob = to_oracle(a.value(), v.value());
    // rows whose positive bag has a near-tie at the top
    std::vector<bool> tie(B * T, false);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> c;
        for (std::size_t p = 0; p < P; ++p) c.push_back(oracle::cosine(ob.av(i, t), ob.vv(i, t, p), D));
        std::sort(c.rbegin(), c.rend());
        tie[i * T + t] = c[0] - c[1] < 1e-2;
      }
    auto skip = [&](std::size_t k, std::size_t idx) {
      const std::size_t row = k == 0 ? idx / D : idx / (P * D);
      return bool(tie[row]);
    };
    total.merge(gradcheck::check({&a, &v}, [&] { return contrastive_loss(a, v); }, {}, skip));
  }
  EXPECT_GT(total.checked, 100u);
  EXPECT_GE(total.fraction(), 0.95);
  EXPECT_LE(total.worst, 1e-3);
}

TEST(Loss, TemperatureScalesLogits) {
  Tensor<double> a({2, 1, 2}), v({2, 1, 1, 2});
  a[0] = 1;
  a[3] = 1;
  v[0] = 1;
  v[3] = 1;
  ad::NoGradGuard ng;
  const double l = contrastive_loss(Var<double>(a), Var<double>(v),
                                    {NegativeBag::kMean, Direction::kAudioToVisual, 0.5})
                       .item();
  EXPECT_NEAR(l, std::log(1 + std::exp(-2.0)), 1e-12);
  EXPECT_THROW(contrastive_loss(Var<double>(a), Var<double>(v),
                                {NegativeBag::kMean, Direction::kTotal, 0.0}),
               InvalidConfig);
}

TEST(LocalizationMap, SignedIdentityCases) {
  std::mt19937_64 rng(9);
  const auto a = randn({2, 5}, rng);
  Tensor<double> v({2, 3, 3, 5}), vn({2, 3, 3, 5});
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t p = 0; p < 9; ++p)
      for (std::size_t d = 0; d < 5; ++d) {
        v[(t * 9 + p) * 5 + d] = a[t * 5 + d];
        vn[(t * 9 + p) * 5 + d] = -a[t * 5 + d];
      }
  const auto same = localization_map(a, v), flipped = localization_map(a, vn);
  for (double s : same.vec()) EXPECT_NEAR(s, 1.0, 1e-12);
  for (double s : flipped.vec()) EXPECT_NEAR(s, -1.0, 1e-12);
}

TEST(LocalizationMap, MatchesLoopOracleAndUpsampleStaysBounded) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = randn({2, 6}, rng), v = randn({2, 3, 4, 6}, rng);
    const auto m = localization_map(a, v);
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t p = 0; p < 12; ++p)
        ASSERT_NEAR(m[t * 12 + p], oracle::cosine(&a[t * 6], &v[(t * 12 + p) * 6], 6), 1e-9);
    Tensor<double> frame({3, 4});
    std::copy_n(m.data(), 12, frame.data());
    const auto up = upsample_bilinear(frame, 24, 32);
    for (double s : up.vec()) {
      ASSERT_GE(s, -1 - 1e-6);
      ASSERT_LE(s, 1 + 1e-6);
    }
  }
}

TEST(LocalizationMap, ArgmaxInvariantToAudioRescaling) {
  std::mt19937_64 rng(11);
  const auto a = randn({1, 4}, rng), v = randn({1, 4, 4, 4}, rng);
  auto a2 = a;
  for (auto& x : a2.vec()) x *= 13.0;
  const auto m1 = localization_map(a, v), m2 = localization_map(a2, v);
  const auto i1 = std::max_element(m1.vec().begin(), m1.vec().end()) - m1.vec().begin();
  const auto i2 = std::max_element(m2.vec().begin(), m2.vec().end()) - m2.vec().begin();
  EXPECT_EQ(i1, i2);
}

TEST(UpsampleBilinear, ConstantAndIdentity) {
  Tensor<double> m({2, 2}, 0.3);
  const auto up = upsample_bilinear(m, 8, 8);
  for (double s : up.vec()) EXPECT_DOUBLE_EQ(s, 0.3);
  std::mt19937_64 rng(12);
  const auto r = randn({3, 5}, rng);
  EXPECT_EQ(upsample_bilinear(r, 3, 5).vec(), r.vec());
}
