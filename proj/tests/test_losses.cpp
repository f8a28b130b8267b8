#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "t2i2t/losses.hpp"

using namespace t2i2t;
using Scores = std::vector<double>;

namespace {

double logit(double p) { return std::log(p / (1 - p)); }

ag::Var<double> logits_of(const Scores& s) {
  Tensor<double> t({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = logit(s[i]);
  return ag::constant(t);
}

}  // namespace

TEST(StageLosses, DiscriminatorClosedForms) {
  for (auto* fn : {&stage1_d_loss, &stage2_d_loss}) {
    EXPECT_NEAR(fn(Scores{0.5}, Scores{0.5}), 2 * std::log(0.5), 1e-12);
    EXPECT_NEAR(fn(Scores{0.5}, Scores{0.5}), -1.3863, 1e-4);
    EXPECT_NEAR(fn(Scores{1.0}, Scores{0.0}), 0.0, 1e-6);
    EXPECT_NEAR(fn(Scores{0.9}, Scores{0.1}), 2 * std::log(0.9), 1e-12);
    EXPECT_NEAR(fn(Scores{0.9}, Scores{0.1}), -0.2107, 1e-4);
    EXPECT_NEAR(fn(Scores{0.9, 0.5}, Scores{0.1, 0.75}), (std::log(0.9) + std::log(0.5)) / 2 + (std::log(0.9) + std::log(0.25)) / 2,
                1e-12);
  }
}

TEST(StageLosses, GeneratorClosedForms) {
  for (auto* fn : {&stage1_g_loss, &stage2_g_loss}) {
    EXPECT_NEAR(fn(Scores{0.5}), std::log(0.5), 1e-12);
    EXPECT_NEAR(fn(Scores{0.25}), std::log(0.75), 1e-12);
    EXPECT_NEAR(fn(Scores{0.25}), -0.2877, 1e-4);
    // fake -> 1 is clamped to log(eps), not -inf.
    const double clamped = fn(Scores{1.0});
    EXPECT_TRUE(std::isfinite(clamped));
    EXPECT_NEAR(clamped, std::log(kScoreEps), 1e-9);
  }
}

TEST(StageLosses, InterpolationClosedForms) {
  EXPECT_NEAR(interpolation_loss(Scores{0.5}), -0.6931, 1e-4);
  EXPECT_NEAR(interpolation_loss(Scores{0.5, 0.75}), (std::log(0.5) + std::log(0.25)) / 2, 1e-12);
  EXPECT_NEAR(interpolation_loss(Scores{0.5, 0.75}), -1.0397, 1e-4);
  // Same embedding twice: the interpolated score is the plain generator score.
  const Scores s{0.3, 0.6, 0.45};
  EXPECT_EQ(interpolation_loss(s), stage1_g_loss(s));
}

TEST(StageLosses, Totals) {
  EXPECT_NEAR(stage1_g_total(1.0, 0.4, 0.5), 1.2, 1e-12);
  EXPECT_EQ(stage1_g_total(1.0, 0.4, 0.0), 1.0);
  EXPECT_NEAR(stage1_g_total(-0.69, -0.69, 0.5), -1.035, 1e-12);
  EXPECT_EQ(image_gan_loss({0, 0, 0, 0}), 0.0);
  EXPECT_EQ(image_gan_loss({1, 2, 3, 4}), 10.0);
  const ImageGanParts p{0.31, -1.2, 0.77, -0.05};
  EXPECT_NEAR(image_gan_loss(p), p.g1_total + p.d1 + p.g2 + p.d2, 1e-9);
  EXPECT_EQ(total_loss(1, 1, 1, 2.0), 4.0);
  EXPECT_EQ(total_loss(1.5, -0.5, 7, 0.0), 1.0);
  EXPECT_EQ(total_loss(0, 0, 3.25, 2.0), 6.5);
}

TEST(StageLosses, RangeErrors) {
  EXPECT_THROW(stage1_d_loss(Scores{1.5}, Scores{0.5}), ScoreRangeError);
  EXPECT_THROW(stage1_g_loss(Scores{-0.1}), ScoreRangeError);
  EXPECT_THROW(stage2_d_loss(Scores{std::nan("")}, Scores{0.5}), ScoreRangeError);
  EXPECT_THROW(stage1_g_loss(Scores{}), std::invalid_argument);
}

TEST(GraphLosses, MatchScalarFormsOnLogits) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  for (int trial = 0; trial < 50; ++trial) {
    Scores real(4), fake(4);
    for (auto& x : real) x = u(rng);
    for (auto& x : fake) x = u(rng);
    EXPECT_NEAR(gl::d_objective(logits_of(real), logits_of(fake)).item(), stage1_d_loss(real, fake), 1e-9);
    EXPECT_NEAR(gl::g_objective(logits_of(fake), false).item(), stage1_g_loss(fake), 1e-9);
    double ns = 0;
    for (double f : fake) ns -= std::log(f);
    EXPECT_NEAR(gl::g_objective(logits_of(fake), true).item(), ns / 4, 1e-9);
  }
}

TEST(GraphLosses, SaturatedLogitsStayFinite) {
  Tensor<double> big({2}, {800.0, -800.0});
  const auto d = gl::d_objective(ag::constant(big), ag::constant(big)).item();
  EXPECT_TRUE(std::isfinite(d));
  // One real score saturates at 1 and one at 0; same for fake.
  EXPECT_NEAR(d, (std::log(1 - kScoreEps) + std::log(kScoreEps)) / 2 + (std::log(kScoreEps) + std::log(1 - kScoreEps)) / 2,
              1e-9);
  ag::Var<double> v(big, true);
  ag::backward(gl::g_objective(v, false));
  for (double g : v.grad().vec()) EXPECT_TRUE(std::isfinite(g));
}
