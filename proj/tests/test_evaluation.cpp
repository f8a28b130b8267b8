#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "t2i2t/evaluation.hpp"
#include "t2i2t/plot.hpp"

using namespace t2i2t;
using Matrix = std::vector<std::vector<double>>;

namespace {

// exp(E_x KL(p(y|x) || p(y))) written out directly, one split.
double is_oracle(const Matrix& p) {
  const std::size_t n = p.size(), k = p[0].size();
  double expected_kl = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double kl = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double py = 0;
      for (std::size_t j = 0; j < n; ++j) py += p[j][c] / double(n);
      if (p[i][c] > 0) kl += p[i][c] * std::log(p[i][c] / py);
    }
    expected_kl += kl / double(n);
  }
  return std::exp(expected_kl);
}

Matrix random_rows(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.5);
  Matrix m(n, std::vector<double>(k));
  for (auto& row : m) {
    double s = 0;
    for (auto& v : row) s += v = g(rng) + 1e-12;
    for (auto& v : row) v /= s;
  }
  return m;
}

RgbImage solid(std::size_t s, Rgb c) {
  RgbImage img(s, s);
  for (std::size_t i = 0; i < s * s; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[3 * i + ch] = c[ch];
  return img;
}

}  // namespace

// ------------------------------------------------------------ inception score

TEST(InceptionScore, UniformPredictionsScoreOne) {
  const Matrix p(10, std::vector<double>(5, 0.2));
  const auto s = inception_score(p, 1);
  EXPECT_NEAR(s.mean, 1.0, 1e-12);
  EXPECT_EQ(s.std, 0.0);
}

TEST(InceptionScore, BalancedOneHotScoresK) {
  for (std::size_t k : {2u, 5u, 33u}) {
    Matrix p(4 * k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < p.size(); ++i) p[i][i % k] = 1.0;
    EXPECT_NEAR(inception_score(p, 1).mean, double(k), 1e-9) << k;
  }
}

TEST(InceptionScore, SmallMatrixMatchesOracle) {
  const Matrix p{{0.9, 0.1}, {0.2, 0.8}, {0.5, 0.5}, {0.7, 0.3}};
  EXPECT_NEAR(inception_score(p, 1).mean, is_oracle(p), 1e-9);
  // Two splits: mean and population std of the per-split scores.
  const double a = is_oracle({p[0], p[1]}), b = is_oracle({p[2], p[3]});
  const auto s = inception_score(p, 2);
  EXPECT_NEAR(s.mean, (a + b) / 2, 1e-12);
  EXPECT_NEAR(s.std, std::abs(a - b) / 2, 1e-12);
}

TEST(InceptionScore, BoundsOnRandomInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + trial % 9;
    const auto p = random_rows(20, k, rng);
    const double v = inception_score(p, 1).mean;
    EXPECT_GE(v, 1.0 - 1e-9);
    EXPECT_LE(v, double(k) + 1e-9);
    EXPECT_NEAR(v, is_oracle(p), 1e-9 * v);
  }
}

TEST(InceptionScore, RowOrderInvariantWithOneSplit) {
  std::mt19937_64 rng(9);
  auto p = random_rows(30, 6, rng);
  const double before = inception_score(p, 1).mean;
  std::shuffle(p.begin(), p.end(), rng);
  EXPECT_NEAR(inception_score(p, 1).mean, before, 1e-12);
}

TEST(InceptionScore, Errors) {
  EXPECT_THROW(inception_score(Matrix{}, 1), MetricError);
  EXPECT_THROW(inception_score(Matrix{{0.5, 0.5}}, 2), MetricError);
  EXPECT_THROW(inception_score(Matrix{{0.5, 0.5}}, 0), MetricError);
  EXPECT_THROW(inception_score(Matrix{{0.5, 0.6}}, 1), MetricError);
  EXPECT_THROW(inception_score(Matrix{{1.5, -0.5}}, 1), MetricError);
  EXPECT_THROW(inception_score(Matrix{{0.5, 0.5}, {1.0}}, 1), MetricError);
  EXPECT_THROW(inception_score(Matrix{{std::nan(""), 1.0}}, 1), MetricError);
}

// ------------------------------------------------------------ color relevance

TEST(ColorRelevance, HalfTheNamedColorsPresent) {
  const auto lex = basic_color_lexicon();
  const auto red = solid(16, {255, 0, 0});
  EXPECT_EQ(mentioned_colors("a flower with red and yellow petals", lex), (std::vector<std::string>{"red", "yellow"}));
  EXPECT_DOUBLE_EQ(*color_relevance(red, "a flower with red and yellow petals", lex), 0.5);
  EXPECT_DOUBLE_EQ(*color_relevance(red, "red red petals", lex), 1.0);
  EXPECT_DOUBLE_EQ(*color_relevance(red, "blue petals", lex), 0.0);
  EXPECT_FALSE(color_relevance(red, "a flower with petals", lex).has_value());
}

TEST(ColorRelevance, PresenceThresholds) {
  const auto lex = basic_color_lexicon();
  // Inside the match distance counts; outside does not.
  EXPECT_TRUE(color_present(solid(8, {220, 20, 20}), lex.at("red"), lex));
  EXPECT_FALSE(color_present(solid(8, {180, 40, 40}), lex.at("red"), lex));
  // 1% of pixels is enough, fewer is not.
  auto img = solid(10, {30, 45, 60});
  img.at(0, 0)[0] = 255, img.at(0, 0)[1] = 0, img.at(0, 0)[2] = 0;
  EXPECT_TRUE(color_present(img, lex.at("red"), lex));
  auto big = solid(20, {30, 45, 60});
  for (std::size_t x = 0; x < 3; ++x) big.at(x, 0)[0] = 255, big.at(x, 0)[1] = 0, big.at(x, 0)[2] = 0;
  EXPECT_FALSE(color_present(big, lex.at("red"), lex));
}

TEST(ColorRelevance, ToyGroundTruthScoresOne) {
  ToySpec spec;
  spec.n_images = 60;
  spec.seed = 11;
  std::vector<std::pair<RgbImage, std::string>> pairs;
  for (const auto& r : generate_toy_dataset(spec))
    for (const auto& c : r.captions) pairs.emplace_back(r.image, c);
  EXPECT_DOUBLE_EQ(color_relevance_score(pairs), 1.0);
}

TEST(ColorRelevance, ScoreAveragesOnlyScorablePairs) {
  const auto red = solid(8, {255, 0, 0});
  const std::vector<std::pair<RgbImage, std::string>> pairs{
      {red, "red petals"}, {red, "blue petals"}, {red, "no colour words"}};
  EXPECT_DOUBLE_EQ(color_relevance_score(pairs), 0.5);
  EXPECT_THROW(color_relevance_score({{red, "no colour words"}}), MetricError);
  EXPECT_THROW(color_relevance_score(std::vector<std::pair<RgbImage, std::string>>{}), MetricError);
}

TEST(ColorRelevance, TensorOverloadMatchesImageOverload) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<std::pair<Tensor<float>, std::string>> tp;
  std::vector<std::pair<RgbImage, std::string>> ip;
  for (int i = 0; i < 5; ++i) {
    Tensor<float> t({3, 8, 8});
    for (auto& x : t.vec()) x = u(rng);
    tp.emplace_back(t, "red green white petals");
    ip.emplace_back(tensor_to_image(t), "red green white petals");
  }
  const double s = color_relevance_score(tp);
  EXPECT_DOUBLE_EQ(s, color_relevance_score(ip));
  EXPECT_GE(s, 0.0);
  EXPECT_LE(s, 1.0);
}

// ------------------------------------------------------------ toy classifier

TEST(ToyClassifier, ReachesNinetyPercentOnToyData) {
  ToySpec spec;
  spec.seed = 4;
  const auto records = generate_toy_dataset(spec);
  const auto res = train_toy_classifier(records, spec.num_classes());
  EXPECT_GE(res.heldout_accuracy, 0.9);
  std::vector<Tensor<float>> imgs;
  for (std::size_t i = 0; i < 20; ++i) imgs.push_back(resize_and_normalize<float>(records[i].image, 32));
  const auto p = res.classifier->predict(imgs);
  ASSERT_EQ(p.size(), 20u);
  for (std::size_t i = 0; i < p.size(); ++i) {
    ASSERT_EQ(p[i].size(), spec.num_classes());
    EXPECT_NO_THROW(check_distribution(p[i], i));
  }
  // Real toy images are confidently and diversely classified.
  EXPECT_GT(inception_score(res.classifier->predict(imgs), 1).mean, 5.0);
}

TEST(ToyClassifier, DeterministicAndResizesInputs) {
  ToySpec spec;
  spec.n_images = 40;
  spec.image_size = 16;
  const auto records = generate_toy_dataset(spec);
  ToyClassifierConfig cfg;
  cfg.epochs = 2;
  cfg.min_accuracy = 0;
  const auto a = train_toy_classifier(records, spec.num_classes(), cfg);
  const auto b = train_toy_classifier(records, spec.num_classes(), cfg);
  const std::vector<Tensor<float>> imgs{resize_and_normalize<float>(records[0].image, 16)};
  EXPECT_EQ(a.classifier->predict(imgs), b.classifier->predict(imgs));
  EXPECT_EQ(a.heldout_accuracy, b.heldout_accuracy);
}

TEST(ToyClassifier, Errors) {
  ToySpec spec;
  spec.n_images = 10;
  auto records = generate_toy_dataset(spec);
  ToyClassifierConfig cfg;
  cfg.epochs = 1;
  cfg.min_accuracy = 1.01;
  EXPECT_THROW(train_toy_classifier(records, spec.num_classes(), cfg), MetricError);
  records[3].class_id = -1;
  EXPECT_THROW(train_toy_classifier(records, spec.num_classes()), MetricError);
  records.resize(3);
  EXPECT_THROW(train_toy_classifier(records, spec.num_classes()), MetricError);
}

// ------------------------------------------------------------ plots

TEST(Plot, PanelsRenderSeries) {
  const std::vector<Series> s{{"d1_loss", {1, 0.5, 0.25}}, {"g1_loss", {0.1, std::nan(""), 0.3}}, {"empty", {}}};
  const auto img = plot_panels(s, "losses", 2);
  EXPECT_EQ(img.width, 520u);
  EXPECT_EQ(img.height, 2u * 150 + 26);
  std::size_t blue = 0;
  for (std::size_t i = 0; i < img.width * img.height; ++i)
    if (img.pixels[3 * i] == 31 && img.pixels[3 * i + 1] == 119 && img.pixels[3 * i + 2] == 180) ++blue;
  EXPECT_GT(blue, 50u);
}
