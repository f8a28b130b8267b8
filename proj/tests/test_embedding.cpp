#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "t2i2t/embedding.hpp"
#include "test_support.hpp"

using namespace t2i2t;
using t2i2t::testing::TempDir;

namespace {

double norm(const TextEmbedding& v) {
  double s = 0;
  for (float x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

class CountingProvider final : public EmbeddingProvider {
 public:
  explicit CountingProvider(std::size_t dim) : inner_(dim) {}
  std::string name() const override { return "counting"; }
  std::size_t dim() const override { return inner_.dim(); }
  TextEmbedding embed(const std::string& c) const override {
    ++calls;
    return inner_.embed(c);
  }
  mutable int calls = 0;

 private:
  HashingEmbeddingProvider inner_;
};

}  // namespace

TEST(Fallback, DeterministicAndNormalized) {
  HashingEmbeddingProvider p(2400);
  const auto a = p.embed("this flower has red petals");
  EXPECT_EQ(a, p.embed("this flower has red petals"));
  EXPECT_EQ(a.size(), 2400u);
  EXPECT_NEAR(norm(a), 1.0, 1e-6);
  // Normalization happens before hashing.
  EXPECT_EQ(a, p.embed("This flower, has RED petals!"));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) EXPECT_NEAR(norm(p.embed("w" + std::to_string(rng()))), 1.0, 1e-6);
}

TEST(Fallback, EmptyCaptionIsZero) {
  HashingEmbeddingProvider p(64);
  for (float x : p.embed("")) EXPECT_EQ(x, 0.0f);
  for (float x : p.embed(" ,.; ")) EXPECT_EQ(x, 0.0f);
}

TEST(Fallback, HashedBagCountsRepeatedTokens) {
  HashingEmbeddingProvider p(2400);
  const auto one = p.embed("red");
  const auto two = p.embed("red red");
  EXPECT_EQ(one, two);  // same direction after normalization
  const auto mixed = p.embed("red red blue");
  std::vector<double> sorted(mixed.begin(), mixed.end());
  std::sort(sorted.rbegin(), sorted.rend());
  if (sorted[1] > 0) {
    EXPECT_NEAR(sorted[0] / sorted[1], 2.0, 1e-5);
  }
}

TEST(Fallback, DisjointCaptionsAreNearlyOrthogonal) {
  HashingEmbeddingProvider p(2400);
  std::mt19937_64 rng(2);
  double total = 0;
  for (int pair = 0; pair < 100; ++pair) {
    std::string a, b;
    for (int k = 0; k < 8; ++k) {
      a += " a" + std::to_string(rng() % 100000);
      b += " b" + std::to_string(rng() % 100000);
    }
    const auto ea = p.embed(a), eb = p.embed(b);
    double dot = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) dot += double(ea[i]) * double(eb[i]);
    EXPECT_GE(dot, 0.0);
    total += dot;
  }
  EXPECT_LT(total / 100, 0.2);
}

TEST(Interpolate, EndpointsAndMidpoint) {
  const std::vector<double> e1{2, 0, 0, 5}, e2{0, 2, 0, -1};
  EXPECT_EQ(interpolate(e1, e2, 1.0), e1);
  EXPECT_EQ(interpolate(e1, e2, 0.0), e2);
  EXPECT_EQ(interpolate(e1, e2, 0.5), (std::vector<double>{1, 1, 0, 2}));
}

TEST(Interpolate, Linearity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> e1(16), e2(16);
    for (auto& x : e1) x = u(rng);
    for (auto& x : e2) x = u(rng);
    const double beta = (u(rng) + 1) / 2;
    const auto a = interpolate(e1, e2, beta), b = interpolate(e1, e2, 1 - beta);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(a[i] + b[i], e1[i] + e2[i], 1e-9);
  }
}

TEST(Interpolate, Errors) {
  EXPECT_THROW(interpolate(std::vector<double>{1, 2}, std::vector<double>{1}, 0.5), std::invalid_argument);
  EXPECT_THROW(interpolate(std::vector<double>{1}, std::vector<double>{1}, 1.5), std::invalid_argument);
}

TEST(Cache, MissThenHitInvokesProviderOnce) {
  TempDir dir("cache");
  CountingProvider p(32);
  EmbeddingCache cache(dir.path() / "c.t2ie", 32);
  const auto a = cache.get_or_compute(p, "red petals");
  const auto b = cache.get_or_compute(p, "red petals");
  EXPECT_EQ(p.calls, 1);
  EXPECT_EQ(a, b);
  // Keys are normalized captions.
  cache.get_or_compute(p, "Red petals.");
  EXPECT_EQ(p.calls, 1);
}

TEST(Cache, SurvivesRestart) {
  TempDir dir("cache2");
  const auto path = dir.path() / "c.t2ie";
  TextEmbedding first;
  {
    CountingProvider p(32);
    EmbeddingCache cache(path, 32);
    first = cache.get_or_compute(p, "blue center");
    cache.get_or_compute(p, "white petals");
    cache.flush();
  }
  CountingProvider p(32);
  EmbeddingCache cache(path, 32);
  EXPECT_EQ(cache.size(), 2u);
  EXPECT_EQ(cache.get_or_compute(p, "blue center"), first);
  EXPECT_EQ(p.calls, 0);
}

TEST(Cache, FileLayout) {
  TempDir dir("cache3");
  const auto path = dir.path() / "c.t2ie";
  {
    HashingEmbeddingProvider p(4);
    EmbeddingCache cache(path, 4);
    cache.get_or_compute(p, "red");
  }
  std::ifstream in(path, std::ios::binary);
  std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  ASSERT_EQ(buf.size(), 4u + 4u + 8u + 4u * 4u);
  EXPECT_EQ(buf.substr(0, 4), "T2IE");
  EXPECT_EQ(std::uint8_t(buf[4]), 4);
  std::uint64_t key = 0;
  for (int i = 0; i < 8; ++i) key |= std::uint64_t(std::uint8_t(buf[8 + i])) << (8 * i);
  EXPECT_EQ(key, caption_key("red"));
}

TEST(Cache, DimensionMismatchAndCorruption) {
  TempDir dir("cache4");
  const auto path = dir.path() / "c.t2ie";
  HashingEmbeddingProvider big(2400);
  {
    EmbeddingCache cache(path, 128);
    EXPECT_THROW(cache.get_or_compute(big, "red"), std::invalid_argument);
    HashingEmbeddingProvider p(128);
    cache.get_or_compute(p, "red");
  }
  EXPECT_THROW(EmbeddingCache(path, 2400), CacheFormatError);
  // Truncate mid-record: the error names a byte offset.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  try {
    EmbeddingCache c(path, 128);
    FAIL() << "expected CacheFormatError";
  } catch (const CacheFormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
  std::ofstream(path, std::ios::trunc) << "XXXXXXXXXXXX";
  EXPECT_THROW(EmbeddingCache(path, 128), CacheFormatError);
}

TEST(External, ReadsVectorFileAndNeverFallsBack) {
  TempDir dir("ext");
  const auto path = dir.path() / "vectors.t2ie";
  EXPECT_THROW(ExternalEmbeddingProvider{path}, ProviderUnavailable);
  {
    std::string buf = "T2IE";
    detail::put_le(buf, std::uint32_t(3));
    detail::put_le(buf, caption_key("red petals"));
    for (float f : {0.5f, -2.0f, 3.0f}) detail::put_f32(buf, f);
    std::ofstream(path, std::ios::binary) << buf;
  }
  ExternalEmbeddingProvider p(path);
  EXPECT_EQ(p.dim(), 3u);
  // Passed through unchanged, not normalized.
  EXPECT_EQ(p.embed("Red petals"), (TextEmbedding{0.5f, -2.0f, 3.0f}));
  try {
    p.embed("blue petals");
    FAIL() << "expected ProviderUnavailable";
  } catch (const ProviderUnavailable& e) {
    EXPECT_NE(std::string(e.what()).find("external"), std::string::npos);
  }
}
