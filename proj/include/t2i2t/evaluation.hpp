#pragma once

// Inception score and color relevance score, plus the small toy-data
// classifier that stands in for an Inception network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "t2i2t/autograd.hpp"
#include "t2i2t/color_lexicon.hpp"
#include "t2i2t/data.hpp"
#include "t2i2t/nn.hpp"

namespace t2i2t {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// p(y|x) for images in [-1,1], shape [3,s,s].
class ClassifierProvider {
 public:
  virtual ~ClassifierProvider() = default;
  virtual std::size_t num_classes() const = 0;
  virtual std::vector<std::vector<double>> predict(const std::vector<Tensor<float>>& images) const = 0;
};

struct ScoreStats {
  double mean = 0;
  double std = 0;
};

inline void check_distribution(const std::vector<double>& p, std::size_t row) {
  double sum = 0;
  for (double v : p) {
    if (!(v >= 0) || !std::isfinite(v))
      throw MetricError("prediction row " + std::to_string(row) + " has a negative or non-finite entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw MetricError("prediction row " + std::to_string(row) + " sums to " + std::to_string(sum) + ", not 1");
}

// Splits rows into n_splits contiguous groups; per group exp(mean KL(p(y|x) || p(y))).
inline ScoreStats inception_score(const std::vector<std::vector<double>>& preds, std::size_t n_splits = 10) {
  if (preds.empty()) throw MetricError("inception_score: no images");
  if (n_splits == 0 || n_splits > preds.size())
    throw MetricError("inception_score: n_splits must lie in [1, " + std::to_string(preds.size()) + "]");
  const std::size_t k = preds[0].size();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != k) throw MetricError("inception_score: ragged prediction matrix");
    check_distribution(preds[i], i);
  }
  std::vector<double> scores;
  for (std::size_t s = 0; s < n_splits; ++s) {
    const std::size_t lo = s * preds.size() / n_splits, hi = (s + 1) * preds.size() / n_splits;
    std::vector<double> marginal(k, 0.0);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < k; ++c) marginal[c] += preds[i][c];
    for (auto& m : marginal) m /= double(hi - lo);
    double kl = 0;
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < k; ++c)
        if (preds[i][c] > 0) kl += preds[i][c] * (std::log(preds[i][c]) - std::log(marginal[c]));
    scores.push_back(std::exp(kl / double(hi - lo)));
  }
  ScoreStats out;
  out.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / double(scores.size());
  double var = 0;
  for (double v : scores) var += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(var / double(scores.size()));
  return out;
}

inline ScoreStats inception_score(const std::vector<Tensor<float>>& images, const ClassifierProvider& classifier,
                                  std::size_t n_splits = 10) {
  if (images.empty()) throw MetricError("inception_score: no images");
  return inception_score(classifier.predict(images), n_splits);
}

// ------------------------------------------------------------------ color relevance

// Lexicon colours occurring as tokens of the caption, in first-mention order.
inline std::vector<std::string> mentioned_colors(const std::string& caption, const ColorLexicon& lex) {
  std::vector<std::string> out;
  for (const auto& tok : split_caption(caption))
    if (lex.contains(tok) && std::find(out.begin(), out.end(), tok) == out.end()) out.push_back(tok);
  return out;
}

inline bool color_present(const RgbImage& img, const Rgb& proto, const ColorLexicon& lex) {
  const std::size_t n = img.width * img.height;
  if (n == 0) return false;
  const double tau2 = lex.match_distance * lex.match_distance;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double d2 = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = double(img.pixels[3 * i + c]) - double(proto[c]);
      d2 += d * d;
    }
    if (d2 <= tau2) ++hits;
  }
  return double(hits) >= lex.presence_fraction * double(n);
}

// Score of one pair, or nullopt when the caption names no lexicon colour.
inline std::optional<double> color_relevance(const RgbImage& img, const std::string& caption, const ColorLexicon& lex) {
  const auto named = mentioned_colors(caption, lex);
  if (named.empty()) return std::nullopt;
  std::size_t present = 0;
  for (const auto& c : named)
    if (color_present(img, lex.at(c), lex)) ++present;
  return double(present) / double(named.size());
}

inline double color_relevance_score(const std::vector<std::pair<RgbImage, std::string>>& pairs,
                                    const ColorLexicon& lex = basic_color_lexicon()) {
  if (pairs.empty()) throw MetricError("color_relevance_score: no pairs");
  double sum = 0;
  std::size_t used = 0;
  for (const auto& [img, cap] : pairs)
    if (auto s = color_relevance(img, cap, lex)) {
      sum += *s;
      ++used;
    }
  if (used == 0) throw MetricError("color_relevance_score: no caption mentions a lexicon color");
  return sum / double(used);
}

// Images given as [3,s,s] tensors in [-1,1].
inline double color_relevance_score(const std::vector<std::pair<Tensor<float>, std::string>>& pairs,
                                    const ColorLexicon& lex = basic_color_lexicon()) {
  std::vector<std::pair<RgbImage, std::string>> conv;
  conv.reserve(pairs.size());
  for (const auto& [t, cap] : pairs) conv.emplace_back(tensor_to_image(t), cap);
  return color_relevance_score(conv, lex);
}

// ------------------------------------------------------------------ toy classifier

struct ToyClassifierConfig {
  std::size_t image_size = 32;
  std::size_t width = 16;
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  double holdout = 0.2;
  double min_accuracy = 0.9;
  std::uint64_t seed = 0;
};

// Strided CNN: three 4x4/2 conv blocks, then a linear head over the flattened map.
class ToyClassifier final : public ClassifierProvider {
 public:
  ToyClassifier(std::size_t num_classes, const ToyClassifierConfig& cfg)
      : cfg_(cfg), k_(num_classes), params_("cls.") {
    if (cfg.image_size < 8 || (cfg.image_size & (cfg.image_size - 1)) != 0)
      throw std::invalid_argument("classifier image_size must be a power of two >= 8");
    Rng rng(derive_seed(cfg.seed, {0xC1A55ULL}));
    std::size_t c = 3;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t out = cfg.width << i;
      convs_.emplace_back(params_, "conv" + std::to_string(i), c, out, 4, 2, 1, rng, he_std(c * 16));
      c = out;
    }
    const std::size_t s = cfg.image_size / 8;
    head_ = Linear<float>(params_, "head", c * s * s, k_, rng);
  }

  std::size_t num_classes() const override { return k_; }
  const ToyClassifierConfig& config() const { return cfg_; }
  ParamSet<float>& params() { return params_; }

  ag::Var<float> logits(const ag::Var<float>& x) const {
    auto h = x;
    for (const auto& conv : convs_) h = ag::leaky_relu(conv(h), 0.2f);
    const std::size_t n = h.shape()[0];
    return head_(ag::reshape(h, {n, h.numel() / n}));
  }

  std::vector<std::vector<double>> predict(const std::vector<Tensor<float>>& images) const override {
    ag::NoGradGuard ng;
    std::vector<std::vector<double>> out;
    for (std::size_t lo = 0; lo < images.size(); lo += 64) {
      const std::size_t hi = std::min(images.size(), lo + 64);
      const auto lp = ag::log_softmax(logits(ag::constant(stack(images, lo, hi))));
      for (std::size_t i = 0; i < hi - lo; ++i) {
        std::vector<double> row(k_);
        double sum = 0;
        for (std::size_t c = 0; c < k_; ++c) sum += row[c] = std::exp(double(lp.value()[i * k_ + c]));
        for (auto& v : row) v /= sum;
        out.push_back(std::move(row));
      }
    }
    return out;
  }

  std::size_t argmax(const std::vector<double>& p) const {
    return std::size_t(std::max_element(p.begin(), p.end()) - p.begin());
  }

  // Resizes images of any size to the classifier's input size.
  Tensor<float> stack(const std::vector<Tensor<float>>& images, std::size_t lo, std::size_t hi) const {
    const std::size_t s = cfg_.image_size, per = 3 * s * s;
    Tensor<float> t({hi - lo, 3, s, s});
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& img = images[i];
      if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("classifier expects [3,s,s] images");
      if (img.dim(1) == s) {
        std::copy_n(img.data(), per, t.data() + (i - lo) * per);
      } else {
        const auto r = resize_and_normalize<float>(tensor_to_image(img), s);
        std::copy_n(r.data(), per, t.data() + (i - lo) * per);
      }
    }
    return t;
  }

 private:
  ToyClassifierConfig cfg_;
  std::size_t k_;
  ParamSet<float> params_;
  std::vector<Conv<float>> convs_;
  Linear<float> head_;
};

struct ToyClassifierResult {
  std::unique_ptr<ToyClassifier> classifier;
  double heldout_accuracy = 0;
};

// Trains on a seeded 80% of the labelled records and reports accuracy on the
// remaining 20%. Throws when accuracy stays below cfg.min_accuracy.
inline ToyClassifierResult train_toy_classifier(const std::vector<DatasetRecord>& records, std::size_t num_classes,
                                                const ToyClassifierConfig& cfg = {}) {
  if (records.size() < 5) throw MetricError("train_toy_classifier: need at least 5 labelled images");
  for (const auto& r : records)
    if (r.class_id < 0 || std::size_t(r.class_id) >= num_classes)
      throw MetricError("train_toy_classifier: record " + r.image_id + " has no valid class label");
  const auto perm = seeded_permutation(records.size(), derive_seed(cfg.seed, {0x5B17ULL}));
  const std::size_t n_test = std::max<std::size_t>(1, std::size_t(std::round(cfg.holdout * double(records.size()))));
  const std::size_t n_train = records.size() - n_test;

  std::vector<Tensor<float>> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(resize_and_normalize<float>(r.image, cfg.image_size));

  auto clf = std::make_unique<ToyClassifier>(num_classes, cfg);
  Adam<float> opt({&clf->params()}, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const std::size_t per = 3 * cfg.image_size * cfg.image_size;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = seeded_permutation(n_train, derive_seed(cfg.seed, {0xE90CULL, epoch}));
    for (std::size_t lo = 0; lo < n_train; lo += cfg.batch_size) {
      const std::size_t hi = std::min(n_train, lo + cfg.batch_size);
      Tensor<float> x({hi - lo, 3, cfg.image_size, cfg.image_size});
      std::vector<int> y;
      for (std::size_t i = lo; i < hi; ++i) {
        const std::size_t rec = perm[order[i]];
        std::copy_n(images[rec].data(), per, x.data() + (i - lo) * per);
        y.push_back(records[rec].class_id);
      }
      const auto lp = ag::log_softmax(clf->logits(ag::constant(x)));
      const auto loss = ag::scale(ag::mean(ag::pick(lp, y)), -1.0f);
      ag::backward(loss);
      opt.step();
    }
  }

  std::vector<Tensor<float>> test;
  for (std::size_t i = n_train; i < records.size(); ++i) test.push_back(images[perm[i]]);
  const auto preds = clf->predict(test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (int(clf->argmax(preds[i])) == records[perm[n_train + i]].class_id) ++correct;
  const double acc = double(correct) / double(preds.size());
  if (acc < cfg.min_accuracy)
    throw MetricError("toy classifier held-out accuracy " + std::to_string(acc) + " is below " +
                      std::to_string(cfg.min_accuracy) + "; train for more epochs");
  return {std::move(clf), acc};
}

}  // namespace t2i2t
