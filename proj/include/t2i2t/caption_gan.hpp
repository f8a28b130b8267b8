#pragma once

// Adversarial image captioning.
//
// Captioner F (theta): CNN image features, concatenated with noise z, are
// projected to the token space and fed as the first LSTM input; START and
// the caption tokens follow. Output is a softmax over the whole vocabulary;
// decoding never emits PAD or START.
//
// Evaluator E (eta): r(I, S) = sigmoid(<f(I), h(S)>), with f a separate CNN
// and h the LSTM state at the caption's END token.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2i2t/data.hpp"
#include "t2i2t/image_gan.hpp"
#include "t2i2t/losses.hpp"
#include "t2i2t/nn.hpp"

namespace t2i2t {

struct CaptionGanConfig {
  std::size_t vocab_size = 0;
  std::size_t t_max = 20;
  std::size_t image_size = 128;
  std::size_t width = 256;
  std::size_t min_channels = 8;
  std::size_t feat_dim = 256;
  std::size_t z_dim = 100;
  std::size_t token_dim = 256;
  std::size_t hidden = 512;
  std::size_t reward_dim = 256;
  double leak = 0.2;

  void validate() const {
    if (vocab_size <= Vocabulary::kNumSpecials) throw std::invalid_argument("caption vocab too small");
    if (t_max < 3) throw std::invalid_argument("t_max must be >= 3");
    if (image_size < 4 || !std::has_single_bit(image_size)) throw std::invalid_argument("caption image size");
  }
};

enum class DecodeMode { greedy, sample };

// Convolutional image encoder: stride-2 blocks down to 4x4, then a dense layer.
template <class T>
struct ImageEncoder {
  std::vector<Conv<T>> down;
  Linear<T> fc;
  std::size_t image_size = 0, out_ch = 0;
  T leak{0.2};

  ImageEncoder() = default;
  ImageEncoder(ParamSet<T>& ps, const std::string& name, std::size_t image_size_, std::size_t width,
               std::size_t min_ch, std::size_t feat_dim, double leak_, Rng& rng)
      : image_size(image_size_), leak(T(leak_)) {
    const std::size_t blocks = detail::log2_exact(image_size_) - 2;
    std::size_t ch = 3;
    for (std::size_t i = 0; i < blocks; ++i) {
      const std::size_t next = detail::channels_at(width, blocks - 1 - i, min_ch);
      down.emplace_back(ps, name + ".down" + std::to_string(i), ch, next, 4, 2, 1, rng, he_std(ch * 16, leak_));
      ch = next;
    }
    out_ch = ch;
    fc = Linear<T>(ps, name + ".fc", ch * 16, feat_dim, rng);
  }

  ag::Var<T> operator()(const ag::Var<T>& images) const {
    detail::check_image(images, image_size, "caption image encoder");
    auto h = images;
    for (const auto& c : down) h = ag::leaky_relu(c(h), leak);
    return ag::leaky_relu(fc(ag::reshape(h, {images.dim(0), out_ch * 16})), leak);
  }
};

namespace detail {

inline bool decodable(int id) { return id != Vocabulary::kPad && id != Vocabulary::kStart; }

// Softmax restricted to decodable ids.
template <class T>
std::vector<double> decode_distribution(const T* logits, std::size_t v) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < v; ++k)
    if (decodable(int(k))) m = std::max(m, double(logits[k]));
  std::vector<double> p(v, 0.0);
  double s = 0;
  for (std::size_t k = 0; k < v; ++k)
    if (decodable(int(k))) s += (p[k] = std::exp(double(logits[k]) - m));
  for (auto& x : p) x /= s;
  return p;
}

inline int argmax_decodable(const std::vector<double>& p) {
  int best = Vocabulary::kEnd;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (decodable(int(k)) && p[k] > p[best]) best = int(k);
  return best;
}

inline int sample_from(const std::vector<double>& p, Rng& rng) {
  const double u = unit(rng);
  double acc = 0;
  int last = Vocabulary::kEnd;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] <= 0) continue;
    acc += p[k];
    last = int(k);
    if (u < acc) return int(k);
  }
  return last;
}

template <class T>
Tensor<T> stack_rows(const Tensor<T>& src, const std::vector<std::size_t>& rows) {
  Shape s = src.shape();
  const std::size_t stride = src.numel() / s[0];
  s[0] = rows.size();
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(src.data() + rows[r] * stride, stride, out.data() + r * stride);
  return out;
}

}  // namespace detail

template <class T>
class Captioner {
 public:
  Captioner(const CaptionGanConfig& cfg, Rng& rng) : cfg_(cfg), params_("f.") {
    cfg.validate();
    encoder_ = ImageEncoder<T>(params_, "enc", cfg.image_size, cfg.width, cfg.min_channels, cfg.feat_dim,
                               cfg.leak, rng);
    proj_ = Linear<T>(params_, "proj", cfg.feat_dim + cfg.z_dim, cfg.token_dim, rng);
    tokens_ = params_.add("tok", uniform_tensor<T>({cfg.vocab_size, cfg.token_dim}, rng, 0.1));
    lstm_ = LstmCell<T>(params_, "lstm", 2 * cfg.token_dim, cfg.hidden, rng);
    out_ = Linear<T>(params_, "out", cfg.hidden, cfg.vocab_size, rng);
  }

  // Decoder state plus the image context ctx = proj([feat; z]) that is fed
  // alongside every token.
  struct State {
    LstmState<T> lstm;
    ag::Var<T> ctx;
  };

  // State after consuming START.
  State start(const ag::Var<T>& images, const ag::Var<T>& noise) const {
    if (noise.shape().size() != 2 || noise.dim(1) != cfg_.z_dim || noise.dim(0) != images.dim(0))
      throw ShapeError("captioner noise: expected [N," + std::to_string(cfg_.z_dim) + "], got " +
                       shape_str(noise.shape()));
    const std::size_t n = images.dim(0);
    State s{lstm_.zero_state(n), proj_(ag::concat(encoder_(images), noise))};
    return feed(s, std::vector<int>(n, Vocabulary::kStart));
  }

  ag::Var<T> logits(const State& s) const { return out_(s.lstm.h); }

  State feed(const State& s, const std::vector<int>& ids) const {
    return {lstm_(ag::concat(ag::embedding(tokens_, ids), s.ctx), s.lstm), s.ctx};
  }

  // Teacher-forced log-probabilities: element k-1 is log p(. | I, ids[0..k-1])
  // for positions k = 1 .. max_len, each [N,V].
  std::vector<ag::Var<T>> teacher_forced(const ag::Var<T>& images, const ag::Var<T>& noise,
                                         const std::vector<CaptionTokens>& captions) const {
    const std::size_t n = images.dim(0);
    if (captions.size() != n) throw ShapeError("teacher_forced: caption count mismatch");
    std::size_t max_len = 0;
    for (const auto& c : captions) {
      if (c.ids.size() != cfg_.t_max || !valid_caption_tokens(c, cfg_.vocab_size))
        throw std::invalid_argument("teacher_forced: invalid caption tokens");
      max_len = std::max(max_len, c.length);
    }
    std::vector<ag::Var<T>> out;
    auto s = start(images, noise);
    for (std::size_t k = 1; k <= max_len; ++k) {
      out.push_back(ag::log_softmax(logits(s)));
      if (k == max_len) break;
      std::vector<int> ids(n);
      for (std::size_t i = 0; i < n; ++i) ids[i] = captions[i].ids[k];
      s = feed(s, ids);
    }
    return out;
  }

  // Mean over the batch of -sum_t log p(w_t | I, w_<t), t over words and END.
  ag::Var<T> mle_loss(const ag::Var<T>& images, const ag::Var<T>& noise,
                      const std::vector<CaptionTokens>& captions) const {
    const auto logp = teacher_forced(images, noise, captions);
    const std::size_t n = images.dim(0);
    ag::Var<T> total;
    for (std::size_t k = 1; k <= logp.size(); ++k) {
      std::vector<int> target(n);
      Tensor<T> mask({n});
      for (std::size_t i = 0; i < n; ++i) {
        target[i] = captions[i].ids[k];
        mask[i] = k <= captions[i].length ? T{1} : T{0};
      }
      auto term = ag::sum(ag::mul_const(ag::pick(logp[k - 1], target), mask));
      total = total.defined() ? ag::add(total, term) : term;
    }
    return ag::scale(total, T(-1) / T(n));
  }

  // Autoregressive decoding, one noise row per image.
  std::vector<CaptionTokens> generate(const Tensor<T>& images, const Tensor<T>& noise, DecodeMode mode,
                                      std::uint64_t seed) const {
    ag::NoGradGuard no_grad;
    const std::size_t n = images.dim(0);
    Rng rng(seed);
    auto s = start(ag::constant(images), ag::constant(noise));
    std::vector<std::vector<int>> words(n);
    std::vector<bool> done(n, false);
    for (std::size_t step = 0; step < cfg_.t_max - 2; ++step) {
      const auto lg = logits(s);
      std::vector<int> next(n, Vocabulary::kEnd);
      bool any = false;
      for (std::size_t i = 0; i < n; ++i) {
        if (done[i]) continue;
        const auto p = detail::decode_distribution(lg.value().data() + i * cfg_.vocab_size, cfg_.vocab_size);
        const int w = mode == DecodeMode::greedy ? detail::argmax_decodable(p) : detail::sample_from(p, rng);
        if (w == Vocabulary::kEnd) {
          done[i] = true;
          continue;
        }
        words[i].push_back(w);
        next[i] = w;
        any = true;
      }
      if (!any) break;
      s = feed(s, next);
    }
    std::vector<CaptionTokens> out;
    for (auto& w : words) out.push_back(make_caption(w, cfg_.t_max));
    return out;
  }

  // One stochastic continuation of `prefix` (tokens after START) for a single
  // image [1,3,S,S]. A prefix already ending in END is returned as is.
  CaptionTokens rollout_complete(const Tensor<T>& image, const Tensor<T>& noise, const std::vector<int>& prefix,
                                 std::uint64_t seed) const {
    return rollout_batch(image, noise, {0}, {prefix}, {seed})[0];
  }

  // rollout_complete for many prefixes at once: row r continues prefixes[r]
  // on image rows[r], sampling from its own Rng(seeds[r]).
  std::vector<CaptionTokens> rollout_batch(const Tensor<T>& images, const Tensor<T>& noise,
                                           const std::vector<std::size_t>& rows,
                                           const std::vector<std::vector<int>>& prefixes,
                                           const std::vector<std::uint64_t>& seeds) const {
    const std::size_t r_count = rows.size();
    if (prefixes.size() != r_count || seeds.size() != r_count) throw ShapeError("rollout_batch: length mismatch");
    const std::size_t limit = cfg_.t_max - 2;
    std::vector<std::vector<int>> words(r_count);
    std::vector<std::size_t> pos(r_count, 0);
    std::vector<bool> done(r_count, false);
    std::vector<Rng> rngs;
    for (std::size_t r = 0; r < r_count; ++r) {
      if (rows[r] >= images.dim(0)) throw std::out_of_range("rollout_batch: image row");
      const auto& prefix = prefixes[r];
      if (prefix.size() > cfg_.t_max - 1) throw std::invalid_argument("rollout prefix longer than t_max");
      for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (prefix[i] == Vocabulary::kEnd) {
          if (i + 1 != prefix.size()) throw std::invalid_argument("END inside rollout prefix");
          done[r] = true;
          break;
        }
        if (!detail::decodable(prefix[i])) throw std::invalid_argument("PAD/START inside rollout prefix");
        words[r].push_back(prefix[i]);
      }
      if (words[r].size() >= limit) done[r] = true;
      rngs.emplace_back(seeds[r]);
    }
    ag::NoGradGuard no_grad;
    if (std::find(done.begin(), done.end(), false) != done.end()) {
      const auto s0 = start(ag::constant(images), ag::constant(noise));
      State s{{ag::constant(detail::stack_rows(s0.lstm.h.value(), rows)),
               ag::constant(detail::stack_rows(s0.lstm.c.value(), rows))},
              ag::constant(detail::stack_rows(s0.ctx.value(), rows))};
      // Each row first replays its prefix, then samples until END or the limit.
      for (;;) {
        const auto lg = logits(s);
        std::vector<int> next(r_count, Vocabulary::kEnd);
        bool any = false;
        for (std::size_t r = 0; r < r_count; ++r) {
          if (done[r]) continue;
          if (pos[r] == words[r].size()) {
            const auto p = detail::decode_distribution(lg.value().data() + r * cfg_.vocab_size, cfg_.vocab_size);
            const int w = detail::sample_from(p, rngs[r]);
            if (w == Vocabulary::kEnd) {
              done[r] = true;
              continue;
            }
            words[r].push_back(w);
          }
          next[r] = words[r][pos[r]++];
          if (pos[r] == words[r].size() && words[r].size() >= limit) done[r] = true;
          any = true;
        }
        if (!any || std::find(done.begin(), done.end(), false) == done.end()) break;
        s = feed(s, next);
      }
    }
    std::vector<CaptionTokens> out;
    for (auto& w : words) out.push_back(make_caption(w, cfg_.t_max));
    return out;
  }

  const CaptionGanConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  Linear<T>& output_layer() { return out_; }

 private:
  CaptionGanConfig cfg_;
  ParamSet<T> params_;
  ImageEncoder<T> encoder_;
  Linear<T> proj_;
  ag::Var<T> tokens_;
  LstmCell<T> lstm_;
  Linear<T> out_;
};

template <class T>
class Evaluator {
 public:
  Evaluator(const CaptionGanConfig& cfg, Rng& rng) : cfg_(cfg), params_("e.") {
    cfg.validate();
    encoder_ = ImageEncoder<T>(params_, "enc", cfg.image_size, cfg.width, cfg.min_channels, cfg.feat_dim,
                               cfg.leak, rng);
    f_proj_ = Linear<T>(params_, "fproj", cfg.feat_dim, cfg.reward_dim, rng);
    tokens_ = params_.add("tok", uniform_tensor<T>({cfg.vocab_size, cfg.token_dim}, rng, 0.1));
    lstm_ = LstmCell<T>(params_, "lstm", cfg.token_dim, cfg.hidden, rng);
    h_proj_ = Linear<T>(params_, "hproj", cfg.hidden, cfg.reward_dim, rng);
  }

  // f(I): [N, reward_dim].
  ag::Var<T> image_features(const ag::Var<T>& images) const { return f_proj_(encoder_(images)); }

  // h(S): LSTM hidden state at each caption's END, projected: [N, reward_dim].
  ag::Var<T> caption_features(const std::vector<CaptionTokens>& captions) const {
    const std::size_t n = captions.size();
    std::size_t last = 0;
    for (const auto& c : captions) {
      if (c.ids.size() != cfg_.t_max || !valid_caption_tokens(c, cfg_.vocab_size))
        throw std::invalid_argument("evaluator: invalid caption tokens");
      last = std::max(last, c.end_pos());
    }
    auto s = lstm_.zero_state(n);
    ag::Var<T> picked;
    for (std::size_t k = 0; k <= last; ++k) {
      std::vector<int> ids(n);
      Tensor<T> mask({n, cfg_.hidden});
      bool any = false;
      for (std::size_t i = 0; i < n; ++i) {
        ids[i] = captions[i].ids[k];
        if (captions[i].end_pos() == k) {
          std::fill_n(mask.data() + i * cfg_.hidden, cfg_.hidden, T{1});
          any = true;
        }
      }
      s = lstm_(ag::embedding(tokens_, ids), s);
      if (any) {
        auto term = ag::mul_const(s.h, mask);
        picked = picked.defined() ? ag::add(picked, term) : term;
      }
    }
    return h_proj_(picked);
  }

  // <f, h> for precomputed image features (rows aligned with captions).
  ag::Var<T> logits_from_features(const ag::Var<T>& feats, const std::vector<CaptionTokens>& captions) const {
    return ag::rowdot(feats, caption_features(captions));
  }

  ag::Var<T> logits(const ag::Var<T>& images, const std::vector<CaptionTokens>& captions) const {
    return logits_from_features(image_features(images), captions);
  }

  ag::Var<T> reward(const ag::Var<T>& images, const std::vector<CaptionTokens>& captions) const {
    return ag::sigmoid(logits(images, captions));
  }

  const CaptionGanConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  CaptionGanConfig cfg_;
  ParamSet<T> params_;
  ImageEncoder<T> encoder_;
  Linear<T> f_proj_;
  ag::Var<T> tokens_;
  LstmCell<T> lstm_;
  Linear<T> h_proj_;
};

// log r(I,real) + alpha log(1 - r(I,fake)) + beta_w log(1 - r(I,wrong)),
// batch means, ascended by the evaluator.
template <class T>
ag::Var<T> evaluator_objective(const Evaluator<T>& e, const ag::Var<T>& images,
                               const std::vector<CaptionTokens>& real, const std::vector<CaptionTokens>& fake,
                               const std::vector<CaptionTokens>& wrong, double alpha, double beta_w) {
  const auto f = e.image_features(images);
  auto obj = gl::mean_log_score(e.logits_from_features(f, real));
  if (alpha != 0)
    obj = ag::add(obj, ag::scale(gl::mean_log1m_score(e.logits_from_features(f, fake)), T(alpha)));
  if (beta_w != 0)
    obj = ag::add(obj, ag::scale(gl::mean_log1m_score(e.logits_from_features(f, wrong)), T(beta_w)));
  return obj;
}

// Rewards for captions[j] paired with image image_index[j] of the batch.
using RewardFn =
    std::function<std::vector<double>(const std::vector<std::size_t>& image_index, const std::vector<CaptionTokens>&)>;

template <class T>
RewardFn evaluator_reward(const Evaluator<T>& e, const Tensor<T>& images) {
  return [&e, images](const std::vector<std::size_t>& idx, const std::vector<CaptionTokens>& caps) {
    ag::NoGradGuard no_grad;
    const auto feats = e.image_features(ag::constant(images));
    const auto r = ag::sigmoid(e.logits_from_features(ag::constant(detail::stack_rows(feats.value(), idx)), caps));
    return std::vector<double>(r.value().vec().begin(), r.value().vec().end());
  };
}

// Composite caption used to score step t: the real prefix, the most likely
// next word, then one sampled rollout.
struct AdvStep {
  std::size_t sample = 0, t = 0;
  int argmax_word = 0;
  CaptionTokens composed;
};

template <class T>
std::vector<AdvStep> adversarial_rollouts(const Captioner<T>& f, const Tensor<T>& images, const Tensor<T>& noise,
                                          const std::vector<CaptionTokens>& real,
                                          const std::vector<ag::Var<T>>& logp, std::uint64_t seed) {
  const std::size_t v = f.config().vocab_size;
  std::vector<AdvStep> steps;
  std::vector<std::size_t> rows;
  std::vector<std::vector<int>> prefixes;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < real.size(); ++i) {
    for (std::size_t t = 1; t <= real[i].length; ++t) {
      std::vector<double> p(v);
      for (std::size_t k = 0; k < v; ++k) p[k] = std::exp(double(logp[t - 1].value()[i * v + k]));
      const int w = detail::argmax_decodable(p);
      std::vector<int> prefix(real[i].ids.begin() + 1, real[i].ids.begin() + t);
      prefix.push_back(w);
      steps.push_back({i, t, w, {}});
      rows.push_back(i);
      prefixes.push_back(std::move(prefix));
      seeds.push_back(derive_seed(seed, {i, t}));
    }
  }
  const auto composed = f.rollout_batch(images, noise, rows, prefixes, seeds);
  for (std::size_t j = 0; j < steps.size(); ++j) steps[j].composed = composed[j];
  return steps;
}

// -sum_t pi(argmax_t | I, S_<t) * r(I, S^(t)), averaged over the batch. The
// reward is a constant weight; gradient reaches theta only through pi.
template <class T>
ag::Var<T> captioner_adv_loss(const Captioner<T>& f, const Tensor<T>& images, const Tensor<T>& noise,
                              const std::vector<CaptionTokens>& real, std::uint64_t seed, const RewardFn& reward) {
  const std::size_t n = real.size();
  for (const auto& c : real)
    if (c.length < 1) throw std::invalid_argument("captioner_adv_loss: empty real caption");
  const auto logp = f.teacher_forced(ag::constant(images), ag::constant(noise), real);
  const auto steps = adversarial_rollouts(f, images, noise, real, logp, seed);
  std::vector<std::size_t> idx;
  std::vector<CaptionTokens> caps;
  for (const auto& s : steps) {
    idx.push_back(s.sample);
    caps.push_back(s.composed);
  }
  const auto r = reward(idx, caps);
  ag::Var<T> total;
  for (std::size_t t = 1; t <= logp.size(); ++t) {
    std::vector<int> word(n, Vocabulary::kEnd);
    Tensor<T> weight({n});
    for (std::size_t j = 0; j < steps.size(); ++j)
      if (steps[j].t == t) {
        word[steps[j].sample] = steps[j].argmax_word;
        weight[steps[j].sample] = T(r[j]);
      }
    auto term = ag::sum(ag::mul_const(ag::exp(ag::pick(logp[t - 1], word)), weight));
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, T(-1) / T(n));
}

template <class T>
ag::Var<T> captioner_adv_loss(const Captioner<T>& f, const Evaluator<T>& e, const Tensor<T>& images,
                              const Tensor<T>& noise, const std::vector<CaptionTokens>& real, std::uint64_t seed) {
  return captioner_adv_loss(f, images, noise, real, seed, evaluator_reward(e, images));
}

template <class T>
ag::Var<T> captioner_mle_loss(const Captioner<T>& f, const ag::Var<T>& images, const ag::Var<T>& noise,
                              const std::vector<CaptionTokens>& real) {
  return f.mle_loss(images, noise, real);
}

}  // namespace t2i2t
