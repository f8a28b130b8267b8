#pragma once

// Two-stage text-conditioned image GAN.
//
//   G1: (z, psi) -> 3 x s1 x s1        D1: (image s1, psi) -> score
//   G2: (I1, psi) -> 3 x s2 x s2       D2: (image s2, psi) -> score
//
// Every network compresses psi with its own fully connected layer followed
// by Leaky-ReLU. Generators normalise per sample (pixel norm), so each sample
// is computed independently of the rest of its batch. G2 takes no noise.

#include <bit>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2i2t/nn.hpp"

namespace t2i2t {

struct ImageGanConfig {
  std::size_t embed_dim = 2400;
  std::size_t z_dim = 100;
  std::size_t c_dim = 128;
  std::size_t size1 = 64;
  std::size_t size2 = 128;
  std::size_t width = 512;
  std::size_t min_channels = 8;
  std::size_t res_blocks = 4;
  double leak = 0.2;

  void validate() const {
    auto pow2 = [](std::size_t v) { return v >= 8 && std::has_single_bit(v); };
    if (!pow2(size1) || !pow2(size2) || size2 < size1)
      throw std::invalid_argument("image sizes must be powers of two >= 8 with size2 >= size1");
    if (embed_dim == 0 || z_dim == 0 || c_dim == 0 || width == 0)
      throw std::invalid_argument("image GAN dimensions must be positive");
  }
};

namespace detail {

inline std::size_t log2_exact(std::size_t v) { return static_cast<std::size_t>(std::countr_zero(v)); }

inline std::size_t channels_at(std::size_t width, std::size_t shift, std::size_t min_ch) {
  return std::max(width >> shift, min_ch);
}

template <class T>
void check_batch(const ag::Var<T>& v, std::size_t rank, std::size_t d1, const char* what) {
  if (v.shape().size() != rank || v.dim(1) != d1)
    throw ShapeError(std::string(what) + ": unexpected shape " + shape_str(v.shape()));
}

template <class T>
void check_image(const ag::Var<T>& img, std::size_t size, const char* what) {
  const auto& s = img.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != size || s[3] != size)
    throw ShapeError(std::string(what) + ": expected [N,3," + std::to_string(size) + "," +
                     std::to_string(size) + "], got " + shape_str(s));
}

}  // namespace detail

// psi -> Leaky-ReLU(W psi + b).
template <class T>
struct EmbeddingCompressor {
  Linear<T> fc;
  std::size_t embed_dim = 0;
  T leak{0.2};

  EmbeddingCompressor() = default;
  EmbeddingCompressor(ParamSet<T>& ps, const std::string& name, std::size_t embed_dim_,
                      std::size_t c_dim, double leak_, Rng& rng)
      : fc(ps, name, embed_dim_, c_dim, rng), embed_dim(embed_dim_), leak(T(leak_)) {}

  ag::Var<T> operator()(const ag::Var<T>& psi) const {
    detail::check_batch(psi, 2, embed_dim, "compress_embedding");
    return ag::leaky_relu(fc(psi), leak);
  }
};

template <class T>
ag::Var<T> compress_embedding(const ag::Var<T>& psi, const EmbeddingCompressor<T>& params) {
  return params(psi);
}

template <class T>
class Stage1Generator {
 public:
  Stage1Generator(const ImageGanConfig& cfg, Rng& rng) : cfg_(cfg), params_("g1.") {
    cfg.validate();
    compress_ = EmbeddingCompressor<T>(params_, "compress", cfg.embed_dim, cfg.c_dim, cfg.leak, rng);
    seed_fc_ = Linear<T>(params_, "seed", cfg.z_dim + cfg.c_dim, cfg.width * 16, rng);
    const std::size_t blocks = detail::log2_exact(cfg.size1) - 2;
    std::size_t ch = cfg.width;
    for (std::size_t i = 0; i < blocks; ++i) {
      const std::size_t next = detail::channels_at(cfg.width, i + 1, cfg.min_channels);
      up_.emplace_back(params_, "up" + std::to_string(i), ch, next, 3, 1, 1, rng);
      ch = next;
    }
    out_ = Conv<T>(params_, "out", ch, 3, 3, 1, 1, rng);
  }

  ag::Var<T> operator()(const ag::Var<T>& z, const ag::Var<T>& psi) const {
    detail::check_batch(z, 2, cfg_.z_dim, "g1 noise");
    const std::size_t n = z.dim(0);
    if (psi.dim(0) != n) throw ShapeError("g1: noise/embedding batch mismatch");
    const T leak(cfg_.leak);
    auto h = seed_fc_(ag::concat(z, compress_(psi)));
    h = ag::leaky_relu(ag::pixel_norm(ag::reshape(h, {n, cfg_.width, 4, 4})), leak);
    for (const auto& conv : up_) h = ag::leaky_relu(ag::pixel_norm(conv(ag::upsample2x(h))), leak);
    return ag::tanh(out_(h));
  }

  const ImageGanConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  ImageGanConfig cfg_;
  ParamSet<T> params_;
  EmbeddingCompressor<T> compress_;
  Linear<T> seed_fc_;
  std::vector<Conv<T>> up_;
  Conv<T> out_;
};

// Shared body of D1 and D2: stride-2 downsampling to 4x4, channel concat of
// the spatially replicated compressed embedding, then a sigmoid head.
template <class T>
class Discriminator {
 public:
  Discriminator(const ImageGanConfig& cfg, std::size_t image_size, const std::string& prefix, Rng& rng)
      : cfg_(cfg), size_(image_size), params_(prefix) {
    cfg.validate();
    const std::size_t blocks = detail::log2_exact(image_size) - 2;
    std::size_t ch = 3;
    for (std::size_t i = 0; i < blocks; ++i) {
      const std::size_t next = detail::channels_at(cfg.width, blocks - 1 - i, cfg.min_channels);
      down_.emplace_back(params_, "down" + std::to_string(i), ch, next, 4, 2, 1, rng);
      ch = next;
    }
    compress_ = EmbeddingCompressor<T>(params_, "compress", cfg.embed_dim, cfg.c_dim, cfg.leak, rng);
    joint_ = Conv<T>(params_, "joint", ch + cfg.c_dim, cfg.width, 1, 1, 0, rng);
    head_ = Linear<T>(params_, "head", cfg.width * 16, 1, rng);
  }

  // Pre-sigmoid logits, shape [N].
  ag::Var<T> logits(const ag::Var<T>& image, const ag::Var<T>& psi) const {
    detail::check_image(image, size_, "discriminator");
    const std::size_t n = image.dim(0);
    if (psi.dim(0) != n) throw ShapeError("discriminator: image/embedding batch mismatch");
    const T leak(cfg_.leak);
    auto h = image;
    for (const auto& conv : down_) h = ag::leaky_relu(conv(h), leak);
    h = ag::concat(h, ag::replicate_spatial(compress_(psi), 4, 4));
    h = ag::leaky_relu(joint_(h), leak);
    return ag::reshape(head_(ag::reshape(h, {n, cfg_.width * 16})), {n});
  }

  // Scores in (0,1).
  ag::Var<T> operator()(const ag::Var<T>& image, const ag::Var<T>& psi) const {
    return ag::sigmoid(logits(image, psi));
  }

  Linear<T>& head() { return head_; }
  std::size_t image_size() const { return size_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  ImageGanConfig cfg_;
  std::size_t size_;
  ParamSet<T> params_;
  std::vector<Conv<T>> down_;
  EmbeddingCompressor<T> compress_;
  Conv<T> joint_;
  Linear<T> head_;
};

template <class T>
class Stage2Generator {
 public:
  Stage2Generator(const ImageGanConfig& cfg, Rng& rng) : cfg_(cfg), params_("g2.") {
    cfg.validate();
    // Two downsampling blocks: s1 -> s1/4, ending at `width` channels.
    std::size_t ch = 3;
    for (std::size_t i = 0; i < 2; ++i) {
      const std::size_t next = detail::channels_at(cfg.width, 1 - i, cfg.min_channels);
      down_.emplace_back(params_, "down" + std::to_string(i), ch, next, 4, 2, 1, rng);
      ch = next;
    }
    compress_ = EmbeddingCompressor<T>(params_, "compress", cfg.embed_dim, cfg.c_dim, cfg.leak, rng);
    joint_ = Conv<T>(params_, "joint", cfg.width + cfg.c_dim, cfg.width, 3, 1, 1, rng);
    for (std::size_t i = 0; i < cfg.res_blocks; ++i) {
      res_.push_back({Conv<T>(params_, "res" + std::to_string(i) + ".a", cfg.width, cfg.width, 3, 1, 1, rng),
                      Conv<T>(params_, "res" + std::to_string(i) + ".b", cfg.width, cfg.width, 3, 1, 1, rng)});
    }
    const std::size_t blocks = detail::log2_exact(cfg.size2) - (detail::log2_exact(cfg.size1) - 2);
    ch = cfg.width;
    for (std::size_t i = 0; i < blocks; ++i) {
      const std::size_t next = detail::channels_at(cfg.width, i + 1, cfg.min_channels);
      up_.emplace_back(params_, "up" + std::to_string(i), ch, next, 3, 1, 1, rng);
      ch = next;
    }
    out_ = Conv<T>(params_, "out", ch, 3, 3, 1, 1, rng);
  }

  ag::Var<T> operator()(const ag::Var<T>& image1, const ag::Var<T>& psi) const {
    detail::check_image(image1, cfg_.size1, "g2 input");
    const std::size_t n = image1.dim(0);
    if (psi.dim(0) != n) throw ShapeError("g2: image/embedding batch mismatch");
    const T leak(cfg_.leak);
    auto h = image1;
    for (const auto& conv : down_) h = ag::leaky_relu(ag::pixel_norm(conv(h)), leak);
    const std::size_t s = cfg_.size1 / 4;
    h = ag::concat(h, ag::replicate_spatial(compress_(psi), s, s));
    h = ag::leaky_relu(ag::pixel_norm(joint_(h)), leak);
    for (const auto& [a, b] : res_) {
      auto r = ag::pixel_norm(b(ag::leaky_relu(ag::pixel_norm(a(h)), leak)));
      h = ag::add(h, r);
    }
    for (const auto& conv : up_) h = ag::leaky_relu(ag::pixel_norm(conv(ag::upsample2x(h))), leak);
    return ag::tanh(out_(h));
  }

  const ImageGanConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

 private:
  ImageGanConfig cfg_;
  ParamSet<T> params_;
  std::vector<Conv<T>> down_;
  EmbeddingCompressor<T> compress_;
  Conv<T> joint_;
  std::vector<std::pair<Conv<T>, Conv<T>>> res_;
  std::vector<Conv<T>> up_;
  Conv<T> out_;
};

// Standard-normal noise [batch, z_dim], determined by the seed.
template <class T>
Tensor<T> sample_noise(std::size_t batch, std::size_t z_dim, std::uint64_t seed) {
  if (batch == 0) throw std::invalid_argument("sample_noise: batch must be >= 1");
  Rng rng(seed);
  return normal_tensor<T>({batch, z_dim}, rng);
}

template <class T>
struct ImageGan {
  Stage1Generator<T> g1;
  Discriminator<T> d1;
  Stage2Generator<T> g2;
  Discriminator<T> d2;

  ImageGan(const ImageGanConfig& cfg, Rng& rng)
      : g1(cfg, rng), d1(cfg, cfg.size1, "d1.", rng), g2(cfg, rng), d2(cfg, cfg.size2, "d2.", rng) {}
};

}  // namespace t2i2t
