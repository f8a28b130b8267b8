#pragma once

// Three-phase training: image GAN pretraining, caption GAN pretraining, and
// joint training with the forward cycle loss. Checkpointing and per-epoch
// metrics live here too.
//
// Every random draw is a pure function of (seed, phase, epoch, batch, purpose),
// so a run resumed from any epoch checkpoint replays the unbroken run exactly.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2i2t/caption_gan.hpp"
#include "t2i2t/config.hpp"
#include "t2i2t/data.hpp"
#include "t2i2t/embedding.hpp"
#include "t2i2t/image_gan.hpp"
#include "t2i2t/losses.hpp"

namespace t2i2t {

using Real = float;

enum class Phase { pretrain_image = 0, pretrain_caption = 1, joint = 2 };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain_image: return "pretrain-image";
    case Phase::pretrain_caption: return "pretrain-caption";
    case Phase::joint: return "joint";
  }
  return "?";
}

inline std::optional<Phase> parse_phase(const std::string& s) {
  for (Phase p : {Phase::pretrain_image, Phase::pretrain_caption, Phase::joint})
    if (s == phase_name(p)) return p;
  return std::nullopt;
}

struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ state

struct GanState {
  TrainConfig config;
  Vocabulary vocab;
  ImageGan<Real> image;
  Captioner<Real> captioner;
  Evaluator<Real> evaluator;
  Adam<Real> opt_g, opt_d1, opt_d2, opt_f, opt_e;
  // The cycle step has its own moments: its token-summed, lambda_c-weighted
  // gradients would otherwise swamp the GAN terms' second-moment estimates.
  Adam<Real> opt_cycle_g, opt_cycle_f;
  std::array<std::uint64_t, 3> epochs_done{0, 0, 0};

  GanState(const TrainConfig& cfg, Vocabulary v) : GanState(cfg, std::move(v), init_rng(cfg)) {}

  GanState(const GanState&) = delete;
  GanState& operator=(const GanState&) = delete;

  std::vector<ParamSet<Real>*> param_sets() {
    return {&image.g1.params(), &image.d1.params(), &image.g2.params(), &image.d2.params(), &captioner.params(),
            &evaluator.params()};
  }
  std::vector<std::pair<std::string, Adam<Real>*>> optimizers() {
    return {{"g", &opt_g}, {"d1", &opt_d1}, {"d2", &opt_d2}, {"f", &opt_f}, {"e", &opt_e},
            {"cycle_g", &opt_cycle_g}, {"cycle_f", &opt_cycle_f}};
  }

  // Only the listed sets receive gradients.
  void train_only(std::initializer_list<ParamSet<Real>*> on) {
    for (auto* p : param_sets()) p->set_trainable(false);
    for (auto* p : on) p->set_trainable(true);
  }

 private:
  struct InitRng {
    Rng rng;
  };
  static std::shared_ptr<InitRng> init_rng(const TrainConfig& cfg) {
    return std::make_shared<InitRng>(InitRng{Rng(derive_seed(cfg.seed, {0x1417ULL}))});
  }
  static CaptionGanConfig caption_config(const TrainConfig& cfg, std::size_t vocab_size) {
    auto c = cfg.caption;
    c.vocab_size = vocab_size;
    c.t_max = cfg.t_max;
    c.image_size = cfg.image.size2;
    return c;
  }
  GanState(const TrainConfig& cfg, Vocabulary v, std::shared_ptr<InitRng> r)
      : config(cfg),
        vocab(std::move(v)),
        image(cfg.image, r->rng),
        captioner(caption_config(cfg, vocab.size()), r->rng),
        evaluator(caption_config(cfg, vocab.size()), r->rng) {
    const AdamConfig ac{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, 1e-8};
    opt_g = Adam<Real>({&image.g1.params(), &image.g2.params()}, ac);
    opt_d1 = Adam<Real>({&image.d1.params()}, ac);
    opt_d2 = Adam<Real>({&image.d2.params()}, ac);
    const AdamConfig cc{cfg.effective_caption_lr(), cfg.adam_beta1, cfg.adam_beta2, 1e-8};
    opt_f = Adam<Real>({&captioner.params()}, cc);
    opt_e = Adam<Real>({&evaluator.params()}, cc);
    opt_cycle_g = Adam<Real>({&image.g1.params(), &image.g2.params()}, ac);
    opt_cycle_f = Adam<Real>({&captioner.params()}, cc);
  }
};

// ------------------------------------------------------------------ data

// Preprocessed training set: resized images, tokens and embeddings.
struct TrainingData {
  std::vector<DatasetRecord> records;
  std::vector<Tensor<Real>> images1, images2;                 // [3,s,s] each
  std::vector<std::array<CaptionTokens, kCaptionsPerImage>> tokens;
  std::vector<std::array<TextEmbedding, kCaptionsPerImage>> embeddings;
};

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::unique_ptr<EmbeddingProvider> make_provider(const TrainConfig& cfg) {
  if (cfg.embedding_provider == "external") {
    auto p = std::make_unique<ExternalEmbeddingProvider>(cfg.embedding_vectors);
    if (p->dim() != cfg.embedding_dim)
      throw ProviderUnavailable("embedding provider 'external' has dim " + std::to_string(p->dim()) +
                                ", config expects " + std::to_string(cfg.embedding_dim));
    return p;
  }
  return std::make_unique<HashingEmbeddingProvider>(cfg.embedding_dim);
}

// Fills the embedding cache for every caption of the dataset.
inline std::size_t build_embedding_cache(const TrainConfig& cfg, const std::vector<DatasetRecord>& records) {
  auto provider = make_provider(cfg);
  EmbeddingCache cache(cfg.cache_path(), cfg.embedding_dim);
  for (const auto& r : records)
    for (const auto& c : r.captions) cache.get_or_compute(*provider, c);
  cache.flush();
  return cache.size();
}

inline TrainingData prepare_data(const TrainConfig& cfg, std::vector<DatasetRecord> records, const Vocabulary& vocab) {
  if (!std::filesystem::exists(cfg.cache_path()))
    throw MissingArtifact("embedding cache " + cfg.cache_path().string() +
                          " not found; run `t2i2t embed --config <file>` first");
  EmbeddingCache cache(cfg.cache_path(), cfg.embedding_dim);
  std::unique_ptr<EmbeddingProvider> provider;
  TrainingData d;
  for (const auto& r : records) {
    d.images1.push_back(resize_and_normalize<Real>(r.image, cfg.image.size1));
    d.images2.push_back(resize_and_normalize<Real>(r.image, cfg.image.size2));
    std::array<CaptionTokens, kCaptionsPerImage> toks;
    std::array<TextEmbedding, kCaptionsPerImage> embs;
    for (std::size_t k = 0; k < kCaptionsPerImage; ++k) {
      toks[k] = tokenize(r.captions[k], vocab, cfg.t_max);
      if (auto hit = cache.find(r.captions[k])) {
        embs[k] = *hit;
      } else {
        if (!provider) provider = make_provider(cfg);
        embs[k] = cache.get_or_compute(*provider, r.captions[k]);
      }
    }
    d.tokens.push_back(std::move(toks));
    d.embeddings.push_back(std::move(embs));
  }
  d.records = std::move(records);
  return d;
}

struct BatchTensors {
  Tensor<Real> img1, img2, psi;
  std::vector<CaptionTokens> real, wrong;
};

inline BatchTensors gather_batch(const TrainingData& d, const Batch& b, std::uint64_t wrong_seed) {
  const std::size_t n = b.size();
  const std::size_t s1 = d.images1[0].dim(1), s2 = d.images2[0].dim(1), e = d.embeddings[0][0].size();
  BatchTensors t{Tensor<Real>({n, 3, s1, s1}), Tensor<Real>({n, 3, s2, s2}), Tensor<Real>({n, e}), {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& it = b[i];
    std::copy_n(d.images1[it.record].data(), 3 * s1 * s1, t.img1.data() + i * 3 * s1 * s1);
    std::copy_n(d.images2[it.record].data(), 3 * s2 * s2, t.img2.data() + i * 3 * s2 * s2);
    std::copy_n(d.embeddings[it.record][it.caption].data(), e, t.psi.data() + i * e);
    t.real.push_back(d.tokens[it.record][it.caption]);
  }
  // Wrong caption: the chosen caption of a different image in the batch.
  const auto other = seeded_derangement(n, wrong_seed);
  for (std::size_t i = 0; i < n; ++i) t.wrong.push_back(t.real[other[i]]);
  return t;
}

// ------------------------------------------------------------------ metrics

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {
      "d1_loss",   "g1_loss",        "int_loss",      "g1_total",    "d2_loss",      "g2_loss",
      "image_gan_loss", "e_loss",    "f_mle_loss",    "f_adv_loss",  "fcycle_loss",  "total_loss",
      "d1_real_score", "d1_fake_score", "reward_real", "reward_wrong", "reward_fake"};
  return cols;
}

// Running means of the per-batch values of one epoch.
class EpochMetrics {
 public:
  void add(const std::string& key, double v) {
    if (!std::isfinite(v)) throw NumericalFailure("non-finite value for '" + key + "'");
    auto& [s, n] = acc_[key];
    s += v;
    ++n;
  }
  std::optional<double> mean(const std::string& key) const {
    auto it = acc_.find(key);
    if (it == acc_.end() || it->second.second == 0) return std::nullopt;
    return it->second.first / double(it->second.second);
  }

 private:
  std::map<std::string, std::pair<double, std::size_t>> acc_;
};

inline std::string metrics_header() {
  std::string h = "epoch,phase";
  for (const auto& c : metric_columns()) h += "," + c;
  return h + ",wall_time";
}

inline std::string metrics_row(std::uint64_t epoch, Phase phase, const EpochMetrics& m, double wall) {
  std::ostringstream os;
  os << epoch << ',' << phase_name(phase);
  os << std::setprecision(9);
  for (const auto& c : metric_columns()) {
    os << ',';
    if (auto v = m.mean(c)) os << *v;
  }
  os << ',' << std::setprecision(4) << wall;
  return os.str();
}

// ------------------------------------------------------------------ steps

struct StepContext {
  GanState& s;
  const TrainConfig& cfg;
  EpochMetrics& m;
};

inline double mean_sigmoid(const Tensor<Real>& logits) {
  double acc = 0;
  for (Real x : logits.vec()) acc += ag::sigmoid_scalar(double(x));
  return acc / double(logits.numel());
}

// One alternating update of D1, G1, D2, G2.
inline void image_gan_step(StepContext& c, const BatchTensors& b, std::uint64_t bseed) {
  auto& s = c.s;
  auto& img = s.image;
  const std::size_t n = b.real.size();
  const auto z = ag::constant(sample_noise<Real>(n, c.cfg.image.z_dim, derive_seed(bseed, {1})));
  const auto psi = ag::constant(b.psi);
  const auto perm = seeded_derangement(n, derive_seed(bseed, {2}));
  Tensor<Real> psi_int_t(b.psi.shape());
  const std::size_t e = b.psi.dim(1);
  const Real beta = Real(c.cfg.interp_beta);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < e; ++k)
      psi_int_t[i * e + k] = beta * b.psi[i * e + k] + (Real(1) - beta) * b.psi[perm[i] * e + k];
  const auto psi_int = ag::constant(psi_int_t);

  // D1 ascent.
  s.train_only({&img.d1.params()});
  ag::Var<Real> fake1;
  {
    ag::NoGradGuard ng;
    fake1 = img.g1(z, psi);
  }
  const auto lr1 = img.d1.logits(ag::constant(b.img1), psi);
  const auto lf1 = img.d1.logits(fake1, psi);
  const auto d1 = gl::d_objective(lr1, lf1);
  ag::backward(ag::scale(d1, Real(-1)));
  s.opt_d1.step();
  c.m.add("d1_loss", d1.item());
  c.m.add("d1_real_score", mean_sigmoid(lr1.value()));
  c.m.add("d1_fake_score", mean_sigmoid(lf1.value()));

  // G1 descent on L_G1 + lambda L_INT.
  s.train_only({&img.g1.params()});
  const auto gen1 = img.g1(z, psi);
  const auto g1 = gl::g_objective(img.d1.logits(gen1, psi), c.cfg.nonsaturating);
  const auto li = gl::g_objective(img.d1.logits(img.g1(z, psi_int), psi_int), c.cfg.nonsaturating);
  const auto g1_total = ag::add(g1, ag::scale(li, Real(c.cfg.lambda_int)));
  ag::backward(g1_total);
  s.opt_g.step();
  c.m.add("g1_loss", g1.item());
  c.m.add("int_loss", li.item());
  c.m.add("g1_total", g1_total.item());

  // D2 ascent on stage-2 fakes built from the stage-1 fakes.
  const auto stage1 = ag::constant(gen1.value());
  s.train_only({&img.d2.params()});
  ag::Var<Real> fake2;
  {
    ag::NoGradGuard ng;
    fake2 = img.g2(stage1, psi);
  }
  const auto d2 = gl::d_objective(img.d2.logits(ag::constant(b.img2), psi), img.d2.logits(fake2, psi));
  ag::backward(ag::scale(d2, Real(-1)));
  s.opt_d2.step();
  c.m.add("d2_loss", d2.item());

  // G2 descent.
  s.train_only({&img.g2.params()});
  const auto g2 = gl::g_objective(img.d2.logits(img.g2(stage1, psi), psi), c.cfg.nonsaturating);
  ag::backward(g2);
  s.opt_g.step();
  c.m.add("g2_loss", g2.item());
  c.m.add("image_gan_loss", image_gan_loss({g1_total.item(), d1.item(), g2.item(), d2.item()}));
  s.train_only({});
}

inline Tensor<Real> caption_noise(const TrainConfig& cfg, std::size_t n, std::uint64_t bseed) {
  return sample_noise<Real>(n, cfg.caption.z_dim, derive_seed(bseed, {3}));
}

inline void caption_mle_step(StepContext& c, const BatchTensors& b, std::uint64_t bseed) {
  auto& s = c.s;
  s.train_only({&s.captioner.params()});
  const auto z = ag::constant(caption_noise(c.cfg, b.real.size(), bseed));
  const auto loss = s.captioner.mle_loss(ag::constant(b.img2), z, b.real);
  ag::backward(loss);
  s.opt_f.step();
  s.train_only({});
  c.m.add("f_mle_loss", loss.item());
}

// Evaluator ascent on the real/fake/wrong objective, then (unless the
// captioner is frozen) captioner descent on the rollout objective.
inline void caption_adv_step(StepContext& c, const BatchTensors& b, std::uint64_t bseed, bool update_captioner) {
  auto& s = c.s;
  const Tensor<Real> z = caption_noise(c.cfg, b.real.size(), bseed);
  const auto fake = s.captioner.generate(b.img2, z, DecodeMode::sample, derive_seed(bseed, {4}));

  s.train_only({&s.evaluator.params()});
  const auto images = ag::constant(b.img2);
  const auto feats = s.evaluator.image_features(images);
  const auto lr = s.evaluator.logits_from_features(feats, b.real);
  const auto lf = s.evaluator.logits_from_features(feats, fake);
  const auto lw = s.evaluator.logits_from_features(feats, b.wrong);
  auto obj = gl::mean_log_score(lr);
  if (c.cfg.alpha != 0) obj = ag::add(obj, ag::scale(gl::mean_log1m_score(lf), Real(c.cfg.alpha)));
  if (c.cfg.beta_w != 0) obj = ag::add(obj, ag::scale(gl::mean_log1m_score(lw), Real(c.cfg.beta_w)));
  ag::backward(ag::scale(obj, Real(-1)));
  s.opt_e.step();
  c.m.add("e_loss", obj.item());
  c.m.add("reward_real", mean_sigmoid(lr.value()));
  c.m.add("reward_fake", mean_sigmoid(lf.value()));
  c.m.add("reward_wrong", mean_sigmoid(lw.value()));

  if (update_captioner) {
    s.train_only({&s.captioner.params()});
    const auto loss = captioner_adv_loss(s.captioner, s.evaluator, b.img2, z, b.real, derive_seed(bseed, {5}));
    auto objective = loss;
    if (c.cfg.caption_mle_weight != 0) {
      const auto mle = s.captioner.mle_loss(images, ag::constant(z), b.real);
      objective = ag::add(objective, ag::scale(mle, Real(c.cfg.caption_mle_weight)));
      c.m.add("f_mle_loss", mle.item());
    }
    ag::backward(objective);
    s.opt_f.step();
    c.m.add("f_adv_loss", loss.item());
  }
  s.train_only({});
}

// Teacher-forced cross-entropy of the real caption under F, given the image
// G2(G1(z, psi), psi). Gradients reach the generators through the image.
template <class T>
ag::Var<T> forward_cycle_loss(const ag::Var<T>& generated_image, const std::vector<CaptionTokens>& real,
                              const Captioner<T>& captioner, const ag::Var<T>& noise) {
  const auto& sh = generated_image.shape();
  const std::size_t want = captioner.config().image_size;
  if (sh.size() != 4 || sh[2] != want || sh[3] != want)
    throw ShapeError("forward_cycle_loss: generated image " + shape_str(sh) + " does not match captioner input " +
                     std::to_string(want));
  return captioner.mle_loss(generated_image, noise, real);
}

inline void cycle_step(StepContext& c, const BatchTensors& b, std::uint64_t bseed) {
  auto& s = c.s;
  const std::size_t n = b.real.size();
  const auto z = ag::constant(sample_noise<Real>(n, c.cfg.image.z_dim, derive_seed(bseed, {6})));
  const auto zc = ag::constant(caption_noise(c.cfg, n, bseed));
  const auto psi = ag::constant(b.psi);
  if (c.cfg.lambda_c == 0) {
    // Zero weight: no update at all, value logged only.
    ag::NoGradGuard ng;
    const auto loss = forward_cycle_loss(s.image.g2(s.image.g1(z, psi), psi), b.real, s.captioner, zc);
    c.m.add("fcycle_loss", loss.item());
    return;
  }
  if (c.cfg.freeze_captioner)
    s.train_only({&s.image.g1.params(), &s.image.g2.params()});
  else
    s.train_only({&s.image.g1.params(), &s.image.g2.params(), &s.captioner.params()});
  const auto loss = forward_cycle_loss(s.image.g2(s.image.g1(z, psi), psi), b.real, s.captioner, zc);
  ag::backward(ag::scale(loss, Real(c.cfg.lambda_c)));
  s.opt_cycle_g.step();
  if (!c.cfg.freeze_captioner) s.opt_cycle_f.step();
  s.train_only({});
  c.m.add("fcycle_loss", loss.item());
}

// ------------------------------------------------------------------ checkpoint

inline constexpr std::uint32_t kCheckpointVersion = 2;

namespace detail {

inline void put_record(std::string& buf, const std::string& name, const Shape& shape, const float* data) {
  put_le(buf, static_cast<std::uint32_t>(name.size()));
  buf += name;
  put_le(buf, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_le(buf, static_cast<std::uint64_t>(d));
  for (std::size_t i = 0; i < shape_numel(shape); ++i) put_f32(buf, data[i]);
}

inline void put_bytes_record(std::string& buf, const std::string& name, const std::string& bytes) {
  std::vector<float> v(bytes.begin(), bytes.end());
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = float(static_cast<unsigned char>(bytes[i]));
  put_record(buf, name, {bytes.size()}, v.data());
}

inline std::string bytes_from_record(const Tensor<float>& t) {
  std::string s;
  for (float f : t.vec()) s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  return s;
}

// u64 split into four exact 16-bit float chunks.
inline Tensor<float> u64_record(std::uint64_t v) {
  Tensor<float> t({4});
  for (std::size_t i = 0; i < 4; ++i) t[i] = float((v >> (16 * i)) & 0xFFFF);
  return t;
}
inline std::uint64_t u64_from_record(const Tensor<float>& t) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v |= std::uint64_t(t[i]) << (16 * i);
  return v;
}

inline std::string join_vocab(const Vocabulary& v) {
  std::string s;
  for (std::size_t i = Vocabulary::kNumSpecials; i < v.size(); ++i) s += v.token(int(i)) + "\n";
  return s;
}

inline Vocabulary split_vocab(const std::string& s) {
  std::vector<std::string> words;
  std::istringstream in(s);
  for (std::string w; std::getline(in, w);) words.push_back(w);
  return Vocabulary(words);
}

}  // namespace detail

inline std::string serialize_checkpoint(GanState& s) {
  std::string buf = "T2I2T";
  detail::put_le(buf, kCheckpointVersion);
  detail::put_bytes_record(buf, "meta/config", format_config(s.config));
  detail::put_bytes_record(buf, "meta/vocab", detail::join_vocab(s.vocab));
  Tensor<float> progress({3});
  for (std::size_t i = 0; i < 3; ++i) progress[i] = float(s.epochs_done[i]);
  detail::put_record(buf, "meta/progress", progress.shape(), progress.data());
  const auto rng = detail::u64_record(s.config.seed);
  detail::put_record(buf, "meta/rng", rng.shape(), rng.data());
  for (auto* ps : s.param_sets())
    for (const auto& p : ps->items()) detail::put_record(buf, p.name, p.var.shape(), p.var.value().data());
  for (auto& [oname, opt] : s.optimizers())
    for (const auto& slot : opt->slots()) {
      const std::string base = "adam/" + oname + "/" + slot.name;
      detail::put_record(buf, base + "/m", slot.m.shape(), slot.m.data());
      detail::put_record(buf, base + "/v", slot.v.shape(), slot.v.data());
      const auto steps = detail::u64_record(slot.steps);
      detail::put_record(buf, base + "/steps", steps.shape(), steps.data());
    }
  return buf;
}

inline std::map<std::string, Tensor<float>> parse_checkpoint_records(const std::string& buf) {
  if (buf.size() < 9 || buf.compare(0, 5, "T2I2T") != 0) throw CheckpointError("not a checkpoint (bad magic)");
  std::size_t off = 5;
  try {
    const auto version = detail::get_le<std::uint32_t>(buf, off);
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    std::map<std::string, Tensor<float>> out;
    while (off < buf.size()) {
      const auto nlen = detail::get_le<std::uint32_t>(buf, off);
      if (off + nlen > buf.size()) throw CacheFormatError("record name overruns file at offset " + std::to_string(off));
      std::string name = buf.substr(off, nlen);
      off += nlen;
      const auto rank = detail::get_le<std::uint32_t>(buf, off);
      if (rank > 8) throw CacheFormatError("implausible rank at offset " + std::to_string(off));
      Shape shape(rank);
      for (auto& d : shape) d = detail::get_le<std::uint64_t>(buf, off);
      const std::size_t n = shape_numel(shape);
      if (n > (buf.size() - off) / 4) throw CacheFormatError("tensor '" + name + "' overruns file");
      std::vector<float> data(n);
      for (auto& x : data) x = detail::get_f32(buf, off);
      out.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
    }
    return out;
  } catch (const CacheFormatError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(GanState& s, const std::filesystem::path& path) {
  const auto buf = serialize_checkpoint(s);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(buf.data(), std::streamsize(buf.size()));
  }
  std::filesystem::rename(tmp, path);
}

// Rebuilds the state recorded in a checkpoint. When `config` is given, its
// training hyperparameters replace the recorded ones; structural keys must agree.
inline std::unique_ptr<GanState> load_checkpoint(const std::filesystem::path& path,
                                                 const std::optional<TrainConfig>& config = std::nullopt) {
  if (!std::filesystem::exists(path)) throw MissingArtifact("checkpoint not found: " + path.string());
  const auto records = parse_checkpoint_records(detail::slurp(path));
  auto need = [&](const std::string& name) -> const Tensor<float>& {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("checkpoint missing record '" + name + "'");
    return it->second;
  };
  TrainConfig recorded = parse_config(detail::bytes_from_record(need("meta/config")));
  TrainConfig cfg = recorded;
  if (config) {
    for (const auto& k : structural_keys())
      if (config_value(*config, k) != config_value(recorded, k))
        throw CheckpointError("config key '" + k + "' = " + config_value(*config, k) +
                              " does not match checkpoint value " + config_value(recorded, k));
    cfg = *config;
  }
  auto s = std::make_unique<GanState>(cfg, detail::split_vocab(detail::bytes_from_record(need("meta/vocab"))));
  const auto& progress = need("meta/progress");
  for (std::size_t i = 0; i < 3; ++i) s->epochs_done[i] = std::uint64_t(progress[i]);
  auto assign = [&](const std::string& name, Tensor<float>& dst) {
    const auto& src = need(name);
    if (src.shape() != dst.shape())
      throw CheckpointError("record '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                            shape_str(dst.shape()));
    dst = src;
  };
  for (auto* ps : s->param_sets())
    for (auto& p : ps->items()) assign(p.name, p.var.mutable_value());
  for (auto& [oname, opt] : s->optimizers())
    for (auto& slot : opt->slots()) {
      const std::string base = "adam/" + oname + "/" + slot.name;
      assign(base + "/m", slot.m);
      assign(base + "/v", slot.v);
      slot.steps = detail::u64_from_record(need(base + "/steps"));
    }
  return s;
}

// ------------------------------------------------------------------ phases

struct TrainHooks {
  std::function<void(Phase, std::uint64_t epoch, const EpochMetrics&)> on_epoch;
  bool write_files = true;
  bool verbose = true;
};

class Trainer {
 public:
  Trainer(GanState& state, const TrainingData& data, TrainHooks hooks = {})
      : s_(state), d_(data), hooks_(std::move(hooks)) {}

  void run_phase(Phase phase) {
    const auto& cfg = s_.config;
    const std::size_t total = phase == Phase::pretrain_image    ? cfg.epochs_pretrain_image
                              : phase == Phase::pretrain_caption ? cfg.epochs_pretrain_caption
                                                                 : cfg.epochs_joint;
    auto& done = s_.epochs_done[std::size_t(phase)];
    const std::uint64_t pseed = derive_seed(cfg.seed, {0x9A5EULL, std::uint64_t(phase)});
    for (std::uint64_t epoch = done; epoch < total; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochMetrics m;
      StepContext ctx{s_, cfg, m};
      const auto batches = make_batches(d_.records.size(), cfg.batch_size, pseed, epoch);
      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        const std::uint64_t bseed = derive_seed(pseed, {epoch, bi});
        const auto b = gather_batch(d_, batches[bi], derive_seed(bseed, {7}));
        try {
          switch (phase) {
            case Phase::pretrain_image: image_gan_step(ctx, b, bseed); break;
            case Phase::pretrain_caption:
              if (epoch < cfg.warmstart_epochs())
                caption_mle_step(ctx, b, bseed);
              else
                caption_adv_step(ctx, b, bseed, true);
              break;
            case Phase::joint:
              image_gan_step(ctx, b, bseed);
              caption_adv_step(ctx, b, bseed, !cfg.freeze_captioner);
              cycle_step(ctx, b, bseed);
              break;
          }
        } catch (const NumericalFailure& e) {
          throw NumericalFailure(std::string(phase_name(phase)) + " epoch " + std::to_string(epoch) + " batch " +
                                 std::to_string(bi) + ": " + e.what());
        }
        for (auto* ps : s_.param_sets())
          if (!ps->all_finite())
            throw NumericalFailure(std::string(phase_name(phase)) + " epoch " + std::to_string(epoch) +
                                   ": non-finite parameters in " + ps->prefix());
      }
      if (phase == Phase::joint) {
        auto img = m.mean("image_gan_loss"), txt = m.mean("e_loss"), cyc = m.mean("fcycle_loss");
        if (img && cyc) m.add("total_loss", total_loss(*img, txt.value_or(0.0), *cyc, cfg.lambda_c));
      }
      done = epoch + 1;
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (hooks_.write_files) {
        append_metrics(metrics_row(epoch, phase, m, wall));
        save_checkpoint(s_, out_dir() / "checkpoint.bin");
      }
      if (hooks_.verbose) {
        std::cerr << phase_name(phase) << " epoch " << epoch + 1 << "/" << total;
        for (const char* k : {"d1_loss", "g1_total", "d2_loss", "g2_loss", "f_mle_loss", "e_loss", "f_adv_loss",
                              "fcycle_loss"})
          if (auto v = m.mean(k)) std::cerr << " " << k << "=" << std::setprecision(4) << *v;
        std::cerr << " (" << std::setprecision(3) << wall << "s)\n";
      }
      if (hooks_.on_epoch) hooks_.on_epoch(phase, epoch, m);
    }
    if (hooks_.write_files) save_checkpoint(s_, out_dir() / (std::string("ckpt_") + phase_name(phase) + ".bin"));
  }

 private:
  std::filesystem::path out_dir() const { return s_.config.out_dir; }

  void append_metrics(const std::string& row) {
    const auto path = out_dir() / "metrics.csv";
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (fresh) out << metrics_header() << '\n';
    out << row << '\n';
  }

  GanState& s_;
  const TrainingData& d_;
  TrainHooks hooks_;
};

// ------------------------------------------------------------------ inference

// Stage-1 and stage-2 images for embeddings psi [N,E] and noise seed.
struct Generated {
  Tensor<Real> stage1, stage2;
};

inline Generated generate_images(const GanState& s, const Tensor<Real>& psi, std::uint64_t seed) {
  ag::NoGradGuard ng;
  const auto z = ag::constant(sample_noise<Real>(psi.dim(0), s.config.image.z_dim, seed));
  const auto p = ag::constant(psi);
  auto i1 = s.image.g1(z, p);
  auto i2 = s.image.g2(i1, p);
  return {i1.value(), i2.value()};
}

}  // namespace t2i2t
