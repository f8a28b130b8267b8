#pragma once

// Adversarial objectives of both GANs, in two forms:
//  * plain-score functions over spans, used for reporting and closed-form checks;
//  * graph functions over discriminator logits, used by the trainer.
//
// Sign convention: every function returns the objective exactly as written in
// its min/max statement. Discriminator objectives are to be ASCENDED (the
// trainer descends their negation); generator objectives are DESCENDED.
// Scores are clamped into [kScoreEps, 1 - kScoreEps] before any log.

#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>

#include "t2i2t/autograd.hpp"

namespace t2i2t {

inline constexpr double kScoreEps = 1e-7;

struct ScoreRangeError : std::domain_error {
  using std::domain_error::domain_error;
};

namespace detail {

inline double checked_score(double s) {
  if (!(s >= 0.0 && s <= 1.0))
    throw ScoreRangeError("discriminator score " + std::to_string(s) + " outside [0,1]");
  return std::clamp(s, kScoreEps, 1.0 - kScoreEps);
}

inline double mean_log(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("empty score batch");
  double s = 0;
  for (double x : scores) s += std::log(checked_score(x));
  return s / double(scores.size());
}

inline double mean_log1m(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("empty score batch");
  double s = 0;
  for (double x : scores) s += std::log(1.0 - checked_score(x));
  return s / double(scores.size());
}

}  // namespace detail

// mean log D(real) + mean log(1 - D(fake)); ascended by D1/D2.
inline double stage_d_loss(std::span<const double> real, std::span<const double> fake) {
  return detail::mean_log(real) + detail::mean_log1m(fake);
}
inline double stage1_d_loss(std::span<const double> real, std::span<const double> fake) {
  return stage_d_loss(real, fake);
}
inline double stage2_d_loss(std::span<const double> real, std::span<const double> fake) {
  return stage_d_loss(real, fake);
}

// mean log(1 - D(G(.))); descended by the generator.
inline double stage_g_loss(std::span<const double> fake) { return detail::mean_log1m(fake); }
inline double stage1_g_loss(std::span<const double> fake) { return stage_g_loss(fake); }
inline double stage2_g_loss(std::span<const double> fake) { return stage_g_loss(fake); }

// Same form, on scores of images generated from interpolated embeddings.
inline double interpolation_loss(std::span<const double> fake_on_interpolated) {
  return detail::mean_log1m(fake_on_interpolated);
}

inline double stage1_g_total(double g_loss, double int_loss, double lambda_int) {
  return g_loss + lambda_int * int_loss;
}

struct ImageGanParts {
  double g1_total = 0, d1 = 0, g2 = 0, d2 = 0;
};

// Logged sum; training follows the separate min/max split instead.
inline double image_gan_loss(const ImageGanParts& p) { return p.g1_total + p.d1 + p.g2 + p.d2; }

// log r(real) + alpha log(1 - r(fake)) + beta_w log(1 - r(wrong)), batch-averaged.
inline double evaluator_loss(std::span<const double> r_real, std::span<const double> r_fake,
                             std::span<const double> r_wrong, double alpha, double beta_w) {
  return detail::mean_log(r_real) + alpha * detail::mean_log1m(r_fake) +
         beta_w * detail::mean_log1m(r_wrong);
}

inline double total_loss(double image_gan_part, double text_gan_part, double fcycle_part,
                         double lambda_c) {
  return image_gan_part + text_gan_part + lambda_c * fcycle_part;
}

// ------------------------------------------------------------ graph versions

namespace gl {

template <class T>
ag::Var<T> mean_log_score(const ag::Var<T>& logits) {
  return ag::mean(ag::log_sigmoid_clamped(logits, T(kScoreEps)));
}

template <class T>
ag::Var<T> mean_log1m_score(const ag::Var<T>& logits) {
  return ag::mean(ag::log_one_minus_sigmoid_clamped(logits, T(kScoreEps)));
}

template <class T>
ag::Var<T> d_objective(const ag::Var<T>& real_logits, const ag::Var<T>& fake_logits) {
  return ag::add(mean_log_score(real_logits), mean_log1m_score(fake_logits));
}

// Generator objective. The saturating form is the default; the
// non-saturating variant minimises -log D instead.
template <class T>
ag::Var<T> g_objective(const ag::Var<T>& fake_logits, bool nonsaturating) {
  return nonsaturating ? ag::scale(mean_log_score(fake_logits), T(-1))
                       : mean_log1m_score(fake_logits);
}

}  // namespace gl
}  // namespace t2i2t
