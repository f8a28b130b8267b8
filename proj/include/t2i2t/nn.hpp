#pragma once

// Parameter containers, layer building blocks, seeded randomness and Adam.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "t2i2t/autograd.hpp"

namespace t2i2t {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream seed for a (base, tag...) coordinate. Training derives
// every random draw from such coordinates so resumed runs replay exactly.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(base);
  for (auto t : tags) s = splitmix64(s ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
  return s;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& x : t.vec()) x = static_cast<T>(nd(rng));
  return t;
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double bound) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> ud(-bound, bound);
  for (auto& x : t.vec()) x = static_cast<T>(ud(rng));
  return t;
}

template <class T>
struct NamedParam {
  std::string name;
  ag::Var<T> var;
};

// Ordered, named parameter tensors of one network.
template <class T>
class ParamSet {
 public:
  explicit ParamSet(std::string prefix = {}) : prefix_(std::move(prefix)) {}

  ag::Var<T> add(const std::string& name, Tensor<T> init) {
    ag::Var<T> v(std::move(init), true);
    params_.push_back({prefix_ + name, v});
    return v;
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p.var.set_requires_grad(on);
  }
  bool trainable() const { return !params_.empty() && params_.front().var.requires_grad(); }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : params_)
      for (T x : p.var.value().vec())
        if (!std::isfinite(x)) return false;
    return true;
  }

  std::vector<NamedParam<T>>& items() { return params_; }
  const std::vector<NamedParam<T>>& items() const { return params_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string prefix_;
  std::vector<NamedParam<T>> params_;
};

template <class T>
struct Linear {
  ag::Var<T> w, b;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool bias = true) {
    w = ps.add(name + ".w", uniform_tensor<T>({out, in}, rng, 1.0 / std::sqrt(double(in))));
    if (bias) b = ps.add(name + ".b", Tensor<T>({out}));
  }
  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
};

template <class T>
struct Conv {
  ag::Var<T> w, b;
  std::size_t stride = 1, pad = 0;

  Conv() = default;
  Conv(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
       std::size_t stride_, std::size_t pad_, Rng& rng, double init_std = 0.02)
      : stride(stride_), pad(pad_) {
    w = ps.add(name + ".w", normal_tensor<T>({out, in, k, k}, rng, init_std));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }
  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

template <class T>
struct LstmState {
  ag::Var<T> h, c;
};

// Single LSTM cell, gate order (input, forget, cell, output).
template <class T>
struct LstmCell {
  ag::Var<T> wx, wh, b;
  std::size_t hidden = 0;

  LstmCell() = default;
  LstmCell(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t hidden_, Rng& rng)
      : hidden(hidden_) {
    const double bound = 1.0 / std::sqrt(double(hidden_));
    wx = ps.add(name + ".wx", uniform_tensor<T>({4 * hidden_, in}, rng, bound));
    wh = ps.add(name + ".wh", uniform_tensor<T>({4 * hidden_, hidden_}, rng, bound));
    Tensor<T> bias({4 * hidden_});
    for (std::size_t i = hidden_; i < 2 * hidden_; ++i) bias[i] = T{1};
    b = ps.add(name + ".b", std::move(bias));
  }

  LstmState<T> zero_state(std::size_t n) const {
    return {ag::constant(Tensor<T>({n, hidden})), ag::constant(Tensor<T>({n, hidden}))};
  }

  LstmState<T> operator()(const ag::Var<T>& x, const LstmState<T>& s) const {
    auto gates = ag::add(ag::linear(x, wx, b), ag::linear(s.h, wh));
    auto i = ag::sigmoid(ag::slice_cols(gates, 0, hidden));
    auto f = ag::sigmoid(ag::slice_cols(gates, hidden, hidden));
    auto g = ag::tanh(ag::slice_cols(gates, 2 * hidden, hidden));
    auto o = ag::sigmoid(ag::slice_cols(gates, 3 * hidden, hidden));
    auto c = ag::add(ag::mul(f, s.c), ag::mul(i, g));
    return {ag::mul(o, ag::tanh(c)), c};
  }
};

// He-style std for a conv feeding a leaky ReLU.
inline double he_std(std::size_t fan_in, double leak = 0.2) {
  return std::sqrt(2.0 / ((1.0 + leak * leak) * double(fan_in)));
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over one or more parameter sets. Only parameters currently marked
// trainable are stepped, so a shared optimizer can update sub-networks in turn.
template <class T>
class Adam {
 public:
  struct Slot {
    std::string name;
    ag::Var<T> var;
    Tensor<T> m, v;
    std::uint64_t steps = 0;
  };

  Adam() = default;
  Adam(std::initializer_list<ParamSet<T>*> sets, AdamConfig cfg) : cfg_(cfg) {
    for (auto* s : sets)
      for (auto& p : s->items())
        slots_.push_back({p.name, p.var, Tensor<T>(p.var.shape()), Tensor<T>(p.var.shape()), 0});
  }

  void step() {
    for (auto& s : slots_) {
      if (!s.var.requires_grad()) continue;
      ++s.steps;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, double(s.steps));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, double(s.steps));
      auto& p = s.var.mutable_value();
      const auto& g = s.var.grad();
      for (std::size_t i = 0; i < p.numel(); ++i) {
        s.m[i] = T(cfg_.beta1) * s.m[i] + T(1.0 - cfg_.beta1) * g[i];
        s.v[i] = T(cfg_.beta2) * s.v[i] + T(1.0 - cfg_.beta2) * g[i] * g[i];
        const T mh = s.m[i] / T(bc1);
        const T vh = s.v[i] / T(bc2);
        p[i] -= T(cfg_.lr) * mh / (std::sqrt(vh) + T(cfg_.eps));
      }
      s.var.zero_grad();
    }
  }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Slot> slots_;
};

}  // namespace t2i2t
