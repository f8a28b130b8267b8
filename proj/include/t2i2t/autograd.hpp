#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// Every op builds a node holding its value and, when any input requires a
// gradient, a closure that pushes the output gradient back to its inputs.
// Nodes that do not require gradients keep no parents, so inference-only
// graphs are freed as they go out of scope.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "t2i2t/tensor.hpp"

namespace t2i2t::ag {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  // Gradient accumulated by backward(); zeros if nothing reached this node.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_->grad.numel()) node_->grad.fill(T{0});
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// While alive, ops record no graph regardless of input flags.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool prev_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <class T>
Var<T> detach(const Var<T>& a) {
  return Var<T>(a.value(), false);
}

namespace detail {

template <class T, class F>
Var<T> make(Tensor<T> value, std::vector<Var<T>> inputs, F&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!NoGradGuard::enabled()) return Var<T>(std::move(n));
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    for (auto& in : inputs)
      if (in.requires_grad()) n->parents.push_back(in.node());
    n->backward_fn = std::forward<F>(backward);
  }
  return Var<T>(std::move(n));
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Accumulate into a parent's gradient only when it participates.
template <class T>
Tensor<T>* grad_of(const Var<T>& v) {
  return v.requires_grad() ? &v.node()->ensure_grad() : nullptr;
}

}  // namespace detail

// Reverse sweep from a scalar (or seeded) root.
template <class T>
void backward(const Var<T>& root, T seed = T{1}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().fill(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.numel()) n->backward_fn(n->grad);
  }
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return detail::make<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    for (const auto* v : {&a, &b})
      if (auto* d = detail::grad_of(*v))
        for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += g[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return detail::make<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += g[i];
    if (auto* d = detail::grad_of(b))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] -= g[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return detail::make<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += g[i] * b.value()[i];
    if (auto* d = detail::grad_of(b))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += g[i] * a.value()[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.vec()) x *= s;
  return detail::make<T>(std::move(out), {a}, [a, s](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += s * g[i];
  });
}

// Elementwise product with a tensor that carries no gradient.
template <class T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
  if (a.shape() != c.shape())
    throw ShapeError("mul_const: " + shape_str(a.shape()) + " vs " + shape_str(c.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  return detail::make<T>(std::move(out), {a}, [a, c](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += c[i] * g[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T x : a.value().vec()) s += x;
  return detail::make<T>(Tensor<T>::scalar(s), {a}, [a](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (auto& x : d->vec()) x += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

namespace detail {

template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& a, Fwd fwd, Deriv deriv) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(a.value()[i]);
  auto keep = std::make_shared<Tensor<T>>(out);
  return make<T>(std::move(out), {a}, [a, keep, deriv](const Tensor<T>& g) {
    if (auto* d = grad_of(a))
      for (std::size_t i = 0; i < g.numel(); ++i)
        (*d)[i] += g[i] * deriv(a.value()[i], (*keep)[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return detail::unary(
      a, [slope](T x) { return x > T{0} ? x : slope * x; },
      [slope](T x, T) { return x > T{0} ? T{1} : slope; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return leaky_relu(a, T{0});
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= T{0} ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T{1} - y); });
}

// Logit bound equivalent to clamping a sigmoid score into [eps, 1 - eps].
template <class T>
T logit_bound(T eps) {
  return std::log((T{1} - eps) / eps);
}

template <class T>
T softplus_scalar(T x) {
  return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

// log(clamp(sigmoid(x), eps, 1-eps)) computed from logits.
template <class T>
Var<T> log_sigmoid_clamped(const Var<T>& logits, T eps) {
  const T hi = logit_bound(eps);
  return detail::unary(
      logits,
      [hi](T x) { return -softplus_scalar(-std::clamp(x, -hi, hi)); },
      [hi](T x, T) { return (x > -hi && x < hi) ? sigmoid_scalar(-x) : T{0}; });
}

// log(1 - clamp(sigmoid(x), eps, 1-eps)) computed from logits.
template <class T>
Var<T> log_one_minus_sigmoid_clamped(const Var<T>& logits, T eps) {
  const T hi = logit_bound(eps);
  return detail::unary(
      logits,
      [hi](T x) { return -softplus_scalar(std::clamp(x, -hi, hi)); },
      [hi](T x, T) { return (x > -hi && x < hi) ? -sigmoid_scalar(x) : T{0}; });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return detail::make<T>(std::move(out), {a}, [a](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += g[i];
  });
}

// Concatenate along axis 1. Leading dim must match, and so must the product of
// trailing dims beyond axis 1.
template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0] ||
      !std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2))
    throw ShapeError("concat: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t n = sa[0];
  const std::size_t ia = a.numel() / n, ib = b.numel() / n;
  Shape so = sa;
  so[1] += sb[1];
  Tensor<T> out(so);
  for (std::size_t k = 0; k < n; ++k) {
    std::copy_n(a.value().data() + k * ia, ia, out.data() + k * (ia + ib));
    std::copy_n(b.value().data() + k * ib, ib, out.data() + k * (ia + ib) + ia);
  }
  return detail::make<T>(std::move(out), {a, b}, [a, b, n, ia, ib](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < ia; ++i) (*d)[k * ia + i] += g[k * (ia + ib) + i];
    if (auto* d = detail::grad_of(b))
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < ib; ++i) (*d)[k * ib + i] += g[k * (ia + ib) + ia + i];
  });
}

// [N,D] -> [N,D,H,W], each vector copied to every spatial location.
template <class T>
Var<T> replicate_spatial(const Var<T>& a, std::size_t h, std::size_t w) {
  if (a.shape().size() != 2) throw ShapeError("replicate_spatial expects [N,D]");
  const std::size_t n = a.dim(0), d = a.dim(1), hw = h * w;
  Tensor<T> out({n, d, h, w});
  for (std::size_t i = 0; i < n * d; ++i) std::fill_n(out.data() + i * hw, hw, a.value()[i]);
  return detail::make<T>(std::move(out), {a}, [a, n, d, hw](const Tensor<T>& g) {
    if (auto* dg = detail::grad_of(a))
      for (std::size_t i = 0; i < n * d; ++i) {
        T s{0};
        for (std::size_t p = 0; p < hw; ++p) s += g[i * hw + p];
        (*dg)[i] += s;
      }
  });
}

// Columns [start, start+len) of a [N,D] matrix.
template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t len) {
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (start + len > d) throw ShapeError("slice_cols out of range");
  Tensor<T> out({n, len});
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(a.value().data() + r * d + start, len, out.data() + r * len);
  return detail::make<T>(std::move(out), {a}, [a, n, d, start, len](const Tensor<T>& g) {
    if (auto* dg = detail::grad_of(a))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < len; ++c) (*dg)[r * d + start + c] += g[r * len + c];
  });
}

// ---------------------------------------------------------------- dense ops

// y[N,O] = x[N,I] W[O,I]^T + b[O]; pass an undefined Var for no bias.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = {}) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1))
    throw ShapeError("linear: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  const std::size_t n = x.dim(0), in = x.dim(1), o = w.dim(0);
  Tensor<T> out({n, o});
  if (b.defined())
    for (std::size_t r = 0; r < n; ++r) std::copy_n(b.value().data(), o, out.data() + r * o);
  blas::gemm_nt(n, o, in, x.value().data(), w.value().data(), out.data());
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make<T>(std::move(out), inputs, [x, w, b, n, in, o](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(x)) blas::gemm_nn(n, in, o, g.data(), w.value().data(), d->data());
    if (auto* d = detail::grad_of(w)) blas::gemm_tn(o, in, n, g.data(), x.value().data(), d->data());
    if (b.defined())
      if (auto* d = detail::grad_of(b))
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < o; ++c) (*d)[c] += g[r * o + c];
  });
}

// Row-wise dot product of two [N,D] matrices -> [N].
template <class T>
Var<T> rowdot(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "rowdot");
  const std::size_t n = a.dim(0), d = a.dim(1);
  Tensor<T> out({n});
  for (std::size_t r = 0; r < n; ++r) {
    T s{0};
    for (std::size_t c = 0; c < d; ++c) s += a.value()[r * d + c] * b.value()[r * d + c];
    out[r] = s;
  }
  return detail::make<T>(std::move(out), {a, b}, [a, b, n, d](const Tensor<T>& g) {
    if (auto* da = detail::grad_of(a))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*da)[r * d + c] += g[r] * b.value()[r * d + c];
    if (auto* db = detail::grad_of(b))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) (*db)[r * d + c] += g[r] * a.value()[r * d + c];
  });
}

// Rows of table[V,E] selected by ids -> [N,E].
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  const std::size_t v = table.dim(0), e = table.dim(1);
  Tensor<T> out({ids.size(), e});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v)
      throw ShapeError("embedding id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(table.value().data() + ids[r] * e, e, out.data() + r * e);
  }
  return detail::make<T>(std::move(out), {table}, [table, ids, e](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(table))
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t c = 0; c < e; ++c) (*d)[ids[r] * e + c] += g[r * e + c];
  });
}

// Row-wise log-softmax of [N,V].
template <class T>
Var<T> log_softmax(const Var<T>& a) {
  const std::size_t n = a.dim(0), v = a.dim(1);
  Tensor<T> out({n, v});
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = a.value().data() + r * v;
    const T m = *std::max_element(x, x + v);
    T s{0};
    for (std::size_t c = 0; c < v; ++c) s += std::exp(x[c] - m);
    const T lse = m + std::log(s);
    for (std::size_t c = 0; c < v; ++c) out[r * v + c] = x[c] - lse;
  }
  auto keep = std::make_shared<Tensor<T>>(out);
  return detail::make<T>(std::move(out), {a}, [a, keep, n, v](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t r = 0; r < n; ++r) {
        T gs{0};
        for (std::size_t c = 0; c < v; ++c) gs += g[r * v + c];
        for (std::size_t c = 0; c < v; ++c)
          (*d)[r * v + c] += g[r * v + c] - std::exp((*keep)[r * v + c]) * gs;
      }
  });
}

// out[r] = a[r, ids[r]] for [N,V] input.
template <class T>
Var<T> pick(const Var<T>& a, const std::vector<int>& ids) {
  const std::size_t n = a.dim(0), v = a.dim(1);
  if (ids.size() != n) throw ShapeError("pick: id count mismatch");
  Tensor<T> out({n});
  for (std::size_t r = 0; r < n; ++r) out[r] = a.value()[r * v + ids[r]];
  return detail::make<T>(std::move(out), {a}, [a, ids, v](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(a))
      for (std::size_t r = 0; r < ids.size(); ++r) (*d)[r * v + ids[r]] += g[r];
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------- image ops

struct ConvGeom {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
};

namespace detail {

template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::size_t np = g.n * g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* img = x + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            T* dst = row + (n * g.ho + oy) * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill_n(dst, g.wo, T{0});
              continue;
            }
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T{0} : img[iy * g.w + ix];
            }
          }
        }
      }
}

template <class T>
void col2im(const ConvGeom& g, const T* col, T* dx) {
  const std::size_t np = g.n * g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* img = dx + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            const T* src = row + (n * g.ho + oy) * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) img[iy * g.w + ix] += src[ox];
            }
          }
        }
      }
}

}  // namespace detail

// x[N,C,H,W] * w[O,C,k,k] + b[O] with square kernels, zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] != ws[3])
    throw ShapeError("conv2d: x " + shape_str(xs) + " w " + shape_str(ws));
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) throw ShapeError("conv2d: kernel larger than input");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  const std::size_t ckk = g.c * g.k * g.k, hw = g.ho * g.wo, np = g.n * hw;

  auto col = std::make_shared<std::vector<T>>(ckk * np);
  detail::im2col(g, x.value().data(), col->data());
  std::vector<T> tmp(g.o * np, T{0});
  blas::gemm_nn(g.o, np, ckk, w.value().data(), col->data(), tmp.data());

  Tensor<T> out({g.n, g.o, g.ho, g.wo});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T bias = b.defined() ? b.value()[o] : T{0};
      const T* src = tmp.data() + o * np + n * hw;
      T* dst = out.data() + (n * g.o + o) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + bias;
    }

  const bool need_col = w.requires_grad() && NoGradGuard::enabled();
  if (!need_col) col.reset();
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return detail::make<T>(std::move(out), inputs, [x, w, b, g, col, ckk, hw, np](const Tensor<T>& gout) {
    // Gradient laid out as [O, N*HoWo] to match the forward product.
    std::vector<T> gt(g.o * np);
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.o; ++o)
        std::copy_n(gout.data() + (n * g.o + o) * hw, hw, gt.data() + o * np + n * hw);
    if (b.defined())
      if (auto* d = detail::grad_of(b))
        for (std::size_t o = 0; o < g.o; ++o) {
          T s{0};
          for (std::size_t p = 0; p < np; ++p) s += gt[o * np + p];
          (*d)[o] += s;
        }
    if (auto* d = detail::grad_of(w)) blas::gemm_nt(g.o, ckk, np, gt.data(), col->data(), d->data());
    if (auto* d = detail::grad_of(x)) {
      std::vector<T> dcol(ckk * np, T{0});
      blas::gemm_tn(ckk, np, g.o, w.value().data(), gt.data(), dcol.data());
      detail::col2im(g, dcol.data(), d->data());
    }
  });
}

// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <class T>
Var<T> upsample2x(const Var<T>& x) {
  const auto& s = x.shape();
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(i * 2 * h + y) * 2 * w + xx] = x.value()[(i * h + y / 2) * w + xx / 2];
  return detail::make<T>(std::move(out), {x}, [x, nc, h, w](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(x))
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t xx = 0; xx < 2 * w; ++xx)
            (*d)[(i * h + y / 2) * w + xx / 2] += g[(i * 2 * h + y) * 2 * w + xx];
  });
}

// Per-sample, per-location normalisation across channels of [N,C,...].
template <class T>
Var<T> pixel_norm(const Var<T>& x, T eps = T(1e-8)) {
  const auto& s = x.shape();
  const std::size_t n = s[0], c = s[1], p = x.numel() / (n * c);
  Tensor<T> out(s);
  auto inv = std::make_shared<std::vector<T>>(n * p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < p; ++q) {
      T ss{0};
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T v = x.value()[(i * c + ch) * p + q];
        ss += v * v;
      }
      const T r = T{1} / std::sqrt(ss / static_cast<T>(c) + eps);
      (*inv)[i * p + q] = r;
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(i * c + ch) * p + q] = x.value()[(i * c + ch) * p + q] * r;
    }
  return detail::make<T>(std::move(out), {x}, [x, inv, n, c, p](const Tensor<T>& g) {
    if (auto* d = detail::grad_of(x))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t q = 0; q < p; ++q) {
          const T r = (*inv)[i * p + q];
          T dot{0};
          for (std::size_t ch = 0; ch < c; ++ch)
            dot += g[(i * c + ch) * p + q] * x.value()[(i * c + ch) * p + q];
          const T k = dot * r * r * r / static_cast<T>(c);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t idx = (i * c + ch) * p + q;
            (*d)[idx] += g[idx] * r - x.value()[idx] * k;
          }
        }
  });
}

}  // namespace t2i2t::ag
