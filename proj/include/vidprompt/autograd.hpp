// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense matrices.
//
// A Tape (the gradient record) is append-only: every op pushes one node whose
// inputs already live on the tape, so reverse iteration is a valid
// topological order. Gradients accumulate additively on fan-out.

#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vidprompt/tensor.hpp"

namespace vidprompt {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

// Named parameters in insertion order. Frozen entries take part in the
// forward and backward passes but are never written by an optimizer.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(Parameter<T>{std::move(name), std::move(value), trainable});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Parameter<T>& at(const std::string& name) const { return params_.at(lookup(name)); }
  Parameter<T>& at(const std::string& name) { return params_.at(lookup(name)); }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterSet: unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Result of backward(): parameter name -> dLoss/dParameter for every
// parameter reachable from the loss. `detached` is raised when the loss does
// not depend on any parameter at all.
template <class T>
struct GradientMap {
  std::map<std::string, Tensor<T>> grads;
  bool detached = false;

  bool contains(const std::string& name) const { return grads.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const { return grads.at(name); }
  std::size_t size() const { return grads.size(); }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  // With track_frozen == false, frozen parameters enter the record as
  // constants: gradient still flows through the ops that consume them, but
  // their own weight gradients are skipped.
  explicit Tape(bool track_frozen = true) : track_frozen_(track_frozen) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }

  Var<T> parameter(const Parameter<T>& p) {
    if (auto it = param_nodes_.find(p.name); it != param_nodes_.end()) return Var<T>{this, it->second};
    const bool tracked = p.trainable || track_frozen_;
    Var<T> v = push(p.value, tracked, {}, nullptr);
    nodes_[v.id].param_name = p.name;
    param_nodes_.emplace(p.name, v.id);
    return v;
  }

  Var<T> parameter(const ParameterSet<T>& params, const std::string& name) {
    return parameter(params.at(name));
  }

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    BackwardFn kept = needs ? std::move(fn) : BackwardFn{};
    return push(std::move(value), needs, std::move(inputs), std::move(kept));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated as zeros on first touch.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  GradientMap<T> backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to a different tape");
    if (loss.value().size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_string(loss.value().shape()));
    }
    GradientMap<T> out;
    if (!nodes_[loss.id].requires_grad) {
      out.detached = true;
      return out;
    }
    grad(loss.id).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (const auto& [name, id] : param_nodes_) {
      if (id <= loss.id && !nodes_[id].grad.empty()) out.grads.emplace(name, nodes_[id].grad);
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string param_name;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(inputs), std::move(fn), {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  bool track_frozen_;
  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
};

template <class T>
GradientMap<T> backward(Var<T> loss) {
  return loss.tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Primitive ops. Every op validates shapes, computes its value eagerly, and
// registers an adjoint that accumulates into the gradients of its inputs.

namespace ops_detail {

template <class T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.tape) throw std::invalid_argument("op on a detached Var");
  return *a.tape;
}

template <class T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument("op mixes Vars from different tapes");
}

template <class T>
void require_same_shape(Var<T> a, Var<T> b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

template <class T>
const Tensor<T>& mat(Var<T> a, const char* what) {
  kernels::require_matrix(a.shape(), what);
  return a.value();
}

}  // namespace ops_detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  ops_detail::same_tape(a, b);
  auto& tape = ops_detail::tape_of(a);
  Tensor<T> out = kernels::matmul(ops_detail::mat(a, "matmul"), ops_detail::mat(b, "matmul"));
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) kernels::gemm(g, false, t.value(ib), true, t.grad(ia), true);
    if (t.requires_grad(ib)) kernels::gemm(t.value(ia), true, g, false, t.grad(ib), true);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  ops_detail::same_tape(a, b);
  ops_detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      auto& gi = t.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  ops_detail::same_tape(a, b);
  ops_detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  ops_detail::same_tape(a, b);
  ops_detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      const auto& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      const auto& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(std::move(out), {ia}, [ia, s](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v += s;
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

template <class T>
Var<T> log(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::log(v);
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

template <class T>
Var<T> sqrt(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::sqrt(v);
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (T(2) * y[i]);
  });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const T inv_sqrt2 = T(0.70710678118654752440);
    const T inv_sqrt2pi = T(0.39894228040143267794);
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

// Row-wise softmax with row-max subtraction.
template <class T>
Var<T> row_softmax(Var<T> a) {
  Tensor<T> out = ops_detail::mat(a, "row_softmax");
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = T(0);
    for (auto& v : row) sum += (v = std::exp(v - mx));
    for (auto& v : row) v /= sum;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r) {
      T dot = T(0);
      for (std::size_t c = 0; c < m; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < m; ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  Tensor<T> out = ops_detail::mat(a, "log_softmax_rows");
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = T(0);
    for (T v : row) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    for (auto& v : row) v -= lse;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r) {
      T gsum = T(0);
      for (std::size_t c = 0; c < m; ++c) gsum += g(r, c);
      for (std::size_t c = 0; c < m; ++c) ga(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
    }
  });
}

// n x D -> n x 1.
template <class T>
Var<T> row_mean(Var<T> a) {
  const Tensor<T>& x = ops_detail::mat(a, "row_mean");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out = Tensor<T>::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    T s = T(0);
    for (T v : x.row(r)) s += v;
    out[r] = s / static_cast<T>(m);
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(ia);
    const T inv = T(1) / static_cast<T>(m);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) ga(r, c) += g[r] * inv;
  });
}

// Population variance of each row: n x D -> n x 1.
template <class T>
Var<T> row_variance(Var<T> a) {
  const Tensor<T>& x = ops_detail::mat(a, "row_variance");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out = Tensor<T>::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    T mu = T(0);
    for (T v : x.row(r)) mu += v;
    mu /= static_cast<T>(m);
    T s = T(0);
    for (T v : x.row(r)) s += (v - mu) * (v - mu);
    out[r] = s / static_cast<T>(m);
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    auto& ga = t.grad(ia);
    const T inv = T(1) / static_cast<T>(m);
    for (std::size_t r = 0; r < n; ++r) {
      T mu = T(0);
      for (T v : x.row(r)) mu += v;
      mu *= inv;
      for (std::size_t c = 0; c < m; ++c) ga(r, c) += g[r] * T(2) * (x(r, c) - mu) * inv;
    }
  });
}

// n x D -> 1 x D (mean over rows; the pooling primitive).
template <class T>
Var<T> mean_over_rows(Var<T> a) {
  const Tensor<T>& x = ops_detail::mat(a, "mean_over_rows");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out = kernels::mean_of_rows(x);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(ia);
    const T inv = T(1) / static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) ga(r, c) += g[c] * inv;
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s = T(0);
  for (T v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return ops_detail::tape_of(a).push(Tensor<T>(Shape{1, 1}, s), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(ia).values()) v += g;
  });
}

// x (n x D) + b (1 x D) broadcast over rows.
template <class T>
Var<T> add_row(Var<T> x, Var<T> b) {
  ops_detail::same_tape(x, b);
  const Tensor<T>& xv = ops_detail::mat(x, "add_row");
  const Tensor<T>& bv = ops_detail::mat(b, "add_row");
  if (bv.rows() != 1 || bv.cols() != xv.cols()) throw std::invalid_argument("add_row: bias must be 1 x cols");
  Tensor<T> out = xv;
  const std::size_t n = xv.rows(), m = xv.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) += bv[c];
  const std::size_t ix = x.id, ib = b.id;
  return x.tape->push(std::move(out), {ix, ib}, [ix, ib, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += g(r, c);
    }
  });
}

// x (n x D) * g (1 x D) broadcast over rows.
template <class T>
Var<T> mul_row(Var<T> x, Var<T> gamma) {
  ops_detail::same_tape(x, gamma);
  const Tensor<T>& xv = ops_detail::mat(x, "mul_row");
  const Tensor<T>& gv = ops_detail::mat(gamma, "mul_row");
  if (gv.rows() != 1 || gv.cols() != xv.cols()) throw std::invalid_argument("mul_row: scale must be 1 x cols");
  Tensor<T> out = xv;
  const std::size_t n = xv.rows(), m = xv.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) *= gv[c];
  const std::size_t ix = x.id, ig = gamma.id;
  return x.tape->push(std::move(out), {ix, ig}, [ix, ig, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      const auto& gv = t.value(ig);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gx(r, c) += g(r, c) * gv[c];
    }
    if (t.requires_grad(ig)) {
      auto& gg = t.grad(ig);
      const auto& xv = t.value(ix);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gg[c] += g(r, c) * xv(r, c);
    }
  });
}

// x (n x D) - m (n x 1) broadcast over columns.
template <class T>
Var<T> sub_col(Var<T> x, Var<T> col) {
  ops_detail::same_tape(x, col);
  const Tensor<T>& xv = ops_detail::mat(x, "sub_col");
  const Tensor<T>& cv = ops_detail::mat(col, "sub_col");
  if (cv.cols() != 1 || cv.rows() != xv.rows()) throw std::invalid_argument("sub_col: operand must be rows x 1");
  Tensor<T> out = xv;
  const std::size_t n = xv.rows(), m = xv.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) -= cv[r];
  const std::size_t ix = x.id, ic = col.id;
  return x.tape->push(std::move(out), {ix, ic}, [ix, ic, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ic)) {
      auto& gc = t.grad(ic);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gc[r] -= g(r, c);
    }
  });
}

// x (n x D) / s (n x 1) broadcast over columns.
template <class T>
Var<T> div_col(Var<T> x, Var<T> col) {
  ops_detail::same_tape(x, col);
  const Tensor<T>& xv = ops_detail::mat(x, "div_col");
  const Tensor<T>& cv = ops_detail::mat(col, "div_col");
  if (cv.cols() != 1 || cv.rows() != xv.rows()) throw std::invalid_argument("div_col: divisor must be rows x 1");
  Tensor<T> out = xv;
  const std::size_t n = xv.rows(), m = xv.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out(r, c) /= cv[r];
  const std::size_t ix = x.id, ic = col.id;
  return x.tape->push(std::move(out), {ix, ic}, [ix, ic, n, m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const auto& cv = t.value(ic);
    if (t.requires_grad(ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gx(r, c) += g(r, c) / cv[r];
    }
    if (t.requires_grad(ic)) {
      auto& gc = t.grad(ic);
      const auto& xv = t.value(ix);
      for (std::size_t r = 0; r < n; ++r) {
        T acc = T(0);
        for (std::size_t c = 0; c < m; ++c) acc += g(r, c) * xv(r, c);
        gc[r] -= acc / (cv[r] * cv[r]);
      }
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  Tensor<T> out = kernels::transpose(ops_detail::mat(a, "transpose"));
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(c, r) += g(r, c);
  });
}

// Rows [begin, end).
template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const Tensor<T>& x = ops_detail::mat(a, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw std::out_of_range("slice_rows: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") for " + std::to_string(x.rows()) + " rows");
  }
  const std::size_t m = x.cols();
  std::vector<T> data(x.values().begin() + begin * m, x.values().begin() + end * m);
  const std::size_t ia = a.id;
  return a.tape->push(Tensor<T>(Shape{end - begin, m}, std::move(data)), {ia},
                      [ia, begin, m](Tape<T>& t, std::size_t self) {
                        const Tensor<T>& g = t.grad(self);
                        auto& ga = t.grad(ia);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * m + i] += g[i];
                      });
}

// Columns [begin, end).
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const Tensor<T>& x = ops_detail::mat(a, "slice_cols");
  if (begin >= end || end > x.cols()) throw std::out_of_range("slice_cols: invalid column range");
  const std::size_t n = x.rows(), w = end - begin;
  Tensor<T> out = Tensor<T>::matrix(n, w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = x(r, begin + c);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, begin, n, w](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) += g(r, c);
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  Tape<T>& tape = ops_detail::tape_of(parts.front());
  const std::size_t m = ops_detail::mat(parts.front(), "concat_rows").cols();
  std::size_t n = 0;
  std::vector<std::size_t> ids;
  std::vector<T> data;
  for (const auto& p : parts) {
    ops_detail::same_tape(parts.front(), p);
    if (ops_detail::mat(p, "concat_rows").cols() != m) throw std::invalid_argument("concat_rows: column mismatch");
    n += p.rows();
    ids.push_back(p.id);
    data.insert(data.end(), p.value().values().begin(), p.value().values().end());
  }
  return tape.push(Tensor<T>(Shape{n, m}, std::move(data)), ids, [ids](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t len = t.value(id).size();
      if (t.requires_grad(id)) {
        auto& gi = t.grad(id);
        for (std::size_t i = 0; i < len; ++i) gi[i] += g[offset + i];
      }
      offset += len;
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: nothing to concatenate");
  Tape<T>& tape = ops_detail::tape_of(parts.front());
  const std::size_t n = ops_detail::mat(parts.front(), "concat_cols").rows();
  std::size_t m = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    ops_detail::same_tape(parts.front(), p);
    if (ops_detail::mat(p, "concat_cols").rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    m += p.cols();
    ids.push_back(p.id);
  }
  Tensor<T> out = Tensor<T>::matrix(n, m);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    off += v.cols();
  }
  return tape.push(std::move(out), ids, [ids, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t w = t.value(id).cols();
      if (t.requires_grad(id)) {
        auto& gi = t.grad(id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

// out[r] = table[ids[r]]; the adjoint scatter-adds.
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
  const Tensor<T>& tv = ops_detail::mat(table, "gather_rows");
  if (ids.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const std::size_t m = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), m);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[r]) + " >= " + std::to_string(tv.rows()));
    }
    std::copy(tv.row(ids[r]).begin(), tv.row(ids[r]).end(), out.row(r).begin());
  }
  const std::size_t it = table.id;
  return table.tape->push(std::move(out), {it}, [it, ids = std::move(ids), m](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& gt = t.grad(it);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < m; ++c) gt(ids[r], c) += g(r, c);
  });
}

// out[r] = x[r, cols[r]] as an n x 1 column.
template <class T>
Var<T> pick(Var<T> x, std::vector<std::size_t> cols) {
  const Tensor<T>& xv = ops_detail::mat(x, "pick");
  if (cols.size() != xv.rows()) throw std::invalid_argument("pick: need one index per row");
  Tensor<T> out = Tensor<T>::matrix(xv.rows(), 1);
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] >= xv.cols()) throw std::out_of_range("pick: column index out of range");
    out[r] = xv(r, cols[r]);
  }
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {ix}, [ix, cols = std::move(cols)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t r = 0; r < cols.size(); ++r) gx(r, cols[r]) += g[r];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification harness.

template <class T>
using LossBuilder = std::function<Var<T>(Tape<T>&, const ParameterSet<T>&)>;

struct FiniteDiffOptions {
  double eps = 1e-5;
  std::size_t samples_per_tensor = 8;
  std::uint64_t seed = 0;
  bool trainable_only = true;
};

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_entry;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Compares analytic gradients with central differences on a sampled subset of
// scalar entries. The evaluation must be a deterministic function of the
// parameters; a mismatch between two identical evaluations aborts the check.
template <class T>
FiniteDiffReport finite_diff_check(const LossBuilder<T>& evaluate, ParameterSet<T>& params,
                                   const FiniteDiffOptions& opts = {}) {
  auto eval_value = [&]() {
    Tape<T> tape;
    return static_cast<double>(evaluate(tape, params).value()[0]);
  };

  GradientMap<T> analytic;
  double base = 0.0;
  {
    Tape<T> tape;
    Var<T> loss = evaluate(tape, params);
    base = static_cast<double>(loss.value()[0]);
    analytic = tape.backward(loss);
  }
  if (eval_value() != base) {
    throw std::runtime_error("finite_diff_check: evaluation is not deterministic; check aborted");
  }

  std::mt19937_64 rng(opts.seed);
  FiniteDiffReport report;
  for (auto& p : params) {
    if (opts.trainable_only && !p.trainable) continue;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(std::min(n, opts.samples_per_tensor));
    for (std::size_t e : entries) {
      const T saved = p.value[e];
      p.value[e] = saved + static_cast<T>(opts.eps);
      const double up = eval_value();
      p.value[e] = saved - static_cast<T>(opts.eps);
      const double down = eval_value();
      p.value[e] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double exact = analytic.contains(p.name) ? static_cast<double>(analytic.at(p.name)[e]) : 0.0;
      const double err = relative_error(exact, numeric);
      ++report.entries_checked;
      if (err >= report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_entry = p.name + "[" + std::to_string(e) + "]";
      }
    }
  }
  return report;
}

}  // namespace vidprompt
