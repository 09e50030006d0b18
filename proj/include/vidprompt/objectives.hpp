// SPDX-License-Identifier: Apache-2.0
//
// Row normalisation, cosine similarity, the contrastive NCE loss and an
// AdamW optimizer that never writes to frozen parameters.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vidprompt/autograd.hpp"

namespace vidprompt {

struct LossConfig {
  double temperature = 0.07;
  bool symmetric = false;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("LossConfig: temperature must be > 0");
  }
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 64;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t steps = 500;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("TrainConfig: beta1 must be in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("TrainConfig: beta2 must be in (0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("TrainConfig: eps must be > 0");
    if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
  }
};

template <class T>
Var<T> l2_normalize(Var<T> x) {
  const Tensor<T>& v = x.value();
  if (!v.is_matrix()) throw std::invalid_argument("l2_normalize: expected a matrix");
  for (std::size_t r = 0; r < v.rows(); ++r) {
    bool zero = true;
    for (T e : v.row(r)) zero = zero && e == T(0);
    if (zero) throw std::invalid_argument("l2_normalize: row " + std::to_string(r) + " has zero norm");
  }
  Var<T> norm = sqrt(scale(row_mean(mul(x, x)), static_cast<T>(v.cols())));
  return div_col(x, norm);
}

template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  Tape<T> tape;
  return l2_normalize(tape.constant(x)).value();
}

template <class T>
Var<T> similarity_matrix(Var<T> v, Var<T> c) {
  if (v.cols() != c.cols()) throw std::invalid_argument("similarity_matrix: width mismatch");
  return matmul(v, transpose(c));
}

// Mean over rows of -log softmax(S / tau)[i, targets[i]].
template <class T>
Var<T> nce_loss(Var<T> s, const std::vector<std::size_t>& targets, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("nce_loss: temperature must be > 0");
  if (!s.value().is_matrix() || s.rows() == 0) throw std::invalid_argument("nce_loss: empty similarity matrix");
  if (targets.size() != s.rows()) throw std::invalid_argument("nce_loss: one target per row required");
  for (std::size_t t : targets) {
    if (t >= s.cols()) {
      throw std::invalid_argument("nce_loss: target " + std::to_string(t) + " >= column count " +
                                  std::to_string(s.cols()));
    }
  }
  Var<T> logp = log_softmax_rows(scale(s, static_cast<T>(1.0 / temperature)));
  return scale(sum(pick(logp, targets)), static_cast<T>(-1.0 / static_cast<double>(s.rows())));
}

// Video-to-text loss, or the average of both directions when symmetric.
// The symmetric form needs a square matrix with pairs on the diagonal.
template <class T>
Var<T> contrastive_loss(Var<T> s, const std::vector<std::size_t>& targets, const LossConfig& cfg) {
  if (!cfg.symmetric) return nce_loss(s, targets, cfg.temperature);
  if (s.rows() != s.cols()) throw std::invalid_argument("contrastive_loss: symmetric loss needs a square matrix");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != i) throw std::invalid_argument("contrastive_loss: symmetric loss needs diagonal targets");
  }
  Var<T> forward = nce_loss(s, targets, cfg.temperature);
  Var<T> reverse = nce_loss(transpose(s), targets, cfg.temperature);
  return scale(add(forward, reverse), T(0.5));
}

template <class T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
};

// Decoupled weight decay, bias-corrected moments:
//   p <- p * (1 - lr * wd)
//   m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
// Trainable parameters without a gradient are skipped for that step.
template <class T>
class AdamW {
 public:
  explicit AdamW(TrainConfig cfg = {}) : cfg_(cfg) {}

  const TrainConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }
  const std::map<std::string, AdamMoments<T>>& moments() const { return moments_; }
  std::map<std::string, AdamMoments<T>>& moments() { return moments_; }

  void step(ParameterSet<T>& params, const GradientMap<T>& grads) {
    ++step_;
    const double lr = cfg_.learning_rate, b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (Parameter<T>& p : params) {
      if (!p.trainable || !grads.contains(p.name)) continue;
      const Tensor<T>& g = grads.at(p.name);
      if (g.shape() != p.value.shape()) throw std::logic_error("AdamW: gradient shape mismatch for " + p.name);
      auto it = moments_.find(p.name);
      if (it == moments_.end()) {
        it = moments_.emplace(p.name, AdamMoments<T>{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())}).first;
      }
      auto& m = it->second.m;
      auto& v = it->second.v;
      const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const T gi = g[i];
        p.value[i] *= decay;
        m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1.0 - b1) * gi;
        v[i] = static_cast<T>(b2) * v[i] + static_cast<T>(1.0 - b2) * gi * gi;
        const T m_hat = m[i] / static_cast<T>(bc1);
        const T v_hat = v[i] / static_cast<T>(bc2);
        p.value[i] -= static_cast<T>(lr) * m_hat / (std::sqrt(v_hat) + static_cast<T>(cfg_.eps));
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, AdamMoments<T>> moments_;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::uint64_t step, double value)
      : std::runtime_error("train_step: non-finite loss " + std::to_string(value) + " at step " +
                           std::to_string(step)),
        step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

// One optimisation step. `build` records the batch loss on the given tape.
// Frozen weights enter as constants: gradient flows through them but their
// own gradients are never formed, which is all the optimizer needs.
template <class T>
double train_step(ParameterSet<T>& params, AdamW<T>& opt, const LossBuilder<T>& build) {
  Tape<T> tape(false);
  Var<T> loss = build(tape, params);
  const double value = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(value)) throw NonFiniteLoss(opt.step_count() + 1, value);
  GradientMap<T> grads = tape.backward(loss);
  opt.step(params, grads);
  return value;
}

}  // namespace vidprompt
