// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks shared by the text encoder and the temporal
// encoder: layer norm, multi-head self-attention, pre-norm encoder stacks and
// the learnable temporal position table.

#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vidprompt/autograd.hpp"
#include "vidprompt/rng.hpp"

namespace vidprompt {

struct TransformerConfig {
  std::size_t depth = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_sequence_length = 77;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("TransformerConfig: depth must be >= 1");
    if (width < 1 || heads < 1 || width % heads != 0) {
      throw std::invalid_argument("TransformerConfig: width " + std::to_string(width) +
                                  " is not divisible by heads " + std::to_string(heads));
    }
    if (mlp_ratio < 1) throw std::invalid_argument("TransformerConfig: mlp_ratio must be >= 1");
    if (max_sequence_length < 1) throw std::invalid_argument("TransformerConfig: max_sequence_length must be >= 1");
  }
};

// Rows [offset, offset + length) of a stacked batch form one sequence;
// attention never crosses segment boundaries.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

inline std::vector<Segment> uniform_segments(std::size_t count, std::size_t length) {
  std::vector<Segment> segs(count);
  for (std::size_t i = 0; i < count; ++i) segs[i] = Segment{i * length, length};
  return segs;
}

// Row-wise normalisation with eps 1e-5 inside the square root, no affine.
template <class T>
Var<T> normalize_rows(Var<T> x, T eps = T(1e-5)) {
  Var<T> centered = sub_col(x, row_mean(x));
  Var<T> stddev = sqrt(add_scalar(row_variance(x), eps));
  return div_col(centered, stddev);
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  return add_row(mul_row(normalize_rows(x, eps), gamma), beta);
}

// Tape-free row normalisation for frozen feature extractors; uses the same op
// chain on a constant-only tape so the arithmetic matches the recorded path.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  Tape<T> tape;
  return normalize_rows(tape.constant(x)).value();
}

namespace nn_detail {

inline std::string join(const std::string& prefix, const std::string& leaf) { return prefix + "." + leaf; }

}  // namespace nn_detail

// Parameter names of one attention module.
struct AttentionNames {
  std::string wq, bq, wk, bk, wv, bv, wo, bo;

  explicit AttentionNames(const std::string& prefix)
      : wq(nn_detail::join(prefix, "wq")),
        bq(nn_detail::join(prefix, "bq")),
        wk(nn_detail::join(prefix, "wk")),
        bk(nn_detail::join(prefix, "bk")),
        wv(nn_detail::join(prefix, "wv")),
        bv(nn_detail::join(prefix, "bv")),
        wo(nn_detail::join(prefix, "wo")),
        bo(nn_detail::join(prefix, "bo")) {}
};

// Full (non-causal) scaled dot-product attention, scale 1/sqrt(D/heads),
// heads concatenated then projected.
template <class T>
Var<T> multi_head_self_attention(Tape<T>& tape, const ParameterSet<T>& params, const AttentionNames& names,
                                 std::size_t heads, Var<T> x, std::span<const Segment> segments) {
  if (x.rows() == 0) throw std::invalid_argument("multi_head_self_attention: empty sequence");
  const std::size_t width = x.cols();
  if (heads == 0 || width % heads != 0) throw std::invalid_argument("multi_head_self_attention: bad head count");
  const std::size_t head_dim = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(head_dim));

  auto project = [&](const std::string& w, const std::string& b) {
    return add_row(matmul(x, tape.parameter(params, w)), tape.parameter(params, b));
  };
  Var<T> q = project(names.wq, names.bq);
  Var<T> k = project(names.wk, names.bk);
  Var<T> v = project(names.wv, names.bv);

  std::vector<Var<T>> per_segment;
  per_segment.reserve(segments.size());
  for (const Segment& seg : segments) {
    if (seg.length == 0) throw std::invalid_argument("multi_head_self_attention: empty segment");
    const bool whole = segments.size() == 1 && seg.offset == 0 && seg.length == x.rows();
    Var<T> qs = whole ? q : slice_rows(q, seg.offset, seg.offset + seg.length);
    Var<T> ks = whole ? k : slice_rows(k, seg.offset, seg.offset + seg.length);
    Var<T> vs = whole ? v : slice_rows(v, seg.offset, seg.offset + seg.length);
    std::vector<Var<T>> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t b = h * head_dim, e = b + head_dim;
      Var<T> qh = heads == 1 ? qs : slice_cols(qs, b, e);
      Var<T> kh = heads == 1 ? ks : slice_cols(ks, b, e);
      Var<T> vh = heads == 1 ? vs : slice_cols(vs, b, e);
      Var<T> attn = row_softmax(scale(matmul(qh, transpose(kh)), scale_factor));
      head_out.push_back(matmul(attn, vh));
    }
    per_segment.push_back(heads == 1 ? head_out.front() : concat_cols(head_out));
  }
  Var<T> merged = per_segment.size() == 1 ? per_segment.front() : concat_rows(per_segment);
  return add_row(matmul(merged, tape.parameter(params, names.wo)), tape.parameter(params, names.bo));
}

// Stack of pre-norm blocks: x += MHSA(LN(x)); x += MLP(LN(x)), MLP with GELU.
template <class T>
class TransformerEncoder {
 public:
  TransformerEncoder(std::string prefix, TransformerConfig config)
      : prefix_(std::move(prefix)), config_(config) {
    config_.validate();
  }

  const TransformerConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

  std::string layer_prefix(std::size_t layer) const { return prefix_ + ".layers." + std::to_string(layer); }

  // Weight matrices ~ N(0, weight_std); biases and LN shifts 0; LN scales 1.
  void init(ParameterSet<T>& params, Rng& rng, double weight_std, bool trainable) const {
    const std::size_t d = config_.width, hidden = config_.width * config_.mlp_ratio;
    for (std::size_t l = 0; l < config_.depth; ++l) {
      const std::string lp = layer_prefix(l);
      params.add(lp + ".ln1.gamma", Tensor<T>(Shape{1, d}, T(1)), trainable);
      params.add(lp + ".ln1.beta", Tensor<T>(Shape{1, d}), trainable);
      const AttentionNames an(lp + ".attn");
      for (const auto* pair : {&an.wq, &an.wk, &an.wv, &an.wo}) {
        params.add(*pair, normal_tensor<T>(Shape{d, d}, weight_std, rng), trainable);
      }
      for (const auto* bias : {&an.bq, &an.bk, &an.bv, &an.bo}) {
        params.add(*bias, Tensor<T>(Shape{1, d}), trainable);
      }
      params.add(lp + ".ln2.gamma", Tensor<T>(Shape{1, d}, T(1)), trainable);
      params.add(lp + ".ln2.beta", Tensor<T>(Shape{1, d}), trainable);
      params.add(lp + ".mlp.w1", normal_tensor<T>(Shape{d, hidden}, weight_std, rng), trainable);
      params.add(lp + ".mlp.b1", Tensor<T>(Shape{1, hidden}), trainable);
      params.add(lp + ".mlp.w2", normal_tensor<T>(Shape{hidden, d}, weight_std, rng), trainable);
      params.add(lp + ".mlp.b2", Tensor<T>(Shape{1, d}), trainable);
    }
  }

  Var<T> forward(Tape<T>& tape, const ParameterSet<T>& params, Var<T> x,
                 std::span<const Segment> segments) const {
    if (x.cols() != config_.width) {
      throw std::invalid_argument("TransformerEncoder(" + prefix_ + "): input width " + std::to_string(x.cols()) +
                                  " != " + std::to_string(config_.width));
    }
    for (const Segment& s : segments) {
      if (s.length == 0) throw std::invalid_argument("TransformerEncoder: empty sequence");
      if (s.length > config_.max_sequence_length) {
        throw std::invalid_argument("TransformerEncoder(" + prefix_ + "): sequence length " +
                                    std::to_string(s.length) + " exceeds maximum " +
                                    std::to_string(config_.max_sequence_length));
      }
      if (s.offset + s.length > x.rows()) throw std::invalid_argument("TransformerEncoder: segment out of range");
    }
    for (std::size_t l = 0; l < config_.depth; ++l) {
      const std::string lp = layer_prefix(l);
      auto P = [&](const std::string& leaf) { return tape.parameter(params, lp + "." + leaf); };
      Var<T> h = layer_norm(x, P("ln1.gamma"), P("ln1.beta"));
      x = add(x, multi_head_self_attention(tape, params, AttentionNames(lp + ".attn"), config_.heads, h, segments));
      h = layer_norm(x, P("ln2.gamma"), P("ln2.beta"));
      Var<T> mlp = add_row(matmul(gelu(add_row(matmul(h, P("mlp.w1")), P("mlp.b1"))), P("mlp.w2")), P("mlp.b2"));
      x = add(x, mlp);
    }
    return x;
  }

  Var<T> forward(Tape<T>& tape, const ParameterSet<T>& params, Var<T> x) const {
    if (x.rows() == 0) throw std::invalid_argument("TransformerEncoder: empty sequence");
    const Segment whole{0, x.rows()};
    return forward(tape, params, x, std::span<const Segment>(&whole, 1));
  }

 private:
  std::string prefix_;
  TransformerConfig config_;
};

// Learnable temporal positions: a row per clip position plus a row per
// allowed sampling gap, keyed by exact gap value.
template <class T>
class TemporalPositionTable {
 public:
  TemporalPositionTable(std::string prefix, std::size_t max_frames, std::size_t width, std::vector<int> gaps)
      : prefix_(std::move(prefix)), max_frames_(max_frames), width_(width) {
    if (max_frames_ == 0) throw std::invalid_argument("TemporalPositionTable: max_frames must be >= 1");
    for (int g : gaps) {
      if (g < 1) throw std::invalid_argument("TemporalPositionTable: gaps must be positive");
      gap_rows_.emplace(g, 0);
    }
    if (gap_rows_.empty()) throw std::invalid_argument("TemporalPositionTable: empty gap set");
    std::size_t r = 0;
    for (auto& [gap, row] : gap_rows_) row = r++;
  }

  std::string index_name() const { return prefix_ + ".index"; }
  std::string gap_name() const { return prefix_ + ".gap"; }
  std::size_t max_frames() const { return max_frames_; }
  std::vector<int> gaps() const {
    std::vector<int> out;
    for (const auto& [g, _] : gap_rows_) out.push_back(g);
    return out;
  }
  bool has_gap(int gap) const { return gap_rows_.count(gap) != 0; }

  void init(ParameterSet<T>& params, Rng& rng, double stddev) const {
    params.add(index_name(), normal_tensor<T>(Shape{max_frames_, width_}, stddev, rng), true);
    params.add(gap_name(), normal_tensor<T>(Shape{gap_rows_.size(), width_}, stddev, rng), true);
  }

  // Row t = index-table[indices[t]] + gap-table[gap].
  Var<T> encode(Tape<T>& tape, const ParameterSet<T>& params, std::span<const std::size_t> indices, int gap) const {
    auto it = gap_rows_.find(gap);
    if (it == gap_rows_.end()) {
      throw std::invalid_argument("temporal_positional_encoding: unknown frame gap " + std::to_string(gap));
    }
    if (indices.empty()) throw std::invalid_argument("temporal_positional_encoding: no frames");
    for (std::size_t i : indices) {
      if (i >= max_frames_) {
        throw std::out_of_range("temporal_positional_encoding: frame index " + std::to_string(i) +
                                " >= max frames " + std::to_string(max_frames_));
      }
    }
    Var<T> idx = gather_rows(tape.parameter(params, index_name()),
                             std::vector<std::size_t>(indices.begin(), indices.end()));
    Var<T> g = gather_rows(tape.parameter(params, gap_name()), std::vector<std::size_t>{it->second});
    return add_row(idx, g);
  }

 private:
  std::string prefix_;
  std::size_t max_frames_;
  std::size_t width_;
  std::map<int, std::size_t> gap_rows_;
};

}  // namespace vidprompt
