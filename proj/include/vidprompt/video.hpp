// SPDX-License-Identifier: Apache-2.0
//
// Frame sampling, the frozen per-frame encoder, the feature cache, temporal
// encoding on top of frame features, and snippet / proposal pooling.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vidprompt/autograd.hpp"
#include "vidprompt/binary_io.hpp"
#include "vidprompt/nn.hpp"
#include "vidprompt/rng.hpp"

namespace vidprompt {

inline constexpr std::size_t kDefaultClipLength = 16;

// Planted action instance on a video timeline, in frames.
struct TemporalInstance {
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;
};

// Frames are F-dimensional stand-ins for pixels.
struct VideoSample {
  std::string id;
  std::string split;
  Tensor<float> frames;  // T_total x F
  int label = -1;
  std::vector<int> dense_labels;
  std::string query;
  std::vector<TemporalInstance> instances;

  std::size_t total_frames() const { return frames.rows(); }
};

struct Proposal {
  double start = 0.0;
  double end = 0.0;
  double score = 1.0;
};

struct FrameSampling {
  std::vector<std::size_t> indices;
  int gap = 1;
};

// Uniform gap among those that fit the video, uniform start. When no gap
// fits, gap 1 is used and the clip is padded by repeating the last frame.
inline FrameSampling sample_frames(std::size_t total_frames, std::size_t clip_length, std::span<const int> gaps,
                                   Rng& rng) {
  if (gaps.empty()) throw std::invalid_argument("sample_frames: empty gap set");
  if (clip_length < 1) throw std::invalid_argument("sample_frames: clip length must be >= 1");
  if (total_frames < 1) throw std::invalid_argument("sample_frames: video has no frames");
  std::vector<int> feasible;
  for (int g : gaps) {
    if (g < 1) throw std::invalid_argument("sample_frames: gaps must be positive");
    if ((clip_length - 1) * static_cast<std::size_t>(g) + 1 <= total_frames) feasible.push_back(g);
  }
  FrameSampling s;
  s.indices.resize(clip_length);
  if (feasible.empty()) {
    s.gap = 1;
    for (std::size_t i = 0; i < clip_length; ++i) s.indices[i] = std::min(i, total_frames - 1);
    return s;
  }
  s.gap = feasible[uniform_index(rng, 0, feasible.size() - 1)];
  const std::size_t span = (clip_length - 1) * static_cast<std::size_t>(s.gap) + 1;
  const std::size_t start = uniform_index(rng, 0, total_frames - span);
  for (std::size_t i = 0; i < clip_length; ++i) s.indices[i] = start + i * static_cast<std::size_t>(s.gap);
  return s;
}

// Frozen per-frame encoder: seeded linear map, GELU, row normalisation.
template <class T>
class ImageEncoder {
 public:
  ImageEncoder(std::size_t frame_dim, std::size_t width, std::string prefix = "image")
      : prefix_(std::move(prefix)), frame_dim_(frame_dim), width_(width) {}

  std::string weight_name() const { return prefix_ + ".proj.weight"; }
  std::string bias_name() const { return prefix_ + ".proj.bias"; }
  std::size_t frame_dim() const { return frame_dim_; }
  std::size_t width() const { return width_; }

  void init(ParameterSet<T>& params, Rng& rng) const {
    params.add(weight_name(), normal_tensor<T>(Shape{frame_dim_, width_}, 1.0 / std::sqrt(double(frame_dim_)), rng),
               false);
    params.add(bias_name(), normal_tensor<T>(Shape{1, width_}, 0.1, rng), false);
  }

  // Rows of `frames` (n x F) -> n x D features. Nothing is recorded for
  // gradients: the encoder sits below every trainable tensor.
  Tensor<T> encode(const ParameterSet<T>& params, const Tensor<float>& frames) const {
    if (!frames.is_matrix() || frames.cols() != frame_dim_) {
      throw std::invalid_argument("encode_frames: expected n x " + std::to_string(frame_dim_) + " frames, got " +
                                  shape_string(frames.shape()));
    }
    const auto& w = params.at(weight_name());
    if (w.trainable) throw std::logic_error("encode_frames: image encoder must be frozen");
    Tape<T> tape;
    Var<T> x = tape.constant(frames.template cast<T>());
    Var<T> h = gelu(add_row(matmul(x, tape.constant(w.value)), tape.constant(params.at(bias_name()).value)));
    return normalize_rows(h).value();
  }

 private:
  std::string prefix_;
  std::size_t frame_dim_;
  std::size_t width_;
};

template <class T>
Tensor<T> encode_frames(const Tensor<float>& frames, const ImageEncoder<T>& encoder, const ParameterSet<T>& params) {
  return encoder.encode(params, frames);
}

// Per-video frozen features for every frame; clips gather rows from here.
template <class T>
class FeatureCache {
 public:
  const Tensor<T>& get(const VideoSample& video, const ImageEncoder<T>& encoder, const ParameterSet<T>& params) {
    auto it = entries_.find(video.id);
    if (it != entries_.end()) return it->second;
    return entries_.emplace(video.id, encoder.encode(params, video.frames)).first->second;
  }

  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  const Tensor<T>& at(const std::string& id) const { return entries_.at(id); }
  void insert(const std::string& id, Tensor<T> features) { entries_[id] = std::move(features); }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Tensor<T>>& entries() const { return entries_; }

  // Record stream: u32 id length, id bytes, u32 T, u32 D, T*D f32 values,
  // all little-endian.
  void write(std::ostream& out) const {
    std::vector<std::uint8_t> bytes;
    for (const auto& [id, feats] : entries_) {
      binary::append_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(id.size()));
      binary::append_bytes(bytes, id);
      binary::append_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(feats.rows()));
      binary::append_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(feats.cols()));
      for (T v : feats.values()) binary::append_le<float>(bytes, static_cast<float>(v));
    }
    binary::write_all(out, bytes);
  }

  static FeatureCache read(std::istream& in) {
    const auto bytes = binary::read_all(in);
    binary::Reader r(bytes);
    FeatureCache cache;
    while (!r.at_end()) {
      const auto id_len = r.read<std::uint32_t>();
      std::string id = r.read_string(id_len);
      const auto rows = r.read<std::uint32_t>();
      const auto cols = r.read<std::uint32_t>();
      Tensor<T> t = Tensor<T>::matrix(rows, cols);
      for (auto& v : t.values()) v = static_cast<T>(r.read<float>());
      cache.entries_.emplace(std::move(id), std::move(t));
    }
    return cache;
  }

 private:
  std::map<std::string, Tensor<T>> entries_;
};

template <class T>
struct FrameFeatures {
  Tensor<T> features;  // T x D
  std::vector<std::size_t> frame_indices;
  int gap = 1;

  std::size_t length() const { return features.rows(); }
};

template <class T>
FrameFeatures<T> gather_clip(const Tensor<T>& video_features, const FrameSampling& sampling) {
  FrameFeatures<T> ff;
  ff.features = Tensor<T>::matrix(sampling.indices.size(), video_features.cols());
  for (std::size_t i = 0; i < sampling.indices.size(); ++i) {
    const auto src = video_features.row(sampling.indices[i]);
    std::copy(src.begin(), src.end(), ff.features.row(i).begin());
  }
  ff.frame_indices = sampling.indices;
  ff.gap = sampling.gap;
  return ff;
}

// Trainable temporal module on top of frozen frame features. Depth 0
// bypasses it: clips pass through unchanged and no positions are added.
template <class T>
class VideoEncoder {
 public:
  VideoEncoder(TransformerConfig config, std::size_t max_frames, std::vector<int> gaps,
               std::string prefix = "temporal")
      : depth_(config.depth), width_(config.width), max_sequence_length_(config.max_sequence_length) {
    if (depth_ > 0) {
      transformer_.emplace(prefix + ".encoder", config);
      table_.emplace(prefix + ".pos", max_frames, config.width, std::move(gaps));
    }
  }

  bool bypassed() const { return depth_ == 0; }
  const TemporalPositionTable<T>* table() const { return table_ ? &*table_ : nullptr; }

  void init(ParameterSet<T>& params, Rng& rng, double stddev = 0.01, double position_stddev = 0.01) const {
    if (bypassed()) return;
    table_->init(params, rng, position_stddev);
    transformer_->init(params, rng, stddev, true);
  }

  // Clips are stacked row-wise; returns (sum of lengths) x D. Positions are
  // clip-relative (0..T-1) and the gap row comes from each clip's gap.
  Var<T> encode(Tape<T>& tape, const ParameterSet<T>& params, const std::vector<FrameFeatures<T>>& clips,
                std::vector<Segment>* segments_out = nullptr) const {
    if (clips.empty()) throw std::invalid_argument("encode_video: no clips");
    std::vector<Segment> segments;
    std::vector<Var<T>> inputs;
    std::size_t offset = 0;
    for (const auto& clip : clips) {
      if (clip.features.cols() != width_) throw std::invalid_argument("encode_video: feature width mismatch");
      const std::size_t n = clip.length();
      if (!bypassed() && n > max_sequence_length_) {
        throw std::invalid_argument("encode_video: clip of " + std::to_string(n) + " frames exceeds maximum " +
                                    std::to_string(max_sequence_length_));
      }
      Var<T> x = tape.constant(clip.features);
      if (!bypassed()) {
        std::vector<std::size_t> positions(n);
        std::iota(positions.begin(), positions.end(), std::size_t{0});
        x = add(x, table_->encode(tape, params, positions, clip.gap));
      }
      inputs.push_back(x);
      segments.push_back(Segment{offset, n});
      offset += n;
    }
    Var<T> stacked = inputs.size() == 1 ? inputs.front() : concat_rows(inputs);
    if (segments_out) *segments_out = segments;
    if (bypassed()) return stacked;
    return transformer_->forward(tape, params, stacked, segments);
  }

 private:
  std::size_t depth_;
  std::size_t width_;
  std::size_t max_sequence_length_;
  std::optional<TransformerEncoder<T>> transformer_;
  std::optional<TemporalPositionTable<T>> table_;
};

template <class T>
Var<T> encode_video(Tape<T>& tape, const ParameterSet<T>& params, const FrameFeatures<T>& ff,
                    const VideoEncoder<T>& encoder) {
  return encoder.encode(tape, params, std::vector<FrameFeatures<T>>{ff});
}

template <class T>
Var<T> mean_pool_snippet(Var<T> v) {
  if (v.rows() == 0) throw std::invalid_argument("mean_pool_snippet: empty clip");
  return mean_over_rows(v);
}

template <class T>
Tensor<T> mean_pool_snippet(const Tensor<T>& v) {
  return kernels::mean_of_rows(v);
}

// Raised when a proposal covers no frame; distinct from an empty tensor.
class NoCoveredFrames : public std::invalid_argument {
 public:
  explicit NoCoveredFrames(const Proposal& p)
      : std::invalid_argument("mean_pool_proposal: no frame time lies in [" + std::to_string(p.start) + ", " +
                              std::to_string(p.end) + ")") {}
};

// Rows whose frame time lies in the half-open interval [start, end).
inline std::vector<std::size_t> covered_rows(const Proposal& p, std::span<const double> frame_times) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < frame_times.size(); ++i) {
    if (frame_times[i] >= p.start && frame_times[i] < p.end) rows.push_back(i);
  }
  if (rows.empty()) throw NoCoveredFrames(p);
  return rows;
}

template <class T>
Var<T> mean_pool_proposal(Var<T> v, const Proposal& p, std::span<const double> frame_times) {
  if (frame_times.size() != v.rows()) throw std::invalid_argument("mean_pool_proposal: one time per row required");
  return mean_over_rows(gather_rows(v, covered_rows(p, frame_times)));
}

template <class T>
Tensor<T> mean_pool_proposal(const Tensor<T>& v, const Proposal& p, std::span<const double> frame_times) {
  if (frame_times.size() != v.rows()) throw std::invalid_argument("mean_pool_proposal: one time per row required");
  const auto rows = covered_rows(p, frame_times);
  return kernels::mean_of_rows(v, std::span<const std::size_t>(rows));
}

// Mean of `crops` predictions, each from an independent frame sampling.
inline std::vector<double> five_crop_predict(std::size_t total_frames, std::size_t clip_length,
                                             std::span<const int> gaps,
                                             const std::function<std::vector<double>(const FrameSampling&)>& predict,
                                             Rng& rng, std::size_t crops = 5) {
  if (crops == 0) throw std::invalid_argument("five_crop_predict: crops must be >= 1");
  std::vector<double> acc;
  for (std::size_t c = 0; c < crops; ++c) {
    const std::vector<double> p = predict(sample_frames(total_frames, clip_length, gaps, rng));
    if (acc.empty()) acc.assign(p.size(), 0.0);
    if (p.size() != acc.size()) throw std::invalid_argument("five_crop_predict: prediction size changed");
    for (std::size_t i = 0; i < p.size(); ++i) acc[i] += p[i];
  }
  for (auto& v : acc) v /= static_cast<double>(crops);
  return acc;
}

}  // namespace vidprompt
