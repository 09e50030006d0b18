// SPDX-License-Identifier: Apache-2.0
//
// The full adapted model: frozen vocabulary, text encoder and image encoder,
// a trainable prompt bank, and a trainable temporal encoder over frames.

#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "vidprompt/objectives.hpp"
#include "vidprompt/text.hpp"
#include "vidprompt/video.hpp"

namespace vidprompt {

struct ModelConfig {
  std::size_t width = 32;
  std::size_t text_depth = 2;
  std::size_t text_heads = 4;
  std::size_t temporal_depth = 2;  // 0 bypasses the temporal encoder
  std::size_t temporal_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t prompt_k = 16;
  std::size_t token_budget = kDefaultTokenBudget;
  std::size_t vocab_size = 256;
  std::size_t frame_dim = 32;
  std::size_t clip_length = kDefaultClipLength;
  std::vector<int> gaps = {1, 2, 3, 4, 5, 6, 10, 15};
  double trainable_init_std = 0.01;
  double position_init_std = 0.01;

  void validate() const {
    if (token_budget < 2 * prompt_k + 3) {
      throw std::invalid_argument("model.prompt_k: 2*" + std::to_string(prompt_k) + "+3 exceeds token_budget " +
                                  std::to_string(token_budget));
    }
    if (width % text_heads != 0 || width % temporal_heads != 0) {
      throw std::invalid_argument("model.width must be divisible by text_heads and temporal_heads");
    }
    if (text_depth < 1) throw std::invalid_argument("model.text_depth must be >= 1");
    if (clip_length < 1) throw std::invalid_argument("model.clip_length must be >= 1");
    if (gaps.empty()) throw std::invalid_argument("model.gaps must not be empty");
    for (int g : gaps)
      if (g < 1) throw std::invalid_argument("model.gaps must be positive");
    if (!(trainable_init_std >= 0.0)) throw std::invalid_argument("model.trainable_init_std must be >= 0");
    if (!(position_init_std >= 0.0)) throw std::invalid_argument("model.position_init_std must be >= 0");
  }

  TransformerConfig text_transformer() const {
    return TransformerConfig{text_depth, width, text_heads, mlp_ratio, token_budget};
  }

  TransformerConfig temporal_transformer() const {
    return TransformerConfig{temporal_depth, width, temporal_heads, mlp_ratio, clip_length};
  }

  // The gap table always holds gap 1, which padded clips fall back to.
  std::vector<int> table_gaps() const {
    std::set<int> s(gaps.begin(), gaps.end());
    s.insert(1);
    return {s.begin(), s.end()};
  }
};

template <class T>
class VideoPromptModel {
 public:
  explicit VideoPromptModel(ModelConfig cfg)
      : cfg_((cfg.validate(), std::move(cfg))),
        vocab_(Vocabulary::make_default(cfg_.vocab_size)),
        bank_(cfg_.prompt_k),
        text_(make_text_encoder(cfg_)),
        image_(cfg_.frame_dim, cfg_.width),
        video_(cfg_.temporal_transformer(), cfg_.clip_length, cfg_.table_gaps()) {}

  // Frozen backbone from (seed, "backbone.*"), trainables from
  // (seed, "prompt") and (seed, "temporal").
  void init(std::uint64_t seed) {
    params_ = ParameterSet<T>{};
    Rng vocab_rng = make_rng(seed, "backbone.vocab");
    vocab_.init_embeddings(params_, cfg_.width, vocab_rng);
    Rng text_rng = make_rng(seed, "backbone.text");
    text_.init(params_, text_rng);
    Rng image_rng = make_rng(seed, "backbone.image");
    image_.init(params_, image_rng);
    Rng prompt_rng = make_rng(seed, "prompt");
    bank_.init(params_, cfg_.width, prompt_rng, cfg_.trainable_init_std);
    Rng temporal_rng = make_rng(seed, "temporal");
    video_.init(params_, temporal_rng, cfg_.trainable_init_std, cfg_.position_init_std);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const Vocabulary& vocab() const { return vocab_; }
  const PromptBank& bank() const { return bank_; }
  const TextEncoder<T>& text_encoder() const { return text_; }
  const ImageEncoder<T>& image_encoder() const { return image_; }
  const VideoEncoder<T>& video_encoder() const { return video_; }

  // L2-normalised text embeddings (classifiers or queries), one row each.
  Var<T> text_embeddings(Tape<T>& tape, const std::vector<std::string>& texts) const {
    if (texts.empty()) throw std::invalid_argument("text_embeddings: no texts");
    std::vector<Var<T>> seqs;
    seqs.reserve(texts.size());
    for (const auto& s : texts) {
      seqs.push_back(inject_prompts(tape, params_, tokenize(s, vocab_), bank_, vocab_, cfg_.token_budget));
    }
    return l2_normalize(text_.encode_batch(tape, params_, seqs));
  }

  Var<T> classifiers(Tape<T>& tape, const std::vector<std::string>& names) const {
    return l2_normalize(generate_classifiers(tape, params_, names, bank_, vocab_, text_));
  }

  // Mean-pooled, L2-normalised clip embeddings, one row per clip.
  Var<T> clip_embeddings(Tape<T>& tape, const std::vector<FrameFeatures<T>>& clips) const {
    std::vector<Segment> segs;
    Var<T> dense = video_.encode(tape, params_, clips, &segs);
    std::vector<Var<T>> pooled;
    pooled.reserve(segs.size());
    for (const Segment& s : segs) {
      Var<T> rows = segs.size() == 1 ? dense : slice_rows(dense, s.offset, s.offset + s.length);
      pooled.push_back(mean_pool_snippet(rows));
    }
    return l2_normalize(pooled.size() == 1 ? pooled.front() : concat_rows(pooled));
  }

  // Dense per-frame outputs over a whole untrimmed timeline, encoded in
  // consecutive chunks of clip_length frames with gap 1.
  Var<T> timeline(Tape<T>& tape, const Tensor<T>& features) const {
    std::vector<FrameFeatures<T>> chunks;
    for (std::size_t b = 0; b < features.rows(); b += cfg_.clip_length) {
      FrameSampling s;
      for (std::size_t t = b; t < std::min(features.rows(), b + cfg_.clip_length); ++t) s.indices.push_back(t);
      chunks.push_back(gather_clip(features, s));
    }
    return video_.encode(tape, params_, chunks);
  }

  Tensor<T> frame_features(const VideoSample& v, FeatureCache<T>& cache) const {
    return cache.get(v, image_, params_);
  }

 private:
  static TextEncoder<T> make_text_encoder(const ModelConfig& cfg) { return TextEncoder<T>(cfg.text_transformer()); }

  ModelConfig cfg_;
  Vocabulary vocab_;
  PromptBank bank_;
  TextEncoder<T> text_;
  ImageEncoder<T> image_;
  VideoEncoder<T> video_;
  ParameterSet<T> params_;
};

}  // namespace vidprompt
