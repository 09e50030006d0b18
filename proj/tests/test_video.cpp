#include <gtest/gtest.h>

#include <sstream>

#include "oracle.hpp"
#include "vidprompt/video.hpp"

using namespace vidprompt;

namespace {

const std::vector<int> kGaps = {1, 2, 3, 4, 5, 6, 10, 15};

VideoSample video(std::size_t frames, std::uint64_t seed, std::size_t dim = 6) {
  Rng rng = make_rng(seed, "video-test");
  VideoSample v;
  v.id = "v" + std::to_string(seed);
  v.frames = normal_tensor<float>(Shape{frames, dim}, 1.0, rng);
  return v;
}

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "pool-test");
  return normal_tensor<double>(Shape{r, c}, 1.0, rng);
}

std::vector<double> frame_times(std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = double(i);
  return t;
}

}  // namespace

TEST(SampleFrames, ExactLengthWithGapOneIsForced) {
  Rng rng = make_rng(0, "s");
  const std::vector<int> gaps{1};
  const auto s = sample_frames(16, 16, gaps, rng);
  EXPECT_EQ(s.gap, 1);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(s.indices[i], i);
}

TEST(SampleFrames, SingleFrameVideoRepeatsIndexZero) {
  Rng rng = make_rng(0, "s");
  const auto s = sample_frames(1, 16, kGaps, rng);
  EXPECT_EQ(s.indices, std::vector<std::size_t>(16, 0));
  EXPECT_EQ(s.gap, 1);
}

TEST(SampleFrames, PaddingRepeatsTheLastFrame) {
  Rng rng = make_rng(0, "s");
  const std::vector<int> gaps{2};
  const auto s = sample_frames(5, 8, gaps, rng);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{0, 1, 2, 3, 4, 4, 4, 4}));
}

TEST(SampleFrames, SeededReplayIsReproducibleAndFeasible) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng a = make_rng(seed, "s"), b = make_rng(seed, "s");
    const auto sa = sample_frames(100, 16, kGaps, a), sb = sample_frames(100, 16, kGaps, b);
    EXPECT_EQ(sa.indices, sb.indices);
    EXPECT_EQ(sa.gap, sb.gap);
    EXPECT_NE(sa.gap, 10);  // 15 * 10 + 1 > 100
    EXPECT_NE(sa.gap, 15);
    EXPECT_LT(sa.indices.back(), 100u);
    for (std::size_t i = 1; i < 16; ++i) EXPECT_EQ(sa.indices[i] - sa.indices[i - 1], std::size_t(sa.gap));
  }
}

TEST(SampleFrames, EveryFeasibleGapIsDrawn) {
  Rng rng = make_rng(1, "s");
  std::set<int> seen;
  for (int i = 0; i < 500; ++i) seen.insert(sample_frames(100, 16, kGaps, rng).gap);
  EXPECT_EQ(seen, (std::set<int>{1, 2, 3, 4, 5, 6}));
}

TEST(SampleFrames, EmptyGapSetIsAnError) {
  Rng rng = make_rng(0, "s");
  EXPECT_THROW(sample_frames(10, 4, std::vector<int>{}, rng), std::invalid_argument);
}

TEST(EncodeFrames, IdenticalFramesGiveIdenticalRows) {
  ImageEncoder<double> enc(6, 8);
  ParameterSet<double> ps;
  Rng rng = make_rng(0, "img");
  enc.init(ps, rng);
  auto v = video(1, 3);
  Tensor<float> two(Shape{2, 6});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 6; ++c) two(r, c) = v.frames(0, c);
  const auto f = encode_frames(two, enc, ps);
  EXPECT_EQ(f.shape(), (Shape{2, 8}));
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(f(0, c), f(1, c));
}

TEST(EncodeFrames, MatchesLinearGeluNormOracle) {
  ImageEncoder<double> enc(6, 8);
  ParameterSet<double> ps;
  Rng rng = make_rng(2, "img");
  enc.init(ps, rng);
  const auto v = video(4, 5);
  const auto got = encode_frames(v.frames, enc, ps);
  auto h = oracle::add_row(oracle::matmul(oracle::from(v.frames), oracle::from(ps.at(enc.weight_name()).value)),
                           oracle::from(ps.at(enc.bias_name()).value));
  for (auto& row : h)
    for (double& e : row) e = oracle::gelu(e);
  const oracle::Mat ones{std::vector<double>(8, 1.0)}, zeros{std::vector<double>(8, 0.0)};
  EXPECT_LT(oracle::max_abs_diff(oracle::from(got), oracle::layer_norm(h, ones, zeros)), 1e-12);
}

TEST(EncodeFrames, TrainableEncoderIsRefused) {
  ImageEncoder<double> enc(6, 8);
  ParameterSet<double> ps;
  Rng rng = make_rng(0, "img");
  enc.init(ps, rng);
  ps.at(enc.weight_name()).trainable = true;
  EXPECT_THROW(encode_frames(video(2, 1).frames, enc, ps), std::logic_error);
}

TEST(FeatureCache, CachedAndRecomputedAreBitIdentical) {
  ImageEncoder<float> enc(6, 8);
  ParameterSet<float> ps;
  Rng rng = make_rng(0, "img");
  enc.init(ps, rng);
  FeatureCache<float> cache;
  const auto v = video(12, 7);
  const Tensor<float> first = cache.get(v, enc, ps);
  EXPECT_EQ(cache.get(v, enc, ps), first);
  EXPECT_EQ(encode_frames(v.frames, enc, ps), first);
  std::stringstream ss;
  cache.write(ss);
  const auto back = FeatureCache<float>::read(ss);
  EXPECT_EQ(back.at(v.id), first);
}

namespace {

struct TemporalFixture {
  TransformerConfig cfg{1, 8, 2, 2, 16};
  VideoEncoder<double> enc{cfg, 16, {1, 2}};
  ParameterSet<double> ps;
  explicit TemporalFixture(std::uint64_t seed = 0) {
    Rng rng = make_rng(seed, "temporal-test");
    enc.init(ps, rng, 0.3, 0.3);
  }
};

FrameFeatures<double> clip(std::size_t n, std::uint64_t seed, int gap = 1) {
  FrameSampling s;
  for (std::size_t i = 0; i < n; ++i) s.indices.push_back(i);
  s.gap = gap;
  return gather_clip(random_matrix(n, 8, seed), s);
}

}  // namespace

TEST(EncodeVideo, TwoFrameForwardMatchesStraightLine) {
  TemporalFixture f(1);
  const auto ff = clip(2, 9, 2);
  Tape<double> t;
  const auto got = encode_video(t, f.ps, ff, f.enc).value();
  auto x = oracle::from(ff.features);
  const auto index = oracle::from(f.ps.at("temporal.pos.index").value);
  const auto gap = oracle::from(f.ps.at("temporal.pos.gap").value);  // rows: gap 1, gap 2
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 8; ++c) x[r][c] += index[r][c] + gap[1][c];
  const TransformerEncoder<double> ref("temporal.encoder", f.cfg);
  EXPECT_LT(oracle::max_abs_diff(oracle::from(got), oracle::encoder(x, f.ps, ref)), 1e-12);
  EXPECT_EQ(got.shape(), (Shape{2, 8}));
}

TEST(EncodeVideo, BypassModePassesFeaturesThrough) {
  TransformerConfig cfg{0, 8, 2, 2, 16};
  VideoEncoder<double> enc(cfg, 16, {1});
  ParameterSet<double> ps;
  Rng rng = make_rng(0, "t");
  enc.init(ps, rng);
  EXPECT_EQ(ps.size(), 0u);
  const auto ff = clip(5, 2);
  Tape<double> t;
  EXPECT_EQ(encode_video(t, ps, ff, enc).value(), ff.features);
}

TEST(EncodeVideo, BatchedClipsMatchSingleClips) {
  TemporalFixture f(2);
  const auto a = clip(4, 1, 1), b = clip(3, 2, 2);
  Tape<double> t;
  std::vector<Segment> segs;
  const auto both = f.enc.encode(t, f.ps, {a, b}, &segs).value();
  ASSERT_EQ(segs.size(), 2u);
  const auto ya = encode_video(t, f.ps, a, f.enc).value(), yb = encode_video(t, f.ps, b, f.enc).value();
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_NEAR(both(0, c), ya(0, c), 1e-12);
    EXPECT_NEAR(both(6, c), yb(2, c), 1e-12);
  }
}

TEST(EncodeVideo, GradientsPassFiniteDifferences) {
  TemporalFixture f(3);
  const auto ff = clip(4, 5, 2);
  const Tensor<double> target = random_matrix(1, 8, 6);
  const LossBuilder<double> loss = [&](Tape<double>& t, const ParameterSet<double>& p) {
    // scaled down so round-off stays below the 1e-8 floor on the key bias,
    // whose true gradient is exactly zero
    return scale(sum(mul(mean_pool_snippet(encode_video(t, p, ff, f.enc)), t.constant(target))), 1e-3);
  };
  FiniteDiffOptions o;
  o.samples_per_tensor = 6;
  const auto r = finite_diff_check(loss, f.ps, o);
  EXPECT_GT(r.entries_checked, 50u);
  EXPECT_LE(r.max_relative_error, 1e-3) << r.worst_entry;
}

TEST(MeanPool, ConstantRowsAndSymmetry) {
  Tensor<double> u(Shape{3, 2}, std::vector<double>{1, -2, 1, -2, 1, -2});
  const auto m = mean_pool_snippet(u);
  EXPECT_EQ(m[0], 1.0);
  EXPECT_EQ(m[1], -2.0);
  Tensor<double> pm(Shape{2, 2}, std::vector<double>{1, -2, -1, 2});
  const auto z = mean_pool_snippet(pm);
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
}

TEST(MeanPool, RandomMatrixColumnMeans) {
  const auto v = random_matrix(3, 4, 1);
  const auto m = mean_pool_snippet(v);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(m[c], (v(0, c) + v(1, c) + v(2, c)) / 3.0, 1e-15);
}

TEST(MeanPoolProposal, FullCoverSingletonAndMaskedMean) {
  const auto v = random_matrix(4, 3, 2);
  const auto times = frame_times(4);
  EXPECT_EQ(mean_pool_proposal(v, Proposal{0, 4}, times), mean_pool_snippet(v));
  const auto one = mean_pool_proposal(v, Proposal{2, 3}, times);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(one[c], v(2, c));
  const auto mid = mean_pool_proposal(v, Proposal{1, 3}, times);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(mid[c], (v(1, c) + v(2, c)) / 2.0, 1e-15);
}

TEST(MeanPoolProposal, HalfOpenBoundaryAndNoCover) {
  const auto v = random_matrix(4, 3, 3);
  const auto times = frame_times(4);
  const auto end_excluded = mean_pool_proposal(v, Proposal{0.5, 2.0}, times);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(end_excluded[c], v(1, c));
  EXPECT_THROW(mean_pool_proposal(v, Proposal{1.2, 1.8}, times), NoCoveredFrames);
  EXPECT_THROW(mean_pool_proposal(v, Proposal{4.0, 9.0}, times), NoCoveredFrames);
}

TEST(MeanPoolProposal, TapeAndTensorPathsAgreeWithFullCover) {
  const auto v = random_matrix(16, 8, 4);
  const auto times = frame_times(16);
  Tape<double> t;
  Var<double> x = t.constant(v);
  EXPECT_EQ(mean_pool_proposal(x, Proposal{0, 16}, times).value(), mean_pool_snippet(x).value());
  EXPECT_EQ(mean_pool_snippet(x).value(), mean_pool_snippet(v));
}

TEST(FiveCrop, ConstantPredictorAndSingleFrameVideo) {
  Rng rng = make_rng(0, "crop");
  const auto c = five_crop_predict(50, 16, kGaps, [](const FrameSampling&) { return std::vector<double>{0.25, 3.0}; }, rng);
  EXPECT_EQ(c, (std::vector<double>{0.25, 3.0}));
  int calls = 0;
  const auto one = five_crop_predict(
      1, 16, kGaps,
      [&](const FrameSampling& s) {
        ++calls;
        return std::vector<double>{double(s.indices.back())};
      },
      rng);
  EXPECT_EQ(calls, 5);
  EXPECT_EQ(one[0], 0.0);
}

TEST(FiveCrop, EqualsReplayedFiveTermAverage) {
  auto predict = [](const FrameSampling& s) {
    return std::vector<double>{double(s.indices.front()), double(s.gap) * 0.5};
  };
  Rng rng = make_rng(7, "crop");
  const auto got = five_crop_predict(100, 16, kGaps, predict, rng);
  Rng replay = make_rng(7, "crop");
  std::vector<double> acc(2, 0.0);
  for (int i = 0; i < 5; ++i) {
    const auto p = predict(sample_frames(100, 16, kGaps, replay));
    acc[0] += p[0];
    acc[1] += p[1];
  }
  EXPECT_DOUBLE_EQ(got[0], acc[0] / 5.0);
  EXPECT_DOUBLE_EQ(got[1], acc[1] / 5.0);
}
