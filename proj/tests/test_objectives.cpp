#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "vidprompt/objectives.hpp"
#include "vidprompt/rng.hpp"

using namespace vidprompt;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>(Shape{r, c}, v); }

double nce_value(const Tensor<double>& s, const std::vector<std::size_t>& targets, double tau) {
  Tape<double> t;
  return nce_loss(t.constant(s), targets, tau).value()[0];
}

// Row-wise cross-entropy on s / tau, averaged, in plain arithmetic.
double nce_oracle(const Tensor<double>& s, const std::vector<std::size_t>& targets, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s.cols(); ++j) m = std::max(m, s(i, j) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) z += std::exp(s(i, j) / tau - m);
    total += -(s(i, targets[i]) / tau - m - std::log(z));
  }
  return total / double(s.rows());
}

}  // namespace

TEST(L2Normalize, ThreeFourFive) {
  const auto y = l2_normalize(Tensor<double>::row_vector({3, 4}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitVectorIsFixed) {
  const auto u = Tensor<double>::row_vector({0, 1, 0});
  EXPECT_EQ(l2_normalize(u), u);
}

TEST(L2Normalize, RandomRowsMatchScalarDivision) {
  Rng rng = make_rng(0, "l2");
  const auto x = normal_tensor<double>(Shape{5, 7}, 1.0, rng);
  const auto y = l2_normalize(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double n = 0.0;
    for (double v : x.row(r)) n += v * v;
    n = std::sqrt(n);
    double ny = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_NEAR(y(r, c), x(r, c) / n, 1e-15);
      ny += y(r, c) * y(r, c);
    }
    EXPECT_NEAR(std::sqrt(ny), 1.0, 1e-6);
  }
}

TEST(L2Normalize, ZeroRowIsAnError) {
  EXPECT_THROW(l2_normalize(mat(2, 2, {1, 0, 0, 0})), std::invalid_argument);
}

TEST(L2Normalize, Float32RowsAreUnitWithinTolerance) {
  Rng rng = make_rng(1, "l2");
  const auto y = l2_normalize(normal_tensor<float>(Shape{4, 32}, 3.0, rng));
  for (std::size_t r = 0; r < 4; ++r) {
    double n = 0.0;
    for (float v : y.row(r)) n += double(v) * double(v);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST(Similarity, OrthonormalGivesIdentity) {
  Tape<double> t;
  const auto e = mat(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto s = similarity_matrix(t.constant(e), t.constant(e)).value();
  EXPECT_EQ(s, e);
}

TEST(Similarity, EntriesBoundedAndMatchDotProducts) {
  Rng rng = make_rng(2, "sim");
  const auto v = l2_normalize(normal_tensor<double>(Shape{3, 2}, 1.0, rng));
  const auto c = l2_normalize(normal_tensor<double>(Shape{2, 2}, 1.0, rng));
  Tape<double> t;
  const auto s = similarity_matrix(t.constant(v), t.constant(c)).value();
  ASSERT_EQ(s.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(s(i, j), v(i, 0) * c(j, 0) + v(i, 1) * c(j, 1), 1e-15);
      EXPECT_LE(std::abs(s(i, j)), 1.0 + 1e-12);
    }
}

TEST(Nce, SingleLogitGivesZero) { EXPECT_EQ(nce_value(mat(1, 1, {0.3}), {0}, 0.07), 0.0); }

TEST(Nce, UniformSimilarityGivesLogM) {
  for (std::size_t m : {2u, 4u, 8u}) {
    const Tensor<double> s(Shape{3, m}, 0.25);
    EXPECT_NEAR(nce_value(s, {0, m - 1, 1}, 0.07), std::log(double(m)), 1e-12);
  }
  EXPECT_NEAR(nce_value(Tensor<double>(Shape{1, 2}, 0.5), {1}, 0.07), 0.693147, 1e-6);
}

TEST(Nce, TwoByTwoMatchesScalarSoftmax) {
  const double sigma = std::exp(1 / 0.07) / (std::exp(1 / 0.07) + 1.0);
  const double expect = -std::log(sigma);
  EXPECT_NEAR(expect, 6.2e-7, 0.05e-7);
  EXPECT_NEAR(nce_value(mat(2, 2, {1, 0, 0, 1}), {0, 1}, 0.07), expect, 1e-12);
  Tape<float> t;
  const float f32 = nce_loss(t.constant(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 0, 0, 1})), {0, 1}, 0.07)
                        .value()[0];
  EXPECT_NEAR(f32, expect, 1e-4);
}

TEST(Nce, MatchesOracleOnRandomMatrices) {
  Rng rng = make_rng(3, "nce");
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = normal_tensor<double>(Shape{4, 6}, 0.5, rng);
    std::vector<std::size_t> targets;
    for (int i = 0; i < 4; ++i) targets.push_back(uniform_index(rng, 0, 5));
    const double got = nce_value(s, targets, 0.07);
    EXPECT_NEAR(got, nce_oracle(s, targets, 0.07), 1e-10);
    EXPECT_GT(got, 0.0);
  }
}

TEST(Nce, ColumnPermutationWithTargetsLeavesLossUnchanged) {
  Rng rng = make_rng(4, "nce");
  const auto s = normal_tensor<double>(Shape{3, 4}, 0.5, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};  // new column j holds old column perm[j]
  Tensor<double> sp(Shape{3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) sp(i, j) = s(i, perm[j]);
  const std::vector<std::size_t> targets{0, 1, 3};
  std::vector<std::size_t> moved;
  for (std::size_t t : targets) moved.push_back(std::find(perm.begin(), perm.end(), t) - perm.begin());
  EXPECT_NEAR(nce_value(s, targets, 0.07), nce_value(sp, moved, 0.07), 1e-12);
}

TEST(Nce, TemperatureDoesNotChangeArgmax) {
  Rng rng = make_rng(5, "nce");
  const auto s = normal_tensor<double>(Shape{6, 5}, 0.5, rng);
  for (double tau : {0.01, 0.07, 1.0, 10.0}) {
    Tape<double> t;
    const auto p = row_softmax(scale(t.constant(s), 1.0 / tau)).value();
    for (std::size_t i = 0; i < 6; ++i) {
      std::size_t a = 0, b = 0;
      for (std::size_t j = 1; j < 5; ++j) {
        if (s(i, j) > s(i, a)) a = j;
        if (p(i, j) > p(i, b)) b = j;
      }
      EXPECT_EQ(a, b);
    }
  }
}

TEST(Nce, ErrorsOnBadInput) {
  Tape<double> t;
  Var<double> s = t.constant(mat(2, 2, {1, 0, 0, 1}));
  EXPECT_THROW(nce_loss(s, {0}, 0.07), std::invalid_argument);
  EXPECT_THROW(nce_loss(s, {0, 2}, 0.07), std::invalid_argument);
  EXPECT_THROW(LossConfig{0.0}.validate(), std::invalid_argument);
}

TEST(Nce, SymmetricVariantAveragesBothDirections) {
  Rng rng = make_rng(6, "nce");
  const auto s = normal_tensor<double>(Shape{3, 3}, 0.5, rng);
  LossConfig cfg;
  cfg.symmetric = true;
  Tape<double> t;
  const double got = contrastive_loss(t.constant(s), {0, 1, 2}, cfg).value()[0];
  const double expect = 0.5 * (nce_oracle(s, {0, 1, 2}, 0.07) + nce_oracle(kernels::transpose(s), {0, 1, 2}, 0.07));
  EXPECT_NEAR(got, expect, 1e-10);
  EXPECT_THROW(contrastive_loss(t.constant(mat(2, 3, {1, 0, 0, 0, 1, 0})), {0, 1}, cfg), std::invalid_argument);
}

TEST(AdamW, ZeroGradientAndNoDecayLeavesParameters) {
  ParameterSet<double> ps;
  ps.add("p", Tensor<double>::row_vector({1.5, -2.0}), true);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  GradientMap<double> g;
  g.grads.emplace("p", Tensor<double>(Shape{1, 2}));
  for (int i = 0; i < 5; ++i) opt.step(ps, g);
  EXPECT_EQ(ps.at("p").value, Tensor<double>::row_vector({1.5, -2.0}));
}

TEST(AdamW, FrozenParameterIsNeverWritten) {
  ParameterSet<double> ps;
  ps.add("frozen", Tensor<double>::row_vector({1.0}), false);
  AdamW<double> opt;
  GradientMap<double> g;
  g.grads.emplace("frozen", Tensor<double>::row_vector({10.0}));
  opt.step(ps, g);
  EXPECT_EQ(ps.at("frozen").value[0], 1.0);
  EXPECT_TRUE(opt.moments().empty());
}

TEST(AdamW, MatchesHandSteppedScalarRecurrence) {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.1;
  ParameterSet<double> ps;
  ps.add("w", Tensor<double>::row_vector({0.8}), true);
  AdamW<double> opt(cfg);
  const std::vector<double> grads{0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4};
  double w = 0.8, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    w -= cfg.learning_rate * cfg.weight_decay * w;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, double(t))), vh = v / (1 - std::pow(0.999, double(t)));
    w -= cfg.learning_rate * mh / (std::sqrt(vh) + 1e-8);
    GradientMap<double> gm;
    gm.grads.emplace("w", Tensor<double>::row_vector({g}));
    opt.step(ps, gm);
    EXPECT_NEAR(ps.at("w").value[0], w, 1e-14) << "step " << t;
  }
}

TEST(TrainStep, NonFiniteLossAbortsWithStepIndex) {
  ParameterSet<double> ps;
  ps.add("p", Tensor<double>::row_vector({0.0}), true);
  AdamW<double> opt;
  opt.set_step_count(41);
  const LossBuilder<double> f = [](Tape<double>& t, const ParameterSet<double>& p) {
    return sum(log(t.parameter(p, "p")));
  };
  try {
    train_step(ps, opt, f);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos) << e.what();
  }
  EXPECT_EQ(ps.at("p").value[0], 0.0);
}

TEST(TrainStep, SeparableBatchLossDecreasesWithDefaults) {
  // 8 points in 4 well-separated classes, a trainable linear map onto fixed
  // class embeddings
  Rng rng = make_rng(7, "sep");
  const auto centers = l2_normalize(normal_tensor<double>(Shape{4, 6}, 1.0, rng));
  Tensor<double> x(Shape{8, 6});
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < 8; ++i) {
    y.push_back(i % 4);
    for (std::size_t c = 0; c < 6; ++c) x(i, c) = centers(i % 4, c) + 0.05 * std::normal_distribution<double>()(rng);
  }
  ParameterSet<double> ps;
  ps.add("w", normal_tensor<double>(Shape{6, 6}, 0.3, rng), true);
  ps.add("classes", centers, false);
  AdamW<double> opt;  // defaults: lr 1e-4, wd 0.01
  const LossBuilder<double> f = [&](Tape<double>& t, const ParameterSet<double>& p) {
    Var<double> v = l2_normalize(matmul(t.constant(x), t.parameter(p, "w")));
    return nce_loss(similarity_matrix(v, t.parameter(p, "classes")), y, 0.07);
  };
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(train_step(ps, opt, f));
  std::vector<double> avg;
  for (int b = 0; b < 5; ++b) {
    double s = 0.0;
    for (int i = 0; i < 10; ++i) s += losses[b * 10 + i];
    avg.push_back(s / 10.0);
  }
  for (std::size_t i = 1; i < avg.size(); ++i) EXPECT_LE(avg[i], avg[i - 1] + 1e-4);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_EQ(ps.at("classes").value, centers);
}

TEST(TrainConfig, ValidatesRanges) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
