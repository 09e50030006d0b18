#include <gtest/gtest.h>

#include <filesystem>

#include "vidprompt/experiment.hpp"
#include "vidprompt/report.hpp"

using namespace vidprompt;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(std::size_t steps = 12) {
  auto c = load_config(VIDPROMPT_SOURCE_DIR "/configs/tiny.json");
  c.train.optim.steps = steps;
  return c;
}

std::string serialize(const std::vector<MetricRecord>& recs) {
  std::string out;
  for (const auto& r : recs) out += r.to_json().dump() + "\n";
  return out;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("vidprompt_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Experiment, FrozenTensorsNeverChange) {
  Experiment<float> e(tiny(15));
  const ParameterSet<float> before = e.model().params();
  e.train(e.all_classes());
  std::size_t frozen = 0, moved = 0;
  for (const auto& p : e.model().params()) {
    const auto& q = before.at(p.name);
    if (!p.trainable) {
      ++frozen;
      EXPECT_EQ(std::memcmp(p.value.values().data(), q.value.values().data(), p.value.size() * sizeof(float)), 0)
          << p.name;
    } else if (p.value != q.value) {
      ++moved;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
  for (const char* name : {"text.token_embedding", "text.encoder.layers.0.attn.wq", "image.proj.weight"})
    EXPECT_FALSE(e.model().params().at(name).trainable) << name;
}

TEST(Experiment, SameConfigAndSeedIsBitIdentical) {
  Experiment<float> a(tiny()), b(tiny());
  a.train(a.all_classes());
  b.train(b.all_classes());
  EXPECT_EQ(a.checkpoint_bytes(), b.checkpoint_bytes());
  EXPECT_EQ(serialize(a.eval_recognition(a.all_classes(), "closed-set")),
            serialize(b.eval_recognition(b.all_classes(), "closed-set")));
  auto other = tiny();
  other.seed = 8;
  Experiment<float> c(other);
  c.train(c.all_classes());
  EXPECT_NE(a.checkpoint_bytes(), c.checkpoint_bytes());
}

TEST(Experiment, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch("resume");
  Experiment<float> full(tiny(12));
  full.train(full.all_classes());

  Experiment<float> first(tiny(12));
  first.train_on(first.all_classes(), first.pool_for(first.all_classes()), 5, "train.batch");
  first.save((dir / "part.pgck").string());

  Experiment<float> resumed(tiny(12));
  resumed.load((dir / "part.pgck").string(), true);
  EXPECT_EQ(resumed.optimizer().step_count(), 5u);
  resumed.train(resumed.all_classes());
  EXPECT_EQ(resumed.checkpoint_bytes(), full.checkpoint_bytes());

  auto changed = tiny(12);
  changed.train.optim.learning_rate = 2e-3;
  Experiment<float> mismatch(changed);
  EXPECT_THROW(mismatch.load((dir / "part.pgck").string(), true), CheckpointError);
  EXPECT_NO_THROW(mismatch.load((dir / "part.pgck").string(), false));
  fs::remove_all(dir);
}

TEST(Experiment, LossHistoryAndCsvRoundTrip) {
  const auto dir = scratch("csv");
  Experiment<float> e(tiny(6));
  std::vector<std::uint64_t> seen;
  e.train(e.all_classes(), [&](const LossRow& r) { seen.push_back(r.step); });
  EXPECT_EQ(seen, (std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6}));
  const auto path = (dir / "loss.csv").string();
  write_loss_csv(path, e.loss_history());
  const auto rows = read_loss_csv(path);
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(rows[i].loss, e.loss_history()[i].loss);
    EXPECT_TRUE(std::isfinite(rows[i].loss));
  }
  fs::remove_all(dir);
}

TEST(Experiment, MetricRecordsCarryTrialAndSeed) {
  Experiment<float> e(tiny(3));
  e.train(e.all_classes());
  const auto recs = e.eval_recognition(e.all_classes(), "closed-set");
  ASSERT_FALSE(recs.empty());
  for (const auto& r : recs) {
    const auto j = r.to_json();
    EXPECT_EQ(j.at("seed"), 7u);
    EXPECT_TRUE(j.contains("trial"));
    ASSERT_TRUE(r.value.has_value());
    EXPECT_GE(*r.value, 0.0);
    EXPECT_LE(*r.value, 1.0);
  }
  EXPECT_EQ(recs.front().metric, "top1");
}

TEST(Experiment, FewShotTrialsRestoreTheModel) {
  Experiment<float> e(tiny(3));
  e.train(e.all_classes());
  const auto before = e.checkpoint_bytes();
  const auto recs = e.eval_few_shot(3, 2, 2);
  EXPECT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs.back().metric, "top1-mean");
  EXPECT_EQ(e.checkpoint_bytes(), before);
}

TEST(Experiment, RetrievalAndLocalisationRun) {
  auto rc = tiny(4);
  rc.data.spec.kind = TaskKind::retrieval;
  rc.train.loss.symmetric = true;
  Experiment<float> r(rc);
  r.train(r.all_classes());
  const auto rr = r.eval_retrieval();
  EXPECT_EQ(rr.back().metric, "MdR");

  auto lc = tiny(2);
  lc.data.spec.kind = TaskKind::localisation;
  lc.data.spec.train_per_category = 1;
  lc.data.spec.val_per_category = 1;
  lc.data.spec.max_instances = 3;
  lc.model.clip_length = 8;
  Experiment<float> l(lc);
  l.train(l.all_classes());
  const auto lr = l.eval_localisation(l.all_classes(), "planted", 0.0);
  double ar_max = 0.0;
  for (const auto& m : lr)
    if (m.metric.rfind("AR@", 0) == 0) ar_max = std::max(ar_max, *m.value);
  EXPECT_EQ(ar_max, 1.0);  // planted proposals are the instances themselves
  EXPECT_THROW(l.eval_localisation(l.all_classes(), "sliding", 0.0), std::invalid_argument);
}

TEST(Experiment, DoublePrecisionRuns) {
  Experiment<double> e(tiny(2));
  e.train(e.all_classes());
  EXPECT_TRUE(std::isfinite(e.loss_history().back().loss));
}

TEST(GradCheck, TinyModelWithinTolerance) {
  GradCheckSetup s;
  s.fd.samples_per_tensor = 4;
  const auto r = run_grad_check(s);
  EXPECT_GE(r.report.entries_checked, 20u);
  EXPECT_LE(r.report.max_relative_error, 1e-3) << r.report.worst_entry;
  EXPECT_FALSE(r.tensors.empty());
}

TEST(Report, AggregatesMetricsFromRunDirectory) {
  const auto dir = scratch("report");
  write_loss_csv((dir / "loss.csv").string(), {{1, 2.0, 1e-3}, {2, 1.5, 1e-3}});
  append_metrics((dir / "a.metrics.jsonl").string(),
                 {{"top1", "val", "few-shot", 0, 1, 0.5}, {"top1", "val", "few-shot", 1, 1, 1.0},
                  {"top1", "val", "few-shot", 2, 1, std::nullopt}});
  const auto s = summarize_run(dir.string());
  EXPECT_EQ(s.loss.size(), 2u);
  ASSERT_EQ(s.metrics.size(), 1u);
  EXPECT_EQ(s.metrics[0].count, 2u);
  EXPECT_EQ(s.metrics[0].undefined, 1u);
  EXPECT_DOUBLE_EQ(s.metrics[0].mean, 0.75);
  EXPECT_DOUBLE_EQ(s.metrics[0].stddev, 0.25);
  EXPECT_NE(loss_svg(s.loss).find("<polyline"), std::string::npos);
  EXPECT_NE(metrics_svg(s.metrics).find("<svg"), std::string::npos);
  fs::remove_all(dir);
}
