// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Training runs write their checkpoints and metric files
// under --workdir.

#include <CLI11.hpp>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "metric_oracles.hpp"
#include "vidprompt/experiment.hpp"

using namespace vidprompt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

ExperimentConfig config_named(const std::string& name) {
  return load_config(std::string(VIDPROMPT_SOURCE_DIR) + "/configs/" + name);
}

double top1(const std::vector<MetricRecord>& recs) {
  for (const auto& r : recs)
    if (r.metric == "top1" && r.value) return *r.value;
  throw std::runtime_error("no top1 record");
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Frozen records by name from an encoded checkpoint.
std::map<std::string, TensorRecord> frozen_records(const std::vector<std::uint8_t>& bytes) {
  std::map<std::string, TensorRecord> out;
  for (auto& r : decode_records(bytes))
    if (!r.trainable && r.name.rfind("__", 0) != 0) out.emplace(r.name, std::move(r));
  return out;
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  GradCheckSetup s;  // width 16, text depth 2, one temporal layer, vocab 64, batch 4
  const auto r = run_grad_check(s);
  const double secs = seconds_since(t0);
  const bool ok = r.report.max_relative_error <= 1e-3 && r.report.entries_checked >= 100 && secs <= 60.0;
  return {ok, "max rel err " + fmt(r.report.max_relative_error) + " over " +
                  std::to_string(r.report.entries_checked) + " entries in " + std::to_string(r.tensors.size()) +
                  " tensors, " + fmt(secs, 3) + " s"};
}

struct ClosedSetRun {
  Outcome frozen;
  Outcome learning;
};

// One closed-set run serves both the frozen-bytes check at step 200 and the
// accuracy check at step 500.
ClosedSetRun closed_set(const fs::path& dir) {
  fs::create_directories(dir);
  const auto t0 = Clock::now();
  Experiment<float> e(config_named("closed_set.json"));
  const auto classes = e.all_classes();
  const double before = top1(e.eval_recognition(classes, "closed-set"));
  const auto init = e.checkpoint_bytes();
  write_bytes(dir / "checkpoint.step0.pgck", init);
  std::vector<std::uint8_t> at200;
  e.train(classes, [&](const LossRow& row) {
    if (row.step == 200) at200 = e.checkpoint_bytes();
  });
  write_bytes(dir / "checkpoint.step200.pgck", at200);
  e.save((dir / "checkpoint.pgck").string());
  const auto recs = e.eval_recognition(classes, "closed-set");
  const double secs = seconds_since(t0);
  std::ofstream(dir / "closed-set.metrics.jsonl", std::ios::trunc);
  append_metrics((dir / "closed-set.metrics.jsonl").string(), recs);
  const double after = top1(recs);

  ClosedSetRun out;
  const auto a = frozen_records(file_bytes(dir / "checkpoint.step0.pgck"));
  const auto b = frozen_records(file_bytes(dir / "checkpoint.step200.pgck"));
  std::size_t same = 0;
  bool groups[3] = {false, false, false};
  for (const auto& [name, rec] : a) {
    auto it = b.find(name);
    if (it != b.end() && it->second == rec) ++same;
    if (name == "text.token_embedding") groups[0] = true;
    if (name.rfind("text.encoder.", 0) == 0) groups[1] = true;
    if (name.rfind("image.", 0) == 0) groups[2] = true;
  }
  out.frozen.pass = !a.empty() && same == a.size() && b.size() == a.size() && groups[0] && groups[1] && groups[2];
  out.frozen.detail = std::to_string(same) + "/" + std::to_string(a.size()) +
                      " frozen tensors byte-identical after 200 steps";
  out.learning.pass = after >= 0.95 && before <= 0.25 && secs <= 300.0;
  out.learning.detail = "untrained top1 " + fmt(before) + ", trained top1 " + fmt(after) + " after " +
                        std::to_string(e.optimizer().step_count()) + " steps, " + fmt(secs, 3) + " s";
  return out;
}

Outcome temporal_gain(const fs::path& dir) {
  fs::create_directories(dir);
  auto run = [&](std::size_t depth) {
    auto cfg = config_named("order.json");
    cfg.model.temporal_depth = depth;
    Experiment<float> e(cfg);
    e.train(e.all_classes());
    e.save((dir / ("checkpoint.tfm" + std::to_string(depth) + ".pgck")).string());
    return top1(e.eval_recognition(e.all_classes(), "closed-set"));
  };
  const auto t0 = Clock::now();
  const double with = run(2), without = run(0);
  const double gain = 100.0 * (with - without);
  return {gain >= 20.0, "TFM2 top1 " + fmt(with) + ", TFM0 top1 " + fmt(without) + ", gain " + fmt(gain, 3) +
                            " points, " + fmt(seconds_since(t0), 3) + " s"};
}

Outcome zero_shot(const fs::path& dir) {
  fs::create_directories(dir);
  const auto base = config_named("zero_shot.json");
  Rng rng = make_rng(base.seed, "split", 0);
  std::vector<int> all(base.data.spec.categories);
  std::iota(all.begin(), all.end(), 0);
  const SplitSpec split = split_zero_shot(all, base.data.zero_shot_fraction, rng);
  split.validate_zero_shot();
  auto run = [&](std::size_t k) {
    auto cfg = base;
    cfg.model.prompt_k = k;
    Experiment<float> e(cfg);
    e.train(split.train_categories);
    e.save((dir / ("checkpoint.k" + std::to_string(k) + ".pgck")).string());
    return top1(e.eval_recognition(split.val_categories, "zero-shot"));
  };
  const double prompted = run(base.model.prompt_k), plain = run(0);
  const double chance = 1.0 / double(split.val_categories.size());
  const bool ok = prompted >= chance + 0.15 && prompted > plain && split.train_categories.size() == 8 &&
                  split.val_categories.size() == 4;
  return {ok, "train " + std::to_string(split.train_categories.size()) + " / test " +
                  std::to_string(split.val_categories.size()) + " categories, k=" +
                  std::to_string(base.model.prompt_k) + " top1 " + fmt(prompted) + ", k=0 top1 " + fmt(plain) +
                  ", chance " + fmt(chance)};
}

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t total = 0;
  std::string per;
  bool ok = true;
  std::uint64_t seed = 100;
  for (const char* m : {"detection_map", "average_recall_at_an", "soft_nms", "retrieval_ranks", "top_k_accuracy"}) {
    const auto a = oracle::compare_metric(m, 1000, seed++);
    worst = std::max(worst, a.max_error);
    total += a.instances;
    ok = ok && a.instances >= 1000 && a.max_error <= 1e-9;
    per += std::string(per.empty() ? "" : ", ") + m + " " + fmt(a.max_error, 2);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 120.0;
  return {ok, std::to_string(total) + " instances, max deviation " + fmt(worst, 2) + " (" + per + "), " +
                  fmt(secs, 3) + " s"};
}

Outcome nce_values() {
  auto loss64 = [](const Tensor<double>& s, const std::vector<std::size_t>& t) {
    Tape<double> tape;
    return nce_loss(tape.constant(s), t, 0.07).value()[0];
  };
  double worst = 0.0;
  const double single = loss64(Tensor<double>(Shape{1, 1}, 0.42), {0});
  worst = std::max(worst, std::abs(single));
  for (std::size_t m : {2u, 4u, 8u}) {
    std::vector<std::size_t> t(m);
    std::iota(t.begin(), t.end(), std::size_t{0});
    worst = std::max(worst, std::abs(loss64(Tensor<double>(Shape{m, m}, 0.3), t) - std::log(double(m))));
  }
  // scalar softmax of the 2x2 identity at tau 0.07
  const double a = 1.0 / 0.07, ref = -std::log(std::exp(a) / (std::exp(a) + std::exp(0.0)));
  const double d64 = std::abs(loss64(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}), {0, 1}) - ref);
  Tape<float> tape;
  const float f32 =
      nce_loss(tape.constant(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 0, 0, 1})), {0, 1}, 0.07).value()[0];
  const double d32 = std::abs(double(f32) - ref);
  const bool ok = worst <= 1e-6 && d64 <= 1e-6 && d32 <= 1e-4;
  return {ok, "single/uniform max deviation " + fmt(worst, 2) + ", 2x2 hand case " + fmt(ref, 4) +
                  " (64-bit off by " + fmt(d64, 2) + ", 32-bit off by " + fmt(d32, 2) + ")"};
}

Outcome pooling_identity() {
  Rng rng = make_rng(11, "pooling");
  std::size_t identical = 0;
  for (int clip = 0; clip < 100; ++clip) {
    const std::size_t frames = uniform_index(rng, 1, 48), width = uniform_index(rng, 1, 64);
    const auto x = normal_tensor<float>(Shape{frames, width}, 2.0, rng);
    std::vector<double> times(frames);
    for (std::size_t i = 0; i < frames; ++i) times[i] = 0.5 * double(i);
    Tape<float> tape(false);
    const auto v = tape.constant(x);
    const auto pooled = mean_pool_proposal(v, Proposal{0.0, 0.5 * double(frames), 1.0}, times).value();
    const auto snippet = mean_pool_snippet(v).value();
    if (pooled.shape() == snippet.shape() &&
        std::memcmp(pooled.values().data(), snippet.values().data(), snippet.size() * sizeof(float)) == 0)
      ++identical;
  }
  return {identical == 100, std::to_string(identical) + "/100 clips bitwise identical"};
}

Outcome determinism(const fs::path& dir) {
  auto cfg = config_named("closed_set.json");
  cfg.train.optim.steps = 60;
  auto run = [&](const std::string& name) {
    const fs::path d = dir / name;
    fs::create_directories(d);
    Experiment<float> e(cfg);
    e.train(e.all_classes());
    e.save((d / "checkpoint.pgck").string());
    const fs::path metrics = d / "eval.metrics.jsonl";
    std::ofstream(metrics, std::ios::trunc);
    append_metrics(metrics.string(), e.eval_recognition(e.all_classes(), "closed-set"));
    append_metrics(metrics.string(), e.eval_few_shot(cfg.eval.ways, cfg.eval.shots, 2));
    return std::pair{file_bytes(d / "checkpoint.pgck"), file_bytes(metrics)};
  };
  const auto a = run("run_a"), b = run("run_b");
  const bool ok = !a.first.empty() && !a.second.empty() && a.first == b.first && a.second == b.second;
  return {ok, "checkpoints " + std::string(a.first == b.first ? "identical" : "differ") + " (" +
                  std::to_string(a.first.size()) + " bytes), metric reports " +
                  (a.second == b.second ? "identical" : "differ") + " (" + std::to_string(a.second.size()) +
                  " bytes)"};
}

Outcome token_budget() {
  const Vocabulary vocab = Vocabulary::make_default(256);
  Rng rng = make_rng(12, "budget");
  std::size_t checked = 0, good = 0, longest = 0;
  const auto& words = lexicon::sentence_words();
  for (std::size_t k : {0u, 4u, 16u}) {
    ParameterSet<float> params;
    vocab.init_embeddings(params, 8, rng);
    const PromptBank bank(k);
    bank.init(params, 8, rng, 1.0);
    const auto& table = params.at(vocab.embedding_name()).value;
    for (int q = 0; q < 200; ++q) {
      const std::size_t n_words = uniform_index(rng, 1, 120);
      std::string text;
      for (std::size_t w = 0; w < n_words; ++w) text += words[uniform_index(rng, 0, words.size() - 1)] + " ";
      const TokenSequence tokens = tokenize(text, vocab);
      Tape<float> tape(false);
      const auto seq = inject_prompts(tape, params, tokens, bank, vocab).value();
      ++checked;
      longest = std::max(longest, seq.rows());
      // expected layout: start, prompts[0..k), leading content, prompts[k..2k), end
      const std::size_t kept = std::min(tokens.size(), kDefaultTokenBudget - 2 * k - 2);
      std::vector<const float*> expect;
      expect.push_back(&table(vocab.start_id(), 0));
      for (std::size_t i = 0; i < k; ++i) expect.push_back(&params.at(bank.name()).value(i, 0));
      for (std::size_t i = 0; i < kept; ++i) expect.push_back(&table(tokens.ids[i], 0));
      for (std::size_t i = k; i < 2 * k; ++i) expect.push_back(&params.at(bank.name()).value(i, 0));
      expect.push_back(&table(vocab.end_id(), 0));
      bool ok = seq.rows() <= kDefaultTokenBudget && seq.rows() == expect.size();
      for (std::size_t r = 0; ok && r < expect.size(); ++r) ok = std::memcmp(&seq(r, 0), expect[r], 8 * sizeof(float)) == 0;
      good += ok;
    }
  }
  return {good == checked, std::to_string(good) + "/" + std::to_string(checked) +
                               " injected sequences within 77 with the pattern intact (longest " +
                               std::to_string(longest) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Directory for run artifacts");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  const fs::path root = fs::absolute(workdir);
  fs::create_directories(root);

  std::optional<ClosedSetRun> cs;
  auto closed = [&]() -> ClosedSetRun& {
    if (!cs) cs = closed_set(root / "closed_set");
    return *cs;
  };
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_check},
      {"frozen invariance", [&] { return closed().frozen; }},
      {"closed-set learning", [&] { return closed().learning; }},
      {"temporal-modeling gain", [&] { return temporal_gain(root / "order"); }},
      {"zero-shot transfer", [&] { return zero_shot(root / "zero_shot"); }},
      {"metric oracle equivalence", metric_oracles},
      {"NCE analytic values", nce_values},
      {"pooling identity", pooling_identity},
      {"determinism", [&] { return determinism(root / "determinism"); }},
      {"token-budget discipline", token_budget},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << std::setw(2) << id << " " << (o.pass ? "PASS" : "FAIL") << "  "
              << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
