// SPDX-License-Identifier: Apache-2.0
//
// vidprompt: command-line front end for data generation, training,
// evaluation, gradient checks, prompt inspection and reports.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "vidprompt/experiment.hpp"
#include "vidprompt/report.hpp"

namespace fs = std::filesystem;
using namespace vidprompt;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool f64 = false;
};

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? parse_config_text("{}") : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  return c;
}

void write_manifest(const CommonOptions& o, const std::string& command, const ExperimentConfig& c,
                    const std::vector<std::string>& artifacts) {
  fs::create_directories(o.out);
  nlohmann::json j = {{"command", command},
                      {"config", to_json(c)},
                      {"config_hash", config_hash(c)},
                      {"seed", c.seed},
                      {"build_id", build_id()},
                      {"precision", o.f64 ? "f64" : "f32"},
                      {"artifacts", artifacts}};
  std::ofstream out(o.out + "/manifest." + command + ".json", std::ios::trunc);
  out << j.dump(2) << '\n';
}

void write_metrics(const CommonOptions& o, const std::string& name, const std::vector<MetricRecord>& recs) {
  fs::create_directories(o.out);
  const std::string path = o.out + "/" + name + ".metrics.jsonl";
  std::ofstream(path, std::ios::trunc).close();
  append_metrics(path, recs);
  for (const auto& r : recs) std::cout << r.to_json().dump() << '\n';
}

template <class T>
std::vector<int> training_classes(const Experiment<T>& e, const std::string& split_file) {
  if (split_file.empty()) return e.all_classes();
  const SplitSpec s = load_split(split_file);
  s.validate_zero_shot();
  return s.train_categories;
}

template <class T>
int cmd_train(const CommonOptions& o, const std::string& split_file, const std::string& resume,
              std::optional<std::size_t> stop_after) {
  const ExperimentConfig cfg = resolve_config(o);
  Experiment<T> e(cfg);
  for (const auto& w : e.data().warnings) std::cerr << "warning: " << w << '\n';
  fs::create_directories(o.out);
  std::vector<LossRow> earlier;
  if (!resume.empty()) {
    e.load(resume, true);
    std::cerr << "resumed at step " << e.optimizer().step_count() << '\n';
    if (fs::exists(o.out + "/loss.csv")) {
      for (const auto& r : read_loss_csv(o.out + "/loss.csv"))
        if (r.step <= e.optimizer().step_count()) earlier.push_back(r);
    }
  } else {
    e.save(o.out + "/checkpoint.init.pgck");
  }
  const auto classes = training_classes(e, split_file);
  const std::size_t total = std::min(stop_after.value_or(cfg.train.optim.steps), cfg.train.optim.steps);
  e.train_on(classes, e.pool_for(classes), total, "train.batch", [&](const LossRow& r) {
    if (r.step % cfg.train.log_every == 0 || r.step == cfg.train.optim.steps) {
      std::cerr << "step " << r.step << " loss " << r.loss << '\n';
    }
  });
  e.save(o.out + "/checkpoint.pgck");
  earlier.insert(earlier.end(), e.loss_history().begin(), e.loss_history().end());
  write_loss_csv(o.out + "/loss.csv", earlier);
  std::vector<MetricRecord> recs;
  if (!e.loss_history().empty()) {
    recs.push_back({"final-loss", "train", "train", 0, cfg.seed, e.loss_history().back().loss});
  }
  write_metrics(o, "train", recs);
  write_manifest(o, "train", cfg,
                 {"checkpoint.init.pgck", "checkpoint.pgck", "loss.csv", "train.metrics.jsonl"});
  return 0;
}

template <class T>
void maybe_load(Experiment<T>& e, const std::string& checkpoint) {
  if (checkpoint.empty()) {
    std::cerr << "note: no checkpoint given, evaluating the untrained model\n";
    return;
  }
  e.load(checkpoint, false);
}

template <class T>
int cmd_eval_recognition(const CommonOptions& o, const std::string& mode, const std::string& checkpoint,
                         const std::string& split_file, const std::string& ways, std::optional<std::size_t> shots,
                         std::optional<std::size_t> trials) {
  ExperimentConfig cfg = resolve_config(o);
  if (shots) cfg.eval.shots = *shots;
  if (trials) {
    cfg.eval.trials = *trials;
    cfg.eval.rounds = *trials;
  }
  Experiment<T> e(cfg);
  maybe_load(e, checkpoint);
  std::vector<MetricRecord> recs;
  if (mode == "closed-set") {
    recs = e.eval_recognition(e.all_classes(), "closed-set");
  } else if (mode == "zero-shot") {
    if (split_file.empty()) throw std::invalid_argument("zero-shot evaluation needs --split");
    const SplitSpec s = load_split(split_file);
    s.validate_zero_shot();
    recs = e.eval_recognition(s.val_categories, "zero-shot");
  } else if (mode == "few-shot") {
    if (ways == "all") {
      recs = e.eval_c_way(cfg.eval.shots, cfg.eval.rounds);
    } else {
      const std::size_t n = ways.empty() ? cfg.eval.ways : std::stoul(ways);
      recs = e.eval_few_shot(n, cfg.eval.shots, cfg.eval.trials);
    }
  } else {
    throw std::invalid_argument("unknown recognition mode '" + mode + "'");
  }
  const std::string name = "eval-recognition." + (mode == "few-shot" && ways == "all" ? std::string("c-way") : mode);
  write_metrics(o, name, recs);
  write_manifest(o, name, cfg, {name + ".metrics.jsonl"});
  return 0;
}

template <class T>
int cmd_eval_retrieval(const CommonOptions& o, const std::string& checkpoint) {
  const ExperimentConfig cfg = resolve_config(o);
  if (cfg.data.spec.kind != TaskKind::retrieval) throw std::invalid_argument("eval-retrieval needs data.kind retrieval");
  Experiment<T> e(cfg);
  maybe_load(e, checkpoint);
  write_metrics(o, "eval-retrieval", e.eval_retrieval());
  write_manifest(o, "eval-retrieval", cfg, {"eval-retrieval.metrics.jsonl"});
  return 0;
}

template <class T>
int cmd_eval_localisation(const CommonOptions& o, const std::string& checkpoint, const std::string& source,
                          std::optional<double> noise, const std::string& split_file) {
  const ExperimentConfig cfg = resolve_config(o);
  if (cfg.data.spec.kind != TaskKind::localisation) {
    throw std::invalid_argument("eval-localisation needs data.kind localisation");
  }
  Experiment<T> e(cfg);
  maybe_load(e, checkpoint);
  const double n = noise.value_or(cfg.eval.proposal_noise);
  std::vector<MetricRecord> recs;
  if (split_file.empty()) {
    recs = e.eval_localisation(e.all_classes(), source, n);
  } else {
    const SplitSpec s = load_split(split_file);
    s.validate_zero_shot();
    std::vector<VideoSample> val;
    for (std::size_t i : e.data().indices("val")) val.push_back(e.data().videos[i]);
    const auto divided = divide_multilabel_videos(val, s);
    recs = e.eval_localisation(s.val_categories, source, n, &divided.second);
  }
  write_metrics(o, "eval-localisation", recs);
  write_manifest(o, "eval-localisation", cfg, {"eval-localisation.metrics.jsonl"});
  return 0;
}

int cmd_gen_data(const CommonOptions& o) {
  const ExperimentConfig cfg = resolve_config(o);
  Rng data_rng = make_rng(cfg.seed, "data");
  const Dataset ds = generate_synthetic_dataset(cfg.data.spec, data_rng);
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << '\n';
  write_dataset(o.out + "/data", ds, cfg.model.gaps);
  std::vector<int> cats(ds.category_names.size());
  std::iota(cats.begin(), cats.end(), 0);
  Rng split_rng = make_rng(cfg.seed, "split", 0);
  SplitSpec split = split_zero_shot(cats, cfg.data.zero_shot_fraction, split_rng);
  split.seed = cfg.seed;
  std::ofstream(o.out + "/split.json", std::ios::trunc) << split_to_json(split).dump(2) << '\n';
  {
    std::ofstream v(o.out + "/data/vocab.txt", std::ios::trunc);
    Vocabulary::make_default(cfg.model.vocab_size).write(v);
  }
  std::vector<MetricRecord> recs;
  if (cfg.data.spec.kind == TaskKind::recognition) {
    recs.push_back({"nearest-prototype-top1", "val", "oracle", 0, cfg.seed,
                    ds.indices("val").empty() ? std::nullopt
                                              : std::optional<double>(nearest_prototype_accuracy(ds, "val"))});
  }
  write_metrics(o, "gen-data", recs);
  write_manifest(o, "gen-data", cfg,
                 {"data/videos.jsonl", "data/categories.txt", "data/frames.bin", "data/vocab.txt", "split.json"});
  std::cerr << "wrote " << ds.videos.size() << " videos over " << ds.category_names.size() << " categories\n";
  return 0;
}

int cmd_grad_check(const CommonOptions& o, std::size_t warmup, std::size_t samples) {
  GradCheckSetup s;
  s.seed = o.seed.value_or(0);
  s.warmup_steps = warmup;
  s.fd.samples_per_tensor = samples;
  s.fd.seed = s.seed;
  const GradCheckResult r = run_grad_check(s);
  const bool ok = r.report.max_relative_error <= 1e-3;
  MetricRecord rec{"grad-check-max-rel-error", "none", "grad-check", 0, s.seed, r.report.max_relative_error};
  rec.extra = {{"entries", r.report.entries_checked},
               {"worst", r.report.worst_entry},
               {"tensors", r.tensors.size()},
               {"threshold", 1e-3},
               {"passed", ok}};
  write_metrics(o, "grad-check", {rec});
  ExperimentConfig echo;
  echo.seed = s.seed;
  write_manifest(o, "grad-check", echo, {"grad-check.metrics.jsonl"});
  return ok ? 0 : 1;
}

template <class T>
int cmd_inspect_prompts(const CommonOptions& o, const std::string& checkpoint) {
  const ExperimentConfig cfg = resolve_config(o);
  VideoPromptModel<T> model(cfg.model);
  model.init(cfg.seed);
  if (!checkpoint.empty()) {
    AdamW<T>* none = nullptr;
    restore_checkpoint(load_checkpoint<T>(checkpoint), load_checkpoint<T>(checkpoint).config_hash, model.params(),
                       none);
  }
  if (model.bank().k() == 0) throw std::invalid_argument("inspect-prompts: model has no prompt vectors (k = 0)");
  const auto table = nearest_subwords(model.params().at(model.bank().name()).value,
                                      model.params().at(model.vocab().embedding_name()).value, model.vocab());
  fs::create_directories(o.out);
  std::ofstream tsv(o.out + "/prompts.tsv", std::ios::trunc);
  tsv << "slot\tsubword\tcosine_distance\n";
  std::cout << "slot\tsubword\tcosine_distance\n";
  for (const auto& m : table) {
    const std::string d = m.distance ? format_double(*m.distance) : "undefined";
    tsv << m.slot << '\t' << m.subword << '\t' << d << '\n';
    std::cout << m.slot << '\t' << m.subword << '\t' << d << '\n';
  }
  write_manifest(o, "inspect-prompts", cfg, {"prompts.tsv"});
  return 0;
}

int cmd_report(const CommonOptions& o, bool plot) {
  const ReportSummary s = summarize_run(o.out);
  std::ofstream(o.out + "/report.txt", std::ios::trunc) << s.text;
  std::cout << s.text;
  if (plot) {
    if (!s.loss.empty()) std::ofstream(o.out + "/loss.svg", std::ios::trunc) << loss_svg(s.loss);
    if (!s.metrics.empty()) std::ofstream(o.out + "/metrics.svg", std::ios::trunc) << metrics_svg(s.metrics);
  }
  return 0;
}

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "Experiment config (JSON)");
  sub->add_option("--seed", o.seed, "Global seed (overrides the config)");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_flag("--f64", o.f64, "Run in 64-bit verification mode");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt tuning of a frozen dual encoder for video tasks"};
  app.require_subcommand(1);
  CommonOptions o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and a zero-shot split");
  add_common(gen, o);

  std::string split_file, resume, checkpoint;
  auto* train = app.add_subcommand("train", "Train prompts and the temporal encoder");
  add_common(train, o);
  train->add_option("--split", split_file, "Zero-shot split file: train on its train side only");
  train->add_option("--resume", resume, "Resume from a checkpoint written with the same config");
  std::optional<std::size_t> stop_after;
  train->add_option("--stop-after", stop_after, "Stop once the optimizer has taken this many steps");

  std::string mode, ways;
  std::optional<std::size_t> shots, trials;
  auto* rec = app.add_subcommand("eval-recognition", "Recognition: closed-set | few-shot | zero-shot");
  add_common(rec, o);
  rec->add_option("mode", mode, "closed-set, few-shot or zero-shot")
      ->required()
      ->check(CLI::IsMember({"closed-set", "few-shot", "zero-shot"}));
  rec->add_option("--checkpoint", checkpoint, "Trained checkpoint");
  rec->add_option("--split", split_file, "Zero-shot split file");
  rec->add_option("--ways", ways, "Few-shot ways (a number, or 'all' for every category)");
  rec->add_option("--shots", shots, "Few-shot shots");
  rec->add_option("--trials", trials, "Few-shot trials (rounds when --ways all)");

  auto* ret = app.add_subcommand("eval-retrieval", "Text-to-video retrieval: R@K and MdR");
  add_common(ret, o);
  ret->add_option("--checkpoint", checkpoint, "Trained checkpoint");

  std::string source = "planted";
  std::optional<double> noise;
  auto* loc = app.add_subcommand("eval-localisation", "Second-stage localisation metrics");
  add_common(loc, o);
  loc->add_option("--checkpoint", checkpoint, "Trained checkpoint");
  loc->add_option("source", source, "Proposal source: planted or jittered-gt")
      ->check(CLI::IsMember({"planted", "jittered-gt"}));
  loc->add_option("--noise", noise, "Boundary jitter, as a fraction of instance length");
  loc->add_option("--split", split_file, "Category split: evaluate on its val side");

  std::size_t warmup = 0, samples = 8;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the NCE gradients (64-bit)");
  add_common(gc, o);
  gc->add_option("--warmup", warmup, "Optimizer steps before checking");
  gc->add_option("--samples", samples, "Sampled entries per trainable tensor");

  auto* ins = app.add_subcommand("inspect-prompts", "Nearest subword of every prompt vector");
  add_common(ins, o);
  ins->add_option("--checkpoint", checkpoint, "Trained checkpoint");

  bool plot = false;
  auto* rep = app.add_subcommand("report", "Summarise metrics and loss of a run directory");
  add_common(rep, o);
  rep->add_flag("--plot", plot, "Also write SVG figures");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (train->parsed()) {
      return o.f64 ? cmd_train<double>(o, split_file, resume, stop_after)
                 : cmd_train<float>(o, split_file, resume, stop_after);
    }
    if (rec->parsed()) {
      return o.f64 ? cmd_eval_recognition<double>(o, mode, checkpoint, split_file, ways, shots, trials)
                   : cmd_eval_recognition<float>(o, mode, checkpoint, split_file, ways, shots, trials);
    }
    if (ret->parsed()) return o.f64 ? cmd_eval_retrieval<double>(o, checkpoint) : cmd_eval_retrieval<float>(o, checkpoint);
    if (loc->parsed()) {
      return o.f64 ? cmd_eval_localisation<double>(o, checkpoint, source, noise, split_file)
                   : cmd_eval_localisation<float>(o, checkpoint, source, noise, split_file);
    }
    if (gc->parsed()) return cmd_grad_check(o, warmup, samples);
    if (ins->parsed()) {
      return o.f64 ? cmd_inspect_prompts<double>(o, checkpoint) : cmd_inspect_prompts<float>(o, checkpoint);
    }
    if (rep->parsed()) return cmd_report(o, plot);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
