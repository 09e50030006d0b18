// SPDX-License-Identifier: Apache-2.0
//
// Experiment workflows: training loops per task kind, evaluation protocols
// (closed-set, few-shot, zero-shot, retrieval, localisation), gradient
// checks, prompt inspection, and the machine-readable artifacts they emit.

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vidprompt/checkpoint.hpp"
#include "vidprompt/config.hpp"
#include "vidprompt/data.hpp"
#include "vidprompt/metrics.hpp"
#include "vidprompt/model.hpp"

#ifndef VIDPROMPT_BUILD_ID
#define VIDPROMPT_BUILD_ID "unknown"
#endif

namespace vidprompt {

inline std::string build_id() { return VIDPROMPT_BUILD_ID; }

struct MetricRecord {
  std::string metric;
  std::string split;
  std::string protocol;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::optional<double> value;  // absent when undefined for the data
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j = {{"metric", metric}, {"split", split},  {"protocol", protocol},
                        {"trial", trial},   {"seed", seed}};
    j["value"] = value ? nlohmann::json(*value) : nlohmann::json(nullptr);
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }
};

struct LossRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

// Shortest round-trip formatting so reports are byte-stable.
inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,loss,lr\n";
  for (const auto& r : rows) out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.lr) << '\n';
}

inline std::vector<LossRow> read_loss_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (line != "step,loss,lr") throw std::runtime_error(path + ": unexpected header '" + line + "'");
  std::vector<LossRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
      throw std::runtime_error(path + ": malformed row '" + line + "'");
    }
    rows.push_back(LossRow{std::stoull(a), std::stod(b), std::stod(c)});
  }
  return rows;
}

inline void append_metrics(const std::string& path, const std::vector<MetricRecord>& records) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

inline std::vector<nlohmann::json> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset persistence: JSON-lines manifest plus raw frames in the feature
// cache record format.

inline nlohmann::json video_record(const VideoSample& v, const std::vector<int>& gaps) {
  nlohmann::json j = {{"id", v.id}, {"split", v.split}, {"frames", v.total_frames()}, {"gaps", gaps}};
  if (v.label >= 0) j["label"] = v.label;
  if (!v.query.empty()) j["query"] = v.query;
  if (!v.instances.empty()) {
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& i : v.instances) inst.push_back({{"class", i.class_id}, {"start", i.start}, {"end", i.end}});
    j["instances"] = inst;
  }
  return j;
}

inline void write_dataset(const std::string& dir, const Dataset& ds, const std::vector<int>& gaps) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir + "/videos.jsonl", std::ios::trunc);
    for (const auto& v : ds.videos) out << video_record(v, gaps).dump() << '\n';
  }
  {
    std::ofstream out(dir + "/categories.txt", std::ios::trunc);
    for (std::size_t c = 0; c < ds.category_names.size(); ++c) out << c << '\t' << ds.category_names[c] << '\n';
  }
  FeatureCache<float> frames;
  for (const auto& v : ds.videos) frames.insert(v.id, v.frames);
  std::ofstream out(dir + "/frames.bin", std::ios::binary | std::ios::trunc);
  frames.write(out);
}

inline nlohmann::json split_to_json(const SplitSpec& s) {
  return {{"train", s.train_categories}, {"val", s.val_categories}, {"seed", s.seed}, {"trials", s.trials}};
}

inline SplitSpec load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read split file " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  SplitSpec s;
  s.train_categories = j.at("train").get<std::vector<int>>();
  s.val_categories = j.at("val").get<std::vector<int>>();
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("trials")) s.trials = j.at("trials").get<std::size_t>();
  return s;
}

// ---------------------------------------------------------------------------

template <class T>
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg)
      : cfg_(std::move(cfg)), model_(cfg_.model), optimizer_(cfg_.train.optim) {
    validate(cfg_);
    Rng data_rng = make_rng(cfg_.seed, "data");
    data_ = generate_synthetic_dataset(cfg_.data.spec, data_rng);
    model_.init(cfg_.seed);
    all_classes_.resize(data_.category_names.size());
    std::iota(all_classes_.begin(), all_classes_.end(), 0);
  }

  const ExperimentConfig& config() const { return cfg_; }
  std::uint64_t hash() const { return config_hash(cfg_); }
  const Dataset& data() const { return data_; }
  VideoPromptModel<T>& model() { return model_; }
  const VideoPromptModel<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return optimizer_; }
  FeatureCache<T>& cache() { return cache_; }
  const std::vector<LossRow>& loss_history() const { return losses_; }
  const std::vector<int>& all_classes() const { return all_classes_; }

  std::vector<std::uint8_t> checkpoint_bytes() const {
    return encode_checkpoint(model_.params(), &optimizer_, hash());
  }

  void save(const std::string& path) const { save_checkpoint(path, model_.params(), &optimizer_, hash()); }

  // Resuming requires an identical configuration; evaluation only needs
  // matching tensor names and shapes.
  void load(const std::string& path, bool require_same_config) {
    TrainingState<T> st = load_checkpoint<T>(path);
    restore_checkpoint(st, require_same_config ? hash() : st.config_hash, model_.params(), &optimizer_);
  }

  std::vector<std::string> names_of(const std::vector<int>& classes) const {
    std::vector<std::string> out;
    for (int c : classes) out.push_back(data_.category_names.at(static_cast<std::size_t>(c)));
    return out;
  }

  FrameFeatures<T> random_clip(const VideoSample& v, Rng& rng) {
    const Tensor<T>& feats = model_.frame_features(v, cache_);
    return gather_clip(feats, sample_frames(v.total_frames(), cfg_.model.clip_length, cfg_.model.gaps, rng));
  }

  // -------------------------------------------------------------------------
  // Training

  // Runs optimisation steps until the optimizer has taken `cfg.train.steps`.
  // Each step draws its batch from its own generator (seed, step), so an
  // interrupted-and-resumed run matches an uninterrupted one.
  void train(const std::vector<int>& classes, const std::function<void(const LossRow&)>& on_step = {}) {
    train_on(classes, pool_for(classes), cfg_.train.optim.steps, "train.batch", on_step);
  }

  void train_on(const std::vector<int>& classes, const std::vector<std::size_t>& pool, std::size_t total_steps,
                const std::string& tag, const std::function<void(const LossRow&)>& on_step = {}) {
    if (pool.empty()) throw std::invalid_argument("train: no training videos for the selected categories");
    const LossBuilder<T> build = make_loss(classes, pool, tag);
    while (optimizer_.step_count() < total_steps) {
      const double loss = train_step(model_.params(), optimizer_, build);
      losses_.push_back(LossRow{optimizer_.step_count(), loss, cfg_.train.optim.learning_rate});
      if (on_step) on_step(losses_.back());
    }
  }

  std::vector<std::size_t> pool_for(const std::vector<int>& classes) const {
    const std::set<int> keep(classes.begin(), classes.end());
    std::vector<std::size_t> pool;
    for (std::size_t i : data_.indices("train")) {
      const auto& v = data_.videos[i];
      if (v.label >= 0 ? keep.count(v.label) != 0 : has_instance_in(v, keep)) pool.push_back(i);
    }
    return pool;
  }

  // Loss for one step on a batch drawn from `pool`.
  LossBuilder<T> make_loss(const std::vector<int>& classes, const std::vector<std::size_t>& pool,
                           const std::string& tag) {
    const auto kind = cfg_.data.spec.kind;
    if (kind == TaskKind::retrieval) return retrieval_loss(pool, tag);
    if (kind == TaskKind::localisation) return localisation_loss(classes, pool, tag);
    return recognition_loss(classes, pool, tag);
  }

  // -------------------------------------------------------------------------
  // Evaluation helpers

  Tensor<T> class_matrix(const std::vector<int>& classes) const {
    Tape<T> tape(false);
    return model_.classifiers(tape, names_of(classes)).value();
  }

  // Logits (cosine / tau) of one clip against fixed classifiers.
  std::vector<double> clip_logits(const FrameFeatures<T>& clip, const Tensor<T>& classifiers) const {
    Tape<T> tape(false);
    Var<T> v = model_.clip_embeddings(tape, {clip});
    Var<T> s = similarity_matrix(v, tape.constant(classifiers));
    std::vector<double> out(s.cols());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = double(s.value()[j]) / cfg_.train.loss.temperature;
    return out;
  }

  // Crop-averaged logits for each listed video.
  ScoreMatrix score_videos(const std::vector<std::size_t>& videos, const Tensor<T>& classifiers,
                           const std::string& tag, std::size_t trial = 0) {
    ScoreMatrix out;
    out.reserve(videos.size());
    for (std::size_t i : videos) {
      const VideoSample& v = data_.videos[i];
      const Tensor<T>& feats = model_.frame_features(v, cache_);
      Rng rng = make_rng(cfg_.seed, tag, trial * 1000003ULL + i);
      out.push_back(five_crop_predict(
          v.total_frames(), cfg_.model.clip_length, cfg_.model.gaps,
          [&](const FrameSampling& s) { return clip_logits(gather_clip(feats, s), classifiers); }, rng,
          cfg_.eval.crops));
    }
    return out;
  }

  std::vector<MetricRecord> accuracy_records(const ScoreMatrix& scores, const std::vector<int>& labels,
                                             const std::string& protocol, std::size_t trial) const {
    std::vector<MetricRecord> out;
    const std::size_t classes = scores.empty() ? 0 : scores.front().size();
    for (std::size_t k : cfg_.eval.top_k) {
      if (k > classes) continue;
      MetricRecord r{"top" + std::to_string(k), "val", protocol, trial, cfg_.seed,
                     top_k_accuracy(scores, labels, k)};
      r.extra = {{"classes", classes}, {"videos", scores.size()}};
      out.push_back(std::move(r));
    }
    return out;
  }

  // Closed-set (or zero-shot when `classes` is the val side of a split):
  // val videos of the listed classes against classifiers of those classes.
  std::vector<MetricRecord> eval_recognition(const std::vector<int>& classes, const std::string& protocol) {
    const Tensor<T> cls = class_matrix(classes);
    std::map<int, int> local;
    for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = static_cast<int>(i);
    std::vector<std::size_t> vids;
    std::vector<int> labels;
    for (std::size_t i : data_.indices("val")) {
      auto it = local.find(data_.videos[i].label);
      if (it == local.end()) continue;
      vids.push_back(i);
      labels.push_back(it->second);
    }
    if (vids.empty()) throw std::invalid_argument("eval: no validation videos for the selected categories");
    return accuracy_records(score_videos(vids, cls, "eval." + protocol), labels, protocol, 0);
  }

  // N-way K-shot episodes over the val split. Each trial fine-tunes a copy
  // of the current trainables on the support set, then scores the queries.
  std::vector<MetricRecord> eval_few_shot(std::size_t ways, std::size_t shots, std::size_t trials) {
    std::vector<MetricRecord> out;
    const ParameterSet<T> snapshot = model_.params();
    const AdamW<T> opt_snapshot = optimizer_;
    const auto val = data_.indices("val");
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = make_rng(cfg_.seed, "few-shot.episode", t);
      const Episode ep = sample_few_shot_episode(data_.videos, val, ways, shots, rng, &data_.category_names);
      out.push_back(run_support_trial(ep.categories, ep.support, ep.query, "few-shot", t));
      model_.params() = snapshot;
      optimizer_ = opt_snapshot;
    }
    out.push_back(summary(out, "few-shot"));
    return out;
  }

  // K shots per category over all categories, scored on the standard val split.
  std::vector<MetricRecord> eval_c_way(std::size_t shots, std::size_t rounds) {
    std::vector<MetricRecord> out;
    const ParameterSet<T> snapshot = model_.params();
    const AdamW<T> opt_snapshot = optimizer_;
    for (std::size_t r = 0; r < rounds; ++r) {
      Rng rng = make_rng(cfg_.seed, "c-way.support", r);
      const SupportSet s = build_c_way_support(data_, shots, rng);
      out.push_back(run_support_trial(all_classes_, s.support, s.test, "c-way", r));
      model_.params() = snapshot;
      optimizer_ = opt_snapshot;
    }
    out.push_back(summary(out, "c-way"));
    return out;
  }

  // Text-to-video retrieval over the val split: query i matches video i.
  std::vector<MetricRecord> eval_retrieval() {
    const auto vids = data_.indices("val");
    if (vids.size() < 2) throw std::invalid_argument("eval-retrieval: need at least 2 validation videos");
    std::vector<std::string> queries;
    for (std::size_t i : vids) queries.push_back(data_.videos[i].query);
    Tensor<T> q;
    {
      Tape<T> tape(false);
      q = model_.text_embeddings(tape, queries).value();
    }
    ScoreMatrix s(vids.size(), std::vector<double>(vids.size(), 0.0));
    for (std::size_t c = 0; c < cfg_.eval.crops; ++c) {
      std::vector<FrameFeatures<T>> clips;
      for (std::size_t i : vids) {
        Rng rng = make_rng(cfg_.seed, "eval.retrieval", c * 1000003ULL + i);
        clips.push_back(random_clip(data_.videos[i], rng));
      }
      Tape<T> tape(false);
      Var<T> v = model_.clip_embeddings(tape, clips);
      Var<T> sim = similarity_matrix(tape.constant(q), v);
      for (std::size_t a = 0; a < vids.size(); ++a)
        for (std::size_t b = 0; b < vids.size(); ++b) s[a][b] += double(sim.value()(a, b)) / double(cfg_.eval.crops);
    }
    const RetrievalReport rep = retrieval_ranks(s, cfg_.eval.recall_k);
    std::vector<MetricRecord> out;
    for (const auto& [k, r] : rep.recall_at) out.push_back({"R@" + std::to_string(k), "val", "retrieval", 0, cfg_.seed, r});
    out.push_back({"MdR", "val", "retrieval", 0, cfg_.seed, double(rep.median_rank)});
    return out;
  }

  // Second-stage localisation: classify proposals by pooling dense temporal
  // features inside them, then Soft-NMS, mAP, AR@AN and proposal accuracy.
  std::vector<MetricRecord> eval_localisation(const std::vector<int>& classes, const std::string& source,
                                              double noise, const std::vector<VideoSample>* videos = nullptr) {
    if (source != "planted" && source != "jittered-gt") {
      throw std::invalid_argument("eval-localisation: unknown proposal source '" + source + "'");
    }
    std::vector<VideoSample> val_videos;
    if (videos) {
      val_videos = *videos;
    } else {
      for (std::size_t i : data_.indices("val")) val_videos.push_back(data_.videos[i]);
    }
    const Tensor<T> cls = class_matrix(classes);
    std::map<int, int> local;
    for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = static_cast<int>(i);

    std::vector<GroundTruthInstance> gts;
    std::vector<Detection> dets;
    std::vector<ScoredProposal> scored;
    std::map<std::string, std::vector<Proposal>> proposals;
    for (std::size_t vi = 0; vi < val_videos.size(); ++vi) {
      const VideoSample& v = val_videos[vi];
      std::vector<TemporalInstance> inst;
      for (const auto& i : v.instances)
        if (local.count(i.class_id)) inst.push_back(i);
      if (inst.empty()) continue;
      for (const auto& i : inst) gts.push_back({v.id, local.at(i.class_id), i.start, i.end});
      Rng rng = make_rng(cfg_.seed, "eval.proposals", vi);
      std::vector<Proposal> props = make_proposals(inst, v.total_frames(), source, noise, rng);
      proposals[v.id] = props;

      const Tensor<T> feats = model_.image_encoder().encode(model_.params(), v.frames);
      Tape<T> tape(false);
      Var<T> dense = model_.timeline(tape, feats);
      std::vector<double> times(v.total_frames());
      std::iota(times.begin(), times.end(), 0.0);
      Var<T> c = tape.constant(cls);
      for (const Proposal& p : props) {
        Var<T> pooled = l2_normalize(mean_pool_proposal(dense, p, times));
        Var<T> s = similarity_matrix(pooled, c);
        std::vector<double> logits(s.cols());
        for (std::size_t j = 0; j < logits.size(); ++j) {
          logits[j] = double(s.value()[j]) / cfg_.train.loss.temperature;
        }
        const std::vector<double> prob = softmax(logits);
        const std::size_t top = argmax(prob);
        dets.push_back(Detection{v.id, p, static_cast<int>(top), p.score * prob[top]});
        scored.push_back(ScoredProposal{v.id, p, logits});
      }
    }
    if (gts.empty()) throw std::invalid_argument("eval-localisation: no ground truth for the selected categories");
    const auto kept = soft_nms_grouped(dets, cfg_.eval.soft_nms_threshold);
    const DetectionReport rep = detection_map(kept, gts, cfg_.eval.iou_set);
    std::vector<MetricRecord> out;
    for (std::size_t t = 0; t < rep.thresholds.size(); ++t) {
      out.push_back({"mAP@" + format_iou(rep.thresholds[t]), "val", "localisation/" + source, 0, cfg_.seed,
                     rep.mean_ap[t]});
    }
    out.push_back({"mAP-avg", "val", "localisation/" + source, 0, cfg_.seed, rep.average});
    for (std::size_t an : cfg_.eval.ar_an) {
      out.push_back({"AR@" + std::to_string(an), "val", "localisation/" + source, 0, cfg_.seed,
                     average_recall_at_an(proposals, gts, an, cfg_.eval.ar_grid)});
    }
    out.push_back({"proposal-top1", "val", "localisation/" + source, 0, cfg_.seed,
                   proposal_classification_accuracy(scored, gts)});
    return out;
  }

 private:
  static bool has_instance_in(const VideoSample& v, const std::set<int>& keep) {
    for (const auto& i : v.instances)
      if (keep.count(i.class_id)) return true;
    return false;
  }

  static std::vector<double> softmax(const std::vector<double>& x) {
    const double m = *std::max_element(x.begin(), x.end());
    std::vector<double> e(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i] - m));
    for (auto& v : e) v /= s;
    return e;
  }

  static std::string format_iou(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
  }

  static std::vector<Proposal> make_proposals(const std::vector<TemporalInstance>& inst, std::size_t frames,
                                              const std::string& source, double noise, Rng& rng) {
    std::vector<Proposal> props;
    std::normal_distribution<double> n01(0.0, 1.0);
    for (const auto& i : inst) {
      Proposal p{i.start, i.end, 1.0};
      if (source == "jittered-gt") {
        const double len = i.end - i.start;
        p.start = std::clamp(i.start + noise * len * n01(rng), 0.0, double(frames) - 1.0);
        p.end = std::clamp(i.end + noise * len * n01(rng), p.start + 1.0, double(frames));
        p.score = interval_iou(p, Proposal{i.start, i.end, 1.0});
      }
      props.push_back(p);
    }
    std::stable_sort(props.begin(), props.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    return props;
  }

  MetricRecord summary(const std::vector<MetricRecord>& trials, const std::string& protocol) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : trials) {
      if (r.metric == "top1" && r.value) {
        s += *r.value;
        ++n;
      }
    }
    MetricRecord m{"top1-mean", "val", protocol, trials.size(), cfg_.seed, n ? std::optional<double>(s / double(n)) : std::nullopt};
    m.extra = {{"trials", n}};
    return m;
  }

  MetricRecord run_support_trial(const std::vector<int>& classes, const std::vector<std::size_t>& support,
                                 const std::vector<std::size_t>& query, const std::string& protocol,
                                 std::size_t trial) {
    optimizer_ = AdamW<T>(cfg_.train.optim);
    train_on(classes, support, cfg_.eval.few_shot_steps, protocol + ".batch." + std::to_string(trial));
    losses_.clear();
    const Tensor<T> cls = class_matrix(classes);
    std::map<int, int> local;
    for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = static_cast<int>(i);
    std::vector<int> labels;
    for (std::size_t i : query) labels.push_back(local.at(data_.videos[i].label));
    const ScoreMatrix scores = score_videos(query, cls, "eval." + protocol, trial);
    MetricRecord r{"top1", "val", protocol, trial, cfg_.seed, top_k_accuracy(scores, labels, 1)};
    r.extra = {{"classes", classes.size()}, {"support", support.size()}, {"query", query.size()}};
    return r;
  }

  LossBuilder<T> recognition_loss(const std::vector<int>& classes, const std::vector<std::size_t>& pool,
                                  const std::string& tag) {
    std::map<int, std::size_t> local;
    for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = i;
    const std::vector<std::string> names = names_of(classes);
    return [this, local, names, pool, tag](Tape<T>& tape, const ParameterSet<T>&) {
      Rng rng = make_rng(cfg_.seed, tag, optimizer_.step_count());
      std::vector<FrameFeatures<T>> clips;
      std::vector<std::size_t> targets;
      for (std::size_t b = 0; b < cfg_.train.optim.batch_size; ++b) {
        const VideoSample& v = data_.videos[pool[uniform_index(rng, 0, pool.size() - 1)]];
        clips.push_back(random_clip(v, rng));
        targets.push_back(local.at(v.label));
      }
      Var<T> vids = model_.clip_embeddings(tape, clips);
      Var<T> cls = model_.classifiers(tape, names);
      return nce_loss(similarity_matrix(vids, cls), targets, cfg_.train.loss.temperature);
    };
  }

  // Paired videos and sentences; batch members are distinct videos.
  LossBuilder<T> retrieval_loss(const std::vector<std::size_t>& pool, const std::string& tag) {
    return [this, pool, tag](Tape<T>& tape, const ParameterSet<T>&) {
      Rng rng = make_rng(cfg_.seed, tag, optimizer_.step_count());
      const std::size_t n = std::min(cfg_.train.optim.batch_size, pool.size());
      const auto picked = data_detail::sample_without_replacement(pool, n, rng);
      std::vector<FrameFeatures<T>> clips;
      std::vector<std::string> queries;
      std::vector<std::size_t> targets;
      for (std::size_t b = 0; b < picked.size(); ++b) {
        const VideoSample& v = data_.videos[picked[b]];
        clips.push_back(random_clip(v, rng));
        queries.push_back(v.query);
        targets.push_back(b);
      }
      Var<T> vids = model_.clip_embeddings(tape, clips);
      Var<T> text = model_.text_embeddings(tape, queries);
      return contrastive_loss(similarity_matrix(vids, text), targets, cfg_.train.loss);
    };
  }

  // Instances are pooled from the dense timeline output over their own
  // interval. Videos are drawn until the batch holds batch_size instances.
  LossBuilder<T> localisation_loss(const std::vector<int>& classes, const std::vector<std::size_t>& pool,
                                   const std::string& tag) {
    std::map<int, std::size_t> local;
    for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = i;
    const std::vector<std::string> names = names_of(classes);
    return [this, local, names, pool, tag](Tape<T>& tape, const ParameterSet<T>&) {
      Rng rng = make_rng(cfg_.seed, tag, optimizer_.step_count());
      std::vector<Var<T>> pooled;
      std::vector<std::size_t> targets;
      while (targets.size() < cfg_.train.optim.batch_size) {
        const VideoSample& v = data_.videos[pool[uniform_index(rng, 0, pool.size() - 1)]];
        Var<T> dense = model_.timeline(tape, model_.frame_features(v, cache_));
        std::vector<double> times(v.total_frames());
        std::iota(times.begin(), times.end(), 0.0);
        for (const auto& i : v.instances) {
          auto it = local.find(i.class_id);
          if (it == local.end()) continue;
          pooled.push_back(mean_pool_proposal(dense, Proposal{i.start, i.end, 1.0}, times));
          targets.push_back(it->second);
        }
      }
      Var<T> feats = l2_normalize(pooled.size() == 1 ? pooled.front() : concat_rows(pooled));
      Var<T> cls = model_.classifiers(tape, names);
      return nce_loss(similarity_matrix(feats, cls), targets, cfg_.train.loss.temperature);
    };
  }

  ExperimentConfig cfg_;
  Dataset data_;
  VideoPromptModel<T> model_;
  AdamW<T> optimizer_;
  FeatureCache<T> cache_;
  std::vector<LossRow> losses_;
  std::vector<int> all_classes_;
};

// ---------------------------------------------------------------------------
// Gradient check on the NCE loss of a tiny model.

struct GradCheckSetup {
  std::size_t width = 16;
  std::size_t text_depth = 2;
  std::size_t temporal_depth = 1;
  std::size_t vocab_size = 64;
  std::size_t batch = 4;
  std::size_t heads = 2;
  std::size_t prompt_k = 2;
  std::size_t clip_length = 4;
  std::size_t categories = 4;
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 0;
  FiniteDiffOptions fd{};
};

struct GradCheckResult {
  FiniteDiffReport report;
  std::vector<std::string> tensors;
};

// The loss is evaluated on a fixed batch; every trainable tensor is sampled.
// Optional warm-up steps move the model off its near-zero initialisation.
inline GradCheckResult run_grad_check(const GradCheckSetup& s) {
  ModelConfig mc;
  mc.width = s.width;
  mc.text_depth = s.text_depth;
  mc.text_heads = s.heads;
  mc.temporal_depth = s.temporal_depth;
  mc.temporal_heads = s.heads;
  mc.vocab_size = s.vocab_size;
  mc.prompt_k = s.prompt_k;
  mc.clip_length = s.clip_length;
  mc.frame_dim = 8;
  mc.gaps = {1, 2};
  VideoPromptModel<double> model(mc);
  model.init(s.seed);

  SyntheticSpec spec;
  spec.categories = s.categories;
  spec.frame_dim = mc.frame_dim;
  spec.train_per_category = 2;
  spec.val_per_category = 0;
  spec.min_frames = s.clip_length;
  spec.max_frames = 2 * s.clip_length;
  Rng data_rng = make_rng(s.seed, "grad-check.data");
  const Dataset ds = generate_synthetic_dataset(spec, data_rng);

  FeatureCache<double> cache;
  Rng rng = make_rng(s.seed, "grad-check.batch");
  std::vector<FrameFeatures<double>> clips;
  std::vector<std::size_t> targets;
  for (std::size_t b = 0; b < s.batch; ++b) {
    const VideoSample& v = ds.videos[uniform_index(rng, 0, ds.videos.size() - 1)];
    const Tensor<double>& f = model.frame_features(v, cache);
    clips.push_back(gather_clip(f, sample_frames(v.total_frames(), s.clip_length, mc.gaps, rng)));
    targets.push_back(static_cast<std::size_t>(v.label));
  }
  const auto& names = ds.category_names;
  const LossBuilder<double> loss = [&](Tape<double>& tape, const ParameterSet<double>&) {
    Var<double> v = model.clip_embeddings(tape, clips);
    Var<double> c = model.classifiers(tape, names);
    return nce_loss(similarity_matrix(v, c), targets, 0.07);
  };
  if (s.warmup_steps > 0) {
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.batch_size = s.batch;
    AdamW<double> opt(tc);
    for (std::size_t i = 0; i < s.warmup_steps; ++i) train_step(model.params(), opt, loss);
  }
  GradCheckResult out;
  out.report = finite_diff_check(loss, model.params(), s.fd);
  for (const auto& p : model.params())
    if (p.trainable) out.tensors.push_back(p.name);
  return out;
}

}  // namespace vidprompt
