// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: strict JSON parsing (unknown keys are fatal),
// validation with key-qualified messages, and a stable content hash.

#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vidprompt/data.hpp"
#include "vidprompt/metrics.hpp"
#include "vidprompt/model.hpp"
#include "vidprompt/objectives.hpp"
#include "vidprompt/rng.hpp"

namespace vidprompt {

struct DataConfig {
  SyntheticSpec spec;
  double zero_shot_fraction = 2.0 / 3.0;
};

struct EvalConfig {
  std::vector<std::size_t> top_k = {1, 5};
  std::vector<std::size_t> recall_k = {1, 5, 10};
  std::vector<double> iou_set = {0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> ar_grid = iou_grid(0.5, 1.0, 0.05);
  std::vector<std::size_t> ar_an = {5, 10, 50};
  std::size_t crops = 5;
  double soft_nms_threshold = 0.5;
  double proposal_noise = 0.1;
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t trials = 200;
  std::size_t rounds = 10;
  std::size_t few_shot_steps = 100;
};

struct TrainBlock {
  TrainConfig optim;
  LossConfig loss;
  std::size_t log_every = 10;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  DataConfig data;
  TrainBlock train;
  EvalConfig eval;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace config_detail {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
  }

  // Rejects every key that was never asked for.
  void finish() const {
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + qualified(key) + "'");
    }
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  template <class U>
  void get(const std::string& key, U& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<U, std::size_t> || std::is_same_v<U, std::uint64_t>) {
        if (!v->is_number_unsigned()) throw ConfigError("");
        out = v->get<U>();
      } else if constexpr (std::is_same_v<U, double>) {
        if (!v->is_number()) throw ConfigError("");
        out = v->get<double>();
      } else if constexpr (std::is_same_v<U, bool>) {
        if (!v->is_boolean()) throw ConfigError("");
        out = v->get<bool>();
      } else if constexpr (std::is_same_v<U, std::string>) {
        if (!v->is_string()) throw ConfigError("");
        out = v->get<std::string>();
      } else {
        if (!v->is_array()) throw ConfigError("");
        out = v->get<U>();
      }
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + qualified(key) + "' has the wrong type");
    }
  }

  Reader child(const std::string& key) {
    static const json empty = json::object();
    const json* v = find(key);
    return Reader(v ? *v : empty, qualified(key));
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& key, const std::string& constraint) {
  if (!ok) throw ConfigError("config: key '" + key + "' must satisfy " + constraint);
}

}  // namespace config_detail

inline void validate(const ExperimentConfig& c) {
  using config_detail::require;
  const auto& m = c.model;
  require(m.width >= 1, "model.width", ">= 1");
  require(m.text_depth >= 1, "model.text_depth", ">= 1");
  require(m.text_heads >= 1 && m.width % m.text_heads == 0, "model.text_heads", "divides model.width");
  require(m.temporal_heads >= 1 && m.width % m.temporal_heads == 0, "model.temporal_heads", "divides model.width");
  require(m.mlp_ratio >= 1, "model.mlp_ratio", ">= 1");
  require(m.token_budget >= 2 * m.prompt_k + 3, "model.prompt_k",
          "2*k+3 <= model.token_budget (" + std::to_string(2 * m.prompt_k + 3) + " > " +
              std::to_string(m.token_budget) + ")");
  require(m.vocab_size >= 5, "model.vocab_size", ">= 5");
  require(m.clip_length >= 1, "model.clip_length", ">= 1");
  require(!m.gaps.empty(), "model.gaps", "non-empty");
  for (int g : m.gaps) require(g >= 1, "model.gaps", "all entries >= 1");
  require(m.trainable_init_std >= 0.0, "model.trainable_init_std", ">= 0");
  require(m.position_init_std >= 0.0, "model.position_init_std", ">= 0");
  require(m.frame_dim == c.data.spec.frame_dim, "model.frame_dim", "== data.frame_dim");

  const auto& d = c.data.spec;
  require(d.categories >= 2, "data.categories", ">= 2");
  require(d.noise >= 0.0, "data.noise", ">= 0");
  require(d.margin > 0.0, "data.margin", "> 0");
  require(d.drift >= 0.0, "data.drift", ">= 0");
  require(d.min_frames >= 1 && d.max_frames >= d.min_frames, "data.min_frames", "1 <= min_frames <= max_frames");
  require(c.data.zero_shot_fraction > 0.0 && c.data.zero_shot_fraction < 1.0, "data.zero_shot_fraction",
          "0 < fraction < 1");
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: data: ") + e.what());
  }

  const auto& t = c.train.optim;
  require(t.learning_rate > 0.0, "train.learning_rate", "> 0");
  require(t.batch_size >= 2, "train.batch_size", ">= 2");
  require(t.weight_decay >= 0.0, "train.weight_decay", ">= 0");
  require(t.beta1 > 0.0 && t.beta1 < 1.0, "train.beta1", "0 < beta1 < 1");
  require(t.beta2 > 0.0 && t.beta2 < 1.0, "train.beta2", "0 < beta2 < 1");
  require(t.eps > 0.0, "train.eps", "> 0");
  require(t.steps >= 1, "train.steps", ">= 1");
  require(c.train.loss.temperature > 0.0, "train.temperature", "> 0");
  require(c.train.log_every >= 1, "train.log_every", ">= 1");

  const auto& e = c.eval;
  for (std::size_t k : e.top_k) require(k >= 1, "eval.top_k", "all entries >= 1");
  for (std::size_t k : e.recall_k) require(k >= 1, "eval.recall_k", "all entries >= 1");
  require(!e.iou_set.empty(), "eval.iou_set", "non-empty");
  for (double v : e.iou_set) require(v > 0.0 && v <= 1.0, "eval.iou_set", "entries in (0, 1]");
  require(!e.ar_grid.empty(), "eval.ar_grid", "non-empty");
  for (double v : e.ar_grid) require(v > 0.0 && v <= 1.0, "eval.ar_grid", "entries in (0, 1]");
  for (std::size_t an : e.ar_an) require(an >= 1, "eval.ar_an", "all entries >= 1");
  require(e.crops >= 1, "eval.crops", ">= 1");
  require(e.soft_nms_threshold > 0.0 && e.soft_nms_threshold <= 1.0, "eval.soft_nms_threshold", "in (0, 1]");
  require(e.proposal_noise >= 0.0, "eval.proposal_noise", ">= 0");
  require(e.ways >= 1, "eval.ways", ">= 1");
  require(e.shots >= 1, "eval.shots", ">= 1");
  require(e.trials >= 1, "eval.trials", ">= 1");
  require(e.rounds >= 1, "eval.rounds", ">= 1");
}

inline ExperimentConfig parse_config(const nlohmann::json& root) {
  using config_detail::Reader;
  ExperimentConfig c;
  {
    Reader r(root, "");
    r.get("seed", c.seed);
    {
      Reader m = r.child("model");
      m.get("width", c.model.width);
      m.get("text_depth", c.model.text_depth);
      m.get("text_heads", c.model.text_heads);
      m.get("temporal_depth", c.model.temporal_depth);
      m.get("temporal_heads", c.model.temporal_heads);
      m.get("mlp_ratio", c.model.mlp_ratio);
      m.get("prompt_k", c.model.prompt_k);
      m.get("token_budget", c.model.token_budget);
      m.get("vocab_size", c.model.vocab_size);
      m.get("clip_length", c.model.clip_length);
      m.get("gaps", c.model.gaps);
      m.get("trainable_init_std", c.model.trainable_init_std);
      m.get("position_init_std", c.model.position_init_std);
      m.finish();
    }
    {
      Reader d = r.child("data");
      auto& s = c.data.spec;
      std::string kind = to_string(s.kind), naming = to_string(s.naming);
      d.get("kind", kind);
      d.get("naming", naming);
      try {
        s.kind = parse_task_kind(kind);
        s.naming = parse_naming(naming);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: data: ") + e.what());
      }
      d.get("categories", s.categories);
      d.get("frame_dim", s.frame_dim);
      d.get("train_per_category", s.train_per_category);
      d.get("val_per_category", s.val_per_category);
      d.get("min_frames", s.min_frames);
      d.get("max_frames", s.max_frames);
      d.get("noise", s.noise);
      d.get("margin", s.margin);
      d.get("drift", s.drift);
      d.get("min_instances", s.min_instances);
      d.get("max_instances", s.max_instances);
      d.get("min_instance_frames", s.min_instance_frames);
      d.get("max_instance_frames", s.max_instance_frames);
      d.get("min_background_frames", s.min_background_frames);
      d.get("max_background_frames", s.max_background_frames);
      d.get("prototype_seed", s.prototype_seed);
      d.get("zero_shot_fraction", c.data.zero_shot_fraction);
      d.finish();
    }
    {
      Reader t = r.child("train");
      t.get("learning_rate", c.train.optim.learning_rate);
      t.get("batch_size", c.train.optim.batch_size);
      t.get("weight_decay", c.train.optim.weight_decay);
      t.get("beta1", c.train.optim.beta1);
      t.get("beta2", c.train.optim.beta2);
      t.get("eps", c.train.optim.eps);
      t.get("steps", c.train.optim.steps);
      t.get("temperature", c.train.loss.temperature);
      t.get("symmetric", c.train.loss.symmetric);
      t.get("log_every", c.train.log_every);
      t.finish();
    }
    {
      Reader e = r.child("eval");
      e.get("top_k", c.eval.top_k);
      e.get("recall_k", c.eval.recall_k);
      e.get("iou_set", c.eval.iou_set);
      e.get("ar_grid", c.eval.ar_grid);
      e.get("ar_an", c.eval.ar_an);
      e.get("crops", c.eval.crops);
      e.get("soft_nms_threshold", c.eval.soft_nms_threshold);
      e.get("proposal_noise", c.eval.proposal_noise);
      e.get("ways", c.eval.ways);
      e.get("shots", c.eval.shots);
      e.get("trials", c.eval.trials);
      e.get("rounds", c.eval.rounds);
      e.get("few_shot_steps", c.eval.few_shot_steps);
      e.finish();
    }
    r.finish();
  }
  c.model.frame_dim = c.data.spec.frame_dim;
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  return parse_config(root);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Fully resolved configuration; keys come out sorted.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  const auto& m = c.model;
  j["model"] = {{"width", m.width},
                {"text_depth", m.text_depth},
                {"text_heads", m.text_heads},
                {"temporal_depth", m.temporal_depth},
                {"temporal_heads", m.temporal_heads},
                {"mlp_ratio", m.mlp_ratio},
                {"prompt_k", m.prompt_k},
                {"token_budget", m.token_budget},
                {"vocab_size", m.vocab_size},
                {"clip_length", m.clip_length},
                {"gaps", m.gaps},
                {"trainable_init_std", m.trainable_init_std},
                {"position_init_std", m.position_init_std}};
  const auto& s = c.data.spec;
  j["data"] = {{"kind", to_string(s.kind)},
               {"naming", to_string(s.naming)},
               {"categories", s.categories},
               {"frame_dim", s.frame_dim},
               {"train_per_category", s.train_per_category},
               {"val_per_category", s.val_per_category},
               {"min_frames", s.min_frames},
               {"max_frames", s.max_frames},
               {"noise", s.noise},
               {"margin", s.margin},
               {"drift", s.drift},
               {"min_instances", s.min_instances},
               {"max_instances", s.max_instances},
               {"min_instance_frames", s.min_instance_frames},
               {"max_instance_frames", s.max_instance_frames},
               {"min_background_frames", s.min_background_frames},
               {"max_background_frames", s.max_background_frames},
               {"prototype_seed", s.prototype_seed},
               {"zero_shot_fraction", c.data.zero_shot_fraction}};
  const auto& t = c.train;
  j["train"] = {{"learning_rate", t.optim.learning_rate},
                {"batch_size", t.optim.batch_size},
                {"weight_decay", t.optim.weight_decay},
                {"beta1", t.optim.beta1},
                {"beta2", t.optim.beta2},
                {"eps", t.optim.eps},
                {"steps", t.optim.steps},
                {"temperature", t.loss.temperature},
                {"symmetric", t.loss.symmetric},
                {"log_every", t.log_every}};
  const auto& e = c.eval;
  j["eval"] = {{"top_k", e.top_k},
               {"recall_k", e.recall_k},
               {"iou_set", e.iou_set},
               {"ar_grid", e.ar_grid},
               {"ar_an", e.ar_an},
               {"crops", e.crops},
               {"soft_nms_threshold", e.soft_nms_threshold},
               {"proposal_noise", e.proposal_noise},
               {"ways", e.ways},
               {"shots", e.shots},
               {"trials", e.trials},
               {"rounds", e.rounds},
               {"few_shot_steps", e.few_shot_steps}};
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(to_json(c).dump()); }

}  // namespace vidprompt
