// SPDX-License-Identifier: Apache-2.0
//
// Synthetic video datasets and the split protocols built on them: closed-set,
// few-shot episodes, C-way support sets, zero-shot category partitions and
// division of multi-label untrimmed videos.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vidprompt/rng.hpp"
#include "vidprompt/text.hpp"
#include "vidprompt/video.hpp"

namespace vidprompt {

enum class TaskKind { recognition, order, retrieval, localisation };

// single: one action word per category, one prototype direction each.
// compositional: "modifier action" names; the prototype is the sum of one
// direction per word, so unseen combinations share parts with seen ones.
enum class Naming { single, compositional };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::recognition: return "recognition";
    case TaskKind::order: return "order";
    case TaskKind::retrieval: return "retrieval";
    case TaskKind::localisation: return "localisation";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "recognition") return TaskKind::recognition;
  if (s == "order") return TaskKind::order;
  if (s == "retrieval") return TaskKind::retrieval;
  if (s == "localisation") return TaskKind::localisation;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

inline std::string to_string(Naming n) { return n == Naming::single ? "single" : "compositional"; }

inline Naming parse_naming(const std::string& s) {
  if (s == "single") return Naming::single;
  if (s == "compositional") return Naming::compositional;
  throw std::invalid_argument("unknown naming '" + s + "'");
}

struct SyntheticSpec {
  TaskKind kind = TaskKind::recognition;
  Naming naming = Naming::single;
  std::size_t categories = 8;
  std::size_t frame_dim = 32;
  std::size_t train_per_category = 32;
  std::size_t val_per_category = 16;
  std::size_t min_frames = 16;
  std::size_t max_frames = 48;
  double noise = 1.0;
  double margin = 2.0;  // minimum prototype distance, in units of noise
  double drift = 0.25;  // magnitude of a per-video linear drift across the clip
  std::size_t min_instances = 1;
  std::size_t max_instances = 15;
  std::size_t min_instance_frames = 8;
  std::size_t max_instance_frames = 24;
  std::size_t min_background_frames = 4;
  std::size_t max_background_frames = 16;
  std::uint64_t prototype_seed = 0;

  void validate() const {
    if (categories < 2) throw std::invalid_argument("SyntheticSpec: categories must be >= 2");
    if (noise < 0.0) throw std::invalid_argument("SyntheticSpec: noise must be >= 0");
    if (margin <= 0.0) throw std::invalid_argument("SyntheticSpec: margin must be > 0");
    if (drift < 0.0) throw std::invalid_argument("SyntheticSpec: drift must be >= 0");
    if (frame_dim < 1) throw std::invalid_argument("SyntheticSpec: frame_dim must be >= 1");
    if (min_frames < 1 || max_frames < min_frames) throw std::invalid_argument("SyntheticSpec: bad frame range");
    if (train_per_category + val_per_category == 0) throw std::invalid_argument("SyntheticSpec: no videos");
    if (kind == TaskKind::order) {
      if (categories % 2 != 0) throw std::invalid_argument("SyntheticSpec: order task needs an even category count");
      if (min_frames < 2) throw std::invalid_argument("SyntheticSpec: order task needs >= 2 frames");
    }
    if (kind == TaskKind::localisation) {
      if (min_instances < 1 || max_instances < min_instances) {
        throw std::invalid_argument("SyntheticSpec: bad instance count range");
      }
      if (min_instance_frames < 1 || max_instance_frames < min_instance_frames) {
        throw std::invalid_argument("SyntheticSpec: bad instance length range");
      }
      if (max_background_frames < min_background_frames) {
        throw std::invalid_argument("SyntheticSpec: bad background length range");
      }
    }
    if (basis_size() > frame_dim) {
      throw std::invalid_argument("SyntheticSpec: " + std::to_string(basis_size()) +
                                  " prototype directions do not fit in frame_dim " + std::to_string(frame_dim));
    }
  }

  // Grid used by compositional naming: modifiers x actions.
  std::pair<std::size_t, std::size_t> grid() const {
    const auto nm = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(categories))));
    return {nm, (categories + nm - 1) / nm};
  }

  std::size_t basis_size() const {
    if (naming == Naming::compositional && kind != TaskKind::order) {
      const auto [nm, na] = grid();
      return nm + na;
    }
    return categories;
  }
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<std::string> category_names;
  std::vector<Tensor<float>> prototypes;  // one 1 x F row per category
  std::vector<VideoSample> videos;
  std::vector<std::string> warnings;

  std::vector<std::size_t> indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      if (videos[i].split == split) out.push_back(i);
    }
    return out;
  }
};

namespace data_detail {

// Orthonormal rows from Gaussian vectors by Gram-Schmidt.
inline std::vector<std::vector<double>> orthonormal_basis(std::size_t count, std::size_t dim, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(dim);
    for (auto& x : v) x = n01(rng);
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

inline std::string video_id(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%05zu", split.c_str(), index);
  return buf;
}

inline void add_noise(std::span<float> row, double noise, Rng& rng) {
  if (noise == 0.0) return;
  std::normal_distribution<double> dist(0.0, noise);
  for (auto& x : row) x = static_cast<float>(static_cast<double>(x) + dist(rng));
}

}  // namespace data_detail

inline std::string retrieval_sentence(const std::string& category_name, std::size_t variant) {
  static const std::vector<std::string> openers = {"someone is doing a", "the person shows a", "a clip of a",
                                                   "this video shows a"};
  static const std::vector<std::string> closers = {"outdoors", "indoors", "again", "together"};
  return openers[variant % openers.size()] + " " + category_name + " " + closers[(variant / 4) % closers.size()];
}

inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  if (spec.margin <= 1.0 && spec.noise > 0.0) {
    ds.warnings.push_back("margin does not exceed the noise scale; the dataset may be unlearnable");
  }
  const std::size_t F = spec.frame_dim;
  const std::size_t C = spec.categories;
  Rng basis_rng = make_rng(spec.prototype_seed, "prototype-basis");
  const auto basis = data_detail::orthonormal_basis(spec.basis_size(), F, basis_rng);
  // Distances are measured in units of the noise scale (or 1 without noise).
  const double reference = spec.noise > 0.0 ? spec.noise : 1.0;
  const double s = spec.margin * reference / std::sqrt(2.0);

  auto direction = [&](std::initializer_list<std::size_t> parts) {
    Tensor<float> p = Tensor<float>::matrix(1, F);
    for (std::size_t b : parts)
      for (std::size_t i = 0; i < F; ++i) p[i] += static_cast<float>(s * basis[b][i]);
    return p;
  };

  // Order task: category 2i plays state 2i then 2i+1; category 2i+1 plays
  // them the other way round. Names are consecutive opposite actions.
  std::vector<std::pair<std::size_t, std::size_t>> order_states;
  if (spec.kind == TaskKind::order) {
    if (C > lexicon::actions().size()) throw std::invalid_argument("SyntheticSpec: too many categories for names");
    for (std::size_t c = 0; c < C; ++c) {
      ds.category_names.push_back(lexicon::actions()[c]);
      const std::size_t a = c - c % 2, b = a + 1;
      order_states.push_back(c % 2 == 0 ? std::pair{a, b} : std::pair{b, a});
      ds.prototypes.push_back(direction({a, b}));
    }
  } else if (spec.naming == Naming::single) {
    if (C > lexicon::actions().size()) throw std::invalid_argument("SyntheticSpec: too many categories for names");
    for (std::size_t c = 0; c < C; ++c) {
      ds.category_names.push_back(lexicon::actions()[c]);
      ds.prototypes.push_back(direction({c}));
    }
  } else {
    const auto [nm, na] = spec.grid();
    if (nm > lexicon::modifiers().size() || na > lexicon::actions().size()) {
      throw std::invalid_argument("SyntheticSpec: too many categories for names");
    }
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t m = c / na, a = c % na;
      ds.category_names.push_back(lexicon::modifiers()[m] + " " + lexicon::actions()[a]);
      ds.prototypes.push_back(direction({m, nm + a}));
    }
  }

  auto state_row = [&](std::size_t state) { return direction({state}); };

  auto make_trimmed = [&](std::size_t c, const std::string& split, std::size_t index) {
    VideoSample v;
    v.id = data_detail::video_id(split, index);
    v.split = split;
    v.label = static_cast<int>(c);
    const std::size_t len = uniform_index(rng, spec.min_frames, spec.max_frames);
    v.frames = Tensor<float>::matrix(len, F);
    std::vector<double> drift_dir(F);
    {
      std::normal_distribution<double> n01(0.0, 1.0);
      double norm = 0.0;
      for (auto& x : drift_dir) {
        x = n01(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (auto& x : drift_dir) x *= spec.drift * reference / norm;
    }
    std::size_t cut = 0;
    Tensor<float> first, second;
    if (spec.kind == TaskKind::order) {
      // The switch lands in the middle fifth so every clip sees both states.
      const std::size_t lo = std::max<std::size_t>(1, (len * 3) / 8), hi = std::max(lo, (len * 5) / 8);
      cut = uniform_index(rng, lo, hi);
      first = state_row(order_states[c].first);
      second = state_row(order_states[c].second);
    }
    for (std::size_t t = 0; t < len; ++t) {
      auto row = v.frames.row(t);
      const Tensor<float>& base =
          spec.kind == TaskKind::order ? (t < cut ? first : second) : ds.prototypes[c];
      const double phase = len > 1 ? static_cast<double>(t) / static_cast<double>(len - 1) - 0.5 : 0.0;
      for (std::size_t i = 0; i < F; ++i) row[i] = static_cast<float>(base[i] + phase * drift_dir[i]);
      data_detail::add_noise(row, spec.noise, rng);
    }
    if (spec.kind == TaskKind::retrieval) v.query = retrieval_sentence(ds.category_names[c], index);
    return v;
  };

  auto make_untrimmed = [&](const std::string& split, std::size_t index) {
    VideoSample v;
    v.id = data_detail::video_id(split, index);
    v.split = split;
    const std::size_t n = uniform_index(rng, spec.min_instances, spec.max_instances);
    std::vector<std::pair<std::size_t, std::size_t>> pieces;  // (class or C for background, length)
    pieces.emplace_back(C, uniform_index(rng, spec.min_background_frames, spec.max_background_frames));
    for (std::size_t i = 0; i < n; ++i) {
      pieces.emplace_back(uniform_index(rng, 0, C - 1),
                          uniform_index(rng, spec.min_instance_frames, spec.max_instance_frames));
      pieces.emplace_back(C, uniform_index(rng, spec.min_background_frames, spec.max_background_frames));
    }
    std::size_t total = 0;
    for (const auto& [_, len] : pieces) total += len;
    total = std::max<std::size_t>(total, 1);
    v.frames = Tensor<float>::matrix(total, F);
    v.dense_labels.assign(total, -1);
    std::size_t t = 0;
    for (const auto& [cls, len] : pieces) {
      if (cls < C) v.instances.push_back(TemporalInstance{static_cast<int>(cls), double(t), double(t + len)});
      for (std::size_t j = 0; j < len; ++j, ++t) {
        auto row = v.frames.row(t);
        if (cls < C) {
          for (std::size_t i = 0; i < F; ++i) row[i] = ds.prototypes[cls][i];
          v.dense_labels[t] = static_cast<int>(cls);
        }
        data_detail::add_noise(row, spec.noise, rng);
      }
    }
    return v;
  };

  for (const std::string split : {"train", "val"}) {
    const std::size_t per = split == "train" ? spec.train_per_category : spec.val_per_category;
    std::size_t index = 0;
    if (spec.kind == TaskKind::localisation) {
      for (std::size_t i = 0; i < per * C; ++i) ds.videos.push_back(make_untrimmed(split, index++));
      continue;
    }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < per; ++i) ds.videos.push_back(make_trimmed(c, split, index++));
  }
  return ds;
}

// Accuracy of assigning each video of `split` to the prototype nearest to
// its mean frame. Only meaningful for recognition-style datasets.
inline double nearest_prototype_accuracy(const Dataset& ds, const std::string& split) {
  std::size_t hits = 0, total = 0;
  for (const auto& v : ds.videos) {
    if (v.split != split || v.label < 0) continue;
    const Tensor<float> mean = kernels::mean_of_rows(v.frames);
    double best = std::numeric_limits<double>::infinity();
    int arg = -1;
    for (std::size_t c = 0; c < ds.prototypes.size(); ++c) {
      double d = 0.0;
      for (std::size_t i = 0; i < mean.size(); ++i) {
        const double e = double(mean[i]) - double(ds.prototypes[c][i]);
        d += e * e;
      }
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    hits += arg == v.label;
    ++total;
  }
  if (total == 0) throw std::invalid_argument("nearest_prototype_accuracy: no labelled videos in split " + split);
  return static_cast<double>(hits) / static_cast<double>(total);
}

struct Episode {
  std::vector<int> categories;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
};

namespace data_detail {

inline std::map<int, std::vector<std::size_t>> by_label(std::span<const VideoSample> pool,
                                                        std::span<const std::size_t> members) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i : members) {
    if (pool[i].label < 0) throw std::invalid_argument("episode sampling needs labelled videos");
    out[pool[i].label].push_back(i);
  }
  return out;
}

// First `count` entries of a uniform random permutation.
template <class U>
std::vector<U> sample_without_replacement(std::vector<U> items, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count && i < items.size(); ++i) {
    std::swap(items[i], items[uniform_index(rng, i, items.size() - 1)]);
  }
  items.resize(std::min(count, items.size()));
  return items;
}

}  // namespace data_detail

// N categories drawn without replacement; K support videos per category, the
// remaining videos of those categories form the query set.
inline Episode sample_few_shot_episode(std::span<const VideoSample> pool, std::span<const std::size_t> members,
                                       std::size_t ways, std::size_t shots, Rng& rng,
                                       const std::vector<std::string>* names = nullptr) {
  if (ways < 1 || shots < 1) throw std::invalid_argument("sample_few_shot_episode: ways and shots must be >= 1");
  const auto groups = data_detail::by_label(pool, members);
  if (groups.size() < ways) {
    throw std::invalid_argument("sample_few_shot_episode: pool has " + std::to_string(groups.size()) +
                                " categories, " + std::to_string(ways) + " ways requested");
  }
  for (const auto& [label, vids] : groups) {
    if (vids.size() <= shots) {
      const std::string name = names && label < static_cast<int>(names->size()) ? (*names)[label]
                                                                                : std::to_string(label);
      throw std::invalid_argument("sample_few_shot_episode: category '" + name + "' has " +
                                  std::to_string(vids.size()) + " videos, needs more than " + std::to_string(shots));
    }
  }
  std::vector<int> labels;
  for (const auto& [label, _] : groups) labels.push_back(label);
  Episode ep;
  ep.categories = data_detail::sample_without_replacement(labels, ways, rng);
  for (int c : ep.categories) {
    std::vector<std::size_t> shuffled = data_detail::sample_without_replacement(groups.at(c), groups.at(c).size(), rng);
    ep.support.insert(ep.support.end(), shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(shots));
    ep.query.insert(ep.query.end(), shuffled.begin() + static_cast<std::ptrdiff_t>(shots), shuffled.end());
  }
  return ep;
}

struct SupportSet {
  std::vector<std::size_t> support;
  std::vector<std::size_t> test;
};

// K training videos per category; the test split is used as is.
inline SupportSet build_c_way_support(const Dataset& ds, std::size_t shots, Rng& rng) {
  if (shots < 1) throw std::invalid_argument("build_c_way_support: shots must be >= 1");
  const auto train = ds.indices("train");
  const auto groups = data_detail::by_label(ds.videos, train);
  SupportSet out;
  for (std::size_t c = 0; c < ds.category_names.size(); ++c) {
    auto it = groups.find(static_cast<int>(c));
    const std::size_t have = it == groups.end() ? 0 : it->second.size();
    if (have < shots) {
      throw std::invalid_argument("build_c_way_support: category '" + ds.category_names[c] + "' has " +
                                  std::to_string(have) + " training videos, needs " + std::to_string(shots));
    }
    auto picked = data_detail::sample_without_replacement(it->second, shots, rng);
    out.support.insert(out.support.end(), picked.begin(), picked.end());
  }
  out.test = ds.indices("val");
  return out;
}

struct SplitSpec {
  std::vector<int> train_categories;
  std::vector<int> val_categories;
  std::size_t trials = 1;
  std::uint64_t seed = 0;

  bool disjoint() const {
    std::set<int> a(train_categories.begin(), train_categories.end());
    for (int c : val_categories)
      if (a.count(c)) return false;
    return true;
  }

  void validate_zero_shot() const {
    if (train_categories.empty() || val_categories.empty()) {
      throw std::invalid_argument("SplitSpec: zero-shot split needs both sides non-empty");
    }
    if (!disjoint()) throw std::invalid_argument("SplitSpec: zero-shot train and val categories overlap");
  }
};

// Uniform disjoint partition; the train side gets floor(fraction * n).
inline SplitSpec split_zero_shot(std::vector<int> categories, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_zero_shot: fraction must be in (0, 1)");
  const std::size_t n = categories.size();
  const auto n_train = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n) {
    throw std::invalid_argument("split_zero_shot: fraction " + std::to_string(fraction) + " over " +
                                std::to_string(n) + " categories leaves one side empty");
  }
  auto perm = data_detail::sample_without_replacement(std::move(categories), n, rng);
  SplitSpec s;
  s.train_categories.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val_categories.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(s.train_categories.begin(), s.train_categories.end());
  std::sort(s.val_categories.begin(), s.val_categories.end());
  return s;
}

// Videos with instances on both sides are duplicated, each copy keeping only
// its side's instances (and dense labels). Single-side videos pass through.
inline std::pair<std::vector<VideoSample>, std::vector<VideoSample>> divide_multilabel_videos(
    const std::vector<VideoSample>& videos, const SplitSpec& split) {
  const std::set<int> train(split.train_categories.begin(), split.train_categories.end());
  const std::set<int> val(split.val_categories.begin(), split.val_categories.end());
  std::vector<VideoSample> train_out, val_out;
  auto restrict = [](const VideoSample& v, const std::set<int>& side, const std::string& suffix) {
    VideoSample copy = v;
    copy.id += suffix;
    copy.instances.clear();
    for (const auto& inst : v.instances)
      if (side.count(inst.class_id)) copy.instances.push_back(inst);
    for (auto& l : copy.dense_labels)
      if (l >= 0 && !side.count(l)) l = -1;
    return copy;
  };
  for (const auto& v : videos) {
    bool has_train = false, has_val = false;
    for (const auto& inst : v.instances) {
      const bool t = train.count(inst.class_id) != 0, w = val.count(inst.class_id) != 0;
      if (t == w) {
        throw std::invalid_argument("divide_multilabel_videos: instance of category " +
                                    std::to_string(inst.class_id) + " in video " + v.id +
                                    (t ? " lies on both sides" : " lies on neither side"));
      }
      has_train = has_train || t;
      has_val = has_val || w;
    }
    if (has_train && has_val) {
      train_out.push_back(restrict(v, train, "/train"));
      val_out.push_back(restrict(v, val, "/val"));
    } else if (has_val) {
      val_out.push_back(v);
    } else if (has_train) {
      train_out.push_back(v);
    }
  }
  return {std::move(train_out), std::move(val_out)};
}

}  // namespace vidprompt
