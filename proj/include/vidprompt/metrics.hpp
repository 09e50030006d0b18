// SPDX-License-Identifier: Apache-2.0
//
// Recognition, retrieval and temporal localisation metrics. All functions
// are pure and work in double precision.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vidprompt/video.hpp"

namespace vidprompt {

using ScoreMatrix = std::vector<std::vector<double>>;

template <class T>
ScoreMatrix to_score_matrix(const Tensor<T>& t) {
  ScoreMatrix out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = static_cast<double>(t(r, c));
  }
  return out;
}

// Position of class `c` in row ordering where higher scores come first and
// equal scores put the lower class id first.
inline std::size_t class_rank(std::span<const double> row, std::size_t c) {
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j] > row[c] || (row[j] == row[c] && j < c)) ++ahead;
  }
  return ahead;
}

inline std::size_t argmax(std::span<const double> row) {
  if (row.empty()) throw std::invalid_argument("argmax: empty row");
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

inline double top_k_accuracy(const ScoreMatrix& scores, std::span<const int> labels, std::size_t k) {
  if (scores.empty()) throw std::invalid_argument("top_k_accuracy: no rows");
  if (labels.size() != scores.size()) throw std::invalid_argument("top_k_accuracy: one label per row required");
  const std::size_t classes = scores.front().size();
  if (k < 1 || k > classes) throw std::invalid_argument("top_k_accuracy: k must be in [1, C]");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != classes) throw std::invalid_argument("top_k_accuracy: ragged score matrix");
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::invalid_argument("top_k_accuracy: label out of range");
    }
    if (class_rank(scores[i], static_cast<std::size_t>(labels[i])) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

struct RetrievalReport {
  std::vector<std::size_t> ranks;
  std::map<std::size_t, double> recall_at;
  std::size_t median_rank = 0;
};

// Query i matches item i. Equal scores count against the true item.
inline RetrievalReport retrieval_ranks(const ScoreMatrix& s, std::vector<std::size_t> ks = {1, 5, 10}) {
  const std::size_t n = s.size();
  if (n == 0) throw std::invalid_argument("retrieval_ranks: empty matrix");
  RetrievalReport rep;
  rep.ranks.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (s[i].size() != n) throw std::invalid_argument("retrieval_ranks: matrix must be square");
    std::size_t rank = 1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && s[i][j] >= s[i][i]) ++rank;
    }
    rep.ranks[i] = rank;
  }
  for (std::size_t k : ks) {
    const auto hit = std::count_if(rep.ranks.begin(), rep.ranks.end(), [k](std::size_t r) { return r <= k; });
    rep.recall_at[k] = static_cast<double>(hit) / static_cast<double>(n);
  }
  std::vector<std::size_t> sorted = rep.ranks;
  std::sort(sorted.begin(), sorted.end());
  rep.median_rank = sorted[(n - 1) / 2];
  return rep;
}

inline double interval_iou(const Proposal& a, const Proposal& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Detection {
  std::string video_id;
  Proposal proposal;
  int class_id = 0;
  double confidence = 0.0;
};

struct GroundTruthInstance {
  std::string video_id;
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;

  Proposal interval() const { return Proposal{start, end, 1.0}; }
};

inline constexpr double kSoftNmsMinScore = 1e-3;

// Linear Soft-NMS over one list (one class of one video). Selected
// detections are returned in selection order with their decayed scores.
inline std::vector<Detection> soft_nms(std::vector<Detection> dets, double iou_threshold) {
  for (const auto& d : dets) {
    if (d.confidence < 0.0 || d.confidence > 1.0) throw std::invalid_argument("soft_nms: scores must be in [0, 1]");
  }
  std::vector<std::size_t> alive(dets.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  std::vector<Detection> kept;
  while (!alive.empty()) {
    auto best = alive.begin();
    for (auto it = std::next(alive.begin()); it != alive.end(); ++it) {
      const Detection& c = dets[*it];
      const Detection& b = dets[*best];
      if (c.confidence > b.confidence ||
          (c.confidence == b.confidence && c.proposal.start < b.proposal.start)) {
        best = it;
      }
    }
    const std::size_t sel = *best;
    alive.erase(best);
    kept.push_back(dets[sel]);
    std::vector<std::size_t> next;
    for (std::size_t i : alive) {
      const double iou = interval_iou(dets[sel].proposal, dets[i].proposal);
      if (iou > iou_threshold) dets[i].confidence *= (1.0 - iou);
      if (dets[i].confidence >= kSoftNmsMinScore) next.push_back(i);
    }
    alive = std::move(next);
  }
  return kept;
}

// Applies soft_nms separately per (video, class); groups come out in key order.
inline std::vector<Detection> soft_nms_grouped(const std::vector<Detection>& dets, double iou_threshold) {
  std::map<std::pair<std::string, int>, std::vector<Detection>> groups;
  for (const auto& d : dets) groups[{d.video_id, d.class_id}].push_back(d);
  std::vector<Detection> out;
  for (auto& [_, g] : groups) {
    auto kept = soft_nms(std::move(g), iou_threshold);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

// Inclusive grid lo, lo + step, ..., hi, snapped to 1e-9 so that 1.0 is exact.
inline std::vector<double> iou_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw std::invalid_argument("iou_grid: bad range");
  std::vector<double> out;
  for (std::size_t i = 0;; ++i) {
    const double v = std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9;
    if (v > hi + 1e-12) break;
    out.push_back(v);
  }
  return out;
}

// Each prediction, in order, claims the unclaimed target with the highest
// IoU (lower index on ties) provided that IoU reaches the threshold.
// Returns, per prediction, whether it claimed a target.
inline std::vector<bool> greedy_match(std::span<const Proposal> predictions, std::span<const Proposal> targets,
                                      double threshold) {
  std::vector<bool> claimed(targets.size(), false), hit(predictions.size(), false);
  for (std::size_t p = 0; p < predictions.size(); ++p) {
    double best_iou = -1.0;
    std::size_t best = targets.size();
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (claimed[t]) continue;
      const double iou = interval_iou(predictions[p], targets[t]);
      if (iou >= threshold && iou > best_iou) {
        best_iou = iou;
        best = t;
      }
    }
    if (best < targets.size()) {
      claimed[best] = true;
      hit[p] = true;
    }
  }
  return hit;
}

// All-point interpolated AP from a hit sequence in confidence order.
inline double average_precision(const std::vector<bool>& hits, std::size_t ground_truth_count) {
  if (ground_truth_count == 0) throw std::invalid_argument("average_precision: no ground truth");
  const std::size_t n = hits.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(ground_truth_count);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct DetectionReport {
  std::vector<double> thresholds;
  std::vector<double> mean_ap;                    // per threshold
  std::map<int, std::vector<double>> class_ap;    // per class, per threshold
  double average = 0.0;
};

inline DetectionReport detection_map(const std::vector<Detection>& detections,
                                     const std::vector<GroundTruthInstance>& ground_truth,
                                     const std::vector<double>& thresholds) {
  if (ground_truth.empty()) throw std::invalid_argument("detection_map: no ground truth");
  if (thresholds.empty()) throw std::invalid_argument("detection_map: empty IoU set");
  std::map<int, std::map<std::string, std::vector<Proposal>>> gt_by_class;
  std::map<int, std::size_t> gt_count;
  for (const auto& g : ground_truth) {
    if (!(g.start < g.end)) throw std::invalid_argument("detection_map: ground truth needs start < end");
    gt_by_class[g.class_id][g.video_id].push_back(g.interval());
    ++gt_count[g.class_id];
  }
  std::map<int, std::vector<std::size_t>> det_by_class;
  for (std::size_t i = 0; i < detections.size(); ++i) det_by_class[detections[i].class_id].push_back(i);

  DetectionReport rep;
  rep.thresholds = thresholds;
  rep.mean_ap.assign(thresholds.size(), 0.0);
  for (const auto& [cls, videos] : gt_by_class) {
    std::vector<std::size_t> order = det_by_class[cls];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return detections[a].confidence > detections[b].confidence;
    });
    auto& aps = rep.class_ap[cls];
    for (double thr : thresholds) {
      std::map<std::string, std::vector<bool>> claimed;
      for (const auto& [vid, gts] : videos) claimed[vid].assign(gts.size(), false);
      std::vector<bool> hits;
      hits.reserve(order.size());
      for (std::size_t i : order) {
        const Detection& d = detections[i];
        auto vit = videos.find(d.video_id);
        bool hit = false;
        if (vit != videos.end()) {
          auto& used = claimed[d.video_id];
          double best_iou = -1.0;
          std::size_t best = used.size();
          for (std::size_t t = 0; t < vit->second.size(); ++t) {
            if (used[t]) continue;
            const double iou = interval_iou(d.proposal, vit->second[t]);
            if (iou >= thr && iou > best_iou) {
              best_iou = iou;
              best = t;
            }
          }
          if (best < used.size()) {
            used[best] = true;
            hit = true;
          }
        }
        hits.push_back(hit);
      }
      aps.push_back(average_precision(hits, gt_count[cls]));
    }
  }
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    double s = 0.0;
    for (const auto& [_, aps] : rep.class_ap) s += aps[t];
    rep.mean_ap[t] = s / static_cast<double>(rep.class_ap.size());
  }
  rep.average = std::accumulate(rep.mean_ap.begin(), rep.mean_ap.end(), 0.0) / static_cast<double>(thresholds.size());
  return rep;
}

// Class-agnostic recall of the top-AN proposals per video, averaged over the
// IoU grid. Proposals are ranked by score (stable), then matched greedily.
inline double average_recall_at_an(const std::map<std::string, std::vector<Proposal>>& proposals,
                                   const std::vector<GroundTruthInstance>& ground_truth, std::size_t an,
                                   const std::vector<double>& grid) {
  if (an < 1) throw std::invalid_argument("average_recall_at_an: AN must be >= 1");
  if (grid.empty()) throw std::invalid_argument("average_recall_at_an: empty IoU grid");
  if (ground_truth.empty()) return 0.0;
  std::map<std::string, std::vector<Proposal>> gt;
  for (const auto& g : ground_truth) gt[g.video_id].push_back(g.interval());
  std::map<std::string, std::vector<Proposal>> top;
  for (const auto& [vid, props] : proposals) {
    std::vector<Proposal> sorted = props;
    std::stable_sort(sorted.begin(), sorted.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    if (sorted.size() > an) sorted.resize(an);
    top[vid] = std::move(sorted);
  }
  double total = 0.0;
  for (double thr : grid) {
    std::size_t matched = 0;
    for (const auto& [vid, targets] : gt) {
      auto it = top.find(vid);
      if (it == top.end()) continue;
      const auto hits = greedy_match(it->second, targets, thr);
      matched += static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
    }
    total += static_cast<double>(matched) / static_cast<double>(ground_truth.size());
  }
  return total / static_cast<double>(grid.size());
}

struct ScoredProposal {
  std::string video_id;
  Proposal proposal;
  std::vector<double> class_scores;
};

// TOP1 over proposals overlapping some ground truth, each labelled by the
// instance of highest IoU. Absent when no proposal is retained.
inline std::optional<double> proposal_classification_accuracy(const std::vector<ScoredProposal>& proposals,
                                                              const std::vector<GroundTruthInstance>& ground_truth) {
  std::size_t retained = 0, correct = 0;
  for (const auto& p : proposals) {
    double best_iou = 0.0;
    const GroundTruthInstance* label = nullptr;
    for (const auto& g : ground_truth) {
      if (g.video_id != p.video_id) continue;
      const double iou = interval_iou(p.proposal, g.interval());
      if (iou > best_iou) {
        best_iou = iou;
        label = &g;
      }
    }
    if (!label) continue;
    ++retained;
    if (static_cast<int>(argmax(p.class_scores)) == label->class_id) ++correct;
  }
  if (retained == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(retained);
}

}  // namespace vidprompt
