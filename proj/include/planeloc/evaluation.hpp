#pragma once

#include <algorithm>
#include <vector>

#include "planeloc/matcher.hpp"

namespace planeloc {

struct RecallThreshold {
  double translation_m = 0;
  double rotation_deg = 0;
};

inline std::vector<RecallThreshold> default_recall_thresholds() {
  return {{0.05, 5.0}, {0.10, 10.0}, {0.25, 20.0}};
}

struct PoseMetrics {
  std::vector<double> rotation_errors_deg;
  std::vector<double> translation_errors_m;
  double mean_rotation_deg = 0, median_rotation_deg = 0;
  double mean_translation_m = 0, median_translation_m = 0;
  std::vector<double> recall; // aligned with thresholds
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

// Per-query pose errors plus recall: a query counts at a threshold pair when
// both errors are within bounds (inclusive).
inline PoseMetrics pose_metrics(std::span<const Pose> estimates,
                                std::span<const Pose> ground_truth,
                                std::span<const RecallThreshold> thresholds) {
  if (estimates.size() != ground_truth.size())
    throw LengthMismatch("pose_metrics: estimate/ground-truth count mismatch");
  PoseMetrics m;
  for (size_t i = 0; i < estimates.size(); ++i) {
    m.rotation_errors_deg.push_back(
        rotation_angle_deg(estimates[i].rotation, ground_truth[i].rotation));
    m.translation_errors_m.push_back(
        translation_distance(estimates[i].translation, ground_truth[i].translation));
  }
  const double n = static_cast<double>(std::max<size_t>(1, estimates.size()));
  for (double r : m.rotation_errors_deg) m.mean_rotation_deg += r / n;
  for (double t : m.translation_errors_m) m.mean_translation_m += t / n;
  m.median_rotation_deg = detail::median(m.rotation_errors_deg);
  m.median_translation_m = detail::median(m.translation_errors_m);
  for (const RecallThreshold& th : thresholds) {
    size_t hit = 0;
    for (size_t i = 0; i < estimates.size(); ++i)
      if (m.translation_errors_m[i] <= th.translation_m &&
          m.rotation_errors_deg[i] <= th.rotation_deg)
        ++hit;
    m.recall.push_back(estimates.empty() ? 0.0 : static_cast<double>(hit) / n);
  }
  return m;
}

struct MatchMetrics {
  double precision = 0, recall = 0, f1 = 0, ap = 0;
  size_t true_positives = 0, ground_truth_count = 0, predicted_count = 0;
};

// Precision/recall/F1 and step-wise average precision. A prediction is a true
// positive when it names the labeled map primitive for its query and the
// projected-mask IoU clears iou_min.
inline MatchMetrics match_metrics(std::span<const Correspondence> predictions,
                                  const MatchLabels& labels, const MatX& iou,
                                  double iou_min = 0.3) {
  MatchMetrics m;
  m.ground_truth_count = labels.matches.size();
  m.predicted_count = predictions.size();

  std::vector<int> gt_map_for_query;
  for (auto [i, j] : labels.matches) {
    if (static_cast<size_t>(i) >= gt_map_for_query.size())
      gt_map_for_query.resize(i + 1, -1);
    gt_map_for_query[i] = j;
  }
  auto is_tp = [&](const Correspondence& c) {
    if (c.query_idx < 0 || c.query_idx >= static_cast<int>(gt_map_for_query.size()))
      return false;
    if (gt_map_for_query[c.query_idx] != c.map_idx) return false;
    return iou(c.query_idx, c.map_idx) >= iou_min;
  };

  std::vector<Correspondence> ranked(predictions.begin(), predictions.end());
  std::sort(ranked.begin(), ranked.end(), [](const Correspondence& a,
                                             const Correspondence& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.query_idx != b.query_idx) return a.query_idx < b.query_idx;
    return a.map_idx < b.map_idx;
  });

  size_t tp = 0;
  double ap = 0;
  const double gt = static_cast<double>(std::max<size_t>(1, m.ground_truth_count));
  for (size_t rank = 0; rank < ranked.size(); ++rank) {
    if (is_tp(ranked[rank])) {
      ++tp;
      ap += (static_cast<double>(tp) / static_cast<double>(rank + 1)) / gt;
    }
  }
  m.true_positives = tp;
  m.precision = ranked.empty() ? 0.0 : static_cast<double>(tp) / ranked.size();
  m.recall = m.ground_truth_count == 0 ? 0.0 : static_cast<double>(tp) / gt;
  m.f1 = (m.precision + m.recall) > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  m.ap = m.ground_truth_count == 0 ? 0.0 : ap;
  return m;
}

// Threshold-swept PR points (score descending), for export.
inline std::vector<std::pair<double, double>> pr_curve(
    std::span<const Correspondence> predictions, const MatchLabels& labels,
    const MatX& iou, double iou_min = 0.3) {
  std::vector<int> gt_map_for_query;
  for (auto [i, j] : labels.matches) {
    if (static_cast<size_t>(i) >= gt_map_for_query.size())
      gt_map_for_query.resize(i + 1, -1);
    gt_map_for_query[i] = j;
  }
  std::vector<Correspondence> ranked(predictions.begin(), predictions.end());
  std::sort(ranked.begin(), ranked.end(), [](const Correspondence& a,
                                             const Correspondence& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.query_idx != b.query_idx) return a.query_idx < b.query_idx;
    return a.map_idx < b.map_idx;
  });
  std::vector<std::pair<double, double>> points;
  size_t tp = 0;
  const double gt = static_cast<double>(std::max<size_t>(1, labels.matches.size()));
  for (size_t rank = 0; rank < ranked.size(); ++rank) {
    const Correspondence& c = ranked[rank];
    const bool hit = c.query_idx >= 0 &&
                     c.query_idx < static_cast<int>(gt_map_for_query.size()) &&
                     gt_map_for_query[c.query_idx] == c.map_idx &&
                     iou(c.query_idx, c.map_idx) >= iou_min;
    if (hit) ++tp;
    points.emplace_back(static_cast<double>(tp) / gt,
                        static_cast<double>(tp) / static_cast<double>(rank + 1));
  }
  return points;
}

} // namespace planeloc
