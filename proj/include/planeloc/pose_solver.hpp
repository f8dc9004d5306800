#pragma once

#include <optional>
#include <vector>

#include "planeloc/primitives.hpp"
#include "planeloc/rng.hpp"

namespace planeloc {

struct PlaneCorrespondence {
  Plane query;     // camera frame, offset possibly mis-scaled
  Plane map;       // map frame
  double weight = 1; // query segment pixel count
  int query_idx = -1, map_idx = -1;
};

struct SolverConfig {
  int ransac_iterations = 1024;
  double inlier_angle_threshold_deg = 5.0;
  double min_normal_separation_deg = 5.0;
  uint64_t rng_seed = 0;
};

struct PoseEstimate {
  Pose pose;
  double scale = 1;
  std::vector<int> inliers;
  bool degenerate = false;
  bool fallback_used = false;
  bool scale_observable = true;
};

// Rotation from two plane pairs with non-parallel normals: aligns the
// orthonormal triads built from the query and map normal pairs.
inline Mat3 minimal_rotation(const PlaneCorrespondence& a,
                             const PlaneCorrespondence& b,
                             double min_separation_rad = deg2rad(5.0)) {
  auto triad = [&](const Vec3& n0, const Vec3& n1) {
    if (directed_angle(n0, n1) < min_separation_rad ||
        directed_angle(n0, -n1) < min_separation_rad)
      throw ParallelNormals("minimal_rotation: normals too close to parallel");
    const Vec3 u = n0.normalized();
    const Vec3 w = n1 - n1.dot(u) * u;
    const Vec3 v = w.normalized();
    Mat3 t;
    t.col(0) = u;
    t.col(1) = v;
    t.col(2) = u.cross(v);
    return t;
  };
  const Mat3 tq = triad(a.query.normal, b.query.normal);
  const Mat3 tm = triad(a.map.normal, b.map.normal);
  return tm * tq.transpose();
}

// Two-pair RANSAC over rotation hypotheses; inliers by the angle between the
// rotated query normal and the map normal. Ties in inlier count break toward
// the lower total angular residual.
inline std::pair<std::vector<int>, Mat3> ransac_rotation(
    std::span<const PlaneCorrespondence> corrs, const SolverConfig& cfg) {
  if (corrs.size() < 2)
    throw InsufficientCorrespondences("ransac_rotation: need at least 2 correspondences");
  const double min_sep = deg2rad(cfg.min_normal_separation_deg);
  auto pair_valid = [&](size_t a, size_t b) {
    return directed_angle(corrs[a].query.normal, corrs[b].query.normal) >= min_sep &&
           directed_angle(corrs[a].query.normal, -corrs[b].query.normal) >= min_sep &&
           directed_angle(corrs[a].map.normal, corrs[b].map.normal) >= min_sep &&
           directed_angle(corrs[a].map.normal, -corrs[b].map.normal) >= min_sep;
  };
  bool any_valid = false;
  for (size_t a = 0; a < corrs.size() && !any_valid; ++a)
    for (size_t b = a + 1; b < corrs.size() && !any_valid; ++b)
      any_valid = pair_valid(a, b);
  if (!any_valid)
    throw AllPairsParallel("ransac_rotation: every query pair is near parallel");

  Rng rng = make_rng(cfg.rng_seed);
  std::uniform_int_distribution<size_t> pick(0, corrs.size() - 1);
  const double thresh = deg2rad(cfg.inlier_angle_threshold_deg);

  std::vector<int> best_inliers;
  Mat3 best_rot = Mat3::Identity();
  double best_residual = std::numeric_limits<double>::infinity();
  std::vector<int> inliers;
  for (int it = 0; it < cfg.ransac_iterations; ++it) {
    size_t a = pick(rng), b = pick(rng);
    int guard = 0;
    while ((a == b || !pair_valid(a, b)) && guard++ < 256) {
      a = pick(rng);
      b = pick(rng);
    }
    if (a == b || !pair_valid(a, b)) continue;
    const Mat3 r = minimal_rotation(corrs[a], corrs[b], min_sep);
    inliers.clear();
    double residual = 0;
    for (size_t i = 0; i < corrs.size(); ++i) {
      const double ang = directed_angle(r * corrs[i].query.normal, corrs[i].map.normal);
      if (ang <= thresh) {
        inliers.push_back(static_cast<int>(i));
        residual += ang;
      }
    }
    if (inliers.size() > best_inliers.size() ||
        (inliers.size() == best_inliers.size() && residual < best_residual)) {
      best_inliers = inliers;
      best_rot = r;
      best_residual = residual;
    }
  }
  return {std::move(best_inliers), best_rot};
}

inline Mat3 refine_rotation(std::span<const PlaneCorrespondence> inliers) {
  std::vector<std::pair<Vec3, Vec3>> pairs;
  std::vector<double> weights;
  pairs.reserve(inliers.size());
  for (const PlaneCorrespondence& c : inliers) {
    pairs.emplace_back(c.query.normal, c.map.normal);
    weights.push_back(c.weight);
  }
  return kabsch(pairs, weights);
}

struct TranslationScale {
  Vec3 translation = Vec3::Zero();
  double scale = 1;
  bool scale_observable = true;
};

// Weighted least squares for translation and the monocular scale factor.
// Zero residual at the true state: s d_q = d_m + t.n_m (the dual-transform
// offset relation). When every d_q vanishes the scale column is null, so s is
// pinned to 1 and flagged unobservable.
inline TranslationScale solve_translation_scale(
    std::span<const PlaneCorrespondence> inliers) {
  if (inliers.size() < 3)
    throw RankDeficient("solve_translation_scale: need at least 3 inliers");
  const Eigen::Index n = static_cast<Eigen::Index>(inliers.size());

  MatX normals(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    normals.row(i) = inliers[i].map.normal.transpose();
  Eigen::JacobiSVD<MatX> svd(normals);
  if (svd.singularValues().minCoeff() <= 1e-6)
    throw RankDeficient("solve_translation_scale: map normals do not span 3D");

  double dq_energy = 0;
  for (const PlaneCorrespondence& c : inliers)
    dq_energy += c.weight * c.query.offset * c.query.offset;
  // The scale column must be independent of the normal columns: with three
  // rows (or vanishing query offsets) the joint (t, s) system is singular, so
  // s is pinned to 1 and reported unobservable.
  bool with_scale = dq_energy >= 1e-9 && n >= 4;
  if (with_scale) {
    MatX a4(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sw = std::sqrt(inliers[i].weight);
      a4.row(i).head<3>() = sw * inliers[i].map.normal.transpose();
      a4(i, 3) = -sw * inliers[i].query.offset;
    }
    Eigen::JacobiSVD<MatX> svd4(a4);
    const auto& sv = svd4.singularValues();
    if (sv.minCoeff() <= 1e-9 * sv.maxCoeff()) with_scale = false;
  }

  const Eigen::Index cols = with_scale ? 4 : 3;
  MatX a(n, cols);
  VecX b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const PlaneCorrespondence& c = inliers[i];
    const double sw = std::sqrt(c.weight);
    a.row(i).head<3>() = sw * c.map.normal.transpose();
    if (with_scale) a(i, 3) = -sw * c.query.offset;
    b[i] = -sw * c.map.offset + (with_scale ? 0.0 : sw * c.query.offset);
  }
  const VecX x = a.colPivHouseholderQr().solve(b);
  TranslationScale out;
  out.translation = x.head<3>();
  out.scale = with_scale ? x[3] : 1.0;
  out.scale_observable = with_scale;
  return out;
}

// Fallback pose: view along the negated mean normal with a global up vector,
// centered on the mean of primitive centers pushed 2 m out along their
// normals.
inline Pose coarse_init_heuristic(std::span<const MapPrimitive> prims) {
  Vec3 mean_normal = Vec3::Zero();
  Vec3 center = Vec3::Zero();
  for (const MapPrimitive& p : prims) {
    mean_normal += p.plane.normal;
    center += p.centroid() + 2.0 * p.plane.normal;
  }
  center /= static_cast<double>(prims.size());
  Vec3 view = -mean_normal;
  if (view.norm() < 1e-9) view = -prims.front().plane.normal;
  view.normalize();

  Vec3 up(0, 0, 1);
  if (directed_angle(view, up) < deg2rad(1.0) || directed_angle(view, -up) < deg2rad(1.0))
    up = Vec3(0, 1, 0);
  const Vec3 x_cam = view.cross(up).normalized();
  const Vec3 y_cam = view.cross(x_cam);
  Pose pose;
  pose.rotation.col(0) = x_cam;
  pose.rotation.col(1) = y_cam;
  pose.rotation.col(2) = view;
  pose.translation = center;
  return pose;
}

struct Aabb {
  Vec3 min = Vec3::Zero(), max = Vec3::Zero();

  static Aabb of_map(std::span<const MapPrimitive> prims) {
    Aabb box;
    box.min = Vec3::Constant(std::numeric_limits<double>::infinity());
    box.max = -box.min;
    for (const MapPrimitive& p : prims)
      for (const Vec3& v : p.boundary) {
        box.min = box.min.cwiseMin(v);
        box.max = box.max.cwiseMax(v);
      }
    return box;
  }
};

inline Pose clamp_pose_to_bounds(const Pose& pose, const Aabb& box,
                                 double margin = 0.5) {
  Pose out = pose;
  const Vec3 lo = box.min - Vec3::Constant(margin);
  const Vec3 hi = box.max + Vec3::Constant(margin);
  out.translation = pose.translation.cwiseMax(lo).cwiseMin(hi);
  return out;
}

// Full robust estimation: rotation RANSAC, Kabsch refinement, translation and
// scale by weighted least squares. Any degeneracy falls back to the coarse
// heuristic over the map primitives the correspondences reference.
inline PoseEstimate estimate_pose(std::span<const PlaneCorrespondence> corrs,
                                  std::span<const MapPrimitive> map_prims,
                                  const SolverConfig& cfg) {
  PoseEstimate est;
  try {
    auto [inlier_idx, hyp] = ransac_rotation(corrs, cfg);
    std::vector<PlaneCorrespondence> inliers;
    inliers.reserve(inlier_idx.size());
    for (int i : inlier_idx) inliers.push_back(corrs[i]);
    est.pose.rotation = refine_rotation(inliers);
    const TranslationScale ts = solve_translation_scale(inliers);
    est.pose.translation = ts.translation;
    est.scale = ts.scale;
    est.scale_observable = ts.scale_observable;
    est.inliers = std::move(inlier_idx);
    return est;
  } catch (const Error&) {
    std::vector<MapPrimitive> referenced;
    std::vector<uint8_t> seen(map_prims.size(), 0);
    for (const PlaneCorrespondence& c : corrs)
      if (c.map_idx >= 0 && c.map_idx < static_cast<int>(map_prims.size()) &&
          !seen[c.map_idx]) {
        seen[c.map_idx] = 1;
        referenced.push_back(map_prims[c.map_idx]);
      }
    if (referenced.empty())
      for (const MapPrimitive& p : map_prims) referenced.push_back(p);
    est.pose = referenced.empty() ? Pose::identity() : coarse_init_heuristic(referenced);
    est.degenerate = true;
    est.fallback_used = true;
    est.scale = 1;
    est.inliers.clear();
    return est;
  }
}

} // namespace planeloc
