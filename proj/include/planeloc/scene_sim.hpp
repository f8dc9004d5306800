#pragma once

#include <vector>

#include "planeloc/matcher.hpp"
#include "planeloc/refine.hpp"

namespace planeloc {

struct NoiseModel {
  double depth_sigma = 0;                 // per-pixel additive, meters
  double scale_min = 1.0, scale_max = 1.0; // per-query depth mis-scale
};

struct SceneSpec {
  Vec3 room_extents{5.0, 4.0, 2.8};
  int interior_count = 8;
  double interior_min_half = 0.3, interior_max_half = 0.8;
  // Minimum undirected angle between any two primitive normals; > ~26 deg
  // keeps the extraction normal-dot gate from bridging distinct surfaces.
  double interior_min_normal_angle_deg = 0;
  int camera_count = 10;
  int min_visible = 3;        // map primitives a query must capture
  int min_visible_pixels = 100;
  bool require_normal_spread = true; // visible normals must span 3D
  NoiseModel noise;
  Intrinsics intrinsics{260.0, 260.0, 160.0, 120.0, 320, 240};
  int max_rejections = 2000;
  uint64_t rng_seed = 0;
};

struct QueryRecord {
  Intrinsics intrinsics;
  Pose gt_pose;
  DepthMap depth; // possibly scaled and noised
  std::vector<QueryPrimitive> gt_primitives;
  MatchLabels gt_labels;
  double depth_scale = 1.0; // true monocular mis-scale s of this query
};

struct SyntheticScene {
  std::vector<MapPrimitive> map;
  std::vector<QueryRecord> queries;
};

namespace detail {

inline Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 v(g(rng), g(rng), g(rng));
  while (v.norm() < 1e-6) v = Vec3(g(rng), g(rng), g(rng));
  return v.normalized();
}

inline Pose look_at(const Vec3& eye, const Vec3& target) {
  Vec3 view = (target - eye).normalized();
  Vec3 up(0, 0, 1);
  if (std::abs(view.dot(up)) > std::cos(deg2rad(1.0))) up = Vec3(0, 1, 0);
  const Vec3 x_cam = view.cross(up).normalized();
  const Vec3 y_cam = view.cross(x_cam);
  Pose p;
  p.rotation.col(0) = x_cam;
  p.rotation.col(1) = y_cam;
  p.rotation.col(2) = view;
  p.translation = eye;
  return p;
}

inline std::vector<MapPrimitive> build_room(const SceneSpec& spec, Rng& rng) {
  std::vector<MapPrimitive> map;
  const Vec3 e = spec.room_extents;
  auto add = [&](const Vec3& center, const Vec3& normal, const Vec3& u, double hu,
                 double hv) {
    map.push_back(make_rect_primitive(center, normal, u, hu, hv,
                                      static_cast<int>(map.size())));
  };
  // shell, normals facing the interior
  add({e.x() / 2, e.y() / 2, 0}, {0, 0, 1}, {1, 0, 0}, e.x() / 2, e.y() / 2);
  add({e.x() / 2, e.y() / 2, e.z()}, {0, 0, -1}, {1, 0, 0}, e.x() / 2, e.y() / 2);
  add({0, e.y() / 2, e.z() / 2}, {1, 0, 0}, {0, 1, 0}, e.y() / 2, e.z() / 2);
  add({e.x(), e.y() / 2, e.z() / 2}, {-1, 0, 0}, {0, 1, 0}, e.y() / 2, e.z() / 2);
  add({e.x() / 2, 0, e.z() / 2}, {0, 1, 0}, {1, 0, 0}, e.x() / 2, e.z() / 2);
  add({e.x() / 2, e.y(), e.z() / 2}, {0, -1, 0}, {1, 0, 0}, e.x() / 2, e.z() / 2);

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_real_distribution<double> size(spec.interior_min_half,
                                              spec.interior_max_half);
  const double min_sep = deg2rad(spec.interior_min_normal_angle_deg);
  const double margin = 0.4;
  for (int i = 0; i < spec.interior_count; ++i) {
    const Vec3 center(margin + uni(rng) * (e.x() - 2 * margin),
                      margin + uni(rng) * (e.y() - 2 * margin),
                      margin + uni(rng) * (e.z() - 2 * margin));
    Vec3 normal = random_unit(rng);
    if (min_sep > 0) {
      for (int attempt = 0; attempt < 4096; ++attempt) {
        bool ok = true;
        for (const MapPrimitive& p : map)
          if (undirected_angle(normal, p.plane.normal) < min_sep) {
            ok = false;
            break;
          }
        if (ok) break;
        normal = random_unit(rng);
      }
    }
    Vec3 u_seed = random_unit(rng);
    while (std::abs(u_seed.dot(normal)) > 0.95) u_seed = random_unit(rng);
    add(center, normal, u_seed - u_seed.dot(normal) * normal, size(rng), size(rng));
  }
  return map;
}

} // namespace detail

// Procedural planar world: an axis-aligned room shell plus random interior
// rectangles, with cameras rejection-sampled until each view captures enough
// primitives (and, facing pose solvability, normals spanning 3D).
inline SyntheticScene synth_scene(const SceneSpec& spec) {
  Rng rng = make_rng(spec.rng_seed);
  SyntheticScene scene;
  scene.map = detail::build_room(spec, rng);
  const Intrinsics& k = spec.intrinsics;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Vec3 e = spec.room_extents;
  const double margin = 0.4;

  int rejections = 0;
  while (static_cast<int>(scene.queries.size()) < spec.camera_count) {
    if (rejections > spec.max_rejections)
      throw SamplingExhausted("synth_scene: camera rejection budget exhausted");
    const Vec3 eye(margin + uni(rng) * (e.x() - 2 * margin),
                   margin + uni(rng) * (e.y() - 2 * margin),
                   margin + uni(rng) * (e.z() - 2 * margin));
    const Vec3 target(margin + uni(rng) * (e.x() - 2 * margin),
                      margin + uni(rng) * (e.y() - 2 * margin),
                      margin + uni(rng) * (e.z() - 2 * margin));
    if ((target - eye).norm() < 0.5) {
      ++rejections;
      continue;
    }
    const Pose pose = detail::look_at(eye, target);
    const DepthMap clean = render_depth(scene.map, pose, k);

    std::vector<QueryPrimitive> gt_prims;
    std::vector<Vec3> visible_normals;
    for (const MapPrimitive& mp : scene.map) {
      Mask mask = project_primitive_mask(mp, pose, k, clean);
      if (static_cast<int>(mask.count()) < spec.min_visible_pixels) continue;
      QueryPrimitive qp;
      qp.plane = transform_plane(invert(pose), mp.plane);
      qp.mask = std::move(mask);
      qp.index = static_cast<int>(gt_prims.size());
      gt_prims.push_back(std::move(qp));
      visible_normals.push_back(mp.plane.normal);
    }
    if (static_cast<int>(gt_prims.size()) < spec.min_visible) {
      ++rejections;
      continue;
    }
    if (spec.require_normal_spread) {
      MatX n(visible_normals.size(), 3);
      for (size_t i = 0; i < visible_normals.size(); ++i)
        n.row(i) = visible_normals[i].transpose();
      Eigen::JacobiSVD<MatX> svd(n);
      if (svd.singularValues().minCoeff() < 0.1) {
        ++rejections;
        continue;
      }
    }

    QueryRecord rec;
    rec.intrinsics = k;
    rec.gt_pose = pose;
    rec.gt_labels = generate_labels(gt_prims, scene.map, pose, k, 0.5);
    rec.gt_primitives = std::move(gt_prims);

    rec.depth_scale = spec.noise.scale_min +
                      uni(rng) * (spec.noise.scale_max - spec.noise.scale_min);
    rec.depth = clean;
    if (rec.depth_scale != 1.0 || spec.noise.depth_sigma > 0) {
      for (double& v : rec.depth.data) {
        if (!clean.is_valid_value(v)) continue;
        v /= rec.depth_scale;
        if (spec.noise.depth_sigma > 0) v += spec.noise.depth_sigma * gauss(rng);
        if (v <= 0) v = rec.depth.invalid;
      }
    }
    scene.queries.push_back(std::move(rec));
  }
  return scene;
}

struct CorruptionResult {
  std::vector<PlaneCorrespondence> correspondences;
  std::vector<int> planted_inliers, planted_outliers;
};

// Noise and outlier injection for solver tests: inlier query planes get small
// normal rotations and offset noise, then offsets are divided by s to emulate
// monocular mis-scale; outlier query planes are replaced entirely.
inline CorruptionResult corrupt_correspondences(
    std::span<const PlaneCorrespondence> gt, double outlier_rate,
    double normal_noise_deg, double offset_noise_m, double scale, uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  const size_t n = gt.size();
  const size_t n_out = static_cast<size_t>(std::llround(outlier_rate * n));
  std::vector<int> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);

  CorruptionResult res;
  res.correspondences.assign(gt.begin(), gt.end());
  std::vector<uint8_t> is_outlier(n, 0);
  for (size_t i = 0; i < n_out; ++i) is_outlier[order[i]] = 1;

  for (size_t i = 0; i < n; ++i) {
    PlaneCorrespondence& c = res.correspondences[i];
    if (is_outlier[i]) {
      c.query.normal = detail::random_unit(rng);
      c.query.offset = -5.0 + 10.0 * uni(rng);
      res.planted_outliers.push_back(static_cast<int>(i));
      continue;
    }
    if (normal_noise_deg > 0) {
      Vec3 axis = detail::random_unit(rng).cross(c.query.normal);
      while (axis.norm() < 1e-6)
        axis = detail::random_unit(rng).cross(c.query.normal);
      axis.normalize();
      const double angle = deg2rad(normal_noise_deg) * gauss(rng);
      c.query.normal = (rotation_about(axis, angle) * c.query.normal).normalized();
    }
    if (offset_noise_m > 0) c.query.offset += offset_noise_m * gauss(rng);
    c.query.offset /= scale;
    res.planted_inliers.push_back(static_cast<int>(i));
  }
  return res;
}

// Synthetic embeddings: matched pairs share a Gaussian anchor plus noise of
// magnitude 1/separation; unmatched entries are drawn independently.
inline std::pair<MatX, MatX> synth_embeddings(const MatchLabels& labels, int nq,
                                              int nm, int c, double separation,
                                              uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto draw = [&](int dim) {
    VecX v(dim);
    for (int i = 0; i < dim; ++i) v[i] = gauss(rng);
    return v;
  };
  MatX fq = MatX::Zero(nq, c), fm = MatX::Zero(nm, c);
  std::vector<VecX> anchors(nm);
  for (int j = 0; j < nm; ++j) anchors[j] = draw(c);
  const double noise = separation > 0 ? 1.0 / separation : 0.0;
  std::vector<uint8_t> matched_map(nm, 0);
  for (auto [i, j] : labels.matches) matched_map[j] = 1;
  for (int j = 0; j < nm; ++j)
    fm.row(j) = (anchors[j] + noise * draw(c)).transpose();
  std::vector<int> label_of_query(nq, -1);
  for (auto [i, j] : labels.matches) label_of_query[i] = j;
  for (int i = 0; i < nq; ++i) {
    if (label_of_query[i] >= 0)
      fq.row(i) = (anchors[label_of_query[i]] + noise * draw(c)).transpose();
    else
      fq.row(i) = draw(c).transpose();
  }
  return {fq, fm};
}

} // namespace planeloc
