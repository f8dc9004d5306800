#pragma once

#include <Eigen/Eigenvalues>
#include <vector>

#include "planeloc/depth_map.hpp"
#include "planeloc/primitives.hpp"
#include "planeloc/rng.hpp"

namespace planeloc {

struct RansacConfig {
  double distance_threshold = 0.10;  // meters
  double normal_dot_threshold = 0.9; // cos of allowed normal deviation
  int max_primitives = 16;
  double min_inlier_fraction = 0.01; // of all pixels / points
  int hypotheses_per_plane = 512;
  double min_area = 0.01; // m^2, point-cloud primitives below are dropped
  int downsample = 1;     // depth grid decimation before extraction
  uint64_t rng_seed = 0;
};

// Intrinsics matching downsample_depth's grid.
inline Intrinsics downsample_intrinsics(const Intrinsics& k, int factor) {
  if (factor <= 1) return k;
  const double f = static_cast<double>(factor);
  return {k.fx / f, k.fy / f, k.cx / f, k.cy / f, k.width / factor, k.height / factor};
}

// Per-pixel back-projection of a depth map with camera-facing normals.
struct OrganizedCloud {
  int width = 0, height = 0;
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<uint8_t> point_valid;
  std::vector<uint8_t> normal_valid;
  std::vector<uint8_t> border; // normal from one-sided differences

  size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
  bool usable(size_t i) const { return point_valid[i] && normal_valid[i]; }
};

// Unprojects every valid pixel and estimates normals from the cross product
// of the image-space tangents. Central differences where both neighbors are
// valid, one-sided at borders and next to holes; normals are flipped to face
// the camera (n.x < 0).
inline OrganizedCloud unproject_depth(const DepthMap& depth, const Intrinsics& k) {
  OrganizedCloud c;
  c.width = depth.width;
  c.height = depth.height;
  const size_t n = static_cast<size_t>(depth.width) * depth.height;
  c.points.assign(n, Vec3::Zero());
  c.normals.assign(n, Vec3::Zero());
  c.point_valid.assign(n, 0);
  c.normal_valid.assign(n, 0);
  c.border.assign(n, 0);

  for (int y = 0; y < depth.height; ++y)
    for (int x = 0; x < depth.width; ++x) {
      if (!depth.valid_at(x, y)) continue;
      const size_t i = c.idx(x, y);
      c.points[i] = unproject(k, Vec2(x, y), depth.at(x, y));
      c.point_valid[i] = 1;
    }

  auto tangent = [&](int x, int y, int dx, int dy, bool& onesided) -> std::optional<Vec3> {
    const int xp = x + dx, yp = y + dy, xm = x - dx, ym = y - dy;
    const bool has_p = depth.valid_at(xp, yp);
    const bool has_m = depth.valid_at(xm, ym);
    if (has_p && has_m)
      return c.points[c.idx(xp, yp)] - c.points[c.idx(xm, ym)];
    onesided = true;
    if (has_p) return c.points[c.idx(xp, yp)] - c.points[c.idx(x, y)];
    if (has_m) return c.points[c.idx(x, y)] - c.points[c.idx(xm, ym)];
    return std::nullopt;
  };

  for (int y = 0; y < depth.height; ++y)
    for (int x = 0; x < depth.width; ++x) {
      const size_t i = c.idx(x, y);
      if (!c.point_valid[i]) continue;
      bool onesided = false;
      const auto tu = tangent(x, y, 1, 0, onesided);
      const auto tv = tangent(x, y, 0, 1, onesided);
      if (!tu || !tv) continue;
      Vec3 nrm = tu->cross(*tv);
      const double len = nrm.norm();
      if (len < 1e-15) continue;
      nrm /= len;
      if (nrm.dot(c.points[i]) > 0) nrm = -nrm;
      c.normals[i] = nrm;
      c.normal_valid[i] = 1;
      c.border[i] = onesided ? 1 : 0;
    }
  return c;
}

namespace detail {

struct TlsPlane {
  Plane plane;
  Vec3 centroid;
};

// Total-least-squares plane through a point subset (smallest scatter
// eigenvector).
template <typename PointAt>
inline TlsPlane fit_plane_tls(PointAt&& point_at, std::span<const int> idx) {
  Vec3 c = Vec3::Zero();
  for (int i : idx) c += point_at(i);
  c /= static_cast<double>(idx.size());
  Mat3 scatter = Mat3::Zero();
  for (int i : idx) {
    const Vec3 d = point_at(i) - c;
    scatter += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
  Vec3 n = eig.eigenvectors().col(0).normalized();
  TlsPlane out;
  out.plane.normal = n;
  out.plane.offset = -n.dot(c);
  out.centroid = c;
  return out;
}

inline Plane plane_from_points(const Vec3& a, const Vec3& b, const Vec3& c,
                               bool& ok) {
  Vec3 n = (b - a).cross(c - a);
  const double len = n.norm();
  ok = len > 1e-12;
  if (!ok) return {};
  n /= len;
  return Plane(n, -n.dot(a));
}

} // namespace detail

// Greedy plane extraction from an organized cloud. Each accepted plane is
// refit to its consensus set; the final mask is the refit plane's inlier set,
// which is removed before the next round.
inline std::vector<QueryPrimitive> sequential_ransac_depth(const OrganizedCloud& cloud,
                                                           const RansacConfig& cfg) {
  std::vector<int> remaining;
  for (size_t i = 0; i < cloud.points.size(); ++i)
    if (cloud.usable(i)) remaining.push_back(static_cast<int>(i));
  if (remaining.size() < 3)
    throw NoPlaneFound("sequential_ransac_depth: fewer than 3 valid pixels");

  const double total_pixels = static_cast<double>(cloud.width) * cloud.height;
  const size_t min_inliers = std::max<size_t>(
      3, static_cast<size_t>(cfg.min_inlier_fraction * total_pixels));

  Rng rng = make_rng(cfg.rng_seed);
  std::vector<QueryPrimitive> out;
  std::vector<int> inliers, mask_px;

  auto collect_inliers = [&](const Plane& pl, std::vector<int>& dst) {
    dst.clear();
    const Vec3 n = pl.normal;
    for (int i : remaining) {
      if (std::abs(n.dot(cloud.points[i]) + pl.offset) >= cfg.distance_threshold)
        continue;
      if (n.dot(cloud.normals[i]) <= cfg.normal_dot_threshold) continue;
      dst.push_back(i);
    }
  };

  while (static_cast<int>(out.size()) < cfg.max_primitives && remaining.size() >= 3) {
    std::uniform_int_distribution<size_t> pick(0, remaining.size() - 1);
    size_t best_count = 0;
    Plane best_plane;
    for (int h = 0; h < cfg.hypotheses_per_plane; ++h) {
      const int a = remaining[pick(rng)];
      const int b = remaining[pick(rng)];
      const int c = remaining[pick(rng)];
      if (a == b || a == c || b == c) continue;
      bool ok = false;
      Plane hyp = detail::plane_from_points(cloud.points[a], cloud.points[b],
                                            cloud.points[c], ok);
      if (!ok) continue;
      if (hyp.normal.dot(cloud.points[a]) > 0) {
        hyp.normal = -hyp.normal;
        hyp.offset = -hyp.offset;
      }
      size_t count = 0;
      const Vec3 n = hyp.normal;
      for (int i : remaining) {
        if (std::abs(n.dot(cloud.points[i]) + hyp.offset) >= cfg.distance_threshold)
          continue;
        if (n.dot(cloud.normals[i]) <= cfg.normal_dot_threshold) continue;
        ++count;
      }
      if (count > best_count) {
        best_count = count;
        best_plane = hyp;
      }
    }
    if (best_count < min_inliers) {
      if (out.empty())
        throw NoPlaneFound("sequential_ransac_depth: no hypothesis reached the "
                           "minimum inlier count");
      break;
    }

    collect_inliers(best_plane, inliers);
    auto fit = detail::fit_plane_tls(
        [&](int i) { return cloud.points[i]; }, inliers);
    if (fit.plane.normal.dot(fit.centroid) > 0) {
      fit.plane.normal = -fit.plane.normal;
      fit.plane.offset = -fit.plane.offset;
    }
    collect_inliers(fit.plane, mask_px);
    if (mask_px.size() < 3) break;

    QueryPrimitive prim;
    prim.plane = fit.plane;
    prim.mask = Mask(cloud.width, cloud.height);
    for (int i : mask_px)
      prim.mask.set(i % cloud.width, i / cloud.width);
    prim.index = static_cast<int>(out.size());
    out.push_back(std::move(prim));

    std::vector<uint8_t> taken(cloud.points.size(), 0);
    for (int i : mask_px) taken[i] = 1;
    std::erase_if(remaining, [&](int i) { return taken[i] != 0; });
  }
  return out;
}

// Same loop on an unorganized point cloud (no normal test); each primitive's
// boundary is the convex hull of its inliers in the plane's local frame.
inline std::vector<MapPrimitive> sequential_ransac_points(std::span<const Vec3> points,
                                                          const RansacConfig& cfg) {
  if (points.size() < 3)
    throw NoPlaneFound("sequential_ransac_points: fewer than 3 points");
  std::vector<int> remaining(points.size());
  for (size_t i = 0; i < points.size(); ++i) remaining[i] = static_cast<int>(i);

  const double total = static_cast<double>(points.size());
  const size_t min_inliers =
      std::max<size_t>(3, static_cast<size_t>(cfg.min_inlier_fraction * total));

  Rng rng = make_rng(cfg.rng_seed);
  std::vector<MapPrimitive> out;
  std::vector<int> inliers, mask_pts;

  auto collect = [&](const Plane& pl, std::vector<int>& dst) {
    dst.clear();
    for (int i : remaining)
      if (std::abs(pl.signed_distance(points[i])) < cfg.distance_threshold)
        dst.push_back(i);
  };

  while (static_cast<int>(out.size()) < cfg.max_primitives && remaining.size() >= 3) {
    std::uniform_int_distribution<size_t> pick(0, remaining.size() - 1);
    size_t best_count = 0;
    Plane best_plane;
    for (int h = 0; h < cfg.hypotheses_per_plane; ++h) {
      const int a = remaining[pick(rng)];
      const int b = remaining[pick(rng)];
      const int c = remaining[pick(rng)];
      if (a == b || a == c || b == c) continue;
      bool ok = false;
      const Plane hyp = detail::plane_from_points(points[a], points[b], points[c], ok);
      if (!ok) continue;
      size_t count = 0;
      for (int i : remaining)
        if (std::abs(hyp.signed_distance(points[i])) < cfg.distance_threshold) ++count;
      if (count > best_count) {
        best_count = count;
        best_plane = hyp;
      }
    }
    if (best_count < min_inliers) {
      if (out.empty())
        throw NoPlaneFound("sequential_ransac_points: no hypothesis reached the "
                           "minimum inlier count");
      break;
    }

    collect(best_plane, inliers);
    auto fit = detail::fit_plane_tls([&](int i) { return points[i]; }, inliers);
    // deterministic sign: largest normal component positive
    int major = 0;
    fit.plane.normal.cwiseAbs().maxCoeff(&major);
    if (fit.plane.normal[major] < 0) {
      fit.plane.normal = -fit.plane.normal;
      fit.plane.offset = -fit.plane.offset;
    }
    collect(fit.plane, mask_pts);
    if (mask_pts.size() < 3) break;

    const auto [u, v] = plane_basis(fit.plane.normal);
    const Vec3 origin = fit.centroid - fit.plane.signed_distance(fit.centroid) *
                                           fit.plane.normal;
    std::vector<Vec2> local;
    local.reserve(mask_pts.size());
    for (int i : mask_pts) {
      const Vec3 p = points[i] - fit.plane.signed_distance(points[i]) *
                                     fit.plane.normal; // project onto plane
      local.emplace_back(u.dot(p - origin), v.dot(p - origin));
    }
    const std::vector<Vec2> hull = convex_hull_2d(local);

    std::vector<uint8_t> taken(points.size(), 0);
    for (int i : mask_pts) taken[i] = 1;
    std::erase_if(remaining, [&](int i) { return taken[i] != 0; });

    if (hull.size() < 3) continue;
    MapPrimitive prim;
    prim.plane = fit.plane;
    prim.boundary.reserve(hull.size());
    for (const Vec2& q : hull)
      prim.boundary.push_back(origin + q.x() * u + q.y() * v);
    prim.area = polygon_area(prim.boundary);
    if (prim.area < cfg.min_area) continue;
    prim.index = static_cast<int>(out.size());
    prim.sample_points = sample_primitive_points(prim, 1024,
                                                 derive_seed(cfg.rng_seed, out.size()));
    out.push_back(std::move(prim));
  }
  return out;
}

} // namespace planeloc
