// Test-only oracles. These deliberately re-derive quantities through routes
// that are independent of the library code paths they are used to check.
#pragma once

#include <optional>
#include <random>

#include "planeloc/depth_map.hpp"
#include "planeloc/geometry.hpp"
#include "planeloc/primitives.hpp"

namespace oracles {

using planeloc::Mat3;
using planeloc::Plane;
using planeloc::Pose;
using planeloc::Vec2;
using planeloc::Vec3;

// Rotation angle in radians via atan2; unlike the arccos form this stays
// well-conditioned for tiny angles.
inline double rotation_angle_robust(const Mat3& ra, const Mat3& rb) {
  const Mat3 m = ra * rb.transpose();
  const Vec3 vee(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  return std::atan2(0.5 * vee.norm(), 0.5 * (m.trace() - 1.0));
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  while (q.norm() < 1e-9) q = Eigen::Quaterniond(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 v(g(rng), g(rng), g(rng));
  while (v.norm() < 1e-9) v = Vec3(g(rng), g(rng), g(rng));
  return v.normalized();
}

inline Pose random_pose(std::mt19937_64& rng, double t_range = 2.0) {
  std::uniform_real_distribution<double> u(-t_range, t_range);
  Pose p;
  p.rotation = random_rotation(rng);
  p.translation = Vec3(u(rng), u(rng), u(rng));
  return p;
}

// Least-squares plane through points via the scatter matrix (test-local copy).
inline Plane fit_plane_to_points(const std::vector<Vec3>& pts) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  Mat3 scatter = Mat3::Zero();
  for (const Vec3& p : pts) scatter += (p - c) * (p - c).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
  const Vec3 n = eig.eigenvectors().col(0).normalized();
  Plane out;
  out.normal = n;
  out.offset = -n.dot(c);
  return out;
}

// 50 points spread over the plane through two in-plane directions.
inline std::vector<Vec3> sample_plane_points(const Plane& plane, std::mt19937_64& rng,
                                             size_t count = 50) {
  const Vec3 n = plane.normal;
  const Vec3 a = std::abs(n.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  const Vec3 u = a.cross(n).normalized();
  const Vec3 v = n.cross(u);
  const Vec3 origin = -plane.offset * n;
  std::uniform_real_distribution<double> coord(-3.0, 3.0);
  std::vector<Vec3> pts;
  for (size_t i = 0; i < count; ++i)
    pts.push_back(origin + coord(rng) * u + coord(rng) * v);
  return pts;
}

// Weighted rotation alignment cost.
inline double rotation_cost(const Mat3& r,
                            const std::vector<std::pair<Vec3, Vec3>>& pairs,
                            const std::vector<double>& w) {
  double cost = 0;
  for (size_t i = 0; i < pairs.size(); ++i)
    cost += w[i] * (pairs[i].second - r * pairs[i].first).squaredNorm();
  return cost;
}

// Grid seeding followed by exact per-coordinate line minimization (parabola
// vertex) of f(t, s) = sum w (t.n + d_m - s d_q)^2.
struct WlsProblem {
  std::vector<Vec3> normals;
  std::vector<double> d_map, d_query, weights;

  double eval(const Eigen::Vector4d& x) const {
    double f = 0;
    for (size_t i = 0; i < normals.size(); ++i) {
      const double r = x.head<3>().dot(normals[i]) + d_map[i] - x[3] * d_query[i];
      f += weights[i] * r * r;
    }
    return f;
  }
};

inline Eigen::Vector4d wls_grid_descent(const WlsProblem& prob) {
  Eigen::Vector4d best = Eigen::Vector4d(0, 0, 0, 1);
  double best_f = prob.eval(best);
  for (double tx = -4; tx <= 4; tx += 2)
    for (double ty = -4; ty <= 4; ty += 2)
      for (double tz = -4; tz <= 4; tz += 2)
        for (double s = 0.25; s <= 4.0; s += 0.75) {
          const Eigen::Vector4d x(tx, ty, tz, s);
          const double f = prob.eval(x);
          if (f < best_f) {
            best_f = f;
            best = x;
          }
        }
  for (int sweep = 0; sweep < 400; ++sweep) {
    const double before = best_f;
    for (int k = 0; k < 4; ++k) {
      Eigen::Vector4d lo = best, hi = best;
      lo[k] -= 1.0;
      hi[k] += 1.0;
      const double fl = prob.eval(lo), fc = prob.eval(best), fh = prob.eval(hi);
      const double denom = fh - 2 * fc + fl;
      if (std::abs(denom) < 1e-18) continue;
      best[k] -= 0.5 * (fh - fl) / denom;
      best_f = prob.eval(best);
    }
    if (before - best_f < 1e-16) break;
  }
  return best;
}

// Independent point-in-polygon (crossing number) on the primitive's plane.
inline bool point_in_primitive(const planeloc::MapPrimitive& prim, const Vec3& x) {
  const Vec3 n = prim.plane.normal;
  const Vec3 a = std::abs(n.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  const Vec3 u = a.cross(n).normalized();
  const Vec3 v = n.cross(u);
  const Vec3 o = prim.boundary.front();
  const Vec2 p(u.dot(x - o), v.dot(x - o));
  std::vector<Vec2> poly;
  for (const Vec3& b : prim.boundary) poly.emplace_back(u.dot(b - o), v.dot(b - o));
  bool inside = false;
  const size_t m = poly.size();
  for (size_t i = 0, j = m - 1; i < m; j = i++) {
    const Vec2& pa = poly[j];
    const Vec2& pb = poly[i];
    const Vec2 ab = pb - pa;
    const double len2 = ab.squaredNorm();
    if (len2 > 0) {
      const double t = std::clamp((p - pa).dot(ab) / len2, 0.0, 1.0);
      if ((pa + t * ab - p).norm() <= 1e-9) return true;
    }
    if ((pa.y() > p.y()) != (pb.y() > p.y())) {
      const double xint = pa.x() + (p.y() - pa.y()) / (pb.y() - pa.y()) * ab.x();
      if (p.x() < xint) inside = !inside;
    }
  }
  return inside;
}

// Closest plane hit along the pixel ray, solved in map-frame algebra.
// Primitives count as one-sided surfaces: back-face hits are ignored.
inline std::optional<double> raycast_depth(std::span<const planeloc::MapPrimitive> map,
                                           const Pose& pose,
                                           const planeloc::Intrinsics& k, double px,
                                           double py) {
  const Vec3 ray((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
  std::optional<double> best;
  for (const planeloc::MapPrimitive& prim : map) {
    const Vec3& n = prim.plane.normal;
    if (prim.plane.offset + n.dot(pose.translation) <= 0) continue; // behind
    const double denom = n.dot(pose.rotation * ray);
    if (std::abs(denom) < 1e-12) continue;
    const double z = -(prim.plane.offset + n.dot(pose.translation)) / denom;
    if (z <= 1e-9) continue;
    const Vec3 xm = pose.rotation * (z * ray) + pose.translation;
    if (!point_in_primitive(prim, xm)) continue;
    if (!best || z < *best) best = z;
  }
  return best;
}

// Three mutually orthogonal camera-frame planes forming a room corner, plus
// the noiseless depth map rendered by per-pixel closest-hit evaluation.
struct CornerScene {
  planeloc::Intrinsics intrinsics{100.0, 100.0, 80.0, 60.0, 160, 120};
  std::vector<Plane> planes;
  planeloc::DepthMap depth;
};

inline CornerScene make_corner_scene() {
  CornerScene s;
  s.planes = {Plane(Vec3(0, 0, -1), 3.0), Plane(Vec3(-1, 0, 0), 2.0),
              Plane(Vec3(0, -1, 0), 1.5)};
  s.depth = planeloc::DepthMap(s.intrinsics.width, s.intrinsics.height, 0.0);
  for (int y = 0; y < s.intrinsics.height; ++y)
    for (int x = 0; x < s.intrinsics.width; ++x) {
      double best = std::numeric_limits<double>::infinity();
      for (const Plane& p : s.planes) {
        const Vec3 ray((x - s.intrinsics.cx) / s.intrinsics.fx,
                       (y - s.intrinsics.cy) / s.intrinsics.fy, 1.0);
        const double denom = p.normal.dot(ray);
        if (std::abs(denom) < 1e-12) continue;
        const double z = -p.offset / denom;
        if (z > 0) best = std::min(best, z);
      }
      if (std::isfinite(best)) s.depth.at(x, y) = best;
    }
  return s;
}

} // namespace oracles
