#pragma once

#include <algorithm>
#include <vector>

#include "planeloc/geometry.hpp"
#include "planeloc/rng.hpp"

namespace planeloc {

// Orthonormal in-plane basis (u, v) with u x v = n.
inline std::pair<Vec3, Vec3> plane_basis(const Vec3& n) {
  const Vec3 a = std::abs(n.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  const Vec3 u = a.cross(n).normalized();
  const Vec3 v = n.cross(u);
  return {u, v};
}

inline double polygon_area_2d(const std::vector<Vec2>& pts) {
  double twice = 0;
  const size_t n = pts.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& a = pts[i];
    const Vec2& b = pts[(i + 1) % n];
    twice += a.x() * b.y() - b.x() * a.y();
  }
  return std::abs(twice) / 2.0;
}

// Area of a planar 3D polygon.
inline double polygon_area(const std::vector<Vec3>& pts) {
  if (pts.size() < 3) return 0;
  Vec3 acc = Vec3::Zero();
  for (size_t i = 1; i + 1 < pts.size(); ++i)
    acc += (pts[i] - pts[0]).cross(pts[i + 1] - pts[0]);
  return acc.norm() / 2.0;
}

// Area-weighted centroid of a planar 3D polygon (vertex mean fallback for
// degenerate footprints).
inline Vec3 polygon_centroid(const std::vector<Vec3>& pts) {
  Vec3 num = Vec3::Zero();
  double den = 0;
  for (size_t i = 1; i + 1 < pts.size(); ++i) {
    const double a = (pts[i] - pts[0]).cross(pts[i + 1] - pts[0]).norm() / 2.0;
    num += a * (pts[0] + pts[i] + pts[i + 1]) / 3.0;
    den += a;
  }
  if (den < 1e-12) {
    Vec3 mean = Vec3::Zero();
    for (const Vec3& p : pts) mean += p;
    return pts.empty() ? mean : Vec3(mean / double(pts.size()));
  }
  return num / den;
}

// Monotone-chain convex hull, counter-clockwise, no repeated last point.
inline std::vector<Vec2> convex_hull_2d(std::vector<Vec2> pts) {
  if (pts.size() < 3) return pts;
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
  });
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Vec2> hull(2 * pts.size());
  size_t k = 0;
  for (const Vec2& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  const size_t lower = k + 1;
  for (auto it = pts.rbegin() + 1; it != pts.rend(); ++it) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
    hull[k++] = *it;
  }
  hull.resize(k - 1);
  return hull;
}

// Inclusive point-in-polygon test (crossing number with boundary tolerance).
inline bool point_in_polygon_2d(const std::vector<Vec2>& poly, const Vec2& p,
                                double eps = 1e-9) {
  const size_t n = poly.size();
  if (n < 3) return false;
  bool inside = false;
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly[j];
    const Vec2& b = poly[i];
    const Vec2 ab = b - a;
    const double len2 = ab.squaredNorm();
    if (len2 > 0) {
      const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
      if ((a + t * ab - p).norm() <= eps) return true; // on an edge
    }
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double xint = a.x() + (p.y() - a.y()) / (b.y() - a.y()) * ab.x();
      if (p.x() < xint) inside = !inside;
    }
  }
  return inside;
}

// Uniform samples over a planar polygon's area; deterministic given the rng.
inline std::vector<Vec3> sample_polygon_uniform(const std::vector<Vec3>& poly,
                                                size_t count, Rng& rng) {
  std::vector<Vec3> out;
  if (poly.size() < 3 || count == 0) return out;
  std::vector<double> cum;
  double total = 0;
  for (size_t i = 1; i + 1 < poly.size(); ++i) {
    total += (poly[i] - poly[0]).cross(poly[i + 1] - poly[0]).norm() / 2.0;
    cum.push_back(total);
  }
  if (total <= 0) return out;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  out.reserve(count);
  for (size_t s = 0; s < count; ++s) {
    const double pick = uni(rng) * total;
    const size_t tri =
        std::lower_bound(cum.begin(), cum.end(), pick) - cum.begin();
    const Vec3& a = poly[0];
    const Vec3& b = poly[tri + 1];
    const Vec3& c = poly[tri + 2];
    double r1 = std::sqrt(uni(rng));
    double r2 = uni(rng);
    out.push_back((1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c);
  }
  return out;
}

} // namespace planeloc
