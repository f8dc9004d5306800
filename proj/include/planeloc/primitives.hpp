#pragma once

#include <vector>

#include "planeloc/geometry.hpp"
#include "planeloc/mask.hpp"
#include "planeloc/polygon.hpp"

namespace planeloc {

// Planar region recovered from a query depth map: plane parameters in the
// camera frame plus the pixel set supporting them.
struct QueryPrimitive {
  Plane plane;
  Mask mask;
  int index = -1;

  double area() const { return static_cast<double>(mask.count()); }
};

// Planar region of the map: plane parameters in the map frame plus a planar
// boundary polygon and points sampled on it.
struct MapPrimitive {
  Plane plane;
  std::vector<Vec3> boundary;
  std::vector<Vec3> sample_points;
  double area = 0;
  int index = -1;

  Vec3 centroid() const { return polygon_centroid(boundary); }
};

// L points uniform over the primitive's boundary polygon.
inline std::vector<Vec3> sample_primitive_points(const MapPrimitive& prim,
                                                 size_t count, uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample_polygon_uniform(prim.boundary, count, rng);
}

// Axis-aligned rectangle primitive; handy for building synthetic maps.
inline MapPrimitive make_rect_primitive(const Vec3& center, const Vec3& normal,
                                        const Vec3& u_dir, double half_u,
                                        double half_v, int index = -1) {
  MapPrimitive p;
  const Vec3 n = normal.normalized();
  const Vec3 u = (u_dir - u_dir.dot(n) * n).normalized();
  const Vec3 v = n.cross(u);
  p.plane = Plane(n, -n.dot(center));
  p.boundary = {center - half_u * u - half_v * v, center + half_u * u - half_v * v,
                center + half_u * u + half_v * v, center - half_u * u + half_v * v};
  p.area = 4.0 * half_u * half_v;
  p.index = index;
  return p;
}

} // namespace planeloc
