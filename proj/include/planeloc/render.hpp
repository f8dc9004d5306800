#pragma once

#include <vector>

#include "planeloc/depth_map.hpp"
#include "planeloc/mask.hpp"
#include "planeloc/primitives.hpp"

namespace planeloc {

namespace detail {

inline constexpr double kNearPlane = 1e-6;

// Clip a camera-space polygon against z >= near (Sutherland-Hodgman).
inline std::vector<Vec3> clip_near(const std::vector<Vec3>& poly, double znear) {
  std::vector<Vec3> out;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % n];
    const bool ain = a.z() >= znear;
    const bool bin = b.z() >= znear;
    if (ain) out.push_back(a);
    if (ain != bin) {
      const double t = (znear - a.z()) / (b.z() - a.z());
      out.push_back(a + t * (b - a));
    }
  }
  return out;
}

// Visits every pixel whose center lies in the projection of the primitive's
// boundary polygon, reporting the analytic plane depth along that pixel ray.
// `plane_cam` and `verts_cam` are the primitive expressed in the camera frame.
template <typename F>
inline void for_each_covered_pixel(const Plane& plane_cam,
                                   const std::vector<Vec3>& verts_cam,
                                   const Intrinsics& k, F&& visit) {
  if (verts_cam.size() < 3) return;
  for (size_t t = 1; t + 1 < verts_cam.size(); ++t) {
    std::vector<Vec3> tri = {verts_cam[0], verts_cam[t], verts_cam[t + 1]};
    tri = clip_near(tri, kNearPlane);
    if (tri.size() < 3) continue;
    std::vector<Vec2> px(tri.size());
    for (size_t i = 0; i < tri.size(); ++i)
      px[i] = Vec2(k.fx * tri[i].x() / tri[i].z() + k.cx,
                   k.fy * tri[i].y() / tri[i].z() + k.cy);
    // clipping can produce a quad; fan it
    for (size_t s = 1; s + 1 < px.size(); ++s) {
      const Vec2& p0 = px[0];
      const Vec2& p1 = px[s];
      const Vec2& p2 = px[s + 1];
      double area2 = (p1.x() - p0.x()) * (p2.y() - p0.y()) -
                     (p2.x() - p0.x()) * (p1.y() - p0.y());
      if (std::abs(area2) < 1e-12) continue;
      const double flip = area2 > 0 ? 1.0 : -1.0;
      auto edge = [&](const Vec2& a, const Vec2& b, double x, double y) {
        return flip * ((b.x() - a.x()) * (y - a.y()) - (b.y() - a.y()) * (x - a.x()));
      };
      const int x0 = std::max(0, static_cast<int>(std::ceil(
                                     std::min({p0.x(), p1.x(), p2.x()}))));
      const int x1 = std::min(k.width - 1, static_cast<int>(std::floor(
                                               std::max({p0.x(), p1.x(), p2.x()}))));
      const int y0 = std::max(0, static_cast<int>(std::ceil(
                                     std::min({p0.y(), p1.y(), p2.y()}))));
      const int y1 = std::min(k.height - 1, static_cast<int>(std::floor(
                                                std::max({p0.y(), p1.y(), p2.y()}))));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          if (edge(p0, p1, x, y) < 0 || edge(p1, p2, x, y) < 0 ||
              edge(p2, p0, x, y) < 0)
            continue;
          const Vec3 ray = pixel_ray(k, Vec2(x, y));
          const double denom = plane_cam.normal.dot(ray);
          if (std::abs(denom) <= 1e-12) continue;
          const double z = -plane_cam.offset / denom;
          if (z <= 0) continue;
          visit(x, y, z);
        }
    }
  }
}

} // namespace detail

// Renders the planar map at a pose: fan-triangulated boundary polygons,
// near-plane clipping, analytic per-pixel plane depth, z-buffer minimum.
// Primitives are one-sided: a surface viewed from behind its oriented normal
// is culled, keeping map and recovered normal signs consistent.
inline DepthMap render_depth(std::span<const MapPrimitive> map, const Pose& pose,
                             const Intrinsics& k) {
  DepthMap depth(k.width, k.height, 0.0);
  const Pose cam_from_map = invert(pose);
  std::vector<Vec3> verts;
  for (const MapPrimitive& prim : map) {
    const Plane plane_cam = transform_plane(cam_from_map, prim.plane);
    if (plane_cam.offset <= 0) continue; // back face or through the camera
    verts.clear();
    verts.reserve(prim.boundary.size());
    for (const Vec3& v : prim.boundary) verts.push_back(cam_from_map * v);
    detail::for_each_covered_pixel(plane_cam, verts, k, [&](int x, int y, double z) {
      double& cell = depth.at(x, y);
      if (!depth.is_valid_value(cell) || z < cell) cell = z;
    });
  }
  return depth;
}

// Pixels covered by the primitive's projected boundary where the primitive is
// the front-most surface (analytic depth within `depth_tol` of the z-buffer).
inline Mask project_primitive_mask(const MapPrimitive& prim, const Pose& pose,
                                   const Intrinsics& k, const DepthMap& zbuffer,
                                   double depth_tol = 0.01) {
  Mask mask(k.width, k.height);
  const Pose cam_from_map = invert(pose);
  const Plane plane_cam = transform_plane(cam_from_map, prim.plane);
  if (plane_cam.offset <= 0) return mask; // back face
  std::vector<Vec3> verts;
  verts.reserve(prim.boundary.size());
  for (const Vec3& v : prim.boundary) verts.push_back(cam_from_map * v);
  detail::for_each_covered_pixel(plane_cam, verts, k, [&](int x, int y, double z) {
    if (!zbuffer.valid_at(x, y)) return;
    if (std::abs(z - zbuffer.at(x, y)) <= depth_tol) mask.set(x, y);
  });
  return mask;
}

} // namespace planeloc
