#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "planeloc/errors.hpp"

namespace planeloc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;
using Twist = Eigen::Matrix<double, 6, 1>; // [rotation; translation]

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

inline double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

// Plane with equation n.x + d = 0; the normal is kept unit length and its
// sign is never canonicalized (orientation carries information).
struct Plane {
  Vec3 normal{0, 0, 1};
  double offset = 0;

  Plane() = default;
  Plane(const Vec3& n, double d) : normal(n.normalized()), offset(d) {}

  double signed_distance(const Vec3& x) const { return normal.dot(x) + offset; }
};

// Rigid transform mapping camera-frame points to map-frame points.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 operator*(const Vec3& x) const { return rotation * x + translation; }

  static Pose identity() { return {}; }
};

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

inline Pose compose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose invert(const Pose& p) {
  Mat3 rt = p.rotation.transpose();
  return {rt, -(rt * p.translation)};
}

// Dual plane transform induced by the point map x' = R x + t.
inline Plane transform_plane(const Pose& pose, const Plane& plane) {
  Vec3 n = pose.rotation * plane.normal;
  double d = plane.offset - pose.translation.dot(n);
  Plane out;
  out.normal = n.normalized();
  out.offset = d;
  return out;
}

// Axis-angle rotation (Rodrigues).
inline Mat3 rotation_about(const Vec3& axis, double angle) {
  Mat3 k = skew(axis.normalized());
  return Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k;
}

inline Pose se3_exp(const Twist& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const double theta = w.norm();
  const Mat3 k = skew(w);
  double a, b, c; // sin t/t, (1-cos t)/t^2, (t-sin t)/t^3
  if (theta < 1e-8) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
    c = 1.0 / 6.0 - t2 / 120.0;
  } else {
    const double t2 = theta * theta;
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / t2;
    c = (theta - std::sin(theta)) / (t2 * theta);
  }
  Pose p;
  p.rotation = Mat3::Identity() + a * k + b * k * k;
  const Mat3 vmat = Mat3::Identity() + b * k + c * k * k;
  p.translation = vmat * v;
  return p;
}

inline Twist se3_log(const Pose& p) {
  const double cos_theta = clamp_unit((p.rotation.trace() - 1.0) / 2.0);
  const double theta = std::acos(cos_theta);
  if (theta >= kPi - 1e-6)
    throw LogNearSingularity("se3_log: rotation angle too close to pi");
  Vec3 w;
  const Mat3 diff = p.rotation - p.rotation.transpose();
  const Vec3 vee(diff(2, 1), diff(0, 2), diff(1, 0));
  if (theta < 1e-8) {
    w = 0.5 * (1.0 + theta * theta / 6.0) * vee;
  } else {
    w = theta / (2.0 * std::sin(theta)) * vee;
  }
  const Mat3 k = skew(w);
  double c; // coefficient of k^2 in V^{-1}
  if (theta < 1e-8) {
    c = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    c = (1.0 - 0.5 * theta * std::sin(theta) / (1.0 - std::cos(theta))) / (theta * theta);
  }
  const Mat3 vinv = Mat3::Identity() - 0.5 * k + c * k * k;
  Twist xi;
  xi.head<3>() = w;
  xi.tail<3>() = vinv * p.translation;
  return xi;
}

// Angle between two unit vectors, treating opposite directions as parallel.
inline double undirected_angle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), std::abs(a.dot(b)));
}

inline double directed_angle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

// Weighted Wahba problem: R minimizing sum_i w_i |dst_i - R src_i|^2.
inline Mat3 kabsch(std::span<const std::pair<Vec3, Vec3>> pairs,
                   std::span<const double> weights) {
  if (pairs.size() < 2)
    throw DegenerateNormals("kabsch: need at least two direction pairs");
  if (weights.size() != pairs.size())
    throw DimensionMismatch("kabsch: weight count does not match pair count");
  bool spanning = false;
  for (size_t i = 1; i < pairs.size() && !spanning; ++i)
    spanning = undirected_angle(pairs[0].first, pairs[i].first) >= 1e-6;
  if (!spanning)
    throw DegenerateNormals("kabsch: source directions are parallel");

  Mat3 h = Mat3::Zero(); // sum w src dst^T
  for (size_t i = 0; i < pairs.size(); ++i)
    h += weights[i] * pairs[i].first * pairs[i].second.transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
  return v * d * u.transpose();
}

inline std::pair<Vec2, double> project(const Intrinsics& k, const Vec3& x) {
  if (x.z() <= 0)
    throw BehindCamera("project: point has non-positive depth");
  return {Vec2(k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy), x.z()};
}

inline Vec3 unproject(const Intrinsics& k, const Vec2& u, double depth) {
  return {(u.x() - k.cx) / k.fx * depth, (u.y() - k.cy) / k.fy * depth, depth};
}

// Unit-depth ray through pixel u.
inline Vec3 pixel_ray(const Intrinsics& k, const Vec2& u) {
  return {(u.x() - k.cx) / k.fx, (u.y() - k.cy) / k.fy, 1.0};
}

// Depth z at which the ray through u meets the plane (camera frame).
inline double plane_depth_at_pixel(const Intrinsics& k, const Plane& plane,
                                   const Vec2& u) {
  const Vec3 ray = pixel_ray(k, u);
  const double denom = plane.normal.dot(ray);
  if (std::abs(denom) <= 1e-9)
    throw RayParallel("plane_depth_at_pixel: ray parallel to plane");
  const double z = -plane.offset / denom;
  if (z <= 0)
    throw NegativeDepth("plane_depth_at_pixel: plane behind camera along ray");
  return z;
}

inline double rotation_angle_deg(const Mat3& ra, const Mat3& rb) {
  const double c = clamp_unit(((ra.transpose() * rb).trace() - 1.0) / 2.0);
  return rad2deg(std::acos(c));
}

inline double translation_distance(const Vec3& ta, const Vec3& tb) {
  return (ta - tb).norm();
}

} // namespace planeloc
