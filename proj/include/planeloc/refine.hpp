#pragma once

#include <vector>

#include "planeloc/pose_solver.hpp"
#include "planeloc/render.hpp"

namespace planeloc {

struct RefineConfig {
  int iterations = 200;
  double lr_pose = 1e-3;
  double lr_offsets = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int pixel_sample_count = 4096;
  uint64_t rng_seed = 0;
};

struct OffsetSeeds {
  VecX delta; // one positive multiplier per query primitive, starts at 1
};

// Plane-induced depth of a query primitive over its mask at delta = 1.
// Pixels whose ray is parallel to the plane or meets it behind the camera are
// dropped and counted.
struct PrimitiveDepthCache {
  std::vector<Vec2> pixels;
  std::vector<Vec3> rays;
  std::vector<double> base_depth;
  size_t dropped = 0;
};

inline PrimitiveDepthCache primitive_depth_cache(const QueryPrimitive& prim,
                                                 const Intrinsics& k) {
  PrimitiveDepthCache cache;
  prim.mask.for_each([&](int x, int y) {
    const Vec2 u(x, y);
    const Vec3 ray = pixel_ray(k, u);
    const double denom = prim.plane.normal.dot(ray);
    if (std::abs(denom) <= 1e-9) {
      ++cache.dropped;
      return;
    }
    const double z = -prim.plane.offset / denom;
    if (z <= 0) {
      ++cache.dropped;
      return;
    }
    cache.pixels.push_back(u);
    cache.rays.push_back(ray);
    cache.base_depth.push_back(z);
  });
  return cache;
}

struct SparseDepth {
  std::vector<Vec2> pixels;
  std::vector<double> depth;
  size_t dropped = 0;
};

// delta-scaled plane-induced depth segment over the primitive's mask.
inline SparseDepth offset_seeded_depth(const QueryPrimitive& prim, double delta,
                                       const Intrinsics& k) {
  const PrimitiveDepthCache cache = primitive_depth_cache(prim, k);
  SparseDepth out;
  out.pixels = cache.pixels;
  out.dropped = cache.dropped;
  out.depth.resize(cache.base_depth.size());
  for (size_t i = 0; i < cache.base_depth.size(); ++i)
    out.depth[i] = delta * cache.base_depth[i];
  return out;
}

struct WarpedPixel {
  Vec2 source_px;
  Vec2 warped_px = Vec2::Zero();
  double proj_depth = 0;
  bool valid = false;
};

namespace detail {

// Warp of one cached pixel through (delta, T_tr) and projection onto D.
inline WarpedPixel warp_pixel(const PrimitiveDepthCache& cache, size_t i,
                              double delta, const Pose& t_tr, const Intrinsics& k,
                              const DepthMap& d, Vec3* x_out = nullptr) {
  WarpedPixel w;
  w.source_px = cache.pixels[i];
  const Vec3 x = delta * cache.base_depth[i] * cache.rays[i];
  const Vec3 xp = t_tr * x;
  if (x_out) *x_out = xp;
  if (xp.z() <= 0) return w;
  w.warped_px = Vec2(k.fx * xp.x() / xp.z() + k.cx, k.fy * xp.y() / xp.z() + k.cy);
  w.proj_depth = xp.z();
  w.valid = sample_bilinear(d, w.warped_px.x(), w.warped_px.y()).has_value();
  return w;
}

} // namespace detail

inline std::vector<WarpedPixel> warp_primitive(const QueryPrimitive& prim,
                                               double delta, const Pose& t_tr,
                                               const Intrinsics& k,
                                               const DepthMap& d) {
  const PrimitiveDepthCache cache = primitive_depth_cache(prim, k);
  std::vector<WarpedPixel> out;
  out.reserve(cache.pixels.size());
  for (size_t i = 0; i < cache.pixels.size(); ++i)
    out.push_back(detail::warp_pixel(cache, i, delta, t_tr, k, d));
  return out;
}

// Mean squared depth residual of a sampled pixel subset; 0 with a flag when
// no sampled pixel warps validly.
inline std::pair<double, size_t> per_primitive_residual(
    const PrimitiveDepthCache& cache, double delta, const Pose& t_tr,
    const Intrinsics& k, const DepthMap& d, std::span<const int> subset) {
  double acc = 0;
  size_t valid = 0;
  for (int i : subset) {
    const Vec3 x = delta * cache.base_depth[i] * cache.rays[i];
    const Vec3 xp = t_tr * x;
    if (xp.z() <= 0) continue;
    const Vec2 u(k.fx * xp.x() / xp.z() + k.cx, k.fy * xp.y() / xp.z() + k.cy);
    const auto s = sample_bilinear(d, u.x(), u.y());
    if (!s) continue;
    const double e = s->value - xp.z();
    acc += e * e;
    ++valid;
  }
  return {valid == 0 ? 0.0 : acc / static_cast<double>(valid), valid};
}

// E_depth: mean of per-primitive residuals over all query primitives.
inline double depth_cost(std::span<const PrimitiveDepthCache> caches, const VecX& deltas,
                         const Pose& t_tr, const Intrinsics& k, const DepthMap& d,
                         std::span<const std::vector<int>> sample) {
  double total = 0;
  for (size_t p = 0; p < caches.size(); ++p)
    total += per_primitive_residual(caches[p], deltas[p], t_tr, k, d, sample[p]).first;
  return total / static_cast<double>(caches.size());
}

struct CostGradient {
  double cost = 0;
  Twist d_xi = Twist::Zero(); // left perturbation of T_tr, [rotation; translation]
  VecX d_delta;
};

// Analytic gradient of E_depth through bilinear sampling, projection, the
// rigid transform (left perturbation at identity) and the delta scaling.
inline CostGradient cost_gradient(std::span<const PrimitiveDepthCache> caches,
                                  const VecX& deltas, const Pose& t_tr,
                                  const Intrinsics& k, const DepthMap& d,
                                  std::span<const std::vector<int>> sample) {
  CostGradient out;
  out.d_delta = VecX::Zero(caches.size());
  const double inv_nq = 1.0 / static_cast<double>(caches.size());

  for (size_t p = 0; p < caches.size(); ++p) {
    const PrimitiveDepthCache& cache = caches[p];
    const double delta = deltas[p];
    // first pass: count valid pixels for the mean
    std::vector<std::pair<int, Vec3>> valid_px; // index, transformed point
    valid_px.reserve(sample[p].size());
    for (int i : sample[p]) {
      const Vec3 x = delta * cache.base_depth[i] * cache.rays[i];
      const Vec3 xp = t_tr * x;
      if (xp.z() <= 0) continue;
      const Vec2 u(k.fx * xp.x() / xp.z() + k.cx, k.fy * xp.y() / xp.z() + k.cy);
      if (!sample_bilinear(d, u.x(), u.y())) continue;
      valid_px.emplace_back(i, xp);
    }
    if (valid_px.empty()) continue;
    const double scale = inv_nq * 2.0 / static_cast<double>(valid_px.size());

    double r = 0;
    for (const auto& [i, xp] : valid_px) {
      const double z = xp.z();
      const Vec2 u(k.fx * xp.x() / z + k.cx, k.fy * xp.y() / z + k.cy);
      const auto s = sample_bilinear(d, u.x(), u.y());
      const double e = s->value - z;
      r += e * e;

      // de/dx' = grad(D) * du/dx' - dz/dx'
      Vec3 g3;
      g3.x() = s->dx * k.fx / z;
      g3.y() = s->dy * k.fy / z;
      g3.z() = -s->dx * k.fx * xp.x() / (z * z) - s->dy * k.fy * xp.y() / (z * z) - 1.0;

      const double w = scale * e;
      out.d_xi.head<3>() += w * xp.cross(g3); // rotation block
      out.d_xi.tail<3>() += w * g3;           // translation block
      // x' = T_tr (delta z_u ray); dx'/ddelta = R (x / delta) = (x' - t) / delta
      out.d_delta[p] += w * g3.dot((xp - t_tr.translation) / delta);
    }
    out.cost += inv_nq * r / static_cast<double>(valid_px.size());
  }
  return out;
}

struct RefineResult {
  Pose pose;
  OffsetSeeds seeds;
  std::vector<double> cost_trace; // sampled cost per iteration
  bool no_overlap = false;
  double full_cost_initial = 0;
  double full_cost_final = 0;
};

// Joint Adam refinement of the pose correction (se3 tangent, re-centered after
// every step) and the log offset seeds, on a fresh multinomial pixel sample
// per iteration. The rendering D is produced once at P0 and held fixed.
inline RefineResult refine_pose(const Pose& p0, std::span<const QueryPrimitive> prims,
                                std::span<const MapPrimitive> map, const Intrinsics& k,
                                const RefineConfig& cfg) {
  RefineResult res;
  const size_t nq = prims.size();
  res.seeds.delta = VecX::Ones(nq);
  res.pose = p0;
  if (nq == 0) {
    res.no_overlap = true;
    return res;
  }

  const DepthMap d = render_depth(map, p0, k);

  std::vector<PrimitiveDepthCache> caches(nq);
  bool overlap = false;
  for (size_t p = 0; p < nq; ++p) {
    caches[p] = primitive_depth_cache(prims[p], k);
    for (const Vec2& u : caches[p].pixels)
      if (d.valid_at(static_cast<int>(u.x()), static_cast<int>(u.y()))) {
        overlap = true;
        break;
      }
  }
  if (!overlap) {
    res.no_overlap = true;
    return res;
  }

  std::vector<std::vector<int>> full(nq);
  std::vector<double> cum_area(nq);
  double total_area = 0;
  for (size_t p = 0; p < nq; ++p) {
    full[p].resize(caches[p].pixels.size());
    for (size_t i = 0; i < full[p].size(); ++i) full[p][i] = static_cast<int>(i);
    total_area += static_cast<double>(prims[p].mask.count());
    cum_area[p] = total_area;
  }

  Pose t_tr = Pose::identity();
  VecX log_delta = VecX::Zero(nq);
  res.full_cost_initial = depth_cost(caches, res.seeds.delta, t_tr, k, d, full);

  const int n_params = 6 + static_cast<int>(nq);
  VecX m = VecX::Zero(n_params), v = VecX::Zero(n_params);
  Rng rng = make_rng(cfg.rng_seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  std::vector<std::vector<int>> sample(nq);
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (auto& s : sample) s.clear();
    for (int n = 0; n < cfg.pixel_sample_count; ++n) {
      const double pick = uni(rng) * total_area;
      const size_t p = std::lower_bound(cum_area.begin(), cum_area.end(), pick) -
                       cum_area.begin();
      const size_t pi = std::min(p, nq - 1);
      if (caches[pi].pixels.empty()) continue;
      sample[pi].push_back(static_cast<int>(
          std::min<size_t>(caches[pi].pixels.size() - 1,
                           static_cast<size_t>(uni(rng) * caches[pi].pixels.size()))));
    }

    VecX delta = log_delta.array().exp().matrix();
    const CostGradient g = cost_gradient(caches, delta, t_tr, k, d, sample);
    res.cost_trace.push_back(g.cost);

    VecX grad(n_params);
    grad.head<6>() = g.d_xi;
    grad.tail(nq) = g.d_delta.cwiseProduct(delta); // d/d(log delta)

    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, it);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, it);
    VecX step(n_params);
    for (int i = 0; i < n_params; ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
      const double lr = i < 6 ? cfg.lr_pose : cfg.lr_offsets;
      step[i] = -lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
    }
    Twist dxi = step.head<6>();
    t_tr = compose(se3_exp(dxi), t_tr);
    log_delta += step.tail(nq);
  }

  VecX delta = log_delta.array().exp().matrix();
  res.full_cost_final = depth_cost(caches, delta, t_tr, k, d, full);
  if (res.full_cost_final > res.full_cost_initial) {
    // keep the initial state rather than a worse one
    t_tr = Pose::identity();
    delta = VecX::Ones(nq);
    res.full_cost_final = res.full_cost_initial;
  }
  res.pose = compose(p0, t_tr);
  res.seeds.delta = delta;
  return res;
}

} // namespace planeloc
