#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "planeloc/refine.hpp"

using namespace planeloc;

namespace {

const Intrinsics kK{260.0, 260.0, 160.0, 120.0, 320, 240};

// Room-like map: three mutually orthogonal surfaces plus two tilted panels.
std::vector<MapPrimitive> make_map() {
  std::vector<MapPrimitive> map;
  map.push_back(make_rect_primitive(Vec3(2.5, 2.0, 1.4), Vec3(0, -1, 0),
                                    Vec3(1, 0, 0), 2.5, 1.4, 0)); // back wall
  map.push_back(make_rect_primitive(Vec3(2.5, 1.0, 0.0), Vec3(0, 0, 1),
                                    Vec3(1, 0, 0), 2.5, 1.0, 1)); // floor
  map.push_back(make_rect_primitive(Vec3(0.0, 1.0, 1.4), Vec3(1, 0, 0),
                                    Vec3(0, 1, 0), 1.0, 1.4, 2)); // left wall
  map.push_back(make_rect_primitive(Vec3(1.6, 1.2, 1.0),
                                    Vec3(0.5, -0.7, 0.5).normalized(),
                                    Vec3(1, 0, 0), 0.5, 0.4, 3));
  map.push_back(make_rect_primitive(Vec3(3.4, 1.3, 1.1),
                                    Vec3(-0.4, -0.8, 0.45).normalized(),
                                    Vec3(0, 0, 1), 0.45, 0.5, 4));
  return map;
}

Pose make_gt_pose() {
  // camera inside the room looking toward the back wall
  const Vec3 eye(2.3, -0.6, 1.2);
  const Vec3 target(2.5, 2.0, 1.1);
  const Vec3 view = (target - eye).normalized();
  Vec3 up(0, 0, 1);
  const Vec3 x_cam = view.cross(up).normalized();
  const Vec3 y_cam = view.cross(x_cam);
  Pose p;
  p.rotation.col(0) = x_cam;
  p.rotation.col(1) = y_cam;
  p.rotation.col(2) = view;
  p.translation = eye;
  return p;
}

// Closed box room: depth rendered from inside covers every pixel, so the
// alignment cost is smooth away from the image border.
std::vector<MapPrimitive> make_closed_room() {
  std::vector<MapPrimitive> map;
  const double ex = 5.0, ey = 4.0, ez = 2.8;
  auto add = [&](const Vec3& c, const Vec3& n, const Vec3& u, double hu, double hv) {
    map.push_back(make_rect_primitive(c, n, u, hu, hv, static_cast<int>(map.size())));
  };
  add({ex / 2, ey / 2, 0}, {0, 0, 1}, {1, 0, 0}, ex / 2, ey / 2);
  add({ex / 2, ey / 2, ez}, {0, 0, -1}, {1, 0, 0}, ex / 2, ey / 2);
  add({0, ey / 2, ez / 2}, {1, 0, 0}, {0, 1, 0}, ey / 2, ez / 2);
  add({ex, ey / 2, ez / 2}, {-1, 0, 0}, {0, 1, 0}, ey / 2, ez / 2);
  add({ex / 2, 0, ez / 2}, {0, 1, 0}, {1, 0, 0}, ex / 2, ez / 2);
  add({ex / 2, ey, ez / 2}, {0, -1, 0}, {1, 0, 0}, ex / 2, ez / 2);
  return map;
}

Pose make_room_pose() {
  const Vec3 eye(2.0, 1.2, 1.3);
  const Vec3 target(4.2, 3.6, 1.0);
  const Vec3 view = (target - eye).normalized();
  const Vec3 x_cam = view.cross(Vec3(0, 0, 1)).normalized();
  Pose p;
  p.rotation.col(0) = x_cam;
  p.rotation.col(1) = view.cross(x_cam);
  p.rotation.col(2) = view;
  p.translation = eye;
  return p;
}

Mask erode_border(const Mask& m, int margin) {
  Mask out(m.width(), m.height());
  m.for_each([&](int x, int y) {
    if (x >= margin && x < m.width() - margin && y >= margin &&
        y < m.height() - margin)
      out.set(x, y);
  });
  return out;
}

// Ground-truth query primitives for a pose: projected masks and camera-frame
// planes of the visible map primitives.
std::vector<QueryPrimitive> gt_query_prims(std::span<const MapPrimitive> map,
                                           const Pose& pose, const Intrinsics& k,
                                           size_t min_px = 200) {
  const DepthMap z = render_depth(map, pose, k);
  std::vector<QueryPrimitive> prims;
  for (const MapPrimitive& mp : map) {
    Mask mask = project_primitive_mask(mp, pose, k, z);
    if (mask.count() < min_px) continue;
    QueryPrimitive qp;
    qp.plane = transform_plane(invert(pose), mp.plane);
    qp.mask = std::move(mask);
    qp.index = static_cast<int>(prims.size());
    prims.push_back(std::move(qp));
  }
  return prims;
}

std::vector<std::vector<int>> full_sample(std::span<const PrimitiveDepthCache> caches) {
  std::vector<std::vector<int>> s(caches.size());
  for (size_t p = 0; p < caches.size(); ++p) {
    s[p].resize(caches[p].pixels.size());
    for (size_t i = 0; i < s[p].size(); ++i) s[p][i] = static_cast<int>(i);
  }
  return s;
}

} // namespace

TEST_CASE("render_depth basics", "[refine]") {
  SECTION("fronto square at two meters") {
    const auto prim = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                          Vec3(1, 0, 0), 3.0, 3.0, 0);
    const std::vector<MapPrimitive> map = {prim};
    const Intrinsics k{100.0, 100.0, 40.0, 30.0, 80, 60};
    const DepthMap d = render_depth(map, Pose::identity(), k);
    size_t covered = 0;
    for (double v : d.data)
      if (d.is_valid_value(v)) {
        ++covered;
        CHECK(std::abs(v - 2.0) < 1e-6);
      }
    CHECK(covered == d.data.size()); // square fills the narrow view
  }

  SECTION("z-buffer keeps the nearer surface") {
    const auto far_plane = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                               Vec3(1, 0, 0), 3.0, 3.0, 0);
    const auto near_plane = make_rect_primitive(Vec3(0, 0, 1.0), Vec3(0, 0, -1),
                                                Vec3(1, 0, 0), 0.3, 0.3, 1);
    const std::vector<MapPrimitive> map = {far_plane, near_plane};
    const Intrinsics k{100.0, 100.0, 40.0, 30.0, 80, 60};
    const DepthMap d = render_depth(map, Pose::identity(), k);
    CHECK(d.at(40, 30) == Catch::Approx(1.0));
    CHECK(d.at(2, 2) == Catch::Approx(2.0));
  }

  SECTION("rendered pixels agree with independent ray casting") {
    const std::vector<MapPrimitive> map = make_map();
    const Pose pose = make_gt_pose();
    const DepthMap d = render_depth(map, pose, kK);
    std::mt19937_64 rng(61);
    std::uniform_int_distribution<int> px(0, kK.width - 1), py(0, kK.height - 1);
    int checked = 0;
    while (checked < 500) {
      const int x = px(rng), y = py(rng);
      if (!d.valid_at(x, y)) continue;
      const auto z = oracles::raycast_depth(map, pose, kK, x, y);
      REQUIRE(z.has_value());
      CHECK(std::abs(*z - d.at(x, y)) < 1e-6);
      ++checked;
    }
  }
}

TEST_CASE("offset-seeded depth segments", "[refine]") {
  const Intrinsics k{100.0, 100.0, 40.0, 30.0, 80, 60};
  QueryPrimitive prim;
  prim.plane = Plane(Vec3(0, 0, -1), 3.0);
  prim.mask = Mask(k.width, k.height);
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 40; ++x) prim.mask.set(x, y);

  const SparseDepth base = offset_seeded_depth(prim, 1.0, k);
  REQUIRE(base.depth.size() == prim.mask.count());
  for (size_t i = 0; i < base.depth.size(); ++i) {
    CHECK(base.depth[i] == Catch::Approx(3.0));
    CHECK(base.depth[i] ==
          Catch::Approx(plane_depth_at_pixel(k, prim.plane, base.pixels[i])));
  }

  const SparseDepth doubled = offset_seeded_depth(prim, 2.0, k);
  for (size_t i = 0; i < doubled.depth.size(); ++i)
    CHECK(doubled.depth[i] == Catch::Approx(2.0 * base.depth[i]));

  const SparseDepth half = offset_seeded_depth(prim, 0.5, k);
  for (size_t i = 0; i < half.depth.size(); ++i)
    CHECK(half.depth[i] == Catch::Approx(1.5));
}

TEST_CASE("warping primitives onto the rendering", "[refine]") {
  const Intrinsics k{100.0, 100.0, 40.0, 30.0, 80, 60};
  const auto wall = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                        Vec3(1, 0, 0), 3.0, 3.0, 0);
  const std::vector<MapPrimitive> map = {wall};
  const DepthMap d = render_depth(map, Pose::identity(), k);

  QueryPrimitive prim;
  prim.plane = Plane(Vec3(0, 0, -1), 2.0);
  prim.mask = Mask(k.width, k.height);
  for (int y = 5; y < 55; ++y)
    for (int x = 5; x < 75; ++x) prim.mask.set(x, y);

  SECTION("identity warp is the identity on pixels and depths") {
    const auto warped = warp_primitive(prim, 1.0, Pose::identity(), k, d);
    for (const WarpedPixel& w : warped) {
      REQUIRE(w.valid);
      CHECK((w.warped_px - w.source_px).norm() < 1e-12);
      CHECK(w.proj_depth == Catch::Approx(2.0));
    }
  }

  SECTION("a push along z scales pixels toward the principal point") {
    Pose t;
    t.translation = Vec3(0, 0, 0.5);
    const auto warped = warp_primitive(prim, 1.0, t, k, d);
    for (const WarpedPixel& w : warped) {
      if (!w.valid) continue;
      CHECK(w.proj_depth == Catch::Approx(2.5));
      const Vec2 expect = (w.source_px - Vec2(k.cx, k.cy)) * (2.0 / 2.5) +
                          Vec2(k.cx, k.cy);
      CHECK((w.warped_px - expect).norm() < 1e-9);
    }
  }

  SECTION("pixels warped out of the image are invalid") {
    Pose t;
    t.translation = Vec3(10.0, 0, 0); // push far sideways
    const auto warped = warp_primitive(prim, 1.0, t, k, d);
    for (const WarpedPixel& w : warped) CHECK_FALSE(w.valid);
  }
}

TEST_CASE("per-primitive residual and depth cost", "[refine]") {
  const Intrinsics k{100.0, 100.0, 40.0, 30.0, 80, 60};
  const auto wall = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                        Vec3(1, 0, 0), 3.0, 3.0, 0);
  const std::vector<MapPrimitive> map = {wall};
  const DepthMap d = render_depth(map, Pose::identity(), k);

  QueryPrimitive prim;
  prim.plane = Plane(Vec3(0, 0, -1), 2.0);
  prim.mask = Mask(k.width, k.height);
  for (int y = 10; y < 50; ++y)
    for (int x = 10; x < 70; ++x) prim.mask.set(x, y);
  const PrimitiveDepthCache cache = primitive_depth_cache(prim, k);
  std::vector<int> all(cache.pixels.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);

  SECTION("self-consistent state has vanishing residual") {
    const auto [r, valid] =
        per_primitive_residual(cache, 1.0, Pose::identity(), k, d, all);
    CHECK(valid == all.size());
    CHECK(r < 1e-10);
  }

  SECTION("doubling delta on a fronto plane gives the closed form") {
    const auto [r, valid] =
        per_primitive_residual(cache, 2.0, Pose::identity(), k, d, all);
    CHECK(valid > 0);
    CHECK(r == Catch::Approx(4.0)); // (D - 2D)^2 with D = 2
  }

  SECTION("residual equals the mean of per-pixel oracle terms") {
    Pose t;
    t.translation = Vec3(0.02, -0.01, 0.03);
    const auto [r, valid] = per_primitive_residual(cache, 1.1, t, k, d, all);
    double acc = 0;
    size_t n = 0;
    for (int i : all) {
      const Vec3 x = 1.1 * cache.base_depth[i] * cache.rays[i];
      const Vec3 xp = t * x;
      if (xp.z() <= 0) continue;
      const auto s = sample_bilinear(d, k.fx * xp.x() / xp.z() + k.cx,
                                     k.fy * xp.y() / xp.z() + k.cy);
      if (!s) continue;
      acc += (s->value - xp.z()) * (s->value - xp.z());
      ++n;
    }
    REQUIRE(n == valid);
    CHECK(r == Catch::Approx(acc / n).margin(1e-9));
  }

  SECTION("depth cost averages per-primitive residuals") {
    QueryPrimitive shifted = prim;
    std::vector<PrimitiveDepthCache> caches;
    caches.push_back(primitive_depth_cache(prim, k));
    caches.push_back(primitive_depth_cache(shifted, k));
    const auto sample = full_sample(caches);
    VecX deltas(2);
    deltas << 2.0, 1.0; // residuals 4 and 0
    const double cost =
        depth_cost(caches, deltas, Pose::identity(), k, d, sample);
    CHECK(cost == Catch::Approx(2.0));
  }
}

TEST_CASE("cost gradient", "[refine]") {
  const std::vector<MapPrimitive> map = make_closed_room();
  const Pose gt = make_room_pose();
  const DepthMap d = render_depth(map, gt, kK);
  std::vector<QueryPrimitive> prims = gt_query_prims(map, gt, kK);
  for (QueryPrimitive& p : prims) p.mask = erode_border(p.mask, 16);
  std::erase_if(prims, [](const QueryPrimitive& p) { return p.mask.count() < 200; });
  REQUIRE(prims.size() >= 3);

  std::vector<PrimitiveDepthCache> caches;
  for (const QueryPrimitive& p : prims) caches.push_back(primitive_depth_cache(p, kK));
  const auto sample = full_sample(caches);
  const size_t nq = caches.size();

  SECTION("gradient vanishes at the self-consistent minimum") {
    const CostGradient g =
        cost_gradient(caches, VecX::Ones(nq), Pose::identity(), kK, d, sample);
    CHECK(g.cost < 1e-10);
    CHECK(g.d_xi.norm() < 1e-6);
    CHECK(g.d_delta.norm() < 1e-6);
  }

  SECTION("analytic gradient matches central differences at random states") {
    std::mt19937_64 rng(62);
    std::uniform_real_distribution<double> small(-0.02, 0.02);
    std::uniform_real_distribution<double> dlt(0.9, 1.1);
    for (int state = 0; state < 20; ++state) {
      Twist xi0;
      for (int i = 0; i < 6; ++i) xi0[i] = small(rng);
      const Pose t0 = se3_exp(xi0);
      VecX deltas(nq);
      for (size_t p = 0; p < nq; ++p) deltas[p] = dlt(rng);

      const CostGradient g = cost_gradient(caches, deltas, t0, kK, d, sample);
      const double h = 1e-6;
      VecX fd(6 + nq);
      for (int i = 0; i < 6; ++i) {
        Twist step = Twist::Zero();
        step[i] = h;
        const double plus =
            depth_cost(caches, deltas, compose(se3_exp(step), t0), kK, d, sample);
        step[i] = -h;
        const double minus =
            depth_cost(caches, deltas, compose(se3_exp(step), t0), kK, d, sample);
        fd[i] = (plus - minus) / (2 * h);
      }
      for (size_t p = 0; p < nq; ++p) {
        VecX dp = deltas;
        dp[p] += h;
        const double plus = depth_cost(caches, dp, t0, kK, d, sample);
        dp[p] -= 2 * h;
        const double minus = depth_cost(caches, dp, t0, kK, d, sample);
        fd[6 + p] = (plus - minus) / (2 * h);
      }
      VecX analytic(6 + nq);
      analytic.head<6>() = g.d_xi;
      analytic.tail(nq) = g.d_delta;
      const double scale = std::max({analytic.norm(), fd.norm(), 1e-12});
      CHECK((analytic - fd).norm() / scale < 1e-4);
    }
  }

  SECTION("inflating delta beyond truth pushes the gradient positive") {
    VecX deltas = VecX::Ones(nq);
    deltas[0] = 1.2;
    const CostGradient g =
        cost_gradient(caches, deltas, Pose::identity(), kK, d, sample);
    CHECK(g.d_delta[0] > 0.0);
  }
}

// Convex room with panels mounted a small standoff off the walls; the
// bounded-depth silhouettes pin the translation/offset-seed trade-off without
// the deep-occlusion outliers of free-floating geometry.
std::vector<MapPrimitive> make_refine_scene() {
  std::vector<MapPrimitive> map = make_closed_room();
  auto add = [&](const Vec3& c, const Vec3& n, const Vec3& u, double hu, double hv) {
    map.push_back(make_rect_primitive(c, n, u, hu, hv, static_cast<int>(map.size())));
  };
  add({3.2, 3.9, 1.3}, {0, -1, 0}, {1, 0, 0}, 0.8, 0.6);
  add({4.9, 2.6, 1.2}, {-1, 0, 0}, {0, 1, 0}, 0.7, 0.5);
  add({3.0, 2.8, 0.12}, {0, 0, 1}, {1, 0, 0}, 0.7, 0.5);
  add({2.2, 3.88, 1.1}, {0, -1, 0}, {1, 0, 0}, 0.5, 0.7);
  add({4.88, 3.0, 0.9}, {-1, 0, 0}, {0, 1, 0}, 0.45, 0.55);
  add({3.6, 2.4, 2.68}, {0, 0, -1}, {1, 0, 0}, 0.6, 0.5);
  return map;
}

TEST_CASE("refine_pose", "[refine]") {
  const std::vector<MapPrimitive> map = make_refine_scene();
  const Pose gt = make_room_pose();
  const auto prims = gt_query_prims(map, gt, kK);
  REQUIRE(prims.size() >= 3);

  SECTION("starting at the optimum does not drift") {
    RefineConfig cfg;
    cfg.iterations = 50;
    cfg.rng_seed = 1;
    const RefineResult res = refine_pose(gt, prims, map, kK, cfg);
    CHECK_FALSE(res.no_overlap);
    CHECK(oracles::rotation_angle_robust(res.pose.rotation, gt.rotation) < 1e-4);
    CHECK((res.pose.translation - gt.translation).norm() < 1e-4);
    CHECK(res.full_cost_final <= res.full_cost_initial);
  }

  SECTION("perturbed pose and offsets are recovered") {
    std::mt19937_64 rng(63);
    int ok = 0;
    const int trials = 10;
    for (int trial = 0; trial < trials; ++trial) {
      std::mt19937_64 trng(100 + trial);
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      const Pose p0 = compose(
          gt, Pose{rotation_about(oracles::random_unit(trng), deg2rad(2.0)),
                   0.05 * oracles::random_unit(trng)});
      std::vector<QueryPrimitive> noisy = prims;
      for (QueryPrimitive& p : noisy)
        p.plane.offset /= 0.8 + 0.45 * u01(trng); // true delta in [0.8, 1.25]

      RefineConfig cfg;
      cfg.iterations = 200;
      cfg.lr_pose = 1e-2;
      cfg.lr_offsets = 1e-1;
      cfg.rng_seed = 200 + trial;
      const RefineResult res = refine_pose(p0, noisy, map, kK, cfg);
      const double dr = rotation_angle_deg(res.pose.rotation, gt.rotation);
      const double dt = (res.pose.translation - gt.translation).norm();
      CHECK(res.full_cost_final <= res.full_cost_initial);
      for (Eigen::Index i = 0; i < res.seeds.delta.size(); ++i)
        CHECK(res.seeds.delta[i] > 0.0);
      if (dr < 0.5 && dt < 0.02) ++ok;
    }
    CHECK(ok >= trials * 9 / 10);
  }

  SECTION("deterministic given the seed") {
    RefineConfig cfg;
    cfg.iterations = 30;
    cfg.rng_seed = 11;
    const Pose p0 = compose(gt, Pose{rotation_about(Vec3(0, 1, 0), 0.01),
                                     Vec3(0.02, 0.0, -0.01)});
    const RefineResult a = refine_pose(p0, prims, map, kK, cfg);
    const RefineResult b = refine_pose(p0, prims, map, kK, cfg);
    CHECK((a.pose.rotation - b.pose.rotation).norm() == 0.0);
    CHECK((a.pose.translation - b.pose.translation).norm() == 0.0);
    REQUIRE(a.cost_trace.size() == b.cost_trace.size());
    for (size_t i = 0; i < a.cost_trace.size(); ++i)
      CHECK(a.cost_trace[i] == b.cost_trace[i]);
  }

  SECTION("no overlap is flagged and the input pose returned") {
    Pose away; // far outside the room, looking further away
    away.translation = Vec3(100, 100, 100);
    const RefineResult res = refine_pose(away, prims, map, kK, RefineConfig{});
    CHECK(res.no_overlap);
    CHECK((res.pose.rotation - away.rotation).norm() == 0.0);
    CHECK((res.pose.translation - away.translation).norm() == 0.0);
  }
}
