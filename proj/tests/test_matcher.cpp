#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "planeloc/matcher.hpp"

using namespace planeloc;

namespace {

RopeBasis random_basis(size_t count, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  RopeBasis b(count);
  for (Vec3& v : b) v = Vec3(g(rng), g(rng), g(rng));
  return b;
}

VecX random_vec(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  VecX v(n);
  for (int i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

MatX random_mat(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  MatX m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

// test-local dense RoPE construction
MatX dense_rope(const RopeBasis& bases, const Vec3& n) {
  const int c = static_cast<int>(bases.size()) * 2;
  MatX m = MatX::Zero(c, c);
  for (size_t k = 0; k < bases.size(); ++k) {
    const double t = bases[k].dot(n);
    m(2 * k, 2 * k) = std::cos(t);
    m(2 * k, 2 * k + 1) = -std::sin(t);
    m(2 * k + 1, 2 * k) = std::sin(t);
    m(2 * k + 1, 2 * k + 1) = std::cos(t);
  }
  return m;
}

} // namespace

TEST_CASE("rope matrix identity, additivity, orthogonality", "[matcher]") {
  std::mt19937_64 rng(31);
  const RopeBasis bases = random_basis(8, rng);

  CHECK((rope_matrix(bases, Vec3::Zero()) - MatX::Identity(16, 16)).norm() < 1e-12);

  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 a = oracles::random_unit(rng);
    const Vec3 b = oracles::random_unit(rng);
    const MatX prod = rope_matrix(bases, a) * rope_matrix(bases, b);
    CHECK((prod - rope_matrix(bases, a + b)).norm() < 1e-9);
    const MatX m = rope_matrix(bases, a);
    CHECK((m.transpose() * m - MatX::Identity(16, 16)).norm() < 1e-9);
  }
}

TEST_CASE("attention score reduces to a dot product without rope", "[matcher]") {
  std::mt19937_64 rng(32);
  const int c = 16;
  const VecX q = random_vec(c, rng);
  const VecX k = random_vec(c, rng);
  const RopeBasis bases = random_basis(c / 2, rng);
  const Vec3 n = oracles::random_unit(rng);

  CHECK(attention_score(q, k, n, n, bases) == Catch::Approx(q.dot(k)));
  const RopeBasis zero(c / 2, Vec3::Zero());
  CHECK(attention_score(q, k, n, oracles::random_unit(rng), zero) ==
        Catch::Approx(q.dot(k)));
}

TEST_CASE("attention score equals the dense matrix product", "[matcher]") {
  std::mt19937_64 rng(33);
  const int c = 12;
  for (int trial = 0; trial < 20; ++trial) {
    const VecX q = random_vec(c, rng);
    const VecX k = random_vec(c, rng);
    const RopeBasis bases = random_basis(c / 2, rng);
    const Vec3 ni = oracles::random_unit(rng);
    const Vec3 nj = oracles::random_unit(rng);
    const double expect = q.transpose() * dense_rope(bases, nj - ni) * k;
    CHECK(attention_score(q, k, ni, nj, bases) == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("assignment matrix combines matchability and dual softmax", "[matcher]") {
  SECTION("single pair with full matchability is certain") {
    MatX s(1, 1);
    s << 3.7;
    const AssignmentMatrix am = assignment_matrix(s, VecX::Ones(1), VecX::Ones(1));
    CHECK(am.a(0, 0) == Catch::Approx(1.0));
  }

  SECTION("entries never exceed the matchability product") {
    std::mt19937_64 rng(34);
    const MatX s = random_mat(5, 7, rng);
    VecX sq = random_vec(5, rng).cwiseAbs().cwiseMin(1.0);
    VecX sm = random_vec(7, rng).cwiseAbs().cwiseMin(1.0);
    const AssignmentMatrix am = assignment_matrix(s, sq, sm);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 7; ++j) {
        CHECK(am.a(i, j) >= 0.0);
        CHECK(am.a(i, j) <= sq[i] * sm[j] + 1e-15);
      }
  }

  SECTION("zero query matchability kills the matrix") {
    std::mt19937_64 rng(35);
    const MatX s = random_mat(3, 4, rng);
    const AssignmentMatrix am = assignment_matrix(s, VecX::Zero(3), VecX::Ones(4));
    CHECK(am.a.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("row softmax factor rows sum to one") {
    std::mt19937_64 rng(36);
    const MatX p = softmax_rows(random_mat(6, 9, rng));
    for (int i = 0; i < 6; ++i) CHECK(p.row(i).sum() == Catch::Approx(1.0));
  }
}

TEST_CASE("similarity and matchability projections", "[matcher]") {
  MatcherConfig cfg;
  cfg.c = 8;
  cfg.n_layers = 1;
  cfg.heads = 2;
  std::mt19937_64 rng(37);

  SECTION("zero matchability projection gives sigma one half") {
    MatcherWeights w = MatcherWeights::zeros(cfg);
    const MatX fq = random_mat(3, cfg.c, rng);
    const MatX fm = random_mat(4, cfg.c, rng);
    const auto [s, sq, sm] = similarity_and_matchability(fq, fm, w);
    for (int i = 0; i < 3; ++i) CHECK(sq[i] == Catch::Approx(0.5));
    for (int j = 0; j < 4; ++j) CHECK(sm[j] == Catch::Approx(0.5));
  }

  SECTION("identical inputs and shared projection give a symmetric S") {
    MatcherWeights w = MatcherWeights::random(cfg, 1);
    const MatX f = random_mat(4, cfg.c, rng);
    const auto [s, sq, sm] = similarity_and_matchability(f, f, w);
    CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("matches the explicit matrix product") {
    MatcherWeights w = MatcherWeights::random(cfg, 2);
    const MatX fq = random_mat(2, cfg.c, rng);
    const MatX fm = random_mat(3, cfg.c, rng);
    const auto [s, sq, sm] = similarity_and_matchability(fq, fm, w);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        const VecX zi = w.similarity_proj * fq.row(i).transpose();
        const VecX zj = w.similarity_proj * fm.row(j).transpose();
        CHECK(s(i, j) == Catch::Approx(zi.dot(zj)).margin(1e-9));
      }
    for (int i = 0; i < 2; ++i) {
      const double pre = w.matchability_weight.dot(fq.row(i)) + w.matchability_bias;
      CHECK(sq[i] == Catch::Approx(1.0 / (1.0 + std::exp(-pre))));
    }
  }
}

TEST_CASE("mutual nearest neighbor extraction", "[matcher]") {
  SECTION("clear diagonal") {
    AssignmentMatrix am;
    am.a = MatX(2, 2);
    am.a << 0.9, 0.1, 0.1, 0.8;
    const auto out = extract_correspondences(am, 0.5);
    REQUIRE(out.size() == 2);
    CHECK(out[0].query_idx == 0);
    CHECK(out[0].map_idx == 0);
    CHECK(out[1].query_idx == 1);
    CHECK(out[1].map_idx == 1);
  }

  SECTION("everything below the threshold is dropped") {
    AssignmentMatrix am;
    am.a = MatX::Constant(3, 3, 0.2);
    CHECK(extract_correspondences(am, 0.5).empty());
  }

  SECTION("row maxima that lose their column are excluded") {
    AssignmentMatrix am;
    am.a = MatX(2, 2);
    am.a << 0.7, 0.6, 0.1, 0.9; // (0,0) wins; (1,1) wins; (0,1) loses column 1
    const auto out = extract_correspondences(am, 0.05);
    REQUIRE(out.size() == 2);
    CHECK(out[0].map_idx == 0);
    CHECK(out[1].map_idx == 1);
  }

  SECTION("exact ties are discarded") {
    AssignmentMatrix am;
    am.a = MatX(1, 2);
    am.a << 0.8, 0.8;
    CHECK(extract_correspondences(am, 0.5).empty());
  }

  SECTION("output is one-to-one on random matrices") {
    std::mt19937_64 rng(38);
    for (int trial = 0; trial < 50; ++trial) {
      AssignmentMatrix am;
      am.a = random_mat(6, 8, rng).cwiseAbs();
      am.a /= am.a.maxCoeff();
      const auto out = extract_correspondences(am, 0.1);
      std::set<int> qs, ms;
      for (const Correspondence& c : out) {
        CHECK(qs.insert(c.query_idx).second);
        CHECK(ms.insert(c.map_idx).second);
        CHECK(c.score > 0.1);
      }
    }
  }
}

TEST_CASE("matcher forward pass shape handling", "[matcher]") {
  MatcherConfig bad;
  bad.c = 8;
  bad.n_layers = 0;
  CHECK_THROWS_AS(MatcherWeights::zeros(bad), ShapeMismatch);

  MatcherConfig cfg;
  cfg.c = 8;
  cfg.n_layers = 2;
  cfg.heads = 2;
  const MatcherWeights w = MatcherWeights::random(cfg, 3);
  std::mt19937_64 rng(39);

  SECTION("single primitive per side runs") {
    const MatX fq = random_mat(1, cfg.c, rng);
    const MatX fm = random_mat(1, cfg.c, rng);
    std::vector<Vec3> nq = {oracles::random_unit(rng)};
    std::vector<Vec3> nm = {oracles::random_unit(rng)};
    const MatcherResult res = matcher_forward(fq, nq, fm, nm, w);
    REQUIRE(res.per_layer.size() == 2);
    CHECK(res.per_layer.back().a.rows() == 1);
    CHECK(res.per_layer.back().a.cols() == 1);
  }

  SECTION("embedding width must match the config") {
    const MatX fq = random_mat(2, cfg.c + 2, rng);
    const MatX fm = random_mat(2, cfg.c, rng);
    std::vector<Vec3> n2 = {Vec3(1, 0, 0), Vec3(0, 1, 0)};
    CHECK_THROWS_AS(matcher_forward(fq, n2, fm, n2, w), ShapeMismatch);
  }
}

TEST_CASE("matcher forward is permutation equivariant", "[matcher]") {
  MatcherConfig cfg;
  cfg.c = 16;
  cfg.n_layers = 2;
  cfg.heads = 4;
  const MatcherWeights w = MatcherWeights::random(cfg, 4);
  std::mt19937_64 rng(40);
  const int nq = 4, nm = 5;
  const MatX fq = random_mat(nq, cfg.c, rng);
  const MatX fm = random_mat(nm, cfg.c, rng);
  std::vector<Vec3> qn, mn;
  for (int i = 0; i < nq; ++i) qn.push_back(oracles::random_unit(rng));
  for (int j = 0; j < nm; ++j) mn.push_back(oracles::random_unit(rng));

  const std::vector<int> perm = {3, 0, 4, 1, 2}; // new index of old j
  MatX fm_p(nm, cfg.c);
  std::vector<Vec3> mn_p(nm);
  for (int j = 0; j < nm; ++j) {
    fm_p.row(perm[j]) = fm.row(j);
    mn_p[perm[j]] = mn[j];
  }

  const MatcherResult a = matcher_forward(fq, qn, fm, mn, w);
  const MatcherResult b = matcher_forward(fq, qn, fm_p, mn_p, w);
  for (int j = 0; j < nm; ++j)
    CHECK((a.map_embs.row(j) - b.map_embs.row(perm[j])).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.query_embs - b.query_embs).cwiseAbs().maxCoeff() < 1e-12);
  for (size_t l = 0; l < a.per_layer.size(); ++l)
    for (int i = 0; i < nq; ++i)
      for (int j = 0; j < nm; ++j)
        CHECK(a.per_layer[l].a(i, j) ==
              Catch::Approx(b.per_layer[l].a(i, perm[j])).margin(1e-12));
}

TEST_CASE("mask iou", "[matcher]") {
  Mask a(2, 2), b(2, 2);
  a.set(0, 0);
  a.set(1, 0);
  b.set(1, 0);
  b.set(1, 1);
  CHECK(mask_iou(a, b) == Catch::Approx(1.0 / 3.0));
  CHECK(mask_iou(a, a) == Catch::Approx(1.0));
  Mask c(2, 2);
  c.set(0, 1);
  CHECK(mask_iou(a, c) == 0.0);
  Mask other(3, 2);
  CHECK_THROWS_AS(mask_iou(a, other), DimensionMismatch);
  CHECK(mask_iou(Mask(2, 2), Mask(2, 2)) == 0.0);
}

TEST_CASE("projected primitive masks", "[matcher]") {
  Intrinsics k{400.0, 400.0, 320.0, 240.0, 640, 480};

  SECTION("primitive behind the camera projects to nothing") {
    const MapPrimitive prim = make_rect_primitive(Vec3(0, 0, -2), Vec3(0, 0, -1),
                                                  Vec3(1, 0, 0), 0.5, 0.5);
    const DepthMap z(k.width, k.height, 0.0);
    CHECK(project_primitive_mask(prim, Pose::identity(), k, z).empty());
  }

  SECTION("fronto square obeys pinhole area scaling") {
    const MapPrimitive prim = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                                  Vec3(1, 0, 0), 0.4, 0.4);
    const std::vector<MapPrimitive> map = {prim};
    const DepthMap z = render_depth(map, Pose::identity(), k);
    const Mask mask = project_primitive_mask(prim, Pose::identity(), k, z);
    const double expected = (0.8 * k.fx / 2.0) * (0.8 * k.fy / 2.0);
    CHECK(std::abs(static_cast<double>(mask.count()) - expected) < 0.02 * expected);
  }

  SECTION("occluded pixels are excluded") {
    const MapPrimitive back = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                                  Vec3(1, 0, 0), 0.8, 0.8);
    const MapPrimitive front = make_rect_primitive(Vec3(0, 0, 1.0), Vec3(0, 0, -1),
                                                   Vec3(1, 0, 0), 0.2, 0.2);
    const std::vector<MapPrimitive> map = {back, front};
    const DepthMap z = render_depth(map, Pose::identity(), k);
    const Mask back_mask = project_primitive_mask(back, Pose::identity(), k, z);
    const Mask front_mask = project_primitive_mask(front, Pose::identity(), k, z);
    CHECK_FALSE(back_mask.intersects(front_mask));
    CHECK_FALSE(back_mask.test(320, 240));
    CHECK(front_mask.test(320, 240));
  }
}

TEST_CASE("label generation from projected overlap", "[matcher]") {
  Intrinsics k{200.0, 200.0, 160.0, 120.0, 320, 240};
  const MapPrimitive wall = make_rect_primitive(Vec3(0, 0, 2.0), Vec3(0, 0, -1),
                                                Vec3(1, 0, 0), 1.2, 0.8);
  const MapPrimitive off_view = make_rect_primitive(Vec3(50, 0, 2.0), Vec3(0, 0, -1),
                                                    Vec3(1, 0, 0), 0.5, 0.5);
  std::vector<MapPrimitive> map = {wall, off_view};
  map[0].index = 0;
  map[1].index = 1;
  const DepthMap z = render_depth(map, Pose::identity(), k);
  const Mask projected = project_primitive_mask(wall, Pose::identity(), k, z);

  SECTION("identical mask matches with IoU one") {
    QueryPrimitive q;
    q.plane = transform_plane(invert(Pose::identity()), wall.plane);
    q.mask = projected;
    q.index = 0;
    std::vector<QueryPrimitive> prims;
    prims.push_back(std::move(q));
    MatX iou;
    const MatchLabels labels =
        generate_labels(prims, map, Pose::identity(), k, 0.5, &iou);
    REQUIRE(labels.matches.size() == 1);
    CHECK(labels.matches[0] == std::pair<int, int>(0, 0));
    CHECK(iou(0, 0) == Catch::Approx(1.0));
    CHECK(labels.unmatchable_query.empty());
    REQUIRE(labels.unmatchable_map.size() == 1);
    CHECK(labels.unmatchable_map[0] == 1);
  }

  SECTION("disjoint masks are unmatchable") {
    QueryPrimitive q;
    q.plane = wall.plane;
    q.mask = Mask(k.width, k.height);
    q.mask.set(0, 0); // not covered by the wall projection
    std::vector<QueryPrimitive> prims;
    prims.push_back(std::move(q));
    const MatchLabels labels = generate_labels(prims, map, Pose::identity(), k, 0.5);
    CHECK(labels.matches.empty());
    REQUIRE(labels.unmatchable_query.size() == 1);
  }

  SECTION("two fragments may share one map primitive") {
    QueryPrimitive left, right;
    left.plane = right.plane = wall.plane;
    left.mask = Mask(k.width, k.height);
    right.mask = Mask(k.width, k.height);
    projected.for_each([&](int x, int y) {
      if (x < 160)
        left.mask.set(x, y);
      else
        right.mask.set(x, y);
    });
    // each fragment overlaps only the wall; with tau* below the fragment
    // fraction both pair to map index 0
    std::vector<QueryPrimitive> prims;
    prims.push_back(std::move(left));
    prims.push_back(std::move(right));
    const MatchLabels labels = generate_labels(prims, map, Pose::identity(), k, 0.3);
    REQUIRE(labels.matches.size() == 2);
    CHECK(labels.matches[0].second == 0);
    CHECK(labels.matches[1].second == 0);
  }
}

TEST_CASE("matching loss values", "[matcher]") {
  SECTION("perfect predictions give zero loss") {
    AssignmentMatrix am;
    am.a = MatX::Zero(2, 3);
    am.a(0, 1) = 1.0;
    am.a(1, 0) = 1.0;
    am.sigma_q = VecX::Ones(2);
    am.sigma_m = VecX::Zero(3);
    am.sigma_m[0] = 1.0;
    am.sigma_m[1] = 1.0;
    MatchLabels labels;
    labels.matches = {{0, 1}, {1, 0}};
    labels.unmatchable_map = {2};
    const std::vector<AssignmentMatrix> layers = {am};
    CHECK(matching_loss(layers, labels) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("a single e^-1 assignment costs exactly one") {
    AssignmentMatrix am;
    am.a = MatX::Constant(1, 1, std::exp(-1.0));
    am.sigma_q = VecX::Ones(1);
    am.sigma_m = VecX::Ones(1);
    MatchLabels labels;
    labels.matches = {{0, 0}};
    const std::vector<AssignmentMatrix> layers = {am};
    CHECK(matching_loss(layers, labels) == Catch::Approx(1.0));
  }

  SECTION("loss is non-negative on realized assignment matrices") {
    MatcherConfig cfg;
    cfg.c = 8;
    cfg.n_layers = 2;
    cfg.heads = 2;
    const MatcherWeights w = MatcherWeights::random(cfg, 11);
    std::mt19937_64 rng(41);
    const MatX fq = random_mat(3, cfg.c, rng);
    const MatX fm = random_mat(4, cfg.c, rng);
    std::vector<Vec3> qn = {Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    std::vector<Vec3> mn = {Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1),
                            Vec3(0, 0, -1)};
    const MatcherResult res = matcher_forward(fq, qn, fm, mn, w);
    MatchLabels labels;
    labels.matches = {{0, 1}, {1, 0}};
    labels.unmatchable_query = {2};
    labels.unmatchable_map = {2, 3};
    CHECK(matching_loss(res.per_layer, labels) >= 0.0);
  }
}

TEST_CASE("matching loss gradient agrees with central differences", "[matcher]") {
  MatcherConfig cfg;
  cfg.c = 8;
  cfg.n_layers = 2;
  cfg.heads = 2;
  MatcherWeights w = MatcherWeights::random(cfg, 12);
  std::mt19937_64 rng(42);
  const MatX fq = random_mat(3, cfg.c, rng);
  const MatX fm = random_mat(4, cfg.c, rng);
  std::vector<Vec3> qn, mn;
  for (int i = 0; i < 3; ++i) qn.push_back(oracles::random_unit(rng));
  for (int j = 0; j < 4; ++j) mn.push_back(oracles::random_unit(rng));
  MatchLabels labels;
  labels.matches = {{0, 1}, {1, 0}};
  labels.unmatchable_query = {2};
  labels.unmatchable_map = {2, 3};

  const auto [loss, grad] = matching_loss_gradient(fq, qn, fm, mn, w, labels);
  CHECK(loss >= 0.0);

  const VecX flat = w.flatten();
  const VecX analytic = grad.flatten();
  REQUIRE(analytic.size() == flat.size());
  VecX numeric(flat.size());
  const double h = 1e-5;
  MatcherWeights probe = w;
  for (Eigen::Index p = 0; p < flat.size(); ++p) {
    VecX x = flat;
    x[p] += h;
    probe.set_flat(x);
    const MatcherResult plus = matcher_forward(fq, qn, fm, mn, probe);
    x[p] -= 2 * h;
    probe.set_flat(x);
    const MatcherResult minus = matcher_forward(fq, qn, fm, mn, probe);
    numeric[p] =
        (matching_loss(plus.per_layer, labels) - matching_loss(minus.per_layer, labels)) /
        (2 * h);
  }
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  CHECK((analytic - numeric).norm() / scale < 1e-4);
}
