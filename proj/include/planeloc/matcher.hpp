#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "planeloc/primitives.hpp"
#include "planeloc/render.hpp"
#include "planeloc/rng.hpp"

namespace planeloc {

// One 3-vector per 2D embedding subspace; the rotation angle of subspace k
// for normal n is bases[k].dot(n).
using RopeBasis = std::vector<Vec3>;

struct MatcherConfig {
  int c = 384;
  int n_layers = 4;
  int heads = 4;
  int ffn_hidden = 0; // 0 -> 2c
  bool pre_norm = true;

  int hidden() const { return ffn_hidden > 0 ? ffn_hidden : 2 * c; }
  int head_dim() const { return c / heads; }

  void validate() const {
    if (c <= 0 || c % 2 != 0)
      throw ShapeMismatch("matcher: embedding dim must be positive and even");
    if (n_layers < 1) throw ShapeMismatch("matcher: need at least one layer");
    if (heads < 1 || c % heads != 0 || (c / heads) % 2 != 0)
      throw ShapeMismatch("matcher: head dim must be even and divide c");
  }
};

struct AttentionWeights {
  MatX wq, wk, wv, wo; // each c x c
};

struct FeedForwardWeights {
  MatX w1, w2;  // hidden x c, c x hidden
  VecX b1, b2;  // hidden, c
};

struct LayerWeights {
  AttentionWeights self_attn, cross_attn;
  FeedForwardWeights ffn;
};

struct MatcherWeights {
  MatcherConfig config;
  std::vector<LayerWeights> layers;
  RopeBasis rope_bases;    // c/2 vectors, split across heads
  MatX similarity_proj;    // c x c, shared by both sides
  VecX matchability_weight; // c
  double matchability_bias = 0;

  static MatcherWeights zeros(const MatcherConfig& cfg) {
    cfg.validate();
    MatcherWeights w;
    w.config = cfg;
    const int c = cfg.c, h = cfg.hidden();
    w.layers.resize(cfg.n_layers);
    for (LayerWeights& l : w.layers) {
      for (AttentionWeights* a : {&l.self_attn, &l.cross_attn}) {
        a->wq = MatX::Zero(c, c);
        a->wk = MatX::Zero(c, c);
        a->wv = MatX::Zero(c, c);
        a->wo = MatX::Zero(c, c);
      }
      l.ffn.w1 = MatX::Zero(h, c);
      l.ffn.b1 = VecX::Zero(h);
      l.ffn.w2 = MatX::Zero(c, h);
      l.ffn.b2 = VecX::Zero(c);
    }
    w.rope_bases.assign(c / 2, Vec3::Zero());
    w.similarity_proj = MatX::Zero(c, c);
    w.matchability_weight = VecX::Zero(c);
    w.matchability_bias = 0;
    return w;
  }

  // Seeded Gaussian init, sigma = 1/sqrt(fan-in).
  static MatcherWeights random(const MatcherConfig& cfg, uint64_t seed) {
    MatcherWeights w = zeros(cfg);
    Rng rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto fill = [&](MatX& m, double sigma) {
      for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) m(i, j) = sigma * gauss(rng);
    };
    const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.c));
    const double sh = 1.0 / std::sqrt(static_cast<double>(cfg.hidden()));
    for (LayerWeights& l : w.layers) {
      fill(l.self_attn.wq, sc);
      fill(l.self_attn.wk, sc);
      fill(l.self_attn.wv, sc);
      fill(l.self_attn.wo, sc);
      fill(l.cross_attn.wq, sc);
      fill(l.cross_attn.wk, sc);
      fill(l.cross_attn.wv, sc);
      fill(l.cross_attn.wo, sc);
      fill(l.ffn.w1, sc);
      fill(l.ffn.w2, sh);
    }
    for (Vec3& b : w.rope_bases)
      b = Vec3(gauss(rng), gauss(rng), gauss(rng));
    fill(w.similarity_proj, sc);
    for (int i = 0; i < cfg.c; ++i) w.matchability_weight[i] = sc * gauss(rng);
    return w;
  }

  template <typename F>
  void visit(F&& f) {
    for (LayerWeights& l : layers) {
      f(l.self_attn.wq);
      f(l.self_attn.wk);
      f(l.self_attn.wv);
      f(l.self_attn.wo);
      f(l.cross_attn.wq);
      f(l.cross_attn.wk);
      f(l.cross_attn.wv);
      f(l.cross_attn.wo);
      f(l.ffn.w1);
      f(l.ffn.b1);
      f(l.ffn.w2);
      f(l.ffn.b2);
    }
  }

  size_t parameter_count() const {
    size_t n = 0;
    const_cast<MatcherWeights*>(this)->visit([&](auto& m) { n += m.size(); });
    n += rope_bases.size() * 3 + similarity_proj.size() + matchability_weight.size() + 1;
    return n;
  }

  VecX flatten() const {
    VecX out(parameter_count());
    size_t at = 0;
    auto put = [&](const auto& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) out[at++] = m.data()[i];
    };
    const_cast<MatcherWeights*>(this)->visit([&](auto& m) { put(m); });
    for (const Vec3& b : rope_bases) {
      out[at++] = b.x();
      out[at++] = b.y();
      out[at++] = b.z();
    }
    put(similarity_proj);
    put(matchability_weight);
    out[at++] = matchability_bias;
    return out;
  }

  void set_flat(const VecX& v) {
    size_t at = 0;
    auto take = [&](auto& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = v[at++];
    };
    visit([&](auto& m) { take(m); });
    for (Vec3& b : rope_bases) {
      b.x() = v[at++];
      b.y() = v[at++];
      b.z() = v[at++];
    }
    take(similarity_proj);
    take(matchability_weight);
    matchability_bias = v[at++];
  }
};

struct AssignmentMatrix {
  MatX a;            // Nq x Nm, entries in [0, 1]
  VecX sigma_q, sigma_m;
};

struct MatchLabels {
  std::vector<std::pair<int, int>> matches; // (query_idx, map_idx), one-to-many map side
  std::vector<int> unmatchable_query, unmatchable_map;
};

struct Correspondence {
  int query_idx = -1, map_idx = -1;
  double score = 0;
};

// ---------------------------------------------------------------------------
// RoPE

inline MatX rope_matrix(const RopeBasis& bases, const Vec3& n) {
  const int c = static_cast<int>(bases.size()) * 2;
  MatX m = MatX::Zero(c, c);
  for (size_t k = 0; k < bases.size(); ++k) {
    const double theta = bases[k].dot(n);
    const double ct = std::cos(theta), st = std::sin(theta);
    m(2 * k, 2 * k) = ct;
    m(2 * k, 2 * k + 1) = -st;
    m(2 * k + 1, 2 * k) = st;
    m(2 * k + 1, 2 * k + 1) = ct;
  }
  return m;
}

inline void apply_rope_inplace(std::span<const Vec3> bases, const Vec3& n,
                               Eigen::RowVectorXd& x) {
  for (size_t k = 0; k < bases.size(); ++k) {
    const double theta = bases[k].dot(n);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double x0 = x[2 * k], x1 = x[2 * k + 1];
    x[2 * k] = ct * x0 - st * x1;
    x[2 * k + 1] = st * x0 + ct * x1;
  }
}

// Rotates columns [col0, col0 + 2*bases) of every row by that row's angles.
inline void rope_rotate_block(MatX& m, int col0, std::span<const Vec3> bases,
                              std::span<const Vec3> normals) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (size_t k = 0; k < bases.size(); ++k) {
      const double theta = bases[k].dot(normals[i]);
      const double ct = std::cos(theta), st = std::sin(theta);
      const int col = col0 + 2 * static_cast<int>(k);
      const double x0 = m(i, col), x1 = m(i, col + 1);
      m(i, col) = ct * x0 - st * x1;
      m(i, col + 1) = st * x0 + ct * x1;
    }
}

// a_ij = q_i^T RoPE(n_j - n_i) k_j
inline double attention_score(const VecX& q, const VecX& k, const Vec3& ni,
                              const Vec3& nj, const RopeBasis& bases) {
  if (q.size() != k.size() || q.size() != static_cast<Eigen::Index>(bases.size() * 2))
    throw ShapeMismatch("attention_score: dimension mismatch");
  Eigen::RowVectorXd kr = k.transpose();
  apply_rope_inplace(bases, nj - ni, kr);
  return q.dot(kr.transpose());
}

// ---------------------------------------------------------------------------
// Assignment

inline MatX softmax_rows(const MatX& s) {
  MatX p(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    Eigen::ArrayXXd e = (s.row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

inline MatX softmax_cols(const MatX& s) { return softmax_rows(s.transpose()).transpose(); }

// A_ij = sigma_q_i sigma_m_j softmax_col(S)_ij softmax_row(S)_ij
inline AssignmentMatrix assignment_matrix(const MatX& s, const VecX& sigma_q,
                                          const VecX& sigma_m) {
  if (sigma_q.size() != s.rows() || sigma_m.size() != s.cols())
    throw ShapeMismatch("assignment_matrix: matchability size mismatch");
  AssignmentMatrix out;
  out.sigma_q = sigma_q;
  out.sigma_m = sigma_m;
  out.a = (sigma_q * sigma_m.transpose())
              .cwiseProduct(softmax_cols(s))
              .cwiseProduct(softmax_rows(s));
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// S from projected dot products, sigma from a sigmoid-activated affine map.
inline std::tuple<MatX, VecX, VecX> similarity_and_matchability(
    const MatX& query_embs, const MatX& map_embs, const MatcherWeights& w) {
  if (query_embs.cols() != w.config.c || map_embs.cols() != w.config.c)
    throw ShapeMismatch("similarity_and_matchability: embedding dim mismatch");
  const MatX zq = query_embs * w.similarity_proj.transpose();
  const MatX zm = map_embs * w.similarity_proj.transpose();
  const MatX s = zq * zm.transpose();
  VecX sq = ((query_embs * w.matchability_weight).array() + w.matchability_bias).matrix();
  VecX sm = ((map_embs * w.matchability_weight).array() + w.matchability_bias).matrix();
  for (Eigen::Index i = 0; i < sq.size(); ++i) sq[i] = sigmoid(sq[i]);
  for (Eigen::Index j = 0; j < sm.size(); ++j) sm[j] = sigmoid(sm[j]);
  return {s, sq, sm};
}

// Mutual nearest neighbor with confidence threshold; strict maxima, so the
// result is one-to-one and ties are discarded.
inline std::vector<Correspondence> extract_correspondences(const AssignmentMatrix& am,
                                                           double tau) {
  std::vector<Correspondence> out;
  const MatX& a = am.a;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Eigen::Index jbest = 0;
    const double v = a.row(i).maxCoeff(&jbest);
    if (v <= tau) continue;
    bool strict = true;
    for (Eigen::Index j = 0; j < a.cols() && strict; ++j)
      if (j != jbest && a(i, j) >= v) strict = false;
    for (Eigen::Index r = 0; r < a.rows() && strict; ++r)
      if (r != i && a(r, jbest) >= v) strict = false;
    if (strict)
      out.push_back({static_cast<int>(i), static_cast<int>(jbest), v});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels

// Pairs each query primitive with the map primitive whose projection overlaps
// it most (IoU >= tau_star); everything that never clears the bar on either
// side is unmatchable. One map primitive may serve several query primitives.
inline MatchLabels generate_labels(std::span<const QueryPrimitive> query_prims,
                                   std::span<const MapPrimitive> map_prims,
                                   const Pose& gt_pose, const Intrinsics& k,
                                   double tau_star, MatX* iou_out = nullptr) {
  const DepthMap zbuffer = render_depth(map_prims, gt_pose, k);
  std::vector<Mask> projected;
  projected.reserve(map_prims.size());
  for (const MapPrimitive& mp : map_prims)
    projected.push_back(project_primitive_mask(mp, gt_pose, k, zbuffer));

  MatX iou(query_prims.size(), map_prims.size());
  for (size_t i = 0; i < query_prims.size(); ++i)
    for (size_t j = 0; j < map_prims.size(); ++j)
      iou(i, j) = mask_iou(query_prims[i].mask, projected[j]);

  MatchLabels labels;
  std::vector<uint8_t> map_hit(map_prims.size(), 0);
  for (size_t i = 0; i < query_prims.size(); ++i) {
    Eigen::Index jbest = 0;
    const double best = map_prims.empty() ? 0.0 : iou.row(i).maxCoeff(&jbest);
    if (best >= tau_star)
      labels.matches.emplace_back(static_cast<int>(i), static_cast<int>(jbest));
    else
      labels.unmatchable_query.push_back(static_cast<int>(i));
  }
  for (size_t j = 0; j < map_prims.size(); ++j) {
    double best = 0;
    for (size_t i = 0; i < query_prims.size(); ++i) best = std::max(best, iou(i, j));
    if (best < tau_star) labels.unmatchable_map.push_back(static_cast<int>(j));
  }
  if (iou_out) *iou_out = iou;
  return labels;
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kLogFloor = 1e-12;

// Negative log-likelihood of assignments and unmatchable predictions, summed
// over the supervised layers.
inline double matching_loss(std::span<const AssignmentMatrix> per_layer,
                            const MatchLabels& labels) {
  double total = 0;
  for (const AssignmentMatrix& am : per_layer) {
    double l = 0;
    if (!labels.matches.empty()) {
      double acc = 0;
      for (auto [i, j] : labels.matches)
        acc += std::log(std::max(am.a(i, j), kLogFloor));
      l += acc / static_cast<double>(labels.matches.size());
    }
    if (!labels.unmatchable_query.empty()) {
      double acc = 0;
      for (int i : labels.unmatchable_query)
        acc += std::log(std::max(1.0 - am.sigma_q[i], kLogFloor));
      l += 0.5 * acc / static_cast<double>(labels.unmatchable_query.size());
    }
    if (!labels.unmatchable_map.empty()) {
      double acc = 0;
      for (int j : labels.unmatchable_map)
        acc += std::log(std::max(1.0 - am.sigma_m[j], kLogFloor));
      l += 0.5 * acc / static_cast<double>(labels.unmatchable_map.size());
    }
    total -= l;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Forward pass with caching, and reverse-mode gradients

namespace detail {

struct LnCache {
  MatX y;       // normalized rows
  VecX inv_std; // per row
  bool active = false;
};

inline MatX layer_norm(const MatX& x, LnCache& cache, bool active) {
  cache.active = active;
  if (!active) return x;
  constexpr double eps = 1e-5;
  MatX y(x.rows(), x.cols());
  cache.inv_std.resize(x.rows());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    Eigen::RowVectorXd centered = x.row(i).array() - mu;
    const double var = centered.squaredNorm() / n;
    const double is = 1.0 / std::sqrt(var + eps);
    y.row(i) = centered * is;
    cache.inv_std[i] = is;
  }
  cache.y = y;
  return y;
}

inline MatX layer_norm_backward(const LnCache& cache, const MatX& dy) {
  if (!cache.active) return dy;
  MatX dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dy = dy.row(i).mean();
    const double mean_dyy = dy.row(i).cwiseProduct(cache.y.row(i)).mean();
    dx.row(i) = (cache.inv_std[i] *
                 (dy.row(i).array() - mean_dy - cache.y.row(i).array() * mean_dyy))
                    .matrix();
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * phi;
}

struct AttnCache {
  MatX q, k, v;         // pre-rope projections
  MatX q_rot, k_rot;    // post-rope (aliases q,k when rope unused)
  std::vector<MatX> probs; // per head softmax
  MatX concat;          // pre-output-projection
  bool rope = false;
};

// queries x_q: nq x c (already normalized), keys/values x_kv: nk x c.
// For self-attention pass the side's normals; scores then use the RoPE
// retrofit via per-row rotation of q and k.
inline MatX attention_forward(const AttentionWeights& w, const MatX& x_q,
                              const MatX& x_kv, const MatcherConfig& cfg,
                              const RopeBasis* bases, std::span<const Vec3> n_q,
                              std::span<const Vec3> n_kv, AttnCache& cache) {
  const int dh = cfg.head_dim();
  cache.q = x_q * w.wq.transpose();
  cache.k = x_kv * w.wk.transpose();
  cache.v = x_kv * w.wv.transpose();
  cache.rope = bases != nullptr;
  cache.q_rot = cache.q;
  cache.k_rot = cache.k;
  if (cache.rope) {
    for (int a = 0; a < cfg.heads; ++a) {
      std::span<const Vec3> bs(bases->data() + a * dh / 2, dh / 2);
      rope_rotate_block(cache.q_rot, a * dh, bs, n_q);
      rope_rotate_block(cache.k_rot, a * dh, bs, n_kv);
    }
  }
  cache.probs.resize(cfg.heads);
  cache.concat.resize(x_q.rows(), cfg.c);
  for (int a = 0; a < cfg.heads; ++a) {
    const MatX scores = cache.q_rot.middleCols(a * dh, dh) *
                        cache.k_rot.middleCols(a * dh, dh).transpose();
    cache.probs[a] = softmax_rows(scores);
    cache.concat.middleCols(a * dh, dh) =
        cache.probs[a] * cache.v.middleCols(a * dh, dh);
  }
  return cache.concat * w.wo.transpose();
}

struct AttnGrads {
  MatX dx_q, dx_kv;
};

// Backward through attention_forward. Accumulates weight gradients into `g`
// and rope basis gradients into `db` (3 x c/2 layout), returns input grads.
inline AttnGrads attention_backward(const AttentionWeights& w, const MatX& x_q,
                                    const MatX& x_kv, const MatcherConfig& cfg,
                                    const RopeBasis* bases, std::span<const Vec3> n_q,
                                    std::span<const Vec3> n_kv, const AttnCache& cache,
                                    const MatX& dout, AttentionWeights& g,
                                    std::vector<Vec3>* db) {
  const int dh = cfg.head_dim();
  g.wo += dout.transpose() * cache.concat;
  const MatX dconcat = dout * w.wo;

  MatX dq_rot = MatX::Zero(cache.q.rows(), cfg.c);
  MatX dk_rot = MatX::Zero(cache.k.rows(), cfg.c);
  MatX dv = MatX::Zero(cache.v.rows(), cfg.c);
  for (int a = 0; a < cfg.heads; ++a) {
    const auto p = cache.probs[a];
    const MatX doh = dconcat.middleCols(a * dh, dh);
    MatX dp = doh * cache.v.middleCols(a * dh, dh).transpose();
    dv.middleCols(a * dh, dh) += p.transpose() * doh;
    MatX dscore(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dot = p.row(i).dot(dp.row(i));
      dscore.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
    }
    dq_rot.middleCols(a * dh, dh) += dscore * cache.k_rot.middleCols(a * dh, dh);
    dk_rot.middleCols(a * dh, dh) +=
        dscore.transpose() * cache.q_rot.middleCols(a * dh, dh);
  }

  MatX dq = dq_rot, dk = dk_rot;
  if (cache.rope) {
    auto unrotate = [&](const MatX& pre, MatX& dpost, std::span<const Vec3> normals) {
      for (int a = 0; a < cfg.heads; ++a) {
        std::span<const Vec3> bs(bases->data() + a * dh / 2, dh / 2);
        for (Eigen::Index i = 0; i < dpost.rows(); ++i) {
          for (size_t s = 0; s < bs.size(); ++s) {
            const double theta = bs[s].dot(normals[i]);
            const double ct = std::cos(theta), st = std::sin(theta);
            const int col = a * dh + 2 * static_cast<int>(s);
            const double x0 = pre(i, col), x1 = pre(i, col + 1);
            const double dy0 = dpost(i, col), dy1 = dpost(i, col + 1);
            // dL/dtheta through the 2D rotation
            const double dtheta = dy0 * (-st * x0 - ct * x1) + dy1 * (ct * x0 - st * x1);
            if (db)
              (*db)[a * dh / 2 + s] += dtheta * normals[i];
            dpost(i, col) = ct * dy0 + st * dy1;
            dpost(i, col + 1) = -st * dy0 + ct * dy1;
          }
        }
      }
    };
    unrotate(cache.q, dq, n_q);
    unrotate(cache.k, dk, n_kv);
  }

  g.wq += dq.transpose() * x_q;
  g.wk += dk.transpose() * x_kv;
  g.wv += dv.transpose() * x_kv;
  AttnGrads out;
  out.dx_q = dq * w.wq;
  out.dx_kv = dk * w.wk + dv * w.wv;
  return out;
}

struct FfnCache {
  LnCache ln;
  MatX xn, h1, act;
};

inline MatX ffn_forward(const FeedForwardWeights& w, const MatX& x, bool pre_norm,
                        FfnCache& cache) {
  cache.xn = layer_norm(x, cache.ln, pre_norm);
  cache.h1 = (cache.xn * w.w1.transpose()).rowwise() + w.b1.transpose();
  cache.act = cache.h1.unaryExpr([](double v) { return gelu(v); });
  return (cache.act * w.w2.transpose()).rowwise() + w.b2.transpose();
}

inline MatX ffn_backward(const FeedForwardWeights& w, const FfnCache& cache,
                         const MatX& dy, FeedForwardWeights& g) {
  g.w2 += dy.transpose() * cache.act;
  g.b2 += dy.colwise().sum().transpose();
  MatX dact = dy * w.w2;
  MatX dh1 = dact.cwiseProduct(cache.h1.unaryExpr([](double v) { return gelu_grad(v); }));
  g.w1 += dh1.transpose() * cache.xn;
  g.b1 += dh1.colwise().sum().transpose();
  return layer_norm_backward(cache.ln, dh1 * w.w1);
}

struct HeadCache {
  MatX zq, zm, csm, rsm; // projected embeddings, column/row softmaxes
  VecX pre_q, pre_m;     // matchability pre-activations
};

struct LayerCache {
  LnCache ln_self_q, ln_self_m, ln_cross_q, ln_cross_m;
  MatX self_in_q, self_in_m;   // normalized self-attention inputs
  MatX cross_in_q, cross_in_m; // normalized cross-attention inputs
  AttnCache self_q, self_m, cross_qm, cross_mq;
  FfnCache ffn_q, ffn_m;
  MatX f0_q, f0_m; // states entering the layer
  MatX f1_q, f1_m; // after self-attention
  MatX f2_q, f2_m; // after cross-attention
  MatX f3_q, f3_m; // after feed-forward (layer output)
  HeadCache head;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  std::vector<AssignmentMatrix> per_layer;
};

inline AssignmentMatrix head_forward(const MatcherWeights& w, const MatX& fq,
                                     const MatX& fm, HeadCache& cache) {
  cache.zq = fq * w.similarity_proj.transpose();
  cache.zm = fm * w.similarity_proj.transpose();
  const MatX s = cache.zq * cache.zm.transpose();
  cache.csm = softmax_cols(s);
  cache.rsm = softmax_rows(s);
  cache.pre_q = ((fq * w.matchability_weight).array() + w.matchability_bias).matrix();
  cache.pre_m = ((fm * w.matchability_weight).array() + w.matchability_bias).matrix();
  AssignmentMatrix am;
  am.sigma_q = cache.pre_q.unaryExpr([](double v) { return sigmoid(v); });
  am.sigma_m = cache.pre_m.unaryExpr([](double v) { return sigmoid(v); });
  am.a = (am.sigma_q * am.sigma_m.transpose()).cwiseProduct(cache.csm).cwiseProduct(cache.rsm);
  return am;
}

inline void run_forward(const MatX& fq_in, std::span<const Vec3> nq,
                        const MatX& fm_in, std::span<const Vec3> nm,
                        const MatcherWeights& w, MatX& fq_out, MatX& fm_out,
                        ForwardCache& cache) {
  const MatcherConfig& cfg = w.config;
  cfg.validate();
  if (fq_in.rows() < 1 || fm_in.rows() < 1)
    throw ShapeMismatch("matcher_forward: need at least one primitive per side");
  if (fq_in.cols() != cfg.c || fm_in.cols() != cfg.c)
    throw ShapeMismatch("matcher_forward: embedding dim mismatch");
  if (static_cast<Eigen::Index>(nq.size()) != fq_in.rows() ||
      static_cast<Eigen::Index>(nm.size()) != fm_in.rows())
    throw ShapeMismatch("matcher_forward: normal count mismatch");

  MatX fq = fq_in, fm = fm_in;
  cache.layers.resize(cfg.n_layers);
  cache.per_layer.clear();
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerCache& lc = cache.layers[l];
    const LayerWeights& lw = w.layers[l];
    lc.f0_q = fq;
    lc.f0_m = fm;

    lc.self_in_q = layer_norm(fq, lc.ln_self_q, cfg.pre_norm);
    lc.self_in_m = layer_norm(fm, lc.ln_self_m, cfg.pre_norm);
    lc.f1_q = fq + attention_forward(lw.self_attn, lc.self_in_q, lc.self_in_q, cfg,
                                     &w.rope_bases, nq, nq, lc.self_q);
    lc.f1_m = fm + attention_forward(lw.self_attn, lc.self_in_m, lc.self_in_m, cfg,
                                     &w.rope_bases, nm, nm, lc.self_m);

    lc.cross_in_q = layer_norm(lc.f1_q, lc.ln_cross_q, cfg.pre_norm);
    lc.cross_in_m = layer_norm(lc.f1_m, lc.ln_cross_m, cfg.pre_norm);
    lc.f2_q = lc.f1_q + attention_forward(lw.cross_attn, lc.cross_in_q, lc.cross_in_m,
                                          cfg, nullptr, {}, {}, lc.cross_qm);
    lc.f2_m = lc.f1_m + attention_forward(lw.cross_attn, lc.cross_in_m, lc.cross_in_q,
                                          cfg, nullptr, {}, {}, lc.cross_mq);

    lc.f3_q = lc.f2_q + ffn_forward(lw.ffn, lc.f2_q, cfg.pre_norm, lc.ffn_q);
    lc.f3_m = lc.f2_m + ffn_forward(lw.ffn, lc.f2_m, cfg.pre_norm, lc.ffn_m);

    cache.per_layer.push_back(head_forward(w, lc.f3_q, lc.f3_m, lc.head));
    fq = lc.f3_q;
    fm = lc.f3_m;
  }
  fq_out = fq;
  fm_out = fm;
}

} // namespace detail

struct MatcherResult {
  MatX query_embs, map_embs;
  std::vector<AssignmentMatrix> per_layer;
};

// N transformer layers of self- (RoPE retrofit) and cross-attention with an
// assignment matrix after every layer for deep supervision.
inline MatcherResult matcher_forward(const MatX& query_embs,
                                     std::span<const Vec3> query_normals,
                                     const MatX& map_embs,
                                     std::span<const Vec3> map_normals,
                                     const MatcherWeights& weights) {
  detail::ForwardCache cache;
  MatcherResult res;
  detail::run_forward(query_embs, query_normals, map_embs, map_normals, weights,
                      res.query_embs, res.map_embs, cache);
  res.per_layer = std::move(cache.per_layer);
  return res;
}

// Loss over the deep-supervision stack plus its gradient with respect to
// every weight, by reverse accumulation through the forward pass.
inline std::pair<double, MatcherWeights> matching_loss_gradient(
    const MatX& query_embs, std::span<const Vec3> query_normals,
    const MatX& map_embs, std::span<const Vec3> map_normals,
    const MatcherWeights& w, const MatchLabels& labels) {
  const MatcherConfig& cfg = w.config;
  detail::ForwardCache cache;
  MatX fq_out, fm_out;
  detail::run_forward(query_embs, query_normals, map_embs, map_normals, w, fq_out,
                      fm_out, cache);
  const double loss = matching_loss(cache.per_layer, labels);

  MatcherWeights g = MatcherWeights::zeros(cfg);
  MatX dfq = MatX::Zero(query_embs.rows(), cfg.c);
  MatX dfm = MatX::Zero(map_embs.rows(), cfg.c);

  const double inv_m = labels.matches.empty()
                           ? 0.0
                           : 1.0 / static_cast<double>(labels.matches.size());
  const double inv_uq = labels.unmatchable_query.empty()
                            ? 0.0
                            : 0.5 / static_cast<double>(labels.unmatchable_query.size());
  const double inv_um = labels.unmatchable_map.empty()
                            ? 0.0
                            : 0.5 / static_cast<double>(labels.unmatchable_map.size());

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const detail::LayerCache& lc = cache.layers[l];
    const detail::HeadCache& hc = lc.head;
    const AssignmentMatrix& am = cache.per_layer[l];
    const LayerWeights& lw = w.layers[l];
    LayerWeights& lg = g.layers[l];

    // loss -> (A, sigma) of this layer
    MatX da = MatX::Zero(am.a.rows(), am.a.cols());
    for (auto [i, j] : labels.matches)
      if (am.a(i, j) > kLogFloor) da(i, j) -= inv_m / am.a(i, j);
    VecX dsq = VecX::Zero(am.sigma_q.size());
    VecX dsm = VecX::Zero(am.sigma_m.size());
    for (int i : labels.unmatchable_query)
      if (1.0 - am.sigma_q[i] > kLogFloor) dsq[i] += inv_uq / (1.0 - am.sigma_q[i]);
    for (int j : labels.unmatchable_map)
      if (1.0 - am.sigma_m[j] > kLogFloor) dsm[j] += inv_um / (1.0 - am.sigma_m[j]);

    // A = (sq sm^T) o C o R
    const MatX m_outer = am.sigma_q * am.sigma_m.transpose();
    const MatX dc = da.cwiseProduct(m_outer).cwiseProduct(hc.rsm);
    const MatX dr = da.cwiseProduct(m_outer).cwiseProduct(hc.csm);
    const MatX dm = da.cwiseProduct(hc.csm).cwiseProduct(hc.rsm);
    dsq += dm * am.sigma_m;
    dsm += dm.transpose() * am.sigma_q;

    MatX ds = MatX::Zero(am.a.rows(), am.a.cols());
    for (Eigen::Index j = 0; j < ds.cols(); ++j) { // column softmax backward
      const double dot = hc.csm.col(j).dot(dc.col(j));
      ds.col(j) += hc.csm.col(j).cwiseProduct((dc.col(j).array() - dot).matrix());
    }
    for (Eigen::Index i = 0; i < ds.rows(); ++i) { // row softmax backward
      const double dot = hc.rsm.row(i).dot(dr.row(i));
      ds.row(i) += hc.rsm.row(i).cwiseProduct((dr.row(i).array() - dot).matrix());
    }

    MatX dfq_l = MatX::Zero(am.a.rows(), cfg.c);
    MatX dfm_l = MatX::Zero(am.a.cols(), cfg.c);
    const MatX dzq = ds * hc.zm;
    const MatX dzm = ds.transpose() * hc.zq;
    g.similarity_proj += dzq.transpose() * lc.f3_q + dzm.transpose() * lc.f3_m;
    dfq_l += dzq * w.similarity_proj;
    dfm_l += dzm * w.similarity_proj;

    const VecX dpre_q = dsq.cwiseProduct(
        am.sigma_q.cwiseProduct((1.0 - am.sigma_q.array()).matrix()));
    const VecX dpre_m = dsm.cwiseProduct(
        am.sigma_m.cwiseProduct((1.0 - am.sigma_m.array()).matrix()));
    g.matchability_weight += lc.f3_q.transpose() * dpre_q + lc.f3_m.transpose() * dpre_m;
    g.matchability_bias += dpre_q.sum() + dpre_m.sum();
    dfq_l += dpre_q * w.matchability_weight.transpose();
    dfm_l += dpre_m * w.matchability_weight.transpose();

    // gradient flowing from layers above plus this layer's head
    dfq += dfq_l;
    dfm += dfm_l;

    // feed-forward
    MatX d2q = dfq + detail::ffn_backward(lw.ffn, lc.ffn_q, dfq, lg.ffn);
    MatX d2m = dfm + detail::ffn_backward(lw.ffn, lc.ffn_m, dfm, lg.ffn);

    // cross-attention (parallel directions share inputs)
    auto gq = detail::attention_backward(lw.cross_attn, lc.cross_in_q, lc.cross_in_m,
                                         cfg, nullptr, {}, {}, lc.cross_qm, d2q,
                                         lg.cross_attn, nullptr);
    auto gm = detail::attention_backward(lw.cross_attn, lc.cross_in_m, lc.cross_in_q,
                                         cfg, nullptr, {}, {}, lc.cross_mq, d2m,
                                         lg.cross_attn, nullptr);
    MatX d1q = d2q + detail::layer_norm_backward(lc.ln_cross_q, gq.dx_q + gm.dx_kv);
    MatX d1m = d2m + detail::layer_norm_backward(lc.ln_cross_m, gm.dx_q + gq.dx_kv);

    // self-attention
    auto sq = detail::attention_backward(lw.self_attn, lc.self_in_q, lc.self_in_q, cfg,
                                         &w.rope_bases, query_normals, query_normals,
                                         lc.self_q, d1q, lg.self_attn, &g.rope_bases);
    auto sm = detail::attention_backward(lw.self_attn, lc.self_in_m, lc.self_in_m, cfg,
                                         &w.rope_bases, map_normals, map_normals,
                                         lc.self_m, d1m, lg.self_attn, &g.rope_bases);
    dfq = d1q + detail::layer_norm_backward(lc.ln_self_q, sq.dx_q + sq.dx_kv);
    dfm = d1m + detail::layer_norm_backward(lc.ln_self_m, sm.dx_q + sm.dx_kv);
  }
  return {loss, std::move(g)};
}

} // namespace planeloc
