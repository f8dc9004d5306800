#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "planeloc/matcher.hpp"
#include "planeloc/scene_sim.hpp"

namespace planeloc {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

namespace detail {

inline Json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return j;
}

inline void save_json_file(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline void check_version(const Json& j, const fs::path& path) {
  if (!j.contains("format_version"))
    throw VersionMismatch(path.string() + ": missing format_version");
  if (j.at("format_version").get<int>() != kFormatVersion)
    throw VersionMismatch(path.string() + ": unsupported format_version");
}

inline void warn_unknown_fields(const Json& j, std::initializer_list<const char*> known,
                                const fs::path& path) {
  if (!j.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool found = false;
    for (const char* k : known)
      if (it.key() == k) {
        found = true;
        break;
      }
    if (!found)
      std::cerr << "warning: " << path.string() << ": ignoring unknown field '"
                << it.key() << "'\n";
  }
}

inline Json pose_to_json(const Pose& p) {
  Json rows = Json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rows.push_back(p.rotation(r, c));
    rows.push_back(p.translation[r]);
  }
  return rows;
}

inline Pose pose_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 12)
    throw ParseError("pose: expected 12 numbers (row-major 3x4)");
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = j.at(r * 4 + c).get<double>();
    p.translation[r] = j.at(r * 4 + 3).get<double>();
  }
  return p;
}

inline Json vec3_to_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec3_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 3) throw ParseError("expected 3-vector");
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

inline Json matrix_to_json(const MatX& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatX matrix_from_json(const Json& j, Eigen::Index rows, Eigen::Index cols,
                             const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw ParseError(std::string(what) + ": wrong row count");
  MatX m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j.at(r);
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ParseError(std::string(what) + ": wrong column count");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(c).get<double>();
  }
  return m;
}

inline Json vector_to_json(const VecX& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline VecX vector_from_json(const Json& j, Eigen::Index n, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n)
    throw ParseError(std::string(what) + ": wrong length");
  VecX v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = j.at(i).get<double>();
  return v;
}

} // namespace detail

// --------------------------------------------------------------------------
// Pose files

inline void save_pose(const fs::path& path, const Pose& pose) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["pose"] = detail::pose_to_json(pose);
  detail::save_json_file(path, j);
}

inline Pose load_pose(const fs::path& path) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  detail::warn_unknown_fields(j, {"format_version", "pose"}, path);
  return detail::pose_from_json(j.at("pose"));
}

inline void save_pose_estimate(const fs::path& path, const PoseEstimate& est) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["pose"] = detail::pose_to_json(est.pose);
  j["scale"] = est.scale;
  j["inlier_indices"] = est.inliers;
  j["degenerate"] = est.degenerate;
  j["fallback_used"] = est.fallback_used;
  j["scale_observable"] = est.scale_observable;
  detail::save_json_file(path, j);
}

inline PoseEstimate load_pose_estimate(const fs::path& path) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  PoseEstimate est;
  est.pose = detail::pose_from_json(j.at("pose"));
  est.scale = j.at("scale").get<double>();
  est.inliers = j.at("inlier_indices").get<std::vector<int>>();
  est.degenerate = j.at("degenerate").get<bool>();
  est.fallback_used = j.at("fallback_used").get<bool>();
  if (j.contains("scale_observable"))
    est.scale_observable = j.at("scale_observable").get<bool>();
  return est;
}

// --------------------------------------------------------------------------
// Map files

inline void save_map(const fs::path& path, std::span<const MapPrimitive> map) {
  Json prims = Json::array();
  for (const MapPrimitive& p : map) {
    Json jp;
    jp["normal"] = detail::vec3_to_json(p.plane.normal);
    jp["offset"] = p.plane.offset;
    Json boundary = Json::array();
    for (const Vec3& v : p.boundary) boundary.push_back(detail::vec3_to_json(v));
    jp["boundary"] = std::move(boundary);
    jp["area"] = p.area;
    prims.push_back(std::move(jp));
  }
  Json j;
  j["format_version"] = kFormatVersion;
  j["primitives"] = std::move(prims);
  detail::save_json_file(path, j);
}

inline std::vector<MapPrimitive> load_map(const fs::path& path) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  detail::warn_unknown_fields(j, {"format_version", "primitives"}, path);
  std::vector<MapPrimitive> map;
  for (const Json& jp : j.at("primitives")) {
    MapPrimitive p;
    p.plane.normal = detail::vec3_from_json(jp.at("normal")).normalized();
    p.plane.offset = jp.at("offset").get<double>();
    for (const Json& v : jp.at("boundary"))
      p.boundary.push_back(detail::vec3_from_json(v));
    p.area = jp.at("area").get<double>();
    p.index = static_cast<int>(map.size());
    p.sample_points = sample_primitive_points(p, 1024, derive_seed(0, p.index));
    map.push_back(std::move(p));
  }
  return map;
}

// --------------------------------------------------------------------------
// Binary depth (magic "DPTH", u32 width, u32 height, f32 sentinel, f32 grid)

inline void save_depth(const fs::path& path, const DepthMap& depth) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  out.write("DPTH", 4);
  const uint32_t w = static_cast<uint32_t>(depth.width);
  const uint32_t h = static_cast<uint32_t>(depth.height);
  const float sentinel = static_cast<float>(depth.invalid);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&sentinel), 4);
  std::vector<float> row(depth.width);
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) row[x] = static_cast<float>(depth.at(x, y));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw ParseError("short write to " + path.string());
}

inline DepthMap load_depth(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  char magic[4];
  uint32_t w = 0, h = 0;
  float sentinel = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&sentinel), 4);
  if (!in || std::memcmp(magic, "DPTH", 4) != 0)
    throw ParseError(path.string() + ": bad depth header");
  if (w == 0 || h == 0 || w > 1u << 16 || h > 1u << 16)
    throw ParseError(path.string() + ": implausible depth dimensions");
  DepthMap depth(static_cast<int>(w), static_cast<int>(h), sentinel);
  std::vector<float> row(w);
  for (uint32_t y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw ParseError(path.string() + ": truncated depth data");
    for (uint32_t x = 0; x < w; ++x) depth.at(x, y) = row[x];
  }
  return depth;
}

// --------------------------------------------------------------------------
// Matcher weight files

inline void save_weights(const fs::path& path, const MatcherWeights& w) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["c"] = w.config.c;
  j["N"] = w.config.n_layers;
  j["heads"] = w.config.heads;
  j["ffn_hidden"] = w.config.hidden();
  j["pre_norm"] = w.config.pre_norm;
  Json layers = Json::array();
  for (const LayerWeights& l : w.layers) {
    Json jl;
    for (auto [name, a] : {std::pair{"self", &l.self_attn}, {"cross", &l.cross_attn}}) {
      Json ja;
      ja["wq"] = detail::matrix_to_json(a->wq);
      ja["wk"] = detail::matrix_to_json(a->wk);
      ja["wv"] = detail::matrix_to_json(a->wv);
      ja["wo"] = detail::matrix_to_json(a->wo);
      jl[name] = std::move(ja);
    }
    Json jf;
    jf["w1"] = detail::matrix_to_json(l.ffn.w1);
    jf["b1"] = detail::vector_to_json(l.ffn.b1);
    jf["w2"] = detail::matrix_to_json(l.ffn.w2);
    jf["b2"] = detail::vector_to_json(l.ffn.b2);
    jl["ffn"] = std::move(jf);
    layers.push_back(std::move(jl));
  }
  j["layers"] = std::move(layers);
  Json bases = Json::array();
  for (const Vec3& b : w.rope_bases) bases.push_back(detail::vec3_to_json(b));
  j["rope_bases"] = std::move(bases);
  j["similarity_proj"] = detail::matrix_to_json(w.similarity_proj);
  Json jm;
  jm["weight"] = detail::vector_to_json(w.matchability_weight);
  jm["bias"] = w.matchability_bias;
  j["matchability_proj"] = std::move(jm);
  detail::save_json_file(path, j);
}

inline MatcherWeights load_weights(const fs::path& path) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  MatcherConfig cfg;
  cfg.c = j.at("c").get<int>();
  cfg.n_layers = j.at("N").get<int>();
  cfg.heads = j.at("heads").get<int>();
  if (j.contains("ffn_hidden")) cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
  if (j.contains("pre_norm")) cfg.pre_norm = j.at("pre_norm").get<bool>();
  MatcherWeights w = MatcherWeights::zeros(cfg);
  const Json& layers = j.at("layers");
  if (static_cast<int>(layers.size()) != cfg.n_layers)
    throw ParseError(path.string() + ": layer count mismatch");
  const int c = cfg.c, hidden = cfg.hidden();
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Json& jl = layers.at(l);
    for (auto [name, a] :
         {std::pair{"self", &w.layers[l].self_attn}, {"cross", &w.layers[l].cross_attn}}) {
      const Json& ja = jl.at(name);
      a->wq = detail::matrix_from_json(ja.at("wq"), c, c, "wq");
      a->wk = detail::matrix_from_json(ja.at("wk"), c, c, "wk");
      a->wv = detail::matrix_from_json(ja.at("wv"), c, c, "wv");
      a->wo = detail::matrix_from_json(ja.at("wo"), c, c, "wo");
    }
    const Json& jf = jl.at("ffn");
    w.layers[l].ffn.w1 = detail::matrix_from_json(jf.at("w1"), hidden, c, "w1");
    w.layers[l].ffn.b1 = detail::vector_from_json(jf.at("b1"), hidden, "b1");
    w.layers[l].ffn.w2 = detail::matrix_from_json(jf.at("w2"), c, hidden, "w2");
    w.layers[l].ffn.b2 = detail::vector_from_json(jf.at("b2"), c, "b2");
  }
  const Json& bases = j.at("rope_bases");
  if (static_cast<int>(bases.size()) != c / 2)
    throw ParseError(path.string() + ": rope basis count mismatch");
  for (int i = 0; i < c / 2; ++i)
    w.rope_bases[i] = detail::vec3_from_json(bases.at(i));
  w.similarity_proj = detail::matrix_from_json(j.at("similarity_proj"), c, c, "sim");
  w.matchability_weight =
      detail::vector_from_json(j.at("matchability_proj").at("weight"), c, "match w");
  w.matchability_bias = j.at("matchability_proj").at("bias").get<double>();
  return w;
}

// --------------------------------------------------------------------------
// Label and correspondence files

inline void save_labels(const fs::path& path, const MatchLabels& labels) {
  Json j;
  j["format_version"] = kFormatVersion;
  Json matches = Json::array();
  for (auto [a, b] : labels.matches) matches.push_back(Json::array({a, b}));
  j["matches"] = std::move(matches);
  j["unmatchable_query"] = labels.unmatchable_query;
  j["unmatchable_map"] = labels.unmatchable_map;
  detail::save_json_file(path, j);
}

inline MatchLabels load_labels(const fs::path& path) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  detail::warn_unknown_fields(
      j, {"format_version", "matches", "unmatchable_query", "unmatchable_map"}, path);
  MatchLabels labels;
  for (const Json& m : j.at("matches"))
    labels.matches.emplace_back(m.at(0).get<int>(), m.at(1).get<int>());
  labels.unmatchable_query = j.at("unmatchable_query").get<std::vector<int>>();
  labels.unmatchable_map = j.at("unmatchable_map").get<std::vector<int>>();
  return labels;
}

inline void save_correspondences(const fs::path& path,
                                 std::span<const Correspondence> corrs) {
  Json list = Json::array();
  for (const Correspondence& c : corrs) {
    Json jc;
    jc["query_idx"] = c.query_idx;
    jc["map_idx"] = c.map_idx;
    jc["score"] = c.score;
    list.push_back(std::move(jc));
  }
  Json j;
  j["format_version"] = kFormatVersion;
  j["correspondences"] = std::move(list);
  detail::save_json_file(path, j);
}

inline std::vector<Correspondence> load_correspondences(const fs::path& path) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  std::vector<Correspondence> out;
  for (const Json& jc : j.at("correspondences"))
    out.push_back({jc.at("query_idx").get<int>(), jc.at("map_idx").get<int>(),
                   jc.at("score").get<double>()});
  return out;
}

// --------------------------------------------------------------------------
// Embedding files (external embedding providers)

inline void save_embeddings(const fs::path& path, const MatX& query_embs,
                            const MatX& map_embs) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["query"] = detail::matrix_to_json(query_embs);
  j["map"] = detail::matrix_to_json(map_embs);
  detail::save_json_file(path, j);
}

inline std::pair<MatX, MatX> load_embeddings(const fs::path& path, int c) {
  const Json j = detail::load_json_file(path);
  detail::check_version(j, path);
  auto read = [&](const char* key) {
    const Json& rows = j.at(key);
    return detail::matrix_from_json(rows, static_cast<Eigen::Index>(rows.size()), c,
                                    key);
  };
  return {read("query"), read("map")};
}

// --------------------------------------------------------------------------
// Rasters for inspection

inline void save_pgm(const fs::path& path, int width, int height,
                     std::span<const uint8_t> gray) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
}

// Index raster of primitive masks: 0 background, i+1 for primitive i.
inline void save_mask_pgm(const fs::path& path,
                          std::span<const QueryPrimitive> prims, int width,
                          int height) {
  std::vector<uint8_t> img(static_cast<size_t>(width) * height, 0);
  for (size_t p = 0; p < prims.size(); ++p)
    prims[p].mask.for_each([&](int x, int y) {
      img[static_cast<size_t>(y) * width + x] =
          static_cast<uint8_t>(std::min<size_t>(255, p + 1));
    });
  save_pgm(path, width, height, img);
}

inline void save_depth_pgm(const fs::path& path, const DepthMap& d) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  for (double v : d.data)
    if (d.is_valid_value(v)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  std::vector<uint8_t> img(d.data.size(), 0);
  const double span = hi > lo ? hi - lo : 1.0;
  for (size_t i = 0; i < d.data.size(); ++i)
    if (d.is_valid_value(d.data[i]))
      img[i] = static_cast<uint8_t>(25 + 230 * (1.0 - (d.data[i] - lo) / span));
  save_pgm(path, d.width, d.height, img);
}

} // namespace planeloc
