#pragma once

#include <atomic>
#include <iomanip>
#include <sstream>
#include <thread>

#include "planeloc/evaluation.hpp"
#include "planeloc/io.hpp"
#include "planeloc/plane_extraction.hpp"

namespace planeloc {

struct MatcherRunConfig {
  int c = 64;
  int n_layers = 4;
  int heads = 4;
  double tau = 0.2;
  double tau_star = 0.5;
  double separation = 10.0;
  std::string weights_path;
  std::string embeddings_dir;
  uint64_t weights_seed = 7;
};

struct ExperimentConfig {
  RansacConfig ransac;
  SolverConfig solver;
  RefineConfig refine;
  MatcherRunConfig matcher;
  std::vector<RecallThreshold> thresholds = default_recall_thresholds();
  uint64_t seed = 0;
};

inline Json load_config_json(const fs::path& path) {
  try {
    const Json j = detail::load_json_file(path);
    detail::check_version(j, path);
    return j;
  } catch (const ParseError& e) {
    throw ConfigError(e.what()); // config files that fail to parse are config errors
  }
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  const Json j = load_config_json(path);
  ExperimentConfig cfg;
  try {
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("ransac")) {
      const Json& r = j.at("ransac");
      if (r.contains("distance_threshold"))
        cfg.ransac.distance_threshold = r.at("distance_threshold").get<double>();
      if (r.contains("normal_dot_threshold"))
        cfg.ransac.normal_dot_threshold = r.at("normal_dot_threshold").get<double>();
      if (r.contains("max_primitives"))
        cfg.ransac.max_primitives = r.at("max_primitives").get<int>();
      if (r.contains("min_inlier_fraction"))
        cfg.ransac.min_inlier_fraction = r.at("min_inlier_fraction").get<double>();
      if (r.contains("hypotheses_per_plane"))
        cfg.ransac.hypotheses_per_plane = r.at("hypotheses_per_plane").get<int>();
      if (r.contains("min_area")) cfg.ransac.min_area = r.at("min_area").get<double>();
      if (r.contains("downsample")) cfg.ransac.downsample = r.at("downsample").get<int>();
    }
    if (j.contains("solver")) {
      const Json& s = j.at("solver");
      if (s.contains("ransac_iterations"))
        cfg.solver.ransac_iterations = s.at("ransac_iterations").get<int>();
      if (s.contains("inlier_angle_threshold_deg"))
        cfg.solver.inlier_angle_threshold_deg =
            s.at("inlier_angle_threshold_deg").get<double>();
      if (s.contains("min_normal_separation_deg"))
        cfg.solver.min_normal_separation_deg =
            s.at("min_normal_separation_deg").get<double>();
    }
    if (j.contains("refine")) {
      const Json& r = j.at("refine");
      if (r.contains("iterations")) cfg.refine.iterations = r.at("iterations").get<int>();
      if (r.contains("lr_pose")) cfg.refine.lr_pose = r.at("lr_pose").get<double>();
      if (r.contains("lr_offsets"))
        cfg.refine.lr_offsets = r.at("lr_offsets").get<double>();
      if (r.contains("pixel_sample_count"))
        cfg.refine.pixel_sample_count = r.at("pixel_sample_count").get<int>();
    }
    if (j.contains("matcher")) {
      const Json& m = j.at("matcher");
      if (m.contains("c")) cfg.matcher.c = m.at("c").get<int>();
      if (m.contains("n_layers")) cfg.matcher.n_layers = m.at("n_layers").get<int>();
      if (m.contains("heads")) cfg.matcher.heads = m.at("heads").get<int>();
      if (m.contains("tau")) cfg.matcher.tau = m.at("tau").get<double>();
      if (m.contains("tau_star")) cfg.matcher.tau_star = m.at("tau_star").get<double>();
      if (m.contains("separation"))
        cfg.matcher.separation = m.at("separation").get<double>();
      if (m.contains("weights_path"))
        cfg.matcher.weights_path = m.at("weights_path").get<std::string>();
      if (m.contains("embeddings_dir"))
        cfg.matcher.embeddings_dir = m.at("embeddings_dir").get<std::string>();
      if (m.contains("weights_seed"))
        cfg.matcher.weights_seed = m.at("weights_seed").get<uint64_t>();
    }
    if (j.contains("thresholds")) {
      cfg.thresholds.clear();
      for (const Json& t : j.at("thresholds"))
        cfg.thresholds.push_back({t.at(0).get<double>(), t.at(1).get<double>()});
    }
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return cfg;
}

// --------------------------------------------------------------------------
// Scene spec and scene directories

inline SceneSpec load_scene_spec(const fs::path& path) {
  const Json j = load_config_json(path);
  SceneSpec spec;
  try {
    if (j.contains("room_extents")) spec.room_extents = detail::vec3_from_json(j.at("room_extents"));
    if (j.contains("interior_count")) spec.interior_count = j.at("interior_count").get<int>();
    if (j.contains("interior_half_range")) {
      spec.interior_min_half = j.at("interior_half_range").at(0).get<double>();
      spec.interior_max_half = j.at("interior_half_range").at(1).get<double>();
    }
    if (j.contains("interior_min_normal_angle_deg"))
      spec.interior_min_normal_angle_deg =
          j.at("interior_min_normal_angle_deg").get<double>();
    if (j.contains("camera_count")) spec.camera_count = j.at("camera_count").get<int>();
    if (j.contains("min_visible")) spec.min_visible = j.at("min_visible").get<int>();
    if (j.contains("min_visible_pixels"))
      spec.min_visible_pixels = j.at("min_visible_pixels").get<int>();
    if (j.contains("require_normal_spread"))
      spec.require_normal_spread = j.at("require_normal_spread").get<bool>();
    if (j.contains("noise")) {
      const Json& n = j.at("noise");
      if (n.contains("depth_sigma")) spec.noise.depth_sigma = n.at("depth_sigma").get<double>();
      if (n.contains("scale_range")) {
        spec.noise.scale_min = n.at("scale_range").at(0).get<double>();
        spec.noise.scale_max = n.at("scale_range").at(1).get<double>();
      }
    }
    if (j.contains("intrinsics")) {
      const Json& ji = j.at("intrinsics");
      spec.intrinsics.fx = ji.at("fx").get<double>();
      spec.intrinsics.fy = ji.at("fy").get<double>();
      spec.intrinsics.cx = ji.at("cx").get<double>();
      spec.intrinsics.cy = ji.at("cy").get<double>();
      spec.intrinsics.width = ji.at("width").get<int>();
      spec.intrinsics.height = ji.at("height").get<int>();
    }
    if (j.contains("seed")) spec.rng_seed = j.at("seed").get<uint64_t>();
    if (j.contains("max_rejections")) spec.max_rejections = j.at("max_rejections").get<int>();
    if (spec.room_extents.minCoeff() <= 0 || spec.camera_count < 0 ||
        spec.min_visible < 1 || spec.intrinsics.fx <= 0 || spec.intrinsics.fy <= 0)
      throw ConfigError(path.string() + ": invalid scene spec values");
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return spec;
}

inline Json intrinsics_to_json(const Intrinsics& k) {
  Json j;
  j["fx"] = k.fx;
  j["fy"] = k.fy;
  j["cx"] = k.cx;
  j["cy"] = k.cy;
  j["width"] = k.width;
  j["height"] = k.height;
  return j;
}

inline Intrinsics intrinsics_from_json(const Json& j) {
  Intrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  return k;
}

inline std::string query_tag(size_t index) {
  std::ostringstream os;
  os << "q" << std::setw(3) << std::setfill('0') << index;
  return os.str();
}

// Writes map.json, per-query depth/meta/label files and manifest.json;
// returns the manifest.
inline Json save_scene(const fs::path& dir, const SyntheticScene& scene,
                       uint64_t seed) {
  fs::create_directories(dir / "queries");
  save_map(dir / "map.json", scene.map);
  Json queries = Json::array();
  for (size_t qi = 0; qi < scene.queries.size(); ++qi) {
    const QueryRecord& rec = scene.queries[qi];
    const std::string tag = query_tag(qi);
    const fs::path depth_path = dir / "queries" / (tag + "_depth.dpth");
    const fs::path meta_path = dir / "queries" / (tag + "_meta.json");
    const fs::path labels_path = dir / "queries" / (tag + "_labels.json");
    save_depth(depth_path, rec.depth);
    Json meta;
    meta["format_version"] = kFormatVersion;
    meta["intrinsics"] = intrinsics_to_json(rec.intrinsics);
    meta["gt_pose"] = detail::pose_to_json(rec.gt_pose);
    meta["depth_scale"] = rec.depth_scale;
    detail::save_json_file(meta_path, meta);
    save_labels(labels_path, rec.gt_labels);
    Json q;
    q["depth"] = "queries/" + tag + "_depth.dpth";
    q["meta"] = "queries/" + tag + "_meta.json";
    q["labels"] = "queries/" + tag + "_labels.json";
    queries.push_back(std::move(q));
  }
  Json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["map"] = "map.json";
  manifest["map_primitives"] = scene.map.size();
  manifest["queries"] = std::move(queries);
  manifest["seed"] = seed;
  detail::save_json_file(dir / "manifest.json", manifest);
  return manifest;
}

struct SceneQueryFiles {
  fs::path depth, meta, labels;
  Intrinsics intrinsics;
  Pose gt_pose;
  double depth_scale = 1;
};

struct SceneOnDisk {
  std::vector<MapPrimitive> map;
  std::vector<SceneQueryFiles> queries;
};

inline SceneOnDisk load_scene(const fs::path& dir) {
  const Json manifest = detail::load_json_file(dir / "manifest.json");
  detail::check_version(manifest, dir / "manifest.json");
  SceneOnDisk scene;
  scene.map = load_map(dir / manifest.at("map").get<std::string>());
  for (const Json& q : manifest.at("queries")) {
    SceneQueryFiles files;
    files.depth = dir / q.at("depth").get<std::string>();
    files.meta = dir / q.at("meta").get<std::string>();
    files.labels = dir / q.at("labels").get<std::string>();
    const Json meta = detail::load_json_file(files.meta);
    detail::check_version(meta, files.meta);
    files.intrinsics = intrinsics_from_json(meta.at("intrinsics"));
    files.gt_pose = detail::pose_from_json(meta.at("gt_pose"));
    files.depth_scale = meta.at("depth_scale").get<double>();
    scene.queries.push_back(std::move(files));
  }
  return scene;
}

// --------------------------------------------------------------------------
// Per-query relocalization

struct RelocalizeOptions {
  bool refine = false;
  bool synthetic_embeddings = false;
  bool oracle_labels = false;
  int threads = 1;
};

struct QueryOutput {
  PoseEstimate estimate;
  Pose final_pose;
  std::vector<Correspondence> predicted;
  MatchLabels labels;
  MatX iou;
  std::vector<double> refine_trace;
  bool refined = false;
  double full_cost_initial = 0, full_cost_final = 0;
  size_t primitive_count = 0;
};

inline QueryOutput run_query(std::span<const MapPrimitive> map, const Intrinsics& k_in,
                             const Pose& gt_pose, const DepthMap& depth_in,
                             const ExperimentConfig& cfg,
                             const RelocalizeOptions& opts,
                             const MatcherWeights* weights, uint64_t query_seed,
                             const MatX* file_fq = nullptr,
                             const MatX* file_fm = nullptr) {
  QueryOutput out;

  // everything mask-based runs on the (optionally decimated) grid
  const Intrinsics k = downsample_intrinsics(k_in, cfg.ransac.downsample);
  const DepthMap depth = downsample_depth(depth_in, cfg.ransac.downsample);

  std::vector<QueryPrimitive> prims;
  try {
    RansacConfig rcfg = cfg.ransac;
    rcfg.rng_seed = derive_seed(query_seed, 1);
    prims = sequential_ransac_depth(unproject_depth(depth, k), rcfg);
  } catch (const NoPlaneFound&) {
    // fall through with an empty primitive set; the solver falls back
  }
  out.primitive_count = prims.size();

  if (!prims.empty())
    out.labels = generate_labels(prims, map, gt_pose, k, cfg.matcher.tau_star, &out.iou);

  if (opts.oracle_labels) {
    for (auto [i, j] : out.labels.matches) out.predicted.push_back({i, j, 1.0});
  } else if (!prims.empty()) {
    const int nq = static_cast<int>(prims.size());
    const int nm = static_cast<int>(map.size());
    MatX fq, fm;
    if (opts.synthetic_embeddings) {
      std::tie(fq, fm) = synth_embeddings(out.labels, nq, nm, cfg.matcher.c,
                                          cfg.matcher.separation,
                                          derive_seed(query_seed, 2));
    } else if (file_fq && file_fm) {
      if (file_fq->rows() != nq || file_fm->rows() != nm)
        throw ConfigError("relocalize: embedding file rows do not match the "
                          "recovered/map primitive counts");
      fq = *file_fq;
      fm = *file_fm;
    } else {
      throw ConfigError("relocalize: no embedding source (need a weights file with "
                        "embeddings or --synthetic-embeddings)");
    }
    std::vector<Vec3> nq_normals, nm_normals;
    for (const QueryPrimitive& p : prims) nq_normals.push_back(p.plane.normal);
    for (const MapPrimitive& p : map) nm_normals.push_back(p.plane.normal);
    const MatcherResult res =
        matcher_forward(fq, nq_normals, fm, nm_normals, *weights);
    out.predicted = extract_correspondences(res.per_layer.back(), cfg.matcher.tau);
  }

  std::vector<PlaneCorrespondence> corrs;
  for (const Correspondence& c : out.predicted) {
    PlaneCorrespondence pc;
    pc.query = prims[c.query_idx].plane;
    pc.map = map[c.map_idx].plane;
    pc.weight = prims[c.query_idx].area();
    pc.query_idx = c.query_idx;
    pc.map_idx = c.map_idx;
    corrs.push_back(pc);
  }

  SolverConfig scfg = cfg.solver;
  scfg.rng_seed = derive_seed(query_seed, 3);
  out.estimate = estimate_pose(corrs, map, scfg);

  Pose pose = out.estimate.pose;
  if (opts.refine && !prims.empty()) {
    RefineConfig rcfg = cfg.refine;
    rcfg.rng_seed = derive_seed(query_seed, 4);
    const RefineResult rr = refine_pose(pose, prims, map, k, rcfg);
    pose = rr.pose;
    out.refine_trace = rr.cost_trace;
    out.full_cost_initial = rr.full_cost_initial;
    out.full_cost_final = rr.full_cost_final;
    out.refined = !rr.no_overlap;
  }
  out.final_pose = clamp_pose_to_bounds(pose, Aabb::of_map(map));
  return out;
}

struct RelocalizeSummary {
  PoseMetrics pose;
  MatchMetrics matching;
  std::vector<QueryOutput> queries;
};

namespace detail {

// Pools per-query predictions into dataset-level precision/recall/AP.
inline MatchMetrics aggregate_match_metrics(std::span<const QueryOutput> queries) {
  struct Scored {
    double score;
    bool tp;
    int qi, i, j;
  };
  std::vector<Scored> pool;
  size_t gt_total = 0;
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    const QueryOutput& q = queries[qi];
    gt_total += q.labels.matches.size();
    std::vector<int> gt_of(q.iou.rows() > 0 ? q.iou.rows() : 0, -1);
    for (auto [i, j] : q.labels.matches) {
      if (static_cast<size_t>(i) >= gt_of.size()) gt_of.resize(i + 1, -1);
      gt_of[i] = j;
    }
    for (const Correspondence& c : q.predicted) {
      const bool tp = c.query_idx < static_cast<int>(gt_of.size()) &&
                      gt_of[c.query_idx] == c.map_idx &&
                      q.iou(c.query_idx, c.map_idx) >= 0.3;
      pool.push_back({c.score, tp, static_cast<int>(qi), c.query_idx, c.map_idx});
    }
  }
  std::sort(pool.begin(), pool.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.qi != b.qi) return a.qi < b.qi;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  MatchMetrics m;
  m.ground_truth_count = gt_total;
  m.predicted_count = pool.size();
  const double gt = static_cast<double>(std::max<size_t>(1, gt_total));
  size_t tp = 0;
  double ap = 0;
  for (size_t rank = 0; rank < pool.size(); ++rank)
    if (pool[rank].tp) {
      ++tp;
      ap += (static_cast<double>(tp) / static_cast<double>(rank + 1)) / gt;
    }
  m.true_positives = tp;
  m.precision = pool.empty() ? 0.0 : static_cast<double>(tp) / pool.size();
  m.recall = gt_total == 0 ? 0.0 : static_cast<double>(tp) / gt;
  m.f1 = (m.precision + m.recall) > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  m.ap = gt_total == 0 ? 0.0 : ap;
  return m;
}

} // namespace detail

inline RelocalizeSummary run_relocalize(const fs::path& scene_dir,
                                        const ExperimentConfig& cfg,
                                        const RelocalizeOptions& opts,
                                        const fs::path& out_dir) {
  const SceneOnDisk scene = load_scene(scene_dir);
  fs::create_directories(out_dir);

  MatcherWeights weights;
  ExperimentConfig run_cfg = cfg;
  const bool needs_matcher = !opts.oracle_labels;
  if (needs_matcher) {
    if (!cfg.matcher.weights_path.empty()) {
      if (!fs::exists(cfg.matcher.weights_path))
        throw ConfigError("relocalize: weights file does not exist: " +
                          cfg.matcher.weights_path);
      weights = load_weights(cfg.matcher.weights_path);
      run_cfg.matcher.c = weights.config.c; // embeddings must match the weights
    } else if (opts.synthetic_embeddings) {
      MatcherConfig mc;
      mc.c = cfg.matcher.c;
      mc.n_layers = cfg.matcher.n_layers;
      mc.heads = cfg.matcher.heads;
      weights = MatcherWeights::random(mc, cfg.matcher.weights_seed);
    } else {
      throw ConfigError("relocalize: missing weights file (pass --weights, or "
                        "--synthetic-embeddings / --oracle-labels)");
    }
    if (!opts.synthetic_embeddings && cfg.matcher.embeddings_dir.empty())
      throw ConfigError("relocalize: a weights file needs an embeddings_dir in the "
                        "config (or pass --synthetic-embeddings)");
    if (!opts.synthetic_embeddings && !fs::exists(cfg.matcher.embeddings_dir))
      throw ConfigError("relocalize: embeddings_dir does not exist: " +
                        cfg.matcher.embeddings_dir);
  }

  std::vector<QueryOutput> outputs(scene.queries.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t qi = next.fetch_add(1);
      if (qi >= scene.queries.size()) break;
      const SceneQueryFiles& files = scene.queries[qi];
      const DepthMap depth = load_depth(files.depth);
      MatX file_fq, file_fm;
      const bool from_file = needs_matcher && !opts.synthetic_embeddings &&
                             !run_cfg.matcher.embeddings_dir.empty();
      if (from_file)
        std::tie(file_fq, file_fm) =
            load_embeddings(fs::path(run_cfg.matcher.embeddings_dir) /
                                (query_tag(qi) + "_embeddings.json"),
                            run_cfg.matcher.c);
      outputs[qi] = run_query(scene.map, files.intrinsics, files.gt_pose, depth,
                              run_cfg, opts, needs_matcher ? &weights : nullptr,
                              derive_seed(run_cfg.seed, qi),
                              from_file ? &file_fq : nullptr,
                              from_file ? &file_fm : nullptr);
    }
  };
  const int n_threads = std::max(1, opts.threads);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  RelocalizeSummary summary;
  std::vector<Pose> est_poses, gt_poses;
  for (size_t qi = 0; qi < outputs.size(); ++qi) {
    est_poses.push_back(outputs[qi].final_pose);
    gt_poses.push_back(scene.queries[qi].gt_pose);
    const std::string tag = query_tag(qi);
    PoseEstimate final_est = outputs[qi].estimate;
    final_est.pose = outputs[qi].final_pose;
    save_pose_estimate(out_dir / (tag + "_estimate.json"), final_est);
    if (outputs[qi].refined) {
      Json j = detail::load_json_file(out_dir / (tag + "_estimate.json"));
      j["refine_cost_initial"] = outputs[qi].full_cost_initial;
      j["refine_cost_final"] = outputs[qi].full_cost_final;
      detail::save_json_file(out_dir / (tag + "_estimate.json"), j);
    }
    save_correspondences(out_dir / (tag + "_correspondences.json"),
                         outputs[qi].predicted);
    save_labels(out_dir / (tag + "_run_labels.json"), outputs[qi].labels);
    Json jiou;
    jiou["format_version"] = kFormatVersion;
    jiou["iou"] = detail::matrix_to_json(outputs[qi].iou);
    detail::save_json_file(out_dir / (tag + "_iou.json"), jiou);
    save_depth_pgm(out_dir / (tag + "_render.pgm"),
                   render_depth(scene.map, outputs[qi].final_pose,
                                scene.queries[qi].intrinsics));
    if (!outputs[qi].refine_trace.empty()) {
      std::ofstream trace(out_dir / (tag + "_refine_trace.csv"));
      trace << "iteration,cost\n";
      for (size_t it = 0; it < outputs[qi].refine_trace.size(); ++it)
        trace << it << "," << std::setprecision(17) << outputs[qi].refine_trace[it]
              << "\n";
    }
  }
  summary.pose = pose_metrics(est_poses, gt_poses, cfg.thresholds);
  summary.matching = detail::aggregate_match_metrics(outputs);
  summary.queries = std::move(outputs);

  Json metrics;
  metrics["format_version"] = kFormatVersion;
  metrics["mean_rotation_deg"] = summary.pose.mean_rotation_deg;
  metrics["median_rotation_deg"] = summary.pose.median_rotation_deg;
  metrics["mean_translation_m"] = summary.pose.mean_translation_m;
  metrics["median_translation_m"] = summary.pose.median_translation_m;
  Json recalls = Json::array();
  for (size_t i = 0; i < cfg.thresholds.size(); ++i) {
    Json r;
    r["translation_m"] = cfg.thresholds[i].translation_m;
    r["rotation_deg"] = cfg.thresholds[i].rotation_deg;
    r["recall"] = summary.pose.recall[i];
    recalls.push_back(std::move(r));
  }
  metrics["pose_recall"] = std::move(recalls);
  metrics["matching"] = {{"precision", summary.matching.precision},
                         {"recall", summary.matching.recall},
                         {"f1", summary.matching.f1},
                         {"ap", summary.matching.ap},
                         {"true_positives", summary.matching.true_positives},
                         {"ground_truth", summary.matching.ground_truth_count},
                         {"predicted", summary.matching.predicted_count}};
  detail::save_json_file(out_dir / "metrics.json", metrics);

  std::ofstream csv(out_dir / "metrics.csv");
  csv << "query,rotation_error_deg,translation_error_m,degenerate,fallback_used\n";
  for (size_t qi = 0; qi < summary.queries.size(); ++qi)
    csv << qi << "," << std::setprecision(17) << summary.pose.rotation_errors_deg[qi]
        << "," << summary.pose.translation_errors_m[qi] << ","
        << (summary.queries[qi].estimate.degenerate ? 1 : 0) << ","
        << (summary.queries[qi].estimate.fallback_used ? 1 : 0) << "\n";
  return summary;
}

} // namespace planeloc
