// Command-line pipeline driver: scene synthesis, plane fitting, relocalization
// and metric reports. Every run is reproducible from the config and seeds.

#include <CLI11.hpp>
#include <iostream>

#include "planeloc/pipeline.hpp"

namespace {

using namespace planeloc;

constexpr int kExitConfig = 2;
constexpr int kExitDegenerate = 3;
constexpr int kExitIo = 4;

std::vector<RecallThreshold> parse_thresholds(const std::string& text) {
  std::vector<RecallThreshold> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("thresholds: expected METERS:DEGREES pairs");
    out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
  }
  if (out.empty()) throw ConfigError("thresholds: empty list");
  return out;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir,
              std::optional<uint64_t> seed) {
  SceneSpec spec = load_scene_spec(spec_path);
  if (seed) spec.rng_seed = *seed;
  const SyntheticScene scene = synth_scene(spec);
  const Json manifest = save_scene(out_dir, scene, spec.rng_seed);
  std::cout << manifest.dump(2) << std::endl;
  return 0;
}

int cmd_fit_planes(const std::string& depth_path, const std::string& intr_path,
                   const std::string& config_path, const std::string& out_dir,
                   std::optional<uint64_t> seed) {
  RansacConfig cfg;
  if (!config_path.empty()) cfg = load_experiment_config(config_path).ransac;
  if (seed) cfg.rng_seed = *seed;
  const DepthMap depth =
      downsample_depth(load_depth(depth_path), cfg.downsample);
  const Json ji = detail::load_json_file(intr_path);
  const Intrinsics k =
      downsample_intrinsics(intrinsics_from_json(ji), cfg.downsample);

  const std::vector<QueryPrimitive> prims =
      sequential_ransac_depth(unproject_depth(depth, k), cfg);

  fs::create_directories(out_dir);
  Json jp = Json::array();
  for (const QueryPrimitive& p : prims) {
    Json j;
    j["normal"] = detail::vec3_to_json(p.plane.normal);
    j["offset"] = p.plane.offset;
    j["area_px"] = p.mask.count();
    jp.push_back(std::move(j));
  }
  Json out;
  out["format_version"] = kFormatVersion;
  out["primitives"] = std::move(jp);
  detail::save_json_file(fs::path(out_dir) / "primitives.json", out);
  save_mask_pgm(fs::path(out_dir) / "masks.pgm", prims, depth.width, depth.height);
  save_depth_pgm(fs::path(out_dir) / "depth.pgm", depth);
  std::cout << "extracted " << prims.size() << " primitives" << std::endl;
  return 0;
}

int cmd_relocalize(const std::string& scene_dir, const std::string& out_dir,
                   const std::string& config_path, const RelocalizeOptions& opts,
                   std::optional<uint64_t> seed, const std::string& weights_path) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = load_experiment_config(config_path);
  if (seed) cfg.seed = *seed;
  if (!weights_path.empty()) cfg.matcher.weights_path = weights_path;

  const RelocalizeSummary summary = run_relocalize(scene_dir, cfg, opts, out_dir);
  std::cout << "queries: " << summary.queries.size()
            << "  median dR: " << summary.pose.median_rotation_deg << " deg"
            << "  median dt: " << summary.pose.median_translation_m << " m"
            << std::endl;
  for (size_t i = 0; i < cfg.thresholds.size(); ++i)
    std::cout << "recall @ (" << cfg.thresholds[i].translation_m << " m, "
              << cfg.thresholds[i].rotation_deg << " deg): " << summary.pose.recall[i]
              << std::endl;
  return 0;
}

int cmd_evaluate(const std::string& estimates_dir, const std::string& scene_dir,
                 const std::string& out_dir, const std::string& thresholds_text) {
  const std::vector<RecallThreshold> thresholds =
      thresholds_text.empty() ? default_recall_thresholds()
                              : parse_thresholds(thresholds_text);
  const SceneOnDisk scene = load_scene(scene_dir);
  std::vector<Pose> est, gt;
  for (size_t qi = 0; qi < scene.queries.size(); ++qi) {
    const fs::path path = fs::path(estimates_dir) / (query_tag(qi) + "_estimate.json");
    if (!fs::exists(path))
      throw LengthMismatch("evaluate: missing estimate " + path.string());
    est.push_back(load_pose_estimate(path).pose);
    gt.push_back(scene.queries[qi].gt_pose);
  }
  const PoseMetrics pm = pose_metrics(est, gt, thresholds);

  fs::create_directories(out_dir);
  Json j;
  j["format_version"] = kFormatVersion;
  j["mean_rotation_deg"] = pm.mean_rotation_deg;
  j["median_rotation_deg"] = pm.median_rotation_deg;
  j["mean_translation_m"] = pm.mean_translation_m;
  j["median_translation_m"] = pm.median_translation_m;
  Json recalls = Json::array();
  for (size_t i = 0; i < thresholds.size(); ++i) {
    Json r;
    r["translation_m"] = thresholds[i].translation_m;
    r["rotation_deg"] = thresholds[i].rotation_deg;
    r["recall"] = pm.recall[i];
    recalls.push_back(std::move(r));
  }
  j["pose_recall"] = std::move(recalls);

  // matching metrics when the run saved per-query labels and IoUs
  std::vector<QueryOutput> match_inputs;
  bool have_matching = true;
  for (size_t qi = 0; qi < scene.queries.size() && have_matching; ++qi) {
    const fs::path lp = fs::path(estimates_dir) / (query_tag(qi) + "_run_labels.json");
    const fs::path ip = fs::path(estimates_dir) / (query_tag(qi) + "_iou.json");
    const fs::path cp =
        fs::path(estimates_dir) / (query_tag(qi) + "_correspondences.json");
    if (!fs::exists(lp) || !fs::exists(ip) || !fs::exists(cp)) {
      have_matching = false;
      break;
    }
    QueryOutput q;
    q.labels = load_labels(lp);
    const Json ji = detail::load_json_file(ip);
    const Json& rows = ji.at("iou");
    const Eigen::Index r = rows.size();
    const Eigen::Index c = r > 0 ? rows.at(0).size() : 0;
    q.iou = detail::matrix_from_json(rows, r, c, "iou");
    q.predicted = load_correspondences(cp);
    match_inputs.push_back(std::move(q));
  }
  if (have_matching && !match_inputs.empty()) {
    const MatchMetrics mm = detail::aggregate_match_metrics(match_inputs);
    j["matching"] = {{"precision", mm.precision}, {"recall", mm.recall},
                     {"f1", mm.f1},               {"ap", mm.ap},
                     {"true_positives", mm.true_positives},
                     {"ground_truth", mm.ground_truth_count},
                     {"predicted", mm.predicted_count}};
    std::ofstream pr(fs::path(out_dir) / "pr_curve.csv");
    pr << "recall,precision\n";
    for (const QueryOutput& q : match_inputs) {
      const auto points = pr_curve(q.predicted, q.labels, q.iou);
      for (auto [rec, prec] : points)
        pr << std::setprecision(17) << rec << "," << prec << "\n";
    }
  }
  detail::save_json_file(fs::path(out_dir) / "metrics.json", j);

  std::ofstream csv(fs::path(out_dir) / "metrics.csv");
  csv << "query,rotation_error_deg,translation_error_m\n";
  for (size_t qi = 0; qi < est.size(); ++qi)
    csv << qi << "," << std::setprecision(17) << pm.rotation_errors_deg[qi] << ","
        << pm.translation_errors_m[qi] << "\n";
  std::cout << j.dump(2) << std::endl;
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"plane-centric camera relocalization toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, depth_path, intr_path, config_path, scene_dir,
      estimates_dir, thresholds_text, weights_path;
  std::optional<uint64_t> seed;
  RelocalizeOptions opts;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic planar scene");
  synth->add_option("--spec", spec_path, "scene spec JSON")->required();
  synth->add_option("--out", out_dir, "output scene directory")->required();
  synth->add_option("--seed", seed, "override the spec seed");

  CLI::App* fit = app.add_subcommand("fit-planes", "sequential RANSAC on a depth map");
  fit->add_option("--depth", depth_path, "depth file (.dpth)")->required();
  fit->add_option("--intrinsics", intr_path, "intrinsics JSON")->required();
  fit->add_option("--config", config_path, "experiment config JSON");
  fit->add_option("--out", out_dir, "output directory")->required();
  fit->add_option("--seed", seed, "RANSAC seed");

  CLI::App* reloc = app.add_subcommand("relocalize", "run the full pipeline on a scene");
  reloc->add_option("--scene", scene_dir, "scene directory")->required();
  reloc->add_option("--out", out_dir, "output directory")->required();
  reloc->add_option("--config", config_path, "experiment config JSON");
  reloc->add_option("--weights", weights_path, "matcher weights JSON");
  reloc->add_option("--seed", seed, "experiment seed");
  reloc->add_option("--threads", opts.threads, "worker threads");
  reloc->add_flag("--refine", opts.refine, "run pose refinement");
  reloc->add_flag("--synthetic-embeddings", opts.synthetic_embeddings,
                  "use label-anchored synthetic embeddings");
  reloc->add_flag("--oracle-labels", opts.oracle_labels,
                  "use ground-truth labels as predicted matches");

  CLI::App* eval = app.add_subcommand("evaluate", "pose and matching metrics");
  eval->add_option("--estimates", estimates_dir, "directory of estimate files")
      ->required();
  eval->add_option("--scene", scene_dir, "scene directory with ground truth")
      ->required();
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_option("--thresholds", thresholds_text,
                   "recall thresholds METERS:DEG,METERS:DEG,...");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_dir, seed);
    if (fit->parsed())
      return cmd_fit_planes(depth_path, intr_path, config_path, out_dir, seed);
    if (reloc->parsed())
      return cmd_relocalize(scene_dir, out_dir, config_path, opts, seed, weights_path);
    if (eval->parsed())
      return cmd_evaluate(estimates_dir, scene_dir, out_dir, thresholds_text);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const VersionMismatch& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const NoPlaneFound& e) {
    std::cerr << "degenerate input: " << e.what() << std::endl;
    return kExitDegenerate;
  } catch (const ParseError& e) {
    std::cerr << "i/o error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const LengthMismatch& e) {
    std::cerr << "i/o error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
