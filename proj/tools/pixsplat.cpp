// Command-line front end: synthetic scenes, rendering, refinement,
// evaluation, gradient checks and benchmarks.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pixsplat/autodiff_raster.h"
#include "pixsplat/gradcheck.h"
#include "pixsplat/io.h"
#include "pixsplat/parallel.h"
#include "pixsplat/pipeline.h"
#include "pixsplat/random.h"

using namespace pixsplat;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool cull = false;
  int threads = 0;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Seed for every random choice");
  app->add_flag("--deterministic", c.deterministic, "Ordered per-pixel blending (bit-exact)");
  app->add_flag("--cull-backfaces", c.cull, "Drop points whose outward normal faces away from the camera");
  app->add_option("--threads", c.threads, "Worker threads (0: hardware concurrency)")->check(CLI::NonNegativeNumber);
}

void apply_common(const Common& c, PipelineConfig& cfg) {
  if (c.threads > 0) set_thread_count(c.threads);
  if (c.deterministic) cfg.raster.deterministic = true;
  if (c.cull) {
    cfg.raster.normal_culling = true;
    cfg.raster.flip_normal_test = true;
  }
  if (c.seed) {
    cfg.raster.seed = *c.seed;
    cfg.raster.discard.seed = *c.seed;
    cfg.optim.seed = *c.seed;
  }
}

std::pair<int, int> parse_res(const std::string& s) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(s);
  if (!(in >> w >> x >> h) || x != 'x' || w < 1 || h < 1) throw InvalidArgument("resolution must look like WxH");
  return {w, h};
}

std::size_t frame_index(const Model& m, int id) {
  for (std::size_t i = 0; i < m.frames.size(); ++i)
    if (m.frames[i].id == id) return i;
  throw InvalidArgument("no frame with id " + std::to_string(id));
}

FreezeFlags parse_groups(const std::string& spec, FreezeFlags f, bool freeze) {
  std::istringstream in(spec);
  for (std::string g; std::getline(in, g, ',');) {
    if (g.empty()) continue;
    bool* slot = g == "texture"         ? &f.texture
                 : g == "environment"   ? &f.environment
                 : g == "position"      ? &f.position
                 : g == "pose"          ? &f.pose
                 : g == "intrinsics"    ? &f.intrinsics
                 : g == "exposure"      ? &f.exposure
                 : g == "white_balance" ? &f.white_balance
                 : g == "vignette"      ? &f.vignette
                 : g == "response"      ? &f.response
                 : g == "head"          ? &f.head
                                        : nullptr;
    if (g == "all") {
      f = freeze ? FreezeFlags::all() : FreezeFlags{false, false, false, false, false, false, false, false, false, false};
      continue;
    }
    if (!slot) throw InvalidArgument("unknown parameter group '" + g + "'");
    *slot = freeze;
  }
  return f;
}

json report_json(const EvaluationReport& r) {
  json frames = json::array();
  for (const auto& m : r.frames) frames.push_back({{"frame", m.frame_id}, {"psnr", m.psnr}, {"l1", m.l1}, {"mse", m.mse}});
  return {{"frames", frames}, {"mean_psnr", r.mean_psnr}, {"mean_l1", r.mean_l1}, {"mean_mse", r.mean_mse}};
}

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::string shape = "plane";
  std::size_t n = 1000;
  std::string out = "scene";
  int frames = 10;
  std::string res = "64x48";
  double focal = 60.0;
  int dim = 4;
  std::string camera = "pinhole";
  double radiance_range = 1.0;
};

int cmd_synth(const SynthArgs& a, const Common& c) {
  PipelineConfig cfg;
  apply_common(c, cfg);
  SynthSpec spec;
  spec.shape = parse_shape(a.shape);
  spec.point_count = a.n;
  spec.seed = c.seed.value_or(0);
  spec.frame_count = a.frames;
  std::tie(spec.width, spec.height) = parse_res(a.res);
  spec.focal = a.focal;
  spec.descriptor_dim = a.dim;
  spec.radiance_range = a.radiance_range;
  spec.space = choose_descriptor_space(a.radiance_range);
  if (a.camera == "pinhole")
    spec.camera = CameraKind::PinholeDistorted;
  else if (a.camera == "fisheye")
    spec.camera = CameraKind::FisheyeEquidistant;
  else
    throw InvalidArgument("camera must be pinhole or fisheye");
  const Model m = make_synthetic_model(spec, cfg);
  const fs::path scene = save_scene(a.out, m, cfg);
  std::cout << json{{"scene", scene.string()}, {"points", m.cloud.size()}, {"frames", m.frames.size()}}.dump() << "\n";
  return 0;
}

struct SceneArgs {
  std::string scene;
  std::string checkpoint;
};

SceneFiles open_scene(const SceneArgs& a, const Common& c) {
  SceneFiles s = load_scene(a.scene);
  apply_common(c, s.config);
  if (!a.checkpoint.empty()) {
    OptimizerState st;
    load_checkpoint(a.checkpoint, s.model, s.config, st);
  }
  return s;
}

struct RenderArgs {
  SceneArgs scene;
  int frame = 0;
  std::string out;
  std::string hdr;
};

int cmd_render(const RenderArgs& a, const Common& c) {
  SceneFiles s = open_scene(a.scene, c);
  const Frame& f = s.model.frames.at(frame_index(s.model, a.frame));
  const FrameRender r = render_frame(s.model, f, s.config.raster, s.config.reconstruct, ResponseMode::Inference);
  write_image(r.ldr, a.out);
  if (!a.hdr.empty()) write_pfm(r.hdr, a.hdr);
  return 0;
}

struct RefineArgs {
  SceneArgs scene;
  int epochs = -1;
  std::string out;
  std::string checkpoint_dir;
  std::string resume;
  std::string log;
  std::string unfreeze;
  std::string freeze;
};

int cmd_refine(const RefineArgs& a, const Common& c) {
  SceneFiles s = open_scene(a.scene, c);
  s.config.optim.frozen = parse_groups(a.unfreeze, s.config.optim.frozen, false);
  s.config.optim.frozen = parse_groups(a.freeze, s.config.optim.frozen, true);
  OptimizerState st;
  if (!a.resume.empty()) load_checkpoint(a.resume, s.model, s.config, st);
  RefineOptions opt;
  opt.epochs = a.epochs >= 0 ? a.epochs : s.config.optim.epochs;
  if (!a.checkpoint_dir.empty()) opt.checkpoint_dir = a.checkpoint_dir;
  if (!a.log.empty()) opt.log_path = a.log;
  opt.on_epoch = [](const EpochStats& e, const EvaluationReport& r) {
    std::cout << json{{"epoch", e.epoch}, {"train_loss", e.mean_loss}, {"train_psnr", e.mean_psnr},
                      {"test", report_json(r)}}
                     .dump()
              << std::endl;
  };
  refine(s.model, s.config, opt, st);
  if (!a.out.empty()) save_scene(a.out, s.model, s.config);
  return 0;
}

struct EvaluateArgs {
  SceneArgs scene;
  bool all_frames = false;
};

int cmd_evaluate(const EvaluateArgs& a, const Common& c) {
  SceneFiles s = open_scene(a.scene, c);
  std::vector<std::size_t> idx;
  if (a.all_frames) {
    for (std::size_t i = 0; i < s.model.frames.size(); ++i) idx.push_back(i);
  } else {
    idx = split_frames(s.model.frames.size(), s.config.test_fraction).test;
  }
  std::cout << report_json(evaluate(s.model, idx, s.config)).dump(2) << "\n";
  return 0;
}

struct GradcheckArgs {
  std::string module = "all";
  double rel_tol = 1e-4;
  double step = 1e-6;
  int samples = 24;
};

int cmd_gradcheck(const GradcheckArgs& a, const Common& c) {
  if (c.threads > 0) set_thread_count(c.threads);
  GradCheckOptions opt;
  opt.rel_tol = a.rel_tol;
  opt.step = a.step;
  opt.samples = a.samples;
  opt.seed = c.seed.value_or(0);
  std::vector<std::string> modules;
  if (a.module == "all")
    modules = gradcheck_modules();
  else
    modules = {a.module};
  json out = json::array();
  std::size_t failures = 0;
  for (const auto& m : modules) {
    const GradCheckReport r = gradcheck_module(m, opt);
    failures += r.failures();
    json bad = json::array();
    double worst = 0.0;
    for (const auto& e : r.entries) {
      worst = std::max(worst, e.error / e.tolerance);
      if (!e.pass)
        bad.push_back({{"name", e.name}, {"analytic", e.analytic}, {"numeric", e.numeric}, {"error", e.error}});
    }
    out.push_back({{"module", m},
                   {"checked", r.entries.size()},
                   {"failed", r.failures()},
                   {"worst_error_over_tolerance", worst},
                   {"failures", bad}});
  }
  std::cout << out.dump(2) << "\n";
  return failures == 0 ? 0 : 3;
}

struct AblationArgs {
  std::string shape = "wall-pair";
  std::size_t n = 20000;
  std::string res = "96x72";
  double focal = 90.0;
  int steps = 300;
  int seeds = 5;
  double gt_noise = 0.02;
  double pose_lr = 2e-3;
  bool raw_gradient = false;
};

int cmd_ablation(const AblationArgs& a, const Common& c) {
  PipelineConfig cfg;
  apply_common(c, cfg);
  SynthSpec spec;
  spec.shape = parse_shape(a.shape);
  spec.point_count = a.n;
  spec.seed = c.seed.value_or(0);
  std::tie(spec.width, spec.height) = parse_res(a.res);
  spec.focal = a.focal;
  Model ref = make_synthetic_model(spec, cfg);
  add_ground_truth_noise(ref, a.gt_noise, spec.seed);
  AblationOptions opt;
  opt.steps = a.steps;
  opt.pose_lr = a.pose_lr;
  opt.normalize_gradient = !a.raw_gradient;
  opt.seeds.clear();
  for (int i = 1; i <= a.seeds; ++i) opt.seeds.push_back(hash_key(spec.seed, std::uint64_t(i)) % 100000);
  const AblationReport r = ghost_ablation(ref, cfg, opt);
  json runs = json::array();
  for (const auto& run : r.runs)
    runs.push_back({{"seed", run.seed},
                    {"baseline_rms", run.baseline_rms},
                    {"initial_rms", run.initial_rms},
                    {"ghost_on_loss", run.ghost_on_loss},
                    {"ghost_off_loss", run.ghost_off_loss},
                    {"ghost_on_aligned", run.ghost_on_aligned},
                    {"ghost_off_aligned", run.ghost_off_aligned},
                    {"frames", run.frames}});
  std::cout << json{{"runs", runs}, {"ghost_wins", r.ghost_wins}}.dump(2) << "\n";
  return 0;
}

struct DiscardArgs {
  SceneArgs scene;
  int frame = 0;
  double gamma = 1.5;
};

int cmd_discard_stats(const DiscardArgs& a, const Common& c) {
  SceneFiles s = open_scene(a.scene, c);
  const Frame& f = s.model.frames.at(frame_index(s.model, a.frame));
  const RenderView view = s.model.view_of(f);
  RasterConfig full = s.config.raster;
  full.discard.enabled = false;
  RasterConfig thinned = s.config.raster;
  thinned.discard.enabled = true;
  thinned.discard.gamma = a.gamma;
  std::printf("layer,x,y,count_all,count_discard\n");
  for (int l = 0; l < s.config.raster.layers; ++l) {
    const PyramidLayer A = render_layer(s.model.cloud, s.model.env, view, l, full);
    const PyramidLayer B = render_layer(s.model.cloud, s.model.env, view, l, thinned);
    for (int y = 0; y < A.height(); ++y)
      for (int x = 0; x < A.width(); ++x) {
        const std::size_t q = A.image.index(x, y);
        std::printf("%d,%d,%d,%d,%d\n", l, x, y, int(A.counts[q]), int(B.counts[q]));
      }
  }
  return 0;
}

struct BenchArgs {
  std::size_t points = 1000000;
  std::string res = "1920x1080";
  int layers = 1;
  int repeat = 3;
  bool header = true;
};

int cmd_bench(const BenchArgs& a, const Common& c) {
  PipelineConfig cfg;
  apply_common(c, cfg);
  cfg.raster.layers = a.layers;
  const auto [W, H] = parse_res(a.res);
  const std::uint64_t seed = c.seed.value_or(0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  CameraModel cam;
  cam.width = W;
  cam.height = H;
  cam.fx = cam.fy = 0.8 * W;
  cam.cx = 0.5 * (W - 1);
  cam.cy = 0.5 * (H - 1);
  PointCloud cloud;
  cloud.positions.resize(a.points);
  cloud.descriptors.resize(Eigen::Index(a.points), 4);
  for (std::size_t i = 0; i < a.points; ++i) {
    const double z = 2.0 + u(rng);
    cloud.positions[i] = {(u(rng) - 0.5) * z * W / cam.fx, (u(rng) - 0.5) * z * H / cam.fy, z};
    for (int d = 0; d < 4; ++d) cloud.descriptors(Eigen::Index(i), d) = u(rng);
  }
  cloud = morton_reorder(cloud, 128, seed).cloud;
  EnvironmentMap env(16, 4, 0.1);
  const RenderView view{&cam, Pose::identity(), 0};
  std::vector<Image> adj;
  for (int l = 0; l < a.layers; ++l) adj.emplace_back(layer_extent(W, l), layer_extent(H, l), 4, 1e-3);
  std::vector<std::uint8_t> all(a.points, 1);
  using clock = std::chrono::steady_clock;
  double best_f = 1e300, best_b = 1e300;
  for (int r = 0; r < std::max(1, a.repeat); ++r) {
    const auto t0 = clock::now();
    const NeuralImagePyramid pyr = render_pyramid(cloud, env, view, cfg.raster);
    const auto t1 = clock::now();
    GradientBundle g = GradientBundle::zeros(cloud, env);
    backprop_texture_env(cloud, env, view, cfg.raster, pyr, adj, {}, g.d_tau, g.d_env);
    backprop_structural(cloud, view, cfg.raster, pyr, adj, all);
    const auto t2 = clock::now();
    best_f = std::min(best_f, std::chrono::duration<double, std::milli>(t1 - t0).count());
    best_b = std::min(best_b, std::chrono::duration<double, std::milli>(t2 - t1).count());
  }
  if (a.header) std::printf("points,res,layers,forward_ms,backward_ms\n");
  std::printf("%zu,%dx%d,%d,%.3f,%.3f\n", a.points, W, H, a.layers, best_f, best_b);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap_memory();
  CLI::App app{"Differentiable one-pixel point rasterization and refinement"};
  app.require_subcommand(1);
  Common common;
  std::string active;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic scene with rendered ground truth");
  add_common(s, common);
  s->add_option("--shape", synth.shape, "plane, sphere or wall-pair")->capture_default_str();
  s->add_option("--n", synth.n, "Point count")->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->capture_default_str();
  s->add_option("--frames", synth.frames, "Frame count")->capture_default_str();
  s->add_option("--res", synth.res, "Image size WxH")->capture_default_str();
  s->add_option("--focal", synth.focal, "Focal length in pixels")->capture_default_str();
  s->add_option("--dim", synth.dim, "Descriptor channels")->capture_default_str();
  s->add_option("--camera", synth.camera, "pinhole or fisheye")->capture_default_str();
  s->add_option("--radiance-range", synth.radiance_range, "Max/min radiance ratio")->capture_default_str();

  auto scene_opts = [](CLI::App* cmd, SceneArgs& sa) {
    cmd->add_option("--scene", sa.scene, "scene.json")->required();
    cmd->add_option("--checkpoint", sa.checkpoint, "Checkpoint to load over the scene");
  };

  RenderArgs render;
  auto* r = app.add_subcommand("render", "Render one frame");
  add_common(r, common);
  scene_opts(r, render.scene);
  r->add_option("--frame", render.frame, "Frame id")->required();
  r->add_option("--out", render.out, "LDR output (.png or .pfm)")->required();
  r->add_option("--hdr", render.hdr, "Optional HDR output (.pfm)");

  RefineArgs refine_args;
  auto* rf = app.add_subcommand("refine", "Optimize scene parameters against the frames");
  add_common(rf, common);
  scene_opts(rf, refine_args.scene);
  rf->add_option("--epochs", refine_args.epochs, "Epochs (default from the config)");
  rf->add_option("--out", refine_args.out, "Directory for the refined scene");
  rf->add_option("--checkpoint-dir", refine_args.checkpoint_dir, "Write a checkpoint after every epoch");
  rf->add_option("--resume", refine_args.resume, "Continue from a checkpoint");
  rf->add_option("--log", refine_args.log, "JSON-lines step log");
  rf->add_option("--unfreeze", refine_args.unfreeze, "Comma-separated groups to optimize");
  rf->add_option("--freeze", refine_args.freeze, "Comma-separated groups to hold fixed");

  EvaluateArgs eval_args;
  auto* ev = app.add_subcommand("evaluate", "PSNR, L1 and MSE of the test frames");
  add_common(ev, common);
  scene_opts(ev, eval_args.scene);
  ev->add_flag("--all-frames", eval_args.all_frames, "Evaluate every frame instead of the test split");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  add_common(g, common);
  g->add_option("--module", gc.module, "all, geometry, raster, reconstruct, tonemap, loss or pipeline")
      ->capture_default_str();
  g->add_option("--rel-tol", gc.rel_tol, "Relative tolerance per comparison")->capture_default_str();
  g->add_option("--step", gc.step, "Central difference step")->capture_default_str();
  g->add_option("--samples", gc.samples, "Coordinates checked per parameter tensor")->capture_default_str();

  AblationArgs ab;
  auto* ga = app.add_subcommand("ghost-ablation", "Pose alignment with and without ghost gradients");
  add_common(ga, common);
  ga->add_option("--shape", ab.shape, "plane, sphere or wall-pair")->capture_default_str();
  ga->add_option("--n", ab.n, "Point count")->capture_default_str();
  ga->add_option("--res", ab.res, "Image size WxH")->capture_default_str();
  ga->add_option("--focal", ab.focal, "Focal length in pixels")->capture_default_str();
  ga->add_option("--steps", ab.steps, "Passes over the noised frames")->capture_default_str();
  ga->add_option("--seeds", ab.seeds, "Pose-noise seeds")->capture_default_str();
  ga->add_option("--gt-noise", ab.gt_noise, "Sensor noise added to the ground truth")->capture_default_str();
  ga->add_option("--pose-lr", ab.pose_lr, "Initial pose learning rate")->capture_default_str();
  ga->add_flag("--raw-gradient", ab.raw_gradient, "Feed Adam the unnormalized pose gradient");

  DiscardArgs ds;
  auto* d = app.add_subcommand("discard-stats", "Per-pixel blend counts with and without discarding (CSV)");
  add_common(d, common);
  scene_opts(d, ds.scene);
  d->add_option("--frame", ds.frame, "Frame id")->capture_default_str();
  d->add_option("--gamma", ds.gamma, "Discard radius multiplier")->capture_default_str();

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Time forward and backward passes (CSV)");
  add_common(b, common);
  b->add_option("--points", bench.points, "Point count")->capture_default_str();
  b->add_option("--res", bench.res, "Image size WxH")->capture_default_str();
  b->add_option("--layers", bench.layers, "Pyramid layers")->capture_default_str();
  b->add_option("--repeat", bench.repeat, "Timed repetitions; the fastest is reported")->capture_default_str();
  b->add_flag("!--no-header", bench.header, "Omit the CSV header");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    const std::string name = cmd->get_name();
    if (name == "synth") return cmd_synth(synth, common);
    if (name == "render") return cmd_render(render, common);
    if (name == "refine") return cmd_refine(refine_args, common);
    if (name == "evaluate") return cmd_evaluate(eval_args, common);
    if (name == "gradcheck") return cmd_gradcheck(gc, common);
    if (name == "ghost-ablation") return cmd_ablation(ab, common);
    if (name == "discard-stats") return cmd_discard_stats(ds, common);
    if (name == "bench") return cmd_bench(bench, common);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"command", cmd->get_name()}}.dump() << "\n";
    return 1;
  }
  return 1;
}
