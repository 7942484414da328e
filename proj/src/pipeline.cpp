#include "pixsplat/pipeline.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <array>
#include <cstring>

#include <json.hpp>

#include "pixsplat/errors.h"
#include "pixsplat/io.h"
#include "pixsplat/parallel.h"
#include "pixsplat/random.h"

namespace pixsplat {

SensorParams Model::sensor_for(const Frame& frame) const {
  SensorParams s;
  s.ev = frame.ev;
  s.white_point = frame.white_point;
  s.vignette = vignette;
  s.crf = crf;
  s.leak_alpha = leak_alpha;
  s.green_reference = frame.white_point.y();
  return s;
}

RenderView Model::view_of(const Frame& frame) const {
  const auto it = cameras.find(frame.camera_id);
  if (it == cameras.end()) throw InvalidArgument("frame " + std::to_string(frame.id) + " references unknown camera");
  return {&it->second, frame.pose, std::uint64_t(frame.id)};
}

double Model::scene_diagonal() const {
  if (cloud.size() == 0) return 1.0;
  Vector3d mn = cloud.positions.front(), mx = mn;
  for (const auto& p : cloud.positions) {
    mn = mn.cwiseMin(p);
    mx = mx.cwiseMax(p);
  }
  return std::max((mx - mn).norm(), 1e-12);
}

FrameRender render_frame(const Model& model, const Frame& frame, const RasterConfig& raster,
                         const ReconstructConfig& reconstruct, ResponseMode mode,
                         std::span<const std::uint8_t> active) {
  FrameRender r;
  r.pyramid = render_pyramid(model.cloud, model.env, model.view_of(frame), raster, active);
  r.hdr = reconstruct_hdr(r.pyramid, model.head, reconstruct);
  r.ldr = tonemap_forward(r.hdr, model.sensor_for(frame), mode);
  return r;
}

FrameGradients frame_gradients(const Model& model, const Frame& frame, const PipelineConfig& cfg,
                               std::span<const std::uint8_t> render_mask, std::span<const std::uint8_t> structural,
                               ResponseMode mode) {
  const RenderView view = model.view_of(frame);
  const SensorParams sensor = model.sensor_for(frame);
  FrameRender fr = render_frame(model, frame, cfg.raster, cfg.reconstruct, mode, render_mask);
  if (!frame.ground_truth.same_shape(fr.ldr)) throw ShapeMismatch("frame " + std::to_string(frame.id) + ": ground truth shape differs from render");
  LossResult loss = image_loss(fr.ldr, frame.ground_truth, cfg.optim.loss);

  FrameGradients g;
  g.loss = loss.value;
  g.sensor = tonemap_backward(fr.hdr, sensor, mode, loss.adjoint);
  ReconstructGradients rg = reconstruct_backward(fr.pyramid, model.head, g.sensor.d_input, cfg.reconstruct);
  g.d_head_weight = rg.d_weight;
  g.d_head_bias = rg.d_bias;
  g.raster = GradientBundle::zeros(model.cloud, model.env);
  if (!(cfg.optim.frozen.texture && cfg.optim.frozen.environment))
    backprop_texture_env(model.cloud, model.env, view, cfg.raster, fr.pyramid, rg.d_layers, render_mask,
                         g.raster.d_tau, g.raster.d_env);
  Vector6d d_pose = Vector6d::Zero();
  IntrinsicVector d_intr = IntrinsicVector::Zero();
  if (!structural.empty()) {
    StructuralGradients sg = backprop_structural(model.cloud, view, cfg.raster, fr.pyramid, rg.d_layers, structural,
                                                 SpatialDifference::Central, !cfg.optim.frozen.intrinsics);
    g.raster.d_x = std::move(sg.d_x);
    d_pose = sg.d_pose;
    d_intr = sg.d_intrinsics;
  }
  g.raster.d_pose[frame.id] = d_pose;
  g.raster.d_intrinsics[frame.camera_id] = d_intr;
  g.ldr = std::move(fr.ldr);
  return g;
}

namespace {

std::span<double> as_span(std::vector<Vector3d>& v) { return {v.empty() ? nullptr : v.front().data(), v.size() * 3}; }
template <class M>
std::span<double> as_span_m(M& m) {
  return {m.data(), std::size_t(m.size())};
}
template <class M>
std::span<const double> as_span_m(const M& m) {
  return {m.data(), std::size_t(m.size())};
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

bool structural_enabled(const FreezeFlags& f) { return !(f.position && f.pose && f.intrinsics); }

}  // namespace

StepStats train_step(Model& model, std::size_t frame_index, const PipelineConfig& cfg, OptimizerState& state) {
  Frame& frame = model.frames.at(frame_index);
  const OptimConfig& oc = cfg.optim;
  const FreezeFlags& fz = oc.frozen;
  const std::size_t n = model.cloud.size();

  std::vector<std::uint8_t> render_mask, structural;
  if (structural_enabled(fz)) {
    if (oc.ghost_gradients) {
      GhostSplit split = ghost_split(n, oc.dropout, hash_key(oc.seed, std::uint64_t(state.step), 0x6e7));
      render_mask = std::move(split.render_mask);
      structural = std::move(split.ghost_mask);
    } else {
      structural.assign(n, 1);
    }
  }

  FrameGradients g = frame_gradients(model, frame, cfg, render_mask, structural, ResponseMode::Training);
  StepStats st;
  st.frame_id = frame.id;
  st.loss = g.loss;
  st.psnr = psnr(g.ldr, frame.ground_truth);
  if (!std::isfinite(g.loss))
    throw std::runtime_error("non-finite loss at frame " + std::to_string(frame.id) + ", step " +
                             std::to_string(state.step));
  ++state.step;

  const LearningRates& lr = oc.lr;
  const AdamConfig& ac = oc.adam;
  bool ok = true;
  st.grad_norm_texture = norm(as_span_m(g.raster.d_tau));
  if (!fz.texture) {
    const double rate = model.cloud.space == DescriptorSpace::Logarithmic ? lr.log_texture : lr.texture;
    ok &= adam_step(as_span_m(model.cloud.descriptors), as_span_m(g.raster.d_tau), state.texture, rate, ac);
  }
  if (!fz.environment)
    ok &= adam_step(as_span_m(model.env.texels.data), as_span_m(g.raster.d_env.data), state.environment,
                    lr.environment, ac);
  st.grad_norm_position = norm(as_span(g.raster.d_x));
  if (!fz.position)
    ok &= adam_step(as_span(model.cloud.positions), as_span(g.raster.d_x), state.position,
                    lr.position * model.scene_diagonal(), ac);
  Vector6d d_pose = g.raster.d_pose[frame.id];
  st.grad_norm_pose = d_pose.norm();
  if (oc.normalize_pose_gradient && st.grad_norm_pose > 0.0) d_pose /= st.grad_norm_pose;
  if (!fz.pose) ok &= step_pose(frame.pose, d_pose, state.pose[frame.id], lr.pose, ac);
  if (!fz.intrinsics) {
    CameraModel& cam = model.cameras.at(frame.camera_id);
    // Adam runs on k / scale, so lr.intrinsics is in corner pixels.
    const IntrinsicVector scale = intrinsic_step_scale(cam);
    IntrinsicVector k = cam.intrinsics().cwiseQuotient(scale);
    const IntrinsicVector dk = g.raster.d_intrinsics[frame.camera_id].cwiseProduct(scale);
    ok &= adam_step(as_span_m(k), as_span_m(dk), state.intrinsics[frame.camera_id], lr.intrinsics, ac);
    k = k.cwiseProduct(scale);
    k[0] = std::max(k[0], 1e-6);
    k[1] = std::max(k[1], 1e-6);
    cam.set_intrinsics(k);
  }
  if (!fz.head) {
    const int D = model.head.descriptor_dim();
    std::vector<double> p(std::size_t(3 * D + 3)), d(p.size());
    std::copy_n(model.head.weight.data(), 3 * D, p.begin());
    std::copy_n(model.head.bias.data(), 3, p.begin() + 3 * D);
    std::copy_n(g.d_head_weight.data(), 3 * D, d.begin());
    std::copy_n(g.d_head_bias.data(), 3, d.begin() + 3 * D);
    ok &= adam_step(p, d, state.head, lr.head, ac);
    std::copy_n(p.begin(), 3 * D, model.head.weight.data());
    std::copy_n(p.begin() + 3 * D, 3, model.head.bias.data());
  }
  const TonemapGradients& ts = g.sensor;
  st.grad_norm_sensor = std::sqrt(ts.d_ev * ts.d_ev + ts.d_white_point.squaredNorm() + ts.d_a2 * ts.d_a2 +
                                  ts.d_a4 * ts.d_a4 + ts.d_a6 * ts.d_a6 + ts.d_centre.squaredNorm());
  if (!fz.exposure) {
    double d_ev = ts.d_ev;
    ok &= adam_step(std::span<double>(&frame.ev, 1), std::span<const double>(&d_ev, 1), state.exposure[frame.id],
                    lr.exposure, ac);
  }
  if (!fz.white_balance) {
    ok &= adam_step(as_span_m(frame.white_point), as_span_m(ts.d_white_point), state.white_balance[frame.id],
                    lr.white_balance, ac);
    frame.white_point = frame.white_point.cwiseMax(1e-6);
  }
  if (!fz.vignette) {
    std::array<double, 5> p{model.vignette.a2, model.vignette.a4, model.vignette.a6, model.vignette.centre.x(),
                            model.vignette.centre.y()};
    const std::array<double, 5> d{ts.d_a2, ts.d_a4, ts.d_a6, ts.d_centre.x(), ts.d_centre.y()};
    ok &= adam_step(p, d, state.vignette, lr.vignette, ac);
    model.vignette = {p[0], p[1], p[2], {std::clamp(p[3], 0.0, 1.0), std::clamp(p[4], 0.0, 1.0)}};
  }
  if (!fz.response) {
    auto d_crf = ts.d_crf;
    crf_smoothness(model.crf, oc.smoothness, &d_crf);
    const std::size_t K = model.crf.values[0].size();
    std::vector<double> p, d;
    p.reserve(3 * K);
    d.reserve(3 * K);
    for (int c = 0; c < 3; ++c) {
      p.insert(p.end(), model.crf.values[c].begin(), model.crf.values[c].end());
      d.insert(d.end(), d_crf[c].begin(), d_crf[c].end());
    }
    ok &= adam_step(p, d, state.response, lr.response, ac);
    for (int c = 0; c < 3; ++c) std::copy_n(p.begin() + c * K, K, model.crf.values[c].begin());
  }
  SensorParams projected = model.sensor_for(frame);
  project_constraints(projected);
  model.crf = std::move(projected.crf);
  frame.white_point = projected.white_point;
  st.skipped = !ok;
  return st;
}

EpochStats train_epoch(Model& model, const std::vector<std::size_t>& frame_indices, const PipelineConfig& cfg,
                       OptimizerState& state) {
  EpochStats es;
  es.epoch = state.epoch;
  std::vector<std::size_t> order = frame_indices;
  std::mt19937_64 rng(hash_key(cfg.optim.seed, std::uint64_t(state.epoch), 0x5e9));
  std::shuffle(order.begin(), order.end(), rng);
  PipelineConfig epoch_cfg = cfg;
  const double decay = std::pow(cfg.optim.decay, double(state.epoch));
  LearningRates& lr = epoch_cfg.optim.lr;
  for (double* r : {&lr.texture, &lr.log_texture, &lr.environment, &lr.position, &lr.pose, &lr.intrinsics,
                    &lr.exposure, &lr.white_balance, &lr.vignette, &lr.response, &lr.head})
    *r *= decay;
  for (std::size_t idx : order) es.steps.push_back(train_step(model, idx, epoch_cfg, state));
  for (const auto& s : es.steps) {
    es.mean_loss += s.loss;
    es.mean_psnr += s.psnr;
  }
  if (!es.steps.empty()) {
    es.mean_loss /= double(es.steps.size());
    es.mean_psnr /= double(es.steps.size());
  }
  ++state.epoch;
  return es;
}

EvaluationReport evaluate(const Model& model, const std::vector<std::size_t>& frame_indices,
                          const PipelineConfig& cfg) {
  EvaluationReport rep;
  rep.frames.resize(frame_indices.size());
  parallel_for(
      0, frame_indices.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) {
          const Frame& f = model.frames.at(frame_indices[k]);
          const Image ldr = render_frame(model, f, cfg.raster, cfg.reconstruct, ResponseMode::Inference).ldr;
          rep.frames[k] = {f.id, psnr(ldr, f.ground_truth), image_loss(ldr, f.ground_truth, LossKind::L1).value,
                           mse(ldr, f.ground_truth)};
        }
      },
      1);
  for (const auto& m : rep.frames) {
    rep.mean_psnr += m.psnr;
    rep.mean_l1 += m.l1;
    rep.mean_mse += m.mse;
  }
  if (!rep.frames.empty()) {
    const double inv = 1.0 / double(rep.frames.size());
    rep.mean_psnr *= inv;
    rep.mean_l1 *= inv;
    rep.mean_mse *= inv;
  }
  return rep;
}

TrainTestSplit split_frames(std::size_t n, double fraction) {
  TrainTestSplit s;
  if (!(fraction > 0.0) || n < 2) {
    s.train.resize(n);
    std::iota(s.train.begin(), s.train.end(), std::size_t{0});
    return s;
  }
  const std::size_t step = std::max<std::size_t>(2, std::size_t(std::ceil(1.0 / fraction)));
  for (std::size_t i = 0; i < n; ++i) (i % step == step / 2 ? s.test : s.train).push_back(i);
  if (s.test.empty()) {
    s.test.push_back(s.train.back());
    s.train.pop_back();
  }
  return s;
}

namespace {

nlohmann::json step_json(const EpochStats& e, const StepStats& s) {
  return {{"epoch", e.epoch},
          {"frame", s.frame_id},
          {"loss", s.loss},
          {"psnr", s.psnr},
          {"grad_norm", {{"texture", s.grad_norm_texture},
                         {"pose", s.grad_norm_pose},
                         {"position", s.grad_norm_position},
                         {"sensor", s.grad_norm_sensor}}},
          {"skipped", s.skipped}};
}

}  // namespace

RefineLog refine(Model& model, const PipelineConfig& cfg, const RefineOptions& options, OptimizerState& state) {
  const TrainTestSplit split = split_frames(model.frames.size(), cfg.test_fraction);
  RefineLog log;
  std::ofstream jsonl;
  if (options.log_path) jsonl.open(*options.log_path, std::ios::app);
  while (state.epoch < options.epochs) {
    EpochStats es = train_epoch(model, split.train, cfg, state);
    EvaluationReport rep = evaluate(model, split.test, cfg);
    if (jsonl) {
      for (const auto& s : es.steps) jsonl << step_json(es, s).dump() << '\n';
      jsonl.flush();
    }
    if (options.checkpoint_dir) {
      std::filesystem::create_directories(*options.checkpoint_dir);
      save_checkpoint(*options.checkpoint_dir / ("epoch_" + std::to_string(es.epoch) + ".ckpt"), model, cfg, state);
    }
    if (options.on_epoch) options.on_epoch(es, rep);
    log.epochs.push_back(std::move(es));
    log.test_reports.push_back(std::move(rep));
  }
  return log;
}

void render_ground_truth(Model& model, const PipelineConfig& cfg) {
  for (Frame& f : model.frames)
    f.ground_truth = render_frame(model, f, cfg.raster, cfg.reconstruct, ResponseMode::Inference).ldr;
}

Model make_synthetic_model(const SynthSpec& spec, const PipelineConfig& cfg) {
  SynthScene s = synth_scene(spec);
  Model m;
  m.cloud = std::move(s.cloud);
  m.env = std::move(s.env);
  m.cameras = std::move(s.cameras);
  m.frames = std::move(s.frames);
  m.head = ReconstructHead::identity(m.cloud.descriptor_dim());
  render_ground_truth(m, cfg);
  return m;
}

std::uint64_t image_hash(const Image& img) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ull;
  };
  mix(&img.width, sizeof img.width);
  mix(&img.height, sizeof img.height);
  mix(&img.channels, sizeof img.channels);
  mix(img.data.data(), img.data.size() * sizeof(double));
  return h;
}

std::uint64_t frame_hash(const Frame& f) {
  std::uint64_t h = image_hash(f.ground_truth);
  auto mix_double = [&](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = hash_key(h, bits);
  };
  for (int i = 0; i < 9; ++i) mix_double(f.pose.R.data()[i]);
  for (int i = 0; i < 3; ++i) mix_double(f.pose.t[i]);
  mix_double(f.ev);
  for (int i = 0; i < 3; ++i) mix_double(f.white_point[i]);
  return h;
}

void add_ground_truth_noise(Model& model, double sigma, std::uint64_t seed) {
  for (Frame& f : model.frames) {
    std::mt19937_64 rng(hash_key(seed, std::uint64_t(f.id), 0x6e6f));
    std::normal_distribution<double> g(0.0, sigma);
    for (double& v : f.ground_truth.data) v += g(rng);
  }
}

double frame_rms(const Model& model, const Frame& frame, const PipelineConfig& cfg) {
  const Image ldr = render_frame(model, frame, cfg.raster, cfg.reconstruct, ResponseMode::Inference).ldr;
  return std::sqrt(mse(ldr, frame.ground_truth));
}

namespace {

Pose noised_pose(const Pose& p, double sigma_t, double sigma_r, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector6d xi;
  for (int i = 0; i < 3; ++i) xi[i] = sigma_t * g(rng);
  for (int i = 3; i < 6; ++i) xi[i] = sigma_r * g(rng);
  return apply_tangent(PoseTangent(xi), p);
}

// Pose-only optimization of every frame; returns per-frame final RMS.
std::vector<double> align_poses(Model& model, const PipelineConfig& base, const AblationOptions& opt, bool ghost) {
  PipelineConfig cfg = base;
  cfg.optim.frozen = FreezeFlags::all();
  cfg.optim.frozen.pose = false;
  cfg.optim.ghost_gradients = ghost;
  cfg.optim.normalize_pose_gradient = opt.normalize_gradient;
  OptimizerState state;
  for (int s = 0; s < opt.steps; ++s) {
    // Cosine decay to a twentieth of the initial rate.
    const double t = double(s) / std::max(1, opt.steps - 1);
    cfg.optim.lr.pose = opt.pose_lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * t)));
    for (std::size_t f = 0; f < model.frames.size(); ++f) train_step(model, f, cfg, state);
  }
  std::vector<double> rms;
  for (const Frame& f : model.frames) rms.push_back(frame_rms(model, f, base));
  return rms;
}

}  // namespace

AblationReport ghost_ablation(const Model& reference, const PipelineConfig& cfg, const AblationOptions& opt) {
  AblationReport rep;
  std::vector<double> baseline;
  for (const Frame& f : reference.frames) baseline.push_back(frame_rms(reference, f, cfg));
  for (std::uint64_t seed : opt.seeds) {
    std::mt19937_64 rng(seed);
    Model noised = reference;
    for (Frame& f : noised.frames)
      f.pose = noised_pose(f.pose, opt.sigma_translation, opt.sigma_rotation_deg * M_PI / 180.0, rng);

    AblationRun run;
    run.seed = seed;
    run.frames = int(noised.frames.size());
    for (std::size_t i = 0; i < noised.frames.size(); ++i) {
      run.baseline_rms += baseline[i];
      run.initial_rms += frame_rms(noised, noised.frames[i], cfg);
    }
    run.baseline_rms /= double(run.frames);
    run.initial_rms /= double(run.frames);

    for (bool ghost : {true, false}) {
      Model m = noised;
      PipelineConfig c = cfg;
      c.optim.seed = hash_key(seed, ghost ? 1 : 2);
      const std::vector<double> rms = align_poses(m, c, opt, ghost);
      double loss = 0.0;
      int aligned = 0;
      for (std::size_t i = 0; i < rms.size(); ++i) {
        loss += rms[i] * rms[i];
        if (rms[i] < 2.0 * baseline[i]) ++aligned;
      }
      loss /= double(rms.size());
      (ghost ? run.ghost_on_loss : run.ghost_off_loss) = loss;
      (ghost ? run.ghost_on_aligned : run.ghost_off_aligned) = aligned;
    }
    if (run.ghost_on_loss <= run.ghost_off_loss) ++rep.ghost_wins;
    rep.runs.push_back(run);
  }
  return rep;
}

}  // namespace pixsplat
