#include "pixsplat/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "pixsplat/autodiff_raster.h"
#include "pixsplat/errors.h"
#include "pixsplat/optim.h"
#include "pixsplat/pipeline.h"
#include "pixsplat/random.h"
#include "pixsplat/reconstruct.h"
#include "pixsplat/tonemap.h"

namespace pixsplat {

std::size_t GradCheckReport::failures() const {
  return std::size_t(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return !e.pass; }));
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"geometry", "raster", "reconstruct", "tonemap", "loss", "pipeline"};
  return names;
}

namespace {

class Checker {
 public:
  Checker(GradCheckReport& report, const GradCheckOptions& opt, double rel_tol)
      : report_(report), opt_(opt), rel_(rel_tol) {}

  // `eval(delta)` returns the objective with the checked coordinate offset by delta.
  void scalar(const std::string& name, double analytic, const std::function<double(double)>& eval) {
    const double h = opt_.step;
    const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
    record(name, analytic, numeric);
  }

  // Offsets `slot` in place for the duration of the check.
  void coordinate(const std::string& name, double analytic, double& slot, const std::function<double()>& objective) {
    const double saved = slot;
    scalar(name, analytic, [&](double d) {
      slot = saved + d;
      const double v = objective();
      slot = saved;
      return v;
    });
  }

  void record(const std::string& name, double analytic, double numeric) {
    GradCheckEntry e;
    e.name = name;
    e.analytic = analytic;
    e.numeric = numeric;
    e.error = std::abs(analytic - numeric);
    e.tolerance = std::max(rel_ * std::max(std::abs(analytic), std::abs(numeric)), opt_.abs_floor);
    e.pass = std::isfinite(analytic) && std::isfinite(numeric) && e.error <= e.tolerance;
    report_.entries.push_back(e);
  }

 private:
  GradCheckReport& report_;
  const GradCheckOptions& opt_;
  double rel_;
};

Image random_image(int w, int h, int c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(w, h, c);
  for (double& v : img.data) v = u(rng);
  return img;
}

double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

std::vector<std::size_t> pick(std::size_t n, int samples, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(n, std::size_t(std::max(samples, 0))));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::string at(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

SensorParams test_sensor() {
  SensorParams s;
  s.ev = 0.3;
  s.white_point = {1.1, 1.0, 0.9};
  s.vignette = {-0.2, 0.05, -0.01, {0.45, 0.55}};
  s.crf = ResponseCurve::gamma(32);
  return s;
}

void check_tonemap(GradCheckReport& rep, const GradCheckOptions& opt) {
  std::mt19937_64 rng(hash_key(opt.seed, 0x746d));
  Checker chk(rep, opt, opt.rel_tol);
  const Image hdr = random_image(8, 8, 3, 0.05, 2.0, rng);
  const Image w = random_image(8, 8, 3, -1.0, 1.0, rng);
  SensorParams p = test_sensor();
  Image input = hdr;
  auto objective = [&] { return dot(tonemap_forward(input, p, ResponseMode::Training), w); };
  const TonemapGradients g = tonemap_backward(hdr, p, ResponseMode::Training, w);
  chk.coordinate("ev", g.d_ev, p.ev, objective);
  chk.coordinate("white_point.r", g.d_white_point.x(), p.white_point.x(), objective);
  chk.coordinate("white_point.b", g.d_white_point.z(), p.white_point.z(), objective);
  chk.coordinate("vignette.a2", g.d_a2, p.vignette.a2, objective);
  chk.coordinate("vignette.a4", g.d_a4, p.vignette.a4, objective);
  chk.coordinate("vignette.a6", g.d_a6, p.vignette.a6, objective);
  chk.coordinate("vignette.cx", g.d_centre.x(), p.vignette.centre.x(), objective);
  chk.coordinate("vignette.cy", g.d_centre.y(), p.vignette.centre.y(), objective);
  for (int c = 0; c < 3; ++c)
    for (std::size_t k : pick(p.crf.values[c].size(), opt.samples / 3 + 1, rng))
      chk.coordinate("crf" + std::to_string(c) + "[" + std::to_string(k) + "]", g.d_crf[c][k], p.crf.values[c][k],
                     objective);
  for (std::size_t i : pick(input.data.size(), opt.samples, rng))
    chk.coordinate(at("input", i), g.d_input.data[i], input.data[i], objective);
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.raster.layers = 3;
  return cfg;
}

SynthScene small_scene(std::size_t n, std::uint64_t seed, DescriptorSpace space) {
  SynthSpec spec;
  spec.point_count = n;
  spec.seed = seed;
  spec.width = 16;
  spec.height = 16;
  spec.focal = 16.0;
  spec.frame_count = 1;
  spec.space = space;
  spec.radiance_range = space == DescriptorSpace::Logarithmic ? 1000.0 : 1.0;
  return synth_scene(spec);
}

void check_raster(GradCheckReport& rep, const GradCheckOptions& opt) {
  std::mt19937_64 rng(hash_key(opt.seed, 0x7261));
  Checker chk(rep, opt, opt.rel_tol);
  const PipelineConfig cfg = small_config();
  for (DescriptorSpace space : {DescriptorSpace::Linear, DescriptorSpace::Logarithmic}) {
    SynthScene s = small_scene(96, opt.seed, space);
    const RenderView view{&s.cameras.at(0), s.frames[0].pose, 0};
    const NeuralImagePyramid fwd = render_pyramid(s.cloud, s.env, view, cfg.raster);
    std::vector<Image> adj;
    for (const auto& l : fwd.layers) adj.push_back(random_image(l.width(), l.height(), l.image.channels, -1, 1, rng));
    auto objective = [&] {
      const NeuralImagePyramid p = render_pyramid(s.cloud, s.env, view, cfg.raster);
      double v = 0.0;
      for (std::size_t l = 0; l < p.layers.size(); ++l) v += dot(p.layers[l].image, adj[l]);
      return v;
    };
    GradientBundle g = GradientBundle::zeros(s.cloud, s.env);
    backprop_texture_env(s.cloud, s.env, view, cfg.raster, fwd, adj, {}, g.d_tau, g.d_env);
    const std::string tag = space == DescriptorSpace::Linear ? "" : "log_";
    double* tau = s.cloud.descriptors.data();
    for (std::size_t i : pick(std::size_t(s.cloud.descriptors.size()), opt.samples, rng))
      chk.coordinate(at(tag + "tau", i), g.d_tau.data()[i], tau[i], objective);
    for (std::size_t i : pick(s.env.texels.data.size(), opt.samples, rng))
      chk.coordinate(at(tag + "env", i), g.d_env.data[i], s.env.texels.data[i], objective);
  }
}

void check_reconstruct(GradCheckReport& rep, const GradCheckOptions& opt) {
  std::mt19937_64 rng(hash_key(opt.seed, 0x7263));
  Checker chk(rep, opt, opt.rel_tol);
  const PipelineConfig cfg = small_config();
  SynthScene s = small_scene(120, opt.seed, DescriptorSpace::Linear);
  const RenderView view{&s.cameras.at(0), s.frames[0].pose, 0};
  NeuralImagePyramid pyr = render_pyramid(s.cloud, s.env, view, cfg.raster);
  ReconstructHead head = ReconstructHead::identity(s.cloud.descriptor_dim());
  std::normal_distribution<double> g01(0.0, 0.2);
  for (int i = 0; i < head.weight.size(); ++i) head.weight.data()[i] += g01(rng);
  for (int i = 0; i < 3; ++i) head.bias[i] = g01(rng);
  const Image w = random_image(16, 16, 3, -1.0, 1.0, rng);
  auto objective = [&] { return dot(reconstruct_hdr(pyr, head, cfg.reconstruct), w); };
  const ReconstructGradients g = reconstruct_backward(pyr, head, w, cfg.reconstruct);
  for (std::size_t l = 0; l < pyr.layers.size(); ++l) {
    Image& img = pyr.layers[l].image;
    for (std::size_t i : pick(img.data.size(), opt.samples, rng))
      chk.coordinate(at("layer" + std::to_string(l), i), g.d_layers[l].data[i], img.data[i], objective);
  }
  for (int i = 0; i < head.weight.size(); ++i)
    chk.coordinate(at("head.weight", std::size_t(i)), g.d_weight.data()[i], head.weight.data()[i], objective);
  for (int i = 0; i < 3; ++i) chk.coordinate(at("head.bias", std::size_t(i)), g.d_bias[i], head.bias[i], objective);
}

void check_loss(GradCheckReport& rep, const GradCheckOptions& opt) {
  std::mt19937_64 rng(hash_key(opt.seed, 0x6c6f));
  Checker chk(rep, opt, opt.rel_tol);
  Image pred = random_image(8, 8, 3, 0.0, 1.0, rng);
  const Image gt = random_image(8, 8, 3, 0.0, 1.0, rng);
  for (LossKind kind : {LossKind::MSE, LossKind::L1}) {
    const LossResult r = image_loss(pred, gt, kind);
    const std::string tag = kind == LossKind::MSE ? "mse" : "l1";
    for (std::size_t i : pick(pred.data.size(), opt.samples, rng)) {
      // L1 is not differentiable where prediction and target coincide.
      if (kind == LossKind::L1 && std::abs(pred.data[i] - gt.data[i]) < 10 * opt.step) continue;
      chk.coordinate(at(tag, i), r.adjoint.data[i], pred.data[i], [&] { return image_loss(pred, gt, kind).value; });
    }
  }
}

void check_geometry(GradCheckReport& rep, const GradCheckOptions& opt) {
  std::mt19937_64 rng(hash_key(opt.seed, 0x6765));
  Checker chk(rep, opt, opt.rel_tol);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (CameraKind kind : {CameraKind::PinholeDistorted, CameraKind::FisheyeEquidistant}) {
    CameraModel cam;
    cam.kind = kind;
    cam.width = 64;
    cam.height = 48;
    cam.fx = 55.0;
    cam.fy = 52.0;
    cam.cx = 31.5;
    cam.cy = 23.5;
    cam.k = {0.05, -0.01, 0.002, -0.0005};
    const std::string tag = kind == CameraKind::PinholeDistorted ? "pinhole" : "fisheye";
    for (int trial = 0; trial < std::max(1, opt.samples / 8); ++trial) {
      Vector3d X(0.4 * u(rng), 0.3 * u(rng), 1.5 + 0.5 * u(rng));
      const auto J = projection_jacobian(cam, X);
      const auto K = intrinsics_jacobian(cam, X);
      if (!J || !K) continue;
      const std::string t = tag + "." + std::to_string(trial);
      for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < 3; ++c)
          chk.coordinate(t + ".d_uv" + std::to_string(r) + "/dX" + std::to_string(c), (*J)(r, c), X[c],
                         [&] { return project(cam, X)->uv[r]; });
        IntrinsicVector k = cam.intrinsics();
        for (int c = 0; c < kIntrinsicCount; ++c)
          chk.coordinate(t + ".d_uv" + std::to_string(r) + "/dk" + std::to_string(c), (*K)(r, c), k[c], [&] {
            CameraModel m = cam;
            m.set_intrinsics(k);
            return project(m, X)->uv[r];
          });
      }
      const Pose pose = look_at(Vector3d(0.3 * u(rng), 0.2 * u(rng), -1.6), Vector3d::Zero());
      const Vector3d xw = pose.inverse().transform(X);
      const auto P = pose_point_jacobian(pose, xw, cam);
      if (!P) continue;
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 6; ++c)
          chk.scalar(t + ".d_uv" + std::to_string(r) + "/dxi" + std::to_string(c), (*P)(r, c), [&](double d) {
            Vector6d xi = Vector6d::Zero();
            xi[c] = d;
            const Pose q = apply_tangent(PoseTangent(xi), pose);
            return project(cam, q.transform(xw))->uv[r];
          });
    }
  }
}

void check_pipeline(GradCheckReport& rep, const GradCheckOptions& opt) {
  std::mt19937_64 rng(hash_key(opt.seed, 0x7069));
  Checker chk(rep, opt, opt.end_to_end_rel_tol);
  PipelineConfig cfg = small_config();
  SynthSpec spec;
  spec.point_count = 8;
  spec.seed = opt.seed;
  spec.width = 16;
  spec.height = 16;
  spec.focal = 16.0;
  spec.frame_count = 1;
  Model m = make_synthetic_model(spec, cfg);
  // Move every parameter away from the ground truth so the loss is not at a minimum.
  std::normal_distribution<double> g(0.0, 0.05);
  for (int i = 0; i < m.cloud.descriptors.size(); ++i) m.cloud.descriptors.data()[i] += g(rng);
  for (double& v : m.env.texels.data) v += g(rng);
  for (int i = 0; i < m.head.weight.size(); ++i) m.head.weight.data()[i] += g(rng);
  Frame& f = m.frames[0];
  f.ev = 0.2;
  f.white_point = {1.05, 1.0, 0.95};
  m.vignette = {-0.1, 0.02, -0.005, {0.48, 0.52}};
  m.crf = ResponseCurve::gamma(32);
  auto objective = [&] {
    const Image ldr = render_frame(m, f, cfg.raster, cfg.reconstruct, ResponseMode::Training).ldr;
    return image_loss(ldr, f.ground_truth, cfg.optim.loss).value;
  };
  const FrameGradients fg = frame_gradients(m, f, cfg, {}, {}, ResponseMode::Training);
  double* tau = m.cloud.descriptors.data();
  for (std::size_t i : pick(std::size_t(m.cloud.descriptors.size()), opt.samples, rng))
    chk.coordinate(at("tau", i), fg.raster.d_tau.data()[i], tau[i], objective);
  for (std::size_t i : pick(m.env.texels.data.size(), opt.samples, rng))
    chk.coordinate(at("env", i), fg.raster.d_env.data[i], m.env.texels.data[i], objective);
  chk.coordinate("ev", fg.sensor.d_ev, f.ev, objective);
  chk.coordinate("white_point.r", fg.sensor.d_white_point.x(), f.white_point.x(), objective);
  chk.coordinate("white_point.b", fg.sensor.d_white_point.z(), f.white_point.z(), objective);
  chk.coordinate("vignette.a2", fg.sensor.d_a2, m.vignette.a2, objective);
  chk.coordinate("vignette.a4", fg.sensor.d_a4, m.vignette.a4, objective);
  chk.coordinate("vignette.a6", fg.sensor.d_a6, m.vignette.a6, objective);
  chk.coordinate("vignette.cx", fg.sensor.d_centre.x(), m.vignette.centre.x(), objective);
  chk.coordinate("vignette.cy", fg.sensor.d_centre.y(), m.vignette.centre.y(), objective);
  for (int c = 0; c < 3; ++c)
    for (std::size_t k : pick(m.crf.values[c].size(), opt.samples / 3 + 1, rng))
      chk.coordinate("crf" + std::to_string(c) + "[" + std::to_string(k) + "]", fg.sensor.d_crf[c][k],
                     m.crf.values[c][k], objective);
  for (int i = 0; i < m.head.weight.size(); ++i)
    chk.coordinate(at("head.weight", std::size_t(i)), fg.d_head_weight.data()[i], m.head.weight.data()[i], objective);
  for (int i = 0; i < 3; ++i) chk.coordinate(at("head.bias", std::size_t(i)), fg.d_head_bias[i], m.head.bias[i], objective);
}

}  // namespace

GradCheckReport gradcheck_module(const std::string& module, const GradCheckOptions& opt) {
  GradCheckReport rep;
  rep.module = module;
  if (module == "geometry")
    check_geometry(rep, opt);
  else if (module == "raster")
    check_raster(rep, opt);
  else if (module == "reconstruct")
    check_reconstruct(rep, opt);
  else if (module == "tonemap")
    check_tonemap(rep, opt);
  else if (module == "loss")
    check_loss(rep, opt);
  else if (module == "pipeline")
    check_pipeline(rep, opt);
  else
    throw InvalidArgument("gradcheck: unknown module '" + module + "'");
  return rep;
}

}  // namespace pixsplat
