#include "pixsplat/raster.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "pixsplat/errors.h"
#include "pixsplat/parallel.h"

namespace pixsplat {

void RasterConfig::validate() const {
  if (layers < 1) throw InvalidArgument("raster: layer count must be >= 1");
  if (!(alpha_depth >= 0.0)) throw InvalidArgument("raster: alpha must be >= 0");
  discard.validate();
}

LayerProjection project_to_layer(const CameraModel& cam, const Pose& pose, const Vector3d& x, int layer) {
  LayerProjection out;
  const auto proj = project(cam, pose.transform(x));
  if (!proj) return out;
  out.culled = false;
  out.uv = proj->uv * std::ldexp(1.0, -layer);
  out.pixel = {int(round_half_away(out.uv.x())), int(round_half_away(out.uv.y()))};
  out.z = proj->z;
  return out;
}

bool cull_keep(const Eigen::Vector2i& p, int w, int h, const Vector3d* cam_normal, const Vector3d& Xc,
               const RasterConfig& cfg) {
  if (p.x() < 0 || p.y() < 0 || p.x() >= w || p.y() >= h) return false;
  if (!cfg.normal_culling || cam_normal == nullptr) return true;
  const double n = Xc.norm();
  if (!(n > 0.0)) return false;
  double dot = cam_normal->dot(Xc) / n;
  if (cfg.flip_normal_test) dot = -dot;
  return dot > 0.0;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void atomic_min(double& slot, double v) {
  std::atomic_ref<double> ref(slot);
  double cur = ref.load(std::memory_order_relaxed);
  while (v < cur && !ref.compare_exchange_weak(cur, v, std::memory_order_relaxed)) {
  }
}

}  // namespace

ProjectedCloud project_cloud(const PointCloud& cloud, const RenderView& view, const RasterConfig& cfg,
                             std::span<const std::uint8_t> active) {
  const CameraModel& cam = *view.camera;
  const std::size_t n = cloud.size();
  ProjectedCloud out;
  out.xc.resize(n);
  out.uv.resize(n);
  out.z.resize(n);
  out.visible.assign(n, 0);
  const bool cull = cfg.normal_culling && cloud.has_normals();
  const Matrix3d R = view.pose.R;
  const Vector3d t = view.pose.t;

  parallel_for(0, n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      if (!active.empty() && !active[i]) continue;
      const Vector3d Xc = R * cloud.positions[i] + t;
      const auto proj = project(cam, Xc);
      if (!proj) continue;
      if (cull) {
        // Any in-bounds pixel isolates the normal test.
        const Vector3d cam_normal = R * cloud.normals[i];
        if (!cull_keep(Eigen::Vector2i::Zero(), 1, 1, &cam_normal, Xc, cfg)) continue;
      }
      out.xc[i] = Xc;
      out.uv[i] = proj->uv;
      out.z[i] = proj->z;
      out.visible[i] = 1;
    }
  });
  return out;
}

LayerPixelTest::LayerPixelTest(const PointCloud& cloud, const RenderView& view, int layer, const RasterConfig& cfg)
    : cloud_(&cloud), view_(&view), cfg_(&cfg), layer_(layer), width_(layer_extent(view.camera->width, layer)),
      height_(layer_extent(view.camera->height, layer)), scale_(std::ldexp(1.0, -layer)),
      discard_(cfg.discard.enabled && !cloud.world_radii.empty()) {}

std::int32_t LayerPixelTest::operator()(std::size_t i, const Vector2d& uv, const Vector3d& Xc) const {
  const int x = int(round_half_away(uv.x() * scale_)), y = int(round_half_away(uv.y() * scale_));
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return -1;
  if (discard_) {
    const double r = screen_radius(cloud_->world_radii[i], Xc, *view_->camera, layer_);
    if (!keep_point(r, discard_beta(cfg_->discard.seed, i, view_->frame_id), cfg_->discard.gamma)) return -1;
  }
  return y * width_ + x;
}

namespace {

// Emits the fragment of one projected point at one layer. Rejected points keep
// pixel -1 and depth +inf.
struct LayerEmitter {
  LayerPixelTest test;
  Fragments& f;

  LayerEmitter(const PointCloud& c, const RenderView& v, const RasterConfig& rc, Fragments& frags, int l)
      : test(c, v, l, rc), f(frags) {
    f.width = test.width();
    f.height = test.height();
    f.pixel.assign(c.size(), -1);
    f.z.assign(c.size(), kInf);
  }

  void operator()(std::size_t i, const Vector2d& uv, double z, const Vector3d& Xc) const {
    const std::int32_t p = test(i, uv, Xc);
    if (p < 0) return;
    f.pixel[i] = p;
    f.z[i] = z;
  }
};

// project_cloud followed by compute_fragments for every layer, without the
// intermediate projection arrays.
std::vector<Fragments> fragments_all_layers(const PointCloud& cloud, const RenderView& view, const RasterConfig& cfg,
                                            std::span<const std::uint8_t> active) {
  const CameraModel& cam = *view.camera;
  const std::size_t n = cloud.size();
  std::vector<Fragments> frags(std::size_t(cfg.layers));
  std::vector<LayerEmitter> emit;
  emit.reserve(frags.size());
  for (int l = 0; l < cfg.layers; ++l) emit.emplace_back(cloud, view, cfg, frags[std::size_t(l)], l);
  const bool cull = cfg.normal_culling && cloud.has_normals();
  const Matrix3d R = view.pose.R;
  const Vector3d t = view.pose.t;

  parallel_for(0, n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      if (!active.empty() && !active[i]) continue;
      const Vector3d Xc = R * cloud.positions[i] + t;
      const auto proj = project(cam, Xc);
      if (!proj) continue;
      if (cull) {
        const Vector3d cam_normal = R * cloud.normals[i];
        if (!cull_keep(Eigen::Vector2i::Zero(), 1, 1, &cam_normal, Xc, cfg)) continue;
      }
      for (const LayerEmitter& e : emit) e(i, proj->uv, proj->z, Xc);
    }
  });
  return frags;
}

}  // namespace

Fragments compute_fragments(const ProjectedCloud& projected, const PointCloud& cloud, const RenderView& view,
                            int layer, const RasterConfig& cfg) {
  if (projected.visible.size() != cloud.size()) throw ShapeMismatch("compute_fragments: projection size mismatch");
  Fragments f;
  const LayerEmitter emit(cloud, view, cfg, f, layer);
  parallel_for(0, cloud.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      if (projected.visible[i]) emit(i, projected.uv[i], projected.z[i], projected.xc[i]);
  });
  return f;
}

Fragments compute_fragments(const PointCloud& cloud, const RenderView& view, int layer, const RasterConfig& cfg,
                            std::span<const std::uint8_t> active) {
  return compute_fragments(project_cloud(cloud, view, cfg, active), cloud, view, layer, cfg);
}

std::vector<double> depth_prepass(const Fragments& frags) {
  std::vector<double> min_z(std::size_t(frags.width) * frags.height, kInf);
  const std::size_t n = frags.pixel.size();
  const bool threaded = thread_count() > 1;
  parallel_for(0, n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const std::int32_t p = frags.pixel[i];
      if (p < 0) continue;
      if (threaded)
        atomic_min(min_z[p], frags.z[i]);
      else if (frags.z[i] < min_z[p])
        min_z[p] = frags.z[i];
    }
  });
  return min_z;
}

void blend_pass(const PointCloud& cloud, const Fragments& frags, const std::vector<double>& min_z,
                const RasterConfig& cfg, PyramidLayer& layer) {
  const int D = cloud.descriptor_dim();
  const std::size_t pixels = std::size_t(frags.width) * frags.height;
  layer.image = Image(frags.width, frags.height, D, 0.0);
  layer.counts.assign(pixels, 0);
  const std::size_t n = frags.pixel.size();
  const double alpha = cfg.alpha_depth;
  const DescriptorSpace space = cloud.space;

  auto passes = [&](std::size_t i) {
    const std::int32_t p = frags.pixel[i];
    return p >= 0 && fuzzy_depth_pass(frags.z[i], min_z[p], alpha);
  };

  if (cfg.deterministic) {
    // Bucket passing fragments per pixel, then reduce each bucket in a
    // canonical order (depth, then descriptor values) that does not depend
    // on point indices or scheduling.
    std::vector<std::uint32_t> offsets(pixels + 1, 0);
    std::vector<std::uint32_t> passing;
    passing.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      if (passes(i)) {
        passing.push_back(std::uint32_t(i));
        ++offsets[frags.pixel[i] + 1];
      }
    std::partial_sum(offsets.begin(), offsets.end(), offsets.begin());
    std::vector<std::uint32_t> order(offsets.back());
    std::vector<std::uint32_t> cursor(offsets.begin(), offsets.end() - 1);
    for (std::uint32_t i : passing) order[cursor[frags.pixel[i]]++] = i;
    const bool linear = space == DescriptorSpace::Linear;

    auto less = [&](std::uint32_t a, std::uint32_t b) {
      if (frags.z[a] != frags.z[b]) return frags.z[a] < frags.z[b];
      for (int c = 0; c < D; ++c) {
        const double da = cloud.descriptors(a, c), db = cloud.descriptors(b, c);
        if (da != db) return da < db;
      }
      return false;
    };
    parallel_for(
        0, pixels,
        [&](std::size_t lo, std::size_t hi) {
          for (std::size_t p = lo; p < hi; ++p) {
            const std::uint32_t b = offsets[p], e = offsets[p + 1];
            if (b == e) continue;
            if (e - b > 1) std::sort(order.begin() + b, order.begin() + e, less);
            auto out = layer.image.pixel(p);
            for (std::uint32_t k = b; k < e; ++k)
              for (int c = 0; c < D; ++c) {
                const double d = cloud.descriptors(order[k], c);
                out[c] += linear ? d : descriptor_to_linear(d, space);
              }
            const double inv = 1.0 / double(e - b);
            for (int c = 0; c < D; ++c) out[c] *= inv;
            layer.counts[p] = std::int32_t(e - b);
          }
        },
        1 << 12);
    return;
  }

  const bool threaded = thread_count() > 1;
  double* img = layer.image.data.data();
  parallel_for(0, n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      if (!passes(i)) continue;
      const std::int32_t p = frags.pixel[i];
      double* out = img + std::size_t(p) * D;
      const double* d = cloud.descriptors.data() + i * std::size_t(D);
      if (threaded) {
        std::atomic_ref<std::int32_t>(layer.counts[p]).fetch_add(1, std::memory_order_relaxed);
        for (int c = 0; c < D; ++c)
          std::atomic_ref<double>(out[c]).fetch_add(descriptor_to_linear(d[c], space), std::memory_order_relaxed);
      } else {
        ++layer.counts[p];
        for (int c = 0; c < D; ++c) out[c] += descriptor_to_linear(d[c], space);
      }
    }
  });
  parallel_for(0, pixels, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      if (layer.counts[p] == 0) continue;
      const double inv = 1.0 / layer.counts[p];
      double* out = img + p * D;
      for (int c = 0; c < D; ++c) out[c] *= inv;
    }
  });
}

Vector3d pixel_ray_world(const CameraModel& cam, const Pose& pose, int layer, int u, int v) {
  const double s = std::ldexp(1.0, layer);
  return pose.R.transpose() * unproject(cam, Vector2d(u * s, v * s));
}

void background_pass(PyramidLayer& layer, int layer_index, const EnvironmentMap& env, const CameraModel& cam,
                     const Pose& pose) {
  const int w = layer.width(), h = layer.height();
  layer.background.assign(std::size_t(w) * h, 0);
  parallel_for(
      0, std::size_t(h),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t y = lo; y < hi; ++y)
          for (int x = 0; x < w; ++x) {
            const std::size_t p = y * w + x;
            if (layer.counts[p] != 0) continue;
            layer.background[p] = 1;
            env_lookup(env, pixel_ray_world(cam, pose, layer_index, x, int(y)), layer.image.pixel(p));
          }
      },
      16);
}

namespace {

PyramidLayer render_layer_from(const Fragments& frags, const PointCloud& cloud, const EnvironmentMap& env,
                               const RenderView& view, int layer, const RasterConfig& cfg) {
  PyramidLayer out;
  out.min_z = depth_prepass(frags);
  blend_pass(cloud, frags, out.min_z, cfg, out);
  background_pass(out, layer, env, *view.camera, view.pose);
  return out;
}

}  // namespace

PyramidLayer render_layer(const PointCloud& cloud, const EnvironmentMap& env, const RenderView& view, int layer,
                          const RasterConfig& cfg, std::span<const std::uint8_t> active) {
  if (env.channels() != cloud.descriptor_dim())
    throw ShapeMismatch("render: environment map channels differ from descriptor dimension");
  return render_layer_from(compute_fragments(cloud, view, layer, cfg, active), cloud, env, view, layer, cfg);
}

NeuralImagePyramid render_pyramid(const PointCloud& cloud, const EnvironmentMap& env, const RenderView& view,
                                  const RasterConfig& cfg, std::span<const std::uint8_t> active) {
  cfg.validate();
  if (view.camera == nullptr) throw InvalidArgument("render: view without camera");
  NeuralImagePyramid pyr;
  pyr.layers.resize(std::size_t(cfg.layers));
  if (env.channels() != cloud.descriptor_dim())
    throw ShapeMismatch("render: environment map channels differ from descriptor dimension");
  std::vector<Fragments> frags = fragments_all_layers(cloud, view, cfg, active);
  for (int l = 0; l < cfg.layers; ++l) {
    pyr.layers[l] = render_layer_from(frags[std::size_t(l)], cloud, env, view, l, cfg);
    frags[std::size_t(l)] = {};
  }
  return pyr;
}

}  // namespace pixsplat
