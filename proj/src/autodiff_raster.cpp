#include "pixsplat/autodiff_raster.h"

#include <cmath>
#include <vector>

#include "pixsplat/errors.h"
#include "pixsplat/random.h"

namespace pixsplat {

GhostSplit ghost_split(std::size_t n, double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho < 1.0)) throw InvalidArgument("ghost_split: dropout rate must be in [0, 1)");
  GhostSplit s;
  s.dropout_rate = rho;
  s.seed = seed;
  s.render_mask.assign(n, 1);
  s.ghost_mask.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (unit_uniform(hash_key(seed, i, 0x6768)) < rho) {
      s.ghost_mask[i] = 1;
      s.render_mask[i] = 0;
      s.ghost_set.push_back(std::uint32_t(i));
    } else {
      s.render_set.push_back(std::uint32_t(i));
    }
  }
  return s;
}

GradientBundle GradientBundle::zeros(const PointCloud& cloud, const EnvironmentMap& env) {
  GradientBundle g;
  g.d_tau = DescriptorMatrix::Zero(cloud.descriptors.rows(), cloud.descriptors.cols());
  g.d_env = Image(env.width(), env.height(), env.channels(), 0.0);
  g.d_x.assign(cloud.size(), Vector3d::Zero());
  return g;
}

bool GradientBundle::all_finite() const {
  if (!d_tau.allFinite()) return false;
  for (double v : d_env.data)
    if (!std::isfinite(v)) return false;
  for (const auto& v : d_x)
    if (!v.allFinite()) return false;
  for (const auto& [id, v] : d_pose)
    if (!v.allFinite()) return false;
  for (const auto& [id, v] : d_intrinsics)
    if (!v.allFinite()) return false;
  return true;
}

namespace {

void check_adjoint(const NeuralImagePyramid& forward, std::span<const Image> adjoint) {
  if (adjoint.size() != forward.layers.size()) throw ShapeMismatch("backprop: adjoint layer count mismatch");
  for (std::size_t l = 0; l < adjoint.size(); ++l)
    require_same_shape(adjoint[l], forward.layers[l].image, "backprop adjoint");
}

}  // namespace

void backprop_texture_env(const PointCloud& cloud, const EnvironmentMap& env, const RenderView& view,
                          const RasterConfig& cfg, const NeuralImagePyramid& forward,
                          std::span<const Image> adjoint, std::span<const std::uint8_t> active,
                          DescriptorMatrix& d_tau, Image& d_env) {
  check_adjoint(forward, adjoint);
  if (d_tau.rows() != cloud.descriptors.rows() || d_tau.cols() != cloud.descriptors.cols())
    throw ShapeMismatch("backprop: d_tau shape mismatch");
  require_same_shape(d_env, env.texels, "backprop d_env");
  const int D = cloud.descriptor_dim();

  // The blend sets are not stored; rasterize again with identical inputs.
  const ProjectedCloud projected = project_cloud(cloud, view, cfg, active);
  for (std::size_t l = 0; l < forward.layers.size(); ++l) {
    const PyramidLayer& layer = forward.layers[l];
    const Image& adj = adjoint[l];
    const LayerPixelTest pixel_of(cloud, view, int(l), cfg);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (!projected.visible[i]) continue;
      const std::int32_t p = pixel_of(i, projected.uv[i], projected.xc[i]);
      if (p < 0 || !fuzzy_depth_pass(projected.z[i], layer.min_z[p], cfg.alpha_depth)) continue;
      const double inv = 1.0 / layer.counts[p];
      const auto a = adj.pixel(std::size_t(p));
      for (int c = 0; c < D; ++c)
        d_tau(Eigen::Index(i), c) +=
            a[c] * inv * descriptor_to_linear_derivative(cloud.descriptors(Eigen::Index(i), c), cloud.space);
    }
    for (int y = 0; y < layer.height(); ++y)
      for (int x = 0; x < layer.width(); ++x) {
        const std::size_t p = layer.image.index(x, y);
        if (!layer.background[p]) continue;
        const EnvSample s = env_sample(env, pixel_ray_world(*view.camera, view.pose, int(l), x, y));
        const auto a = adj.pixel(p);
        for (int k = 0; k < 4; ++k) {
          auto g = d_env.pixel(s.texel[k]);
          for (int c = 0; c < D; ++c) g[c] += s.weight[k] * a[c];
        }
      }
  }
}

void induced_change(std::span<const double> tau, std::span<const double> I, double z, double min_z, int count,
                    double alpha, bool background, std::span<double> out) {
  const std::size_t D = tau.size();
  if (background) {
    for (std::size_t c = 0; c < D; ++c) out[c] = tau[c] - I[c];
  } else if (z > (1.0 + alpha) * min_z) {
    for (std::size_t c = 0; c < D; ++c) out[c] = 0.0;
  } else if (z * (1.0 + alpha) < min_z) {
    for (std::size_t c = 0; c < D; ++c) out[c] = tau[c] - I[c];
  } else {
    const double n = double(count);
    for (std::size_t c = 0; c < D; ++c) out[c] = (n * I[c] + tau[c]) / (1.0 + n) - I[c];
  }
}

Vector2d spatial_gradient(const Eigen::Vector2i& pixel, double z, std::span<const double> tau,
                          const PyramidLayer& layer, const Image& adjoint, double alpha, SpatialDifference mode) {
  const int D = layer.image.channels;
  // adjoint . induced_change(), fused: the change is (tau - I) scaled by 1, 0 or 1/(1+count).
  auto contribution = [&](int x, int y) -> double {
    if (!layer.image.contains(x, y)) return 0.0;
    const std::size_t p = layer.image.index(x, y);
    double factor = 1.0;
    if (layer.background[p] == 0) {
      const double mz = layer.min_z[p];
      if (z > (1.0 + alpha) * mz) return 0.0;
      if (!(z * (1.0 + alpha) < mz)) factor = 1.0 / (1.0 + double(layer.counts[p]));
    }
    const double* I = layer.image.pixel(p).data();
    const double* a = adjoint.pixel(p).data();
    double dot = 0.0;
    for (int c = 0; c < D; ++c) dot += a[c] * (tau[std::size_t(c)] - I[c]);
    return factor * dot;
  };
  const double sign = mode == SpatialDifference::Central ? -1.0 : 1.0;
  const int u = pixel.x(), v = pixel.y();
  return {0.5 * (contribution(u + 1, v) + sign * contribution(u - 1, v)),
          0.5 * (contribution(u, v + 1) + sign * contribution(u, v - 1))};
}

StructuralGradients backprop_structural(const PointCloud& cloud, const RenderView& view, const RasterConfig& cfg,
                                        const NeuralImagePyramid& forward, std::span<const Image> adjoint,
                                        std::span<const std::uint8_t> structural, SpatialDifference mode,
                                        bool with_intrinsics) {
  check_adjoint(forward, adjoint);
  StructuralGradients out;
  out.d_x.assign(cloud.size(), Vector3d::Zero());
  if (!structural.empty() && structural.size() != cloud.size())
    throw ShapeMismatch("backprop_structural: mask size mismatch");
  const CameraModel& cam = *view.camera;
  const int D = cloud.descriptor_dim();
  const double layer_weight = 1.0 / double(forward.layers.size());
  const std::size_t Dz = static_cast<std::size_t>(D);
  std::vector<double> linear(cloud.size() * Dz);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (structural.empty() || structural[i])
      for (int c = 0; c < D; ++c)
        linear[i * Dz + std::size_t(c)] = descriptor_to_linear(cloud.descriptors(Eigen::Index(i), c), cloud.space);

  const ProjectedCloud projected = project_cloud(cloud, view, cfg, structural);
  for (std::size_t l = 0; l < forward.layers.size(); ++l) {
    const PyramidLayer& layer = forward.layers[l];
    const LayerPixelTest pixel_of(cloud, view, int(l), cfg);
    const double scale = std::ldexp(1.0, -int(l));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (!projected.visible[i]) continue;
      const Vector3d& Xc = projected.xc[i];
      const std::int32_t p = pixel_of(i, projected.uv[i], Xc);
      if (p < 0) continue;
      const std::span<const double> tau(linear.data() + i * Dz, Dz);
      const Eigen::Vector2i pix(p % pixel_of.width(), p / pixel_of.width());
      const Vector2d g = spatial_gradient(pix, projected.z[i], tau, layer, adjoint[l], cfg.alpha_depth, mode) * scale;
      if (g.x() == 0.0 && g.y() == 0.0) continue;
      const auto Jp = projection_jacobian(cam, Xc);
      if (!Jp) continue;
      const Vector3d dXc = Jp->transpose() * g;
      out.d_x[i] += layer_weight * (view.pose.R.transpose() * dXc);
      out.d_pose.head<3>() += dXc;
      out.d_pose.tail<3>() += Xc.cross(dXc);  // (-hat(Xc))^T dXc
      if (with_intrinsics)
        if (const auto Jk = intrinsics_jacobian(cam, Xc)) out.d_intrinsics += Jk->transpose() * g;
    }
  }
  return out;
}

}  // namespace pixsplat
