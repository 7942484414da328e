#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "pixsplat/discard.h"
#include "pixsplat/geometry.h"
#include "pixsplat/scene.h"

namespace pixsplat {

struct RasterConfig {
  int layers = 4;
  double alpha_depth = 0.01;
  bool normal_culling = false;
  // Flips the sign of the normal test for clouds whose normals point away
  // from the surface side that faces the camera.
  bool flip_normal_test = false;
  // Ordered per-pixel reduction: bit-exact across runs, thread counts and
  // point permutations. The fast path accumulates in arrival order.
  bool deterministic = true;
  std::uint64_t seed = 0;
  DiscardConfig discard{.gamma = 1.5, .enabled = false, .seed = 0};

  void validate() const;
};

// One camera view of the scene.
struct RenderView {
  const CameraModel* camera = nullptr;
  Pose pose;
  std::uint64_t frame_id = 0;
};

// Round half away from zero. Agrees with std::round except for the sign of
// zero; the truncating cast keeps it inline.
inline double round_half_away(double v) {
  if (!(std::abs(v) < 4.5e15)) return v;
  const double t = double(static_cast<long long>(v));
  const double f = v - t;
  return f >= 0.5 ? t + 1.0 : f <= -0.5 ? t - 1.0 : t;
}

struct LayerProjection {
  bool culled = true;
  Eigen::Vector2i pixel{0, 0};
  Vector2d uv{0.0, 0.0};  // continuous coordinates at this layer
  double z = 0.0;
};

LayerProjection project_to_layer(const CameraModel& cam, const Pose& pose, const Vector3d& x, int layer);

// Bounds test against a w x h layer, then (when enabled) the normal test
// (R n)^T (R x + t) / |R x + t| > 0. `cam_normal` may be null.
bool cull_keep(const Eigen::Vector2i& pixel, int layer_width, int layer_height, const Vector3d* cam_normal,
               const Vector3d& Xc, const RasterConfig& cfg);

inline bool fuzzy_depth_pass(double z, double min_z, double alpha) { return z <= (1.0 + alpha) * min_z; }

// Per-point rasterization result for one layer. pixel < 0 marks points that
// were culled, discarded or excluded by the active mask.
struct Fragments {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> pixel;
  std::vector<double> z;
};

// Layer-independent part of rasterization: camera-space position, layer-0
// coordinates and the normal test of every active point. `visible[i]` is 0
// for inactive, unprojectable and normal-culled points.
struct ProjectedCloud {
  std::vector<Vector3d> xc;
  std::vector<Vector2d> uv;
  std::vector<double> z;
  std::vector<std::uint8_t> visible;
};

ProjectedCloud project_cloud(const PointCloud& cloud, const RenderView& view, const RasterConfig& cfg,
                             std::span<const std::uint8_t> active = {});

// Rounding, bounds test and stochastic discarding of projected points at one
// layer.
class LayerPixelTest {
 public:
  LayerPixelTest(const PointCloud& cloud, const RenderView& view, int layer, const RasterConfig& cfg);
  int width() const { return width_; }
  int height() const { return height_; }
  // Pixel index of point i, or -1 when it falls outside or is discarded.
  std::int32_t operator()(std::size_t i, const Vector2d& uv, const Vector3d& Xc) const;

 private:
  const PointCloud* cloud_;
  const RenderView* view_;
  const RasterConfig* cfg_;
  int layer_;
  int width_;
  int height_;
  double scale_;
  bool discard_;
};

// Projection, bounds test, normal culling and stochastic discarding of every
// point whose `active` flag is set (all points when `active` is empty).
Fragments compute_fragments(const PointCloud& cloud, const RenderView& view, int layer, const RasterConfig& cfg,
                            std::span<const std::uint8_t> active = {});
// Same fragments from a projection shared across layers.
Fragments compute_fragments(const ProjectedCloud& projected, const PointCloud& cloud, const RenderView& view,
                            int layer, const RasterConfig& cfg);

std::vector<double> depth_prepass(const Fragments& frags);

// Blends the linearized descriptors of every fragment passing the fuzzy depth
// test into `layer.image` and records per-pixel counts. Uncovered pixels are
// left at zero for the background pass.
void blend_pass(const PointCloud& cloud, const Fragments& frags, const std::vector<double>& min_z,
                const RasterConfig& cfg, PyramidLayer& layer);

// Fills every pixel with count 0 from the environment map along the
// world-space viewing ray and sets its background flag.
void background_pass(PyramidLayer& layer, int layer_index, const EnvironmentMap& env, const CameraModel& cam,
                     const Pose& pose);

// World-space unit ray through the centre of pixel (u, v) of `layer`.
Vector3d pixel_ray_world(const CameraModel& cam, const Pose& pose, int layer, int u, int v);

PyramidLayer render_layer(const PointCloud& cloud, const EnvironmentMap& env, const RenderView& view, int layer,
                          const RasterConfig& cfg, std::span<const std::uint8_t> active = {});

NeuralImagePyramid render_pyramid(const PointCloud& cloud, const EnvironmentMap& env, const RenderView& view,
                                  const RasterConfig& cfg, std::span<const std::uint8_t> active = {});

}  // namespace pixsplat
