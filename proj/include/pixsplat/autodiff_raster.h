#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "pixsplat/geometry.h"
#include "pixsplat/image.h"
#include "pixsplat/raster.h"
#include "pixsplat/scene.h"

namespace pixsplat {

// Partition of the cloud into points blended into the image and ghost points
// that only feed structural gradients.
struct GhostSplit {
  std::vector<std::uint32_t> render_set;
  std::vector<std::uint32_t> ghost_set;
  std::vector<std::uint8_t> render_mask;  // 1 for render-set points
  std::vector<std::uint8_t> ghost_mask;   // 1 for ghost points
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
};

// Each point becomes a ghost independently with probability rho.
GhostSplit ghost_split(std::size_t n, double rho, std::uint64_t seed);

// Gradients of a scalar loss w.r.t. every rasterizer input.
struct GradientBundle {
  DescriptorMatrix d_tau;          // N x D
  Image d_env;                     // environment map shape
  std::vector<Vector3d> d_x;       // N
  std::map<int, Vector6d> d_pose;  // per frame id, (translation, rotation)
  std::map<int, IntrinsicVector> d_intrinsics;  // per camera id

  static GradientBundle zeros(const PointCloud& cloud, const EnvironmentMap& env);
  bool all_finite() const;
};

// d_tau and d_env for one rendered view. `adjoint` holds dLoss/dLayer for
// every pyramid layer; `active` must be the mask used for the forward render.
void backprop_texture_env(const PointCloud& cloud, const EnvironmentMap& env, const RenderView& view,
                          const RasterConfig& cfg, const NeuralImagePyramid& forward,
                          std::span<const Image> adjoint, std::span<const std::uint8_t> active,
                          DescriptorMatrix& d_tau, Image& d_env);

// Change of the neighbour pixel value when a point with linear descriptor
// `tau` and depth z is virtually moved onto it.
void induced_change(std::span<const double> tau, std::span<const double> neighbour, double z, double neighbour_min_z,
                    int neighbour_count, double alpha, bool neighbour_background, std::span<double> out);

enum class SpatialDifference {
  Central,         // (forward change - backward change) / 2
  UnsignedAverage  // (forward change + backward change) / 2
};

// Image-space loss gradient (d/du, d/dv) at `pixel` of a point with linear
// descriptor `tau` and depth z, in pixels of this layer. Neighbours outside
// the layer contribute nothing.
Vector2d spatial_gradient(const Eigen::Vector2i& pixel, double z, std::span<const double> tau,
                          const PyramidLayer& layer, const Image& adjoint, double alpha,
                          SpatialDifference mode = SpatialDifference::Central);

struct StructuralGradients {
  std::vector<Vector3d> d_x;  // averaged over layers
  Vector6d d_pose = Vector6d::Zero();
  IntrinsicVector d_intrinsics = IntrinsicVector::Zero();
};

// Chains spatial gradients of every point flagged in `structural` through the
// camera projection into positions, pose and intrinsics. d_intrinsics stays
// zero unless `with_intrinsics`.
StructuralGradients backprop_structural(const PointCloud& cloud, const RenderView& view, const RasterConfig& cfg,
                                        const NeuralImagePyramid& forward, std::span<const Image> adjoint,
                                        std::span<const std::uint8_t> structural,
                                        SpatialDifference mode = SpatialDifference::Central,
                                        bool with_intrinsics = true);

}  // namespace pixsplat
