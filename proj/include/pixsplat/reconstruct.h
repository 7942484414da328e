#pragma once

#include <vector>

#include <Eigen/Core>

#include "pixsplat/image.h"
#include "pixsplat/scene.h"

namespace pixsplat {

// Affine descriptor-to-radiance map: rgb = weight * descriptor + bias.
struct ReconstructHead {
  Eigen::Matrix<double, 3, Eigen::Dynamic> weight;
  Vector3d bias = Vector3d::Zero();

  // Selects the first three descriptor channels.
  static ReconstructHead identity(int descriptor_dim);
  int descriptor_dim() const { return int(weight.cols()); }
};

struct ReconstructConfig {
  int levels = 0;  // 0 uses every pyramid layer
  double validity_epsilon = 1e-6;
};

struct WeightedImage {
  Image image;
  std::vector<double> weights;
};

// 2x2 validity-weighted average. The parent weight is the mean weight of the
// children that exist.
WeightedImage pull(const Image& fine, const std::vector<double>& weights, double epsilon = 1e-6);

// Bilinear upsampling of `coarse` to `width` x `height`.
Image upsample(const Image& coarse, int width, int height);

// fine_out = w * fine + (1 - w) * upsample(coarse).
Image push(const Image& coarse_filled, const Image& fine, const std::vector<double>& weights);

// Per-pixel validity min(1, count).
std::vector<double> validity_weights(const PyramidLayer& layer);

// Dense HDR radiance (3 channels) from the rasterized pyramid.
Image reconstruct_hdr(const NeuralImagePyramid& pyramid, const ReconstructHead& head,
                      const ReconstructConfig& cfg = {});

struct ReconstructGradients {
  std::vector<Image> d_layers;  // dLoss/dLayer image, one per pyramid layer
  Eigen::Matrix<double, 3, Eigen::Dynamic> d_weight;
  Vector3d d_bias = Vector3d::Zero();
};

ReconstructGradients reconstruct_backward(const NeuralImagePyramid& pyramid, const ReconstructHead& head,
                                          const Image& adjoint, const ReconstructConfig& cfg = {});

}  // namespace pixsplat
