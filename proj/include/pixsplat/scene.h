#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pixsplat/geometry.h"
#include "pixsplat/image.h"

namespace pixsplat {

enum class DescriptorSpace { Linear, Logarithmic };

using DescriptorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PointCloud {
  std::vector<Vector3d> positions;
  std::vector<Vector3d> normals;   // empty, or one unit normal per point
  DescriptorMatrix descriptors;    // N x D neural texture
  std::vector<double> world_radii; // empty, or one positive radius per point
  DescriptorSpace space = DescriptorSpace::Linear;

  std::size_t size() const { return positions.size(); }
  int descriptor_dim() const { return int(descriptors.cols()); }
  bool has_normals() const { return !normals.empty(); }

  // Throws InvalidArgument when any invariant is broken.
  void validate() const;
};

// Equirectangular environment map over the unit sphere, width = 2 * height.
// Longitude atan2(x, z) runs along x, latitude asin(y) along y.
struct EnvironmentMap {
  Image texels;

  EnvironmentMap() = default;
  EnvironmentMap(int height, int channels, double fill = 0.0) : texels(2 * height, height, channels, fill) {}

  int width() const { return texels.width; }
  int height() const { return texels.height; }
  int channels() const { return texels.channels; }
  void validate() const;
};

// Bilinear footprint of one direction: four texel indices with weights
// that are nonnegative and sum to one.
struct EnvSample {
  std::array<std::size_t, 4> texel{};
  std::array<double, 4> weight{};
};

EnvSample env_sample(const EnvironmentMap& env, const Vector3d& direction);
void env_lookup(const EnvironmentMap& env, const Vector3d& direction, std::span<double> out);
// Unit direction through the centre of texel (x, y).
Vector3d env_texel_direction(const EnvironmentMap& env, int x, int y);

// One layer of the multi-resolution neural image.
struct PyramidLayer {
  Image image;                         // D channels, linear descriptor space
  std::vector<std::int32_t> counts;    // points blended per pixel
  std::vector<double> min_z;           // +inf where nothing was rasterized
  std::vector<std::uint8_t> background;

  int width() const { return image.width; }
  int height() const { return image.height; }
};

struct NeuralImagePyramid {
  std::vector<PyramidLayer> layers;
};

// ceil(extent / 2^layer)
constexpr int layer_extent(int extent, int layer) { return (extent + (1 << layer) - 1) >> layer; }

struct ExifData {
  double f_number;
  double exposure_time;
  double iso;
};

struct Frame {
  int id = 0;
  int camera_id = 0;
  Pose pose;
  double ev = 0.0;
  Vector3d white_point = Vector3d::Ones();
  std::optional<ExifData> exif;
  Image ground_truth;  // LDR, 3 channels; empty until rendered or loaded
};

// Median distance to the k nearest neighbours of every point.
std::vector<double> estimate_world_radii(const std::vector<Vector3d>& positions, int k = 4);

DescriptorSpace choose_descriptor_space(double radiance_ratio);

constexpr double kMaxLinearDescriptor = 1e30;
double descriptor_to_linear(double d, DescriptorSpace space);
double descriptor_to_linear_derivative(double d, DescriptorSpace space);
double linear_to_descriptor(double v, DescriptorSpace space);

struct MortonReorder {
  PointCloud cloud;
  std::vector<std::size_t> permutation;  // cloud[i] = original[permutation[i]]
};

std::uint64_t morton_code(std::uint32_t x, std::uint32_t y, std::uint32_t z);

// Quantizes positions to a 1024^3 grid, sorts by Morton code and shuffles
// consecutive blocks of block_size points. block_size >= N keeps pure Z-order.
MortonReorder morton_reorder(const PointCloud& cloud, std::size_t block_size = 128, std::uint64_t seed = 0);

PointCloud permute(const PointCloud& cloud, std::span<const std::size_t> permutation);

enum class SynthShape { Plane, Sphere, WallPair };
SynthShape parse_shape(const std::string& name);
std::string shape_name(SynthShape shape);

struct SynthSpec {
  SynthShape shape = SynthShape::Plane;
  std::size_t point_count = 1000;
  int descriptor_dim = 4;
  DescriptorSpace space = DescriptorSpace::Linear;
  std::uint64_t seed = 0;
  int frame_count = 10;
  int width = 64;
  int height = 48;
  double focal = 60.0;
  CameraKind camera = CameraKind::PinholeDistorted;
  double camera_distance = 1.6;
  double radiance_range = 1.0;  // max/min ratio of the synthetic radiance
  bool estimate_radii = true;
};

struct SynthScene {
  PointCloud cloud;
  EnvironmentMap env;
  std::map<int, CameraModel> cameras;
  std::vector<Frame> frames;  // ground truth left empty
  std::vector<int> layer_of_point;  // WallPair: 0 near wall, 1 far wall
};

SynthScene synth_scene(const SynthSpec& spec);

// World-to-camera pose of a camera at `centre` looking at `target`; image y
// follows world +y.
Pose look_at(const Vector3d& centre, const Vector3d& target);

}  // namespace pixsplat
