#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pixsplat/image.h"
#include "pixsplat/pipeline.h"
#include "pixsplat/scene.h"

namespace pixsplat {

enum class PlyFormat { Ascii, BinaryLittleEndian };

// Vertex properties: x y z, optional nx ny nz, red green blue, radius and
// desc_0 .. desc_{D-1}. Any scalar PLY type is accepted; list properties and
// other elements are skipped. Without desc_* the first three descriptor
// channels come from the colour (or 0.5) and the rest are noise of sigma 0.01.
// Missing radii are estimated from the neighbourhood.
struct PlyLoadOptions {
  int descriptor_dim = 4;
  std::uint64_t seed = 0;
  bool estimate_radii = true;
};

PointCloud load_ply(const std::filesystem::path& path, const PlyLoadOptions& options = {});
// Binary output stores doubles, so save followed by load is lossless.
void save_ply(const PointCloud& cloud, const std::filesystem::path& path,
              PlyFormat format = PlyFormat::BinaryLittleEndian);

// 32-bit float PFM, little endian (negative scale), rows stored bottom-up.
Image read_pfm(const std::filesystem::path& path);
void write_pfm(const Image& img, const std::filesystem::path& path);

// 8-bit RGB PNG; values map to [0, 1] by /255 and back by clamped rounding.
Image read_png(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);

// Picks the format from the extension (.pfm or .png).
Image read_image(const std::filesystem::path& path);
void write_image(const Image& img, const std::filesystem::path& path);

nlohmann::json sensor_to_json(const Model& model);
void sensor_from_json(const nlohmann::json& j, Model& model);

nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);
std::uint64_t config_hash(const PipelineConfig& cfg);

// A scene directory holds scene.json (paths and hyperparameters), the cloud,
// environment map, cameras, poses, frame manifest, sensor parameters and the
// ground-truth frames.
struct SceneFiles {
  Model model;
  PipelineConfig config;
};

SceneFiles load_scene(const std::filesystem::path& scene_json);
// Writes everything under `dir`; returns the path of scene.json.
std::filesystem::path save_scene(const std::filesystem::path& dir, const Model& model, const PipelineConfig& cfg,
                                 bool write_ground_truth = true);

// Named double tensors with a JSON header in one file.
struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, std::vector<double>> tensors;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

// Every trainable tensor plus the optimizer state. Loading requires a model
// with the same shapes and a config with the same hash.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const PipelineConfig& cfg,
                     const OptimizerState& state);
void load_checkpoint(const std::filesystem::path& path, Model& model, const PipelineConfig& cfg,
                     OptimizerState& state);

}  // namespace pixsplat
