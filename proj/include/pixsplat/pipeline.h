#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pixsplat/autodiff_raster.h"
#include "pixsplat/optim.h"
#include "pixsplat/raster.h"
#include "pixsplat/reconstruct.h"
#include "pixsplat/scene.h"
#include "pixsplat/tonemap.h"

namespace pixsplat {

// Everything the refinement loop can optimize.
struct Model {
  PointCloud cloud;
  EnvironmentMap env;
  std::map<int, CameraModel> cameras;  // intrinsics shared per camera id
  std::vector<Frame> frames;
  ReconstructHead head;
  Vignette vignette;
  ResponseCurve crf = ResponseCurve::gamma();
  double leak_alpha = 0.01;

  SensorParams sensor_for(const Frame& frame) const;
  RenderView view_of(const Frame& frame) const;
  double scene_diagonal() const;
};

struct PipelineConfig {
  RasterConfig raster;
  ReconstructConfig reconstruct;
  OptimConfig optim;
  double test_fraction = 0.05;
};

// Forward pass for one frame: rasterize, reconstruct, tonemap.
struct FrameRender {
  NeuralImagePyramid pyramid;
  Image hdr;
  Image ldr;
};

FrameRender render_frame(const Model& model, const Frame& frame, const RasterConfig& raster,
                         const ReconstructConfig& reconstruct, ResponseMode mode,
                         std::span<const std::uint8_t> active = {});

// Full gradient of the frame loss against its ground truth. `structural`
// chooses which points produce spatial gradients (empty: none). Texture and
// environment gradients stay zero while both groups are frozen, intrinsics
// gradients while intrinsics are frozen.
struct FrameGradients {
  double loss = 0.0;
  Image ldr;
  GradientBundle raster;
  Eigen::Matrix<double, 3, Eigen::Dynamic> d_head_weight;
  Vector3d d_head_bias = Vector3d::Zero();
  TonemapGradients sensor;
};

FrameGradients frame_gradients(const Model& model, const Frame& frame, const PipelineConfig& cfg,
                               std::span<const std::uint8_t> render_mask, std::span<const std::uint8_t> structural,
                               ResponseMode mode = ResponseMode::Training);

struct OptimizerState {
  AdamState texture, environment, position, head, vignette, response;
  std::map<int, AdamState> pose, exposure, white_balance, intrinsics;
  int epoch = 0;
  std::int64_t step = 0;
};

struct StepStats {
  int frame_id = 0;
  double loss = 0.0;
  double psnr = 0.0;
  double grad_norm_texture = 0.0;
  double grad_norm_pose = 0.0;
  double grad_norm_position = 0.0;
  double grad_norm_sensor = 0.0;
  bool skipped = false;
};

struct EpochStats {
  int epoch = 0;
  std::vector<StepStats> steps;
  double mean_loss = 0.0;
  double mean_psnr = 0.0;
};

// One optimizer step on one frame.
StepStats train_step(Model& model, std::size_t frame_index, const PipelineConfig& cfg, OptimizerState& state);

// One pass over `frame_indices` in a seed-determined order. Throws
// std::runtime_error with a diagnostic when the loss becomes non-finite.
EpochStats train_epoch(Model& model, const std::vector<std::size_t>& frame_indices, const PipelineConfig& cfg,
                       OptimizerState& state);

struct FrameMetrics {
  int frame_id = 0;
  double psnr = 0.0;
  double l1 = 0.0;
  double mse = 0.0;
};

struct EvaluationReport {
  std::vector<FrameMetrics> frames;
  double mean_psnr = 0.0;
  double mean_l1 = 0.0;
  double mean_mse = 0.0;
};

// Inference-mode metrics (clamped response, no ghost points).
EvaluationReport evaluate(const Model& model, const std::vector<std::size_t>& frame_indices,
                          const PipelineConfig& cfg);

struct TrainTestSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Every ceil(1 / fraction)-th frame goes to the test set.
TrainTestSplit split_frames(std::size_t frame_count, double test_fraction);

struct RefineLog {
  std::vector<EpochStats> epochs;
  std::vector<EvaluationReport> test_reports;
};

struct RefineOptions {
  int epochs = 10;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> log_path;  // JSON lines, one per step
  std::function<void(const EpochStats&, const EvaluationReport&)> on_epoch;
};

RefineLog refine(Model& model, const PipelineConfig& cfg, const RefineOptions& options, OptimizerState& state);

// Fills every frame's ground truth with the inference-mode rendering.
void render_ground_truth(Model& model, const PipelineConfig& cfg);

// Model over a synthetic scene with ground truth rendered by the pipeline.
Model make_synthetic_model(const SynthSpec& spec, const PipelineConfig& cfg);

std::uint64_t image_hash(const Image& img);
std::uint64_t frame_hash(const Frame& frame);

// Pose-only alignment with and without ghost gradients from identical noised
// starting poses.
struct AblationOptions {
  double sigma_translation = 0.015;  // world units
  double sigma_rotation_deg = 1.0;
  int steps = 300;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double pose_lr = 2e-3;
  bool normalize_gradient = true;
};

struct AblationRun {
  std::uint64_t seed = 0;
  double baseline_rms = 0.0;     // pixel RMS at the true poses
  double initial_rms = 0.0;
  double ghost_on_loss = 0.0;    // mean final MSE, inference mode
  double ghost_off_loss = 0.0;
  int ghost_on_aligned = 0;
  int ghost_off_aligned = 0;
  int frames = 0;
};

struct AblationReport {
  std::vector<AblationRun> runs;
  int ghost_wins = 0;
};

AblationReport ghost_ablation(const Model& reference, const PipelineConfig& cfg, const AblationOptions& options);

// Adds zero-mean Gaussian noise to every ground-truth frame, as a stand-in
// for sensor noise, so that the pixel RMS at the true parameters is nonzero.
void add_ground_truth_noise(Model& model, double sigma, std::uint64_t seed);

// Pixel RMS error of the inference rendering of one frame.
double frame_rms(const Model& model, const Frame& frame, const PipelineConfig& cfg);

}  // namespace pixsplat
