#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pixsplat/geometry.h"
#include "pixsplat/image.h"
#include "pixsplat/tonemap.h"

namespace pixsplat {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

// Bias-corrected Adam update in place. Returns false and leaves param and
// state untouched when the gradient has a non-finite entry.
bool adam_step(std::span<double> param, std::span<const double> grad, AdamState& state, double lr,
               const AdamConfig& cfg = {});

// Adam on a zero tangent, applied as a left increment; the tangent is
// discarded afterwards. Returns false when the step was skipped.
bool step_pose(Pose& pose, const Vector6d& tangent_grad, AdamState& state, double lr, const AdamConfig& cfg = {});

enum class LossKind { L1, MSE };

struct LossResult {
  double value = 0.0;
  Image adjoint;  // dLoss/dPrediction
};

// Mean over all pixels and channels.
LossResult image_loss(const Image& pred, const Image& gt, LossKind kind);

constexpr double kPsnrCap = 99.0;
// Unit peak; identical images report kPsnrCap.
double psnr(const Image& pred, const Image& gt);
double mse(const Image& pred, const Image& gt);

// L2 isotonic (nondecreasing) regression by pool-adjacent-violators.
std::vector<double> isotonic_regression(std::span<const double> values);

// Pins R(0) = 0 and R(1) = 1, projects every curve onto nondecreasing
// sequences and restores G^w.
void project_constraints(SensorParams& params);

// lambda * sum of squared second differences of every channel; adds its
// gradient to `grad` when given.
double crf_smoothness(const ResponseCurve& crf, double lambda, std::array<std::vector<double>, 3>* grad = nullptr);

struct LearningRates {
  double texture = 1e-2;
  double log_texture = 1e-3;  // a tenth of the linear texture rate
  double environment = 1e-2;
  double position = 1e-4;     // multiplied by the scene diagonal
  double pose = 2e-3;
  double intrinsics = 1e-2;   // pixels of image-corner motion per step
  double exposure = 1e-2;
  double white_balance = 1e-2;
  double vignette = 1e-2;
  double response = 1e-3;
  double head = 1e-3;
};

struct FreezeFlags {
  bool texture = false;
  bool environment = false;
  bool position = true;
  bool pose = true;
  bool intrinsics = true;
  bool exposure = false;
  bool white_balance = false;
  bool vignette = false;
  bool response = false;
  bool head = false;

  static FreezeFlags all();
};

struct OptimConfig {
  LearningRates lr;
  FreezeFlags frozen;
  AdamConfig adam;
  double smoothness = 1e-3;  // lambda_s of the response curvature penalty
  double dropout = 0.25;     // ghost point rate
  bool ghost_gradients = true;
  // Rescales each frame's pose gradient to unit length before Adam.
  bool normalize_pose_gradient = false;
  int epochs = 10;
  std::uint64_t seed = 0;
  double decay = 1.0;  // learning rate factor applied after every epoch
  LossKind loss = LossKind::MSE;
};

}  // namespace pixsplat
