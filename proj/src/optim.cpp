#include "pixsplat/optim.h"

#include <algorithm>
#include <cmath>

#include "pixsplat/errors.h"

namespace pixsplat {

bool adam_step(std::span<double> param, std::span<const double> grad, AdamState& s, double lr, const AdamConfig& cfg) {
  if (param.size() != grad.size()) throw ShapeMismatch("adam_step: parameter and gradient sizes differ");
  for (double g : grad)
    if (!std::isfinite(g)) return false;
  if (s.m.size() != param.size()) {
    s.m.assign(param.size(), 0.0);
    s.v.assign(param.size(), 0.0);
    s.step = 0;
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(s.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * grad[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    param[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg.epsilon);
  }
  return true;
}

bool step_pose(Pose& pose, const Vector6d& grad, AdamState& state, double lr, const AdamConfig& cfg) {
  Vector6d tangent = Vector6d::Zero();
  if (!adam_step(std::span<double>(tangent.data(), 6), std::span<const double>(grad.data(), 6), state, lr, cfg))
    return false;
  if (tangent.isZero(0.0)) return true;
  pose = apply_tangent(PoseTangent(tangent), pose).orthonormalized();
  return true;
}

LossResult image_loss(const Image& pred, const Image& gt, LossKind kind) {
  require_same_shape(pred, gt, "loss");
  LossResult r;
  r.adjoint = Image(pred.width, pred.height, pred.channels, 0.0);
  const std::size_t n = pred.data.size();
  if (n == 0) return r;
  const double inv = 1.0 / double(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.data[i] - gt.data[i];
    if (kind == LossKind::L1) {
      sum += std::abs(d);
      r.adjoint.data[i] = (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) * inv;
    } else {
      sum += d * d;
      r.adjoint.data[i] = 2.0 * d * inv;
    }
  }
  r.value = sum * inv;
  return r;
}

double mse(const Image& pred, const Image& gt) { return image_loss(pred, gt, LossKind::MSE).value; }

double psnr(const Image& pred, const Image& gt) {
  const double m = mse(pred, gt);
  if (m <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

std::vector<double> isotonic_regression(std::span<const double> y) {
  struct Block {
    double sum;
    double count;
  };
  std::vector<Block> blocks;
  blocks.reserve(y.size());
  for (double v : y) {
    blocks.push_back({v, 1.0});
    while (blocks.size() > 1) {
      const Block& b = blocks.back();
      const Block& a = blocks[blocks.size() - 2];
      if (a.sum / a.count <= b.sum / b.count) break;
      const Block merged{a.sum + b.sum, a.count + b.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> out;
  out.reserve(y.size());
  for (const Block& b : blocks) out.insert(out.end(), std::size_t(b.count), b.sum / b.count);
  return out;
}

void project_constraints(SensorParams& params) {
  for (auto& ch : params.crf.values) {
    if (ch.size() < 2) throw InvalidArgument("response curve needs at least 2 control points");
    if (ch.size() > 2) {
      // Bounded isotonic regression equals the clipped unbounded solution.
      const auto interior = isotonic_regression(std::span<const double>(ch.data() + 1, ch.size() - 2));
      for (std::size_t k = 0; k < interior.size(); ++k) ch[k + 1] = std::clamp(interior[k], 0.0, 1.0);
    }
    ch.front() = 0.0;
    ch.back() = 1.0;
  }
  params.white_point.y() = params.green_reference;
}

double crf_smoothness(const ResponseCurve& crf, double lambda, std::array<std::vector<double>, 3>* grad) {
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const auto& v = crf.values[c];
    for (std::size_t k = 1; k + 1 < v.size(); ++k) {
      const double d2 = v[k - 1] - 2.0 * v[k] + v[k + 1];
      total += lambda * d2 * d2;
      if (grad) {
        auto& g = (*grad)[c];
        g[k - 1] += 2.0 * lambda * d2;
        g[k] -= 4.0 * lambda * d2;
        g[k + 1] += 2.0 * lambda * d2;
      }
    }
  }
  return total;
}

FreezeFlags FreezeFlags::all() {
  FreezeFlags f;
  f.texture = f.environment = f.position = f.pose = f.intrinsics = true;
  f.exposure = f.white_balance = f.vignette = f.response = f.head = true;
  return f;
}

}  // namespace pixsplat
