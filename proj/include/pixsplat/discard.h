#pragma once

#include <cstdint>

#include "pixsplat/geometry.h"

namespace pixsplat {

struct DiscardConfig {
  double gamma = 1.5;
  bool enabled = true;
  std::uint64_t seed = 0;

  void validate() const;
};

// Projected splat radius in layer-l pixels. Pinhole uses the mean focal
// length; fisheye uses the RMS singular value of the projection Jacobian.
double screen_radius(double r_world, const Vector3d& Xc, const CameraModel& cam, int layer);

// Keep iff r_screen / sqrt(1 - beta) > 1 / gamma; beta = 1 always keeps.
bool keep_point(double r_screen, double beta, double gamma);

// Closed form of keep_point under uniform beta: min(1, gamma^2 r^2).
double keep_probability(double r_screen, double gamma);

// Per-point uniform value keyed by (seed, point id, frame id). Forward and
// backward passes call this with the same key and see the same value.
double discard_beta(std::uint64_t seed, std::uint64_t point_id, std::uint64_t frame_id);

}  // namespace pixsplat
