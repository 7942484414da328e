#include "pixsplat/discard.h"

#include <algorithm>
#include <cmath>

#include "pixsplat/errors.h"
#include "pixsplat/random.h"

namespace pixsplat {

void DiscardConfig::validate() const {
  if (!(gamma > 0.0)) throw InvalidArgument("discard: gamma must be positive");
}

double screen_radius(double r_world, const Vector3d& Xc, const CameraModel& cam, int layer) {
  const double scale = std::ldexp(1.0, -layer);
  if (cam.kind == CameraKind::PinholeDistorted) {
    if (!(Xc.z() > 0.0)) return 0.0;
    return r_world * 0.5 * (cam.fx + cam.fy) / Xc.z() * scale;
  }
  const auto J = projection_jacobian(cam, Xc);
  if (!J) return 0.0;
  return r_world * std::sqrt(0.5 * J->squaredNorm()) * scale;
}

bool keep_point(double r_screen, double beta, double gamma) {
  if (beta >= 1.0) return true;
  return r_screen / std::sqrt(1.0 - beta) > 1.0 / gamma;
}

double keep_probability(double r_screen, double gamma) {
  if (r_screen < 0.0) throw InvalidArgument("keep_probability: negative radius");
  return std::min(1.0, gamma * gamma * r_screen * r_screen);
}

double discard_beta(std::uint64_t seed, std::uint64_t point_id, std::uint64_t frame_id) {
  return unit_uniform(hash_key(seed, point_id, frame_id));
}

}  // namespace pixsplat
