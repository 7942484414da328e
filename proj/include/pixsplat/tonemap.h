#pragma once

#include <array>
#include <vector>

#include "pixsplat/geometry.h"
#include "pixsplat/image.h"

namespace pixsplat {

// Polynomial radial falloff 1 + a2 r^2 + a4 r^4 + a6 r^6 around `centre`
// (normalized image coordinates). r is measured in units of the image
// diagonal, so r <= 1 anywhere in the image.
struct Vignette {
  double a2 = 0.0;
  double a4 = 0.0;
  double a6 = 0.0;
  Vector2d centre{0.5, 0.5};
};

// Per-channel piecewise-linear response on K evenly spaced control points
// over [0, 1].
struct ResponseCurve {
  std::array<std::vector<double>, 3> values;

  static ResponseCurve gamma(int control_points = 256, double exponent = 0.45);
  // Fixed filmic shoulder, normalized to map 1 to 1. Not meant for training.
  static ResponseCurve filmic(int control_points = 256);

  int control_points() const { return int(values[0].size()); }
  // Curve value on [0, 1]; x is clamped into that range.
  double eval(int channel, double x) const;
  // Slope of the segment containing x.
  double slope(int channel, double x) const;
  // Endpoints pinned and nondecreasing.
  bool is_feasible(double tol = 0.0) const;
};

enum class ResponseMode { Inference, Training };

struct SensorParams {
  double ev = 0.0;
  Vector3d white_point = Vector3d::Ones();
  Vignette vignette;
  ResponseCurve crf = ResponseCurve::gamma();
  double leak_alpha = 0.01;
  double green_reference = 1.0;  // G^w is held at this value
};

// EV = log2(f^2 / t) + log2(S / 100) - mean_ev.
double init_ev(double f_number, double exposure_time, double iso, double mean_ev = 0.0);

Image apply_exposure(const Image& hdr, double ev);
Image apply_white_balance(const Image& img, const Vector3d& white_point);
double vignette_factor(double r2, const Vignette& v);
// Squared normalized distance of the centre of pixel (x, y) to the vignette centre.
double vignette_radius2(int x, int y, int width, int height, const Vector2d& centre);
Image apply_vignette(const Image& img, const Vignette& v);
double response(const ResponseCurve& crf, int channel, double x, ResponseMode mode, double alpha);
double response_derivative(const ResponseCurve& crf, int channel, double x, ResponseMode mode, double alpha);
Image apply_response(const Image& img, const ResponseCurve& crf, ResponseMode mode, double alpha);

// Exposure -> white balance -> vignette -> response on a 3-channel HDR image.
Image tonemap_forward(const Image& hdr, const SensorParams& params, ResponseMode mode);

struct TonemapGradients {
  double d_ev = 0.0;
  Vector3d d_white_point = Vector3d::Zero();  // green component always 0
  double d_a2 = 0.0;
  double d_a4 = 0.0;
  double d_a6 = 0.0;
  Vector2d d_centre = Vector2d::Zero();
  std::array<std::vector<double>, 3> d_crf;
  Image d_input;
};

TonemapGradients tonemap_backward(const Image& hdr, const SensorParams& params, ResponseMode mode,
                                  const Image& adjoint);

}  // namespace pixsplat
