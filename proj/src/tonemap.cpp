#include "pixsplat/tonemap.h"

#include <algorithm>
#include <cmath>

#include "pixsplat/errors.h"

namespace pixsplat {

ResponseCurve ResponseCurve::gamma(int control_points, double exponent) {
  if (control_points < 2) throw InvalidArgument("response curve needs at least 2 control points");
  ResponseCurve c;
  for (auto& ch : c.values) {
    ch.resize(std::size_t(control_points));
    for (int k = 0; k < control_points; ++k) ch[k] = std::pow(double(k) / (control_points - 1), exponent);
  }
  return c;
}

ResponseCurve ResponseCurve::filmic(int control_points) {
  if (control_points < 2) throw InvalidArgument("response curve needs at least 2 control points");
  auto aces = [](double x) { return x * (2.51 * x + 0.03) / (x * (2.43 * x + 0.59) + 0.14); };
  const double norm = aces(1.0);
  ResponseCurve c;
  for (auto& ch : c.values) {
    ch.resize(std::size_t(control_points));
    for (int k = 0; k < control_points; ++k) ch[k] = aces(double(k) / (control_points - 1)) / norm;
    ch.front() = 0.0;
    ch.back() = 1.0;
  }
  return c;
}

namespace {

struct Segment {
  int k0;
  double frac;
};

Segment locate(int K, double x) {
  const double s = std::clamp(x, 0.0, 1.0) * (K - 1);
  const int k0 = std::min(int(s), K - 2);
  return {k0, s - k0};
}

}  // namespace

double ResponseCurve::eval(int channel, double x) const {
  const auto& v = values[std::size_t(channel)];
  const auto [k0, frac] = locate(int(v.size()), x);
  return v[k0] + frac * (v[k0 + 1] - v[k0]);
}

double ResponseCurve::slope(int channel, double x) const {
  const auto& v = values[std::size_t(channel)];
  const int K = int(v.size());
  const int k0 = locate(K, x).k0;
  return (v[k0 + 1] - v[k0]) * (K - 1);
}

bool ResponseCurve::is_feasible(double tol) const {
  for (const auto& ch : values) {
    if (ch.size() < 2) return false;
    if (std::abs(ch.front()) > tol || std::abs(ch.back() - 1.0) > tol) return false;
    for (std::size_t k = 1; k < ch.size(); ++k)
      if (ch[k] < ch[k - 1] - tol) return false;
  }
  return true;
}

double init_ev(double f, double t, double S, double mean_ev) {
  if (!(f > 0.0) || !(t > 0.0) || !(S > 0.0)) throw InvalidArgument("init_ev: f, t and S must be positive");
  return std::log2(f * f / t) + std::log2(S / 100.0) - mean_ev;
}

Image apply_exposure(const Image& hdr, double ev) {
  Image out = hdr;
  const double s = std::exp2(-ev);
  for (double& v : out.data) v *= s;
  return out;
}

Image apply_white_balance(const Image& img, const Vector3d& wp) {
  if (img.channels != 3) throw ShapeMismatch("white balance expects 3 channels");
  if (!(wp.minCoeff() > 0.0)) throw InvalidArgument("white balance: white point must be positive");
  Image out = img;
  for (std::size_t p = 0; p < out.pixel_count(); ++p) {
    auto px = out.pixel(p);
    for (int c = 0; c < 3; ++c) px[c] /= wp[c];
  }
  return out;
}

double vignette_factor(double r2, const Vignette& v) { return 1.0 + r2 * (v.a2 + r2 * (v.a4 + r2 * v.a6)); }

double vignette_radius2(int x, int y, int w, int h, const Vector2d& c) {
  const double dx = x + 0.5 - c.x() * w;
  const double dy = y + 0.5 - c.y() * h;
  return (dx * dx + dy * dy) / (double(w) * w + double(h) * h);
}

Image apply_vignette(const Image& img, const Vignette& v) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double f = vignette_factor(vignette_radius2(x, y, img.width, img.height, v.centre), v);
      for (double& c : out.pixel(x, y)) c *= f;
    }
  return out;
}

double response(const ResponseCurve& crf, int channel, double x, ResponseMode mode, double alpha) {
  if (mode == ResponseMode::Inference) return crf.eval(channel, std::clamp(x, 0.0, 1.0));
  if (x < 0.0) return alpha * x;
  if (x > 1.0) return -alpha / std::sqrt(x) + alpha + 1.0;
  return crf.eval(channel, x);
}

double response_derivative(const ResponseCurve& crf, int channel, double x, ResponseMode mode, double alpha) {
  if (x < 0.0) return mode == ResponseMode::Inference ? 0.0 : alpha;
  if (x > 1.0) return mode == ResponseMode::Inference ? 0.0 : 0.5 * alpha / (x * std::sqrt(x));
  return crf.slope(channel, x);
}

Image apply_response(const Image& img, const ResponseCurve& crf, ResponseMode mode, double alpha) {
  if (img.channels != 3) throw ShapeMismatch("response expects 3 channels");
  Image out = img;
  for (std::size_t p = 0; p < out.pixel_count(); ++p) {
    auto px = out.pixel(p);
    for (int c = 0; c < 3; ++c) px[c] = response(crf, c, px[c], mode, alpha);
  }
  return out;
}

Image tonemap_forward(const Image& hdr, const SensorParams& params, ResponseMode mode) {
  if (hdr.channels != 3) throw ShapeMismatch("tonemap expects a 3-channel image");
  return apply_response(apply_vignette(apply_white_balance(apply_exposure(hdr, params.ev), params.white_point),
                                       params.vignette),
                        params.crf, mode, params.leak_alpha);
}

TonemapGradients tonemap_backward(const Image& hdr, const SensorParams& params, ResponseMode mode,
                                  const Image& adjoint) {
  if (hdr.channels != 3) throw ShapeMismatch("tonemap expects a 3-channel image");
  require_same_shape(hdr, adjoint, "tonemap_backward");
  const int W = hdr.width, H = hdr.height;
  const int K = params.crf.control_points();
  const double s = std::exp2(-params.ev);
  const Vector3d& wp = params.white_point;
  const Vignette& vg = params.vignette;
  const double diag2 = double(W) * W + double(H) * H;

  TonemapGradients g;
  for (auto& ch : g.d_crf) ch.assign(std::size_t(K), 0.0);
  g.d_input = Image(W, H, 3, 0.0);

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double r2 = vignette_radius2(x, y, W, H, vg.centre);
      const double f = vignette_factor(r2, vg);
      const double df_dr2 = vg.a2 + r2 * (2.0 * vg.a4 + r2 * 3.0 * vg.a6);
      const auto in = hdr.pixel(x, y);
      const auto a = adjoint.pixel(x, y);
      auto din = g.d_input.pixel(x, y);
      double d_f = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double e = in[c] * s;
        const double w = e / wp[c];
        const double v = w * f;
        const double dv = a[c] * response_derivative(params.crf, c, v, mode, params.leak_alpha);
        if (v >= 0.0 && v <= 1.0) {
          const auto [k0, frac] = locate(K, v);
          g.d_crf[c][k0] += a[c] * (1.0 - frac);
          g.d_crf[c][k0 + 1] += a[c] * frac;
        }
        d_f += dv * w;
        const double dw = dv * f;
        g.d_white_point[c] += dw * (-e / (wp[c] * wp[c]));
        const double de = dw / wp[c];
        g.d_ev += de * (-std::log(2.0) * e);
        din[c] = de * s;
      }
      g.d_a2 += d_f * r2;
      g.d_a4 += d_f * r2 * r2;
      g.d_a6 += d_f * r2 * r2 * r2;
      const double d_r2 = d_f * df_dr2;
      g.d_centre.x() += d_r2 * (-2.0 * (x + 0.5 - vg.centre.x() * W) * W / diag2);
      g.d_centre.y() += d_r2 * (-2.0 * (y + 0.5 - vg.centre.y() * H) * H / diag2);
    }
  g.d_white_point.y() = 0.0;
  return g;
}

}  // namespace pixsplat
