#include "pixsplat/reconstruct.h"

#include <algorithm>
#include <utility>
#include <cmath>

#include "pixsplat/errors.h"

namespace pixsplat {

ReconstructHead ReconstructHead::identity(int D) {
  ReconstructHead h;
  h.weight = Eigen::Matrix<double, 3, Eigen::Dynamic>::Zero(3, D);
  for (int c = 0; c < std::min(3, D); ++c) h.weight(c, c) = 1.0;
  return h;
}

WeightedImage pull(const Image& fine, const std::vector<double>& weights, double eps) {
  const int W = layer_extent(fine.width, 1), H = layer_extent(fine.height, 1), D = fine.channels;
  WeightedImage out{Image(W, H, D, 0.0), std::vector<double>(std::size_t(W) * H, 0.0)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double wsum = 0.0;
      int children = 0;
      auto dst = out.image.pixel(x, y);
      for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) {
          const int fx = 2 * x + i, fy = 2 * y + j;
          if (!fine.contains(fx, fy)) continue;
          ++children;
          const double w = weights[fine.index(fx, fy)];
          if (w == 0.0) continue;
          wsum += w;
          const auto src = fine.pixel(fx, fy);
          for (int c = 0; c < D; ++c) dst[c] += w * src[c];
        }
      if (wsum <= eps) {
        for (int c = 0; c < D; ++c) dst[c] = 0.0;
        continue;
      }
      for (int c = 0; c < D; ++c) dst[c] /= wsum;
      out.weights[out.image.index(x, y)] = std::min(1.0, wsum / children);
    }
  return out;
}

namespace {

struct Tap {
  int x0, x1;
  double a;  // weight of x1
};

Tap upsample_tap(int x, int coarse_extent) {
  const double c = std::clamp((x + 0.5) * 0.5 - 0.5, 0.0, double(coarse_extent - 1));
  const int x0 = int(c);
  const int x1 = std::min(x0 + 1, coarse_extent - 1);
  return {x0, x1, c - x0};
}

// Adds transpose(upsample)(fine_grad) into coarse_grad.
void upsample_transpose(const Image& fine_grad, Image& coarse_grad) {
  const int D = fine_grad.channels;
  for (int y = 0; y < fine_grad.height; ++y) {
    const Tap ty = upsample_tap(y, coarse_grad.height);
    for (int x = 0; x < fine_grad.width; ++x) {
      const Tap tx = upsample_tap(x, coarse_grad.width);
      const auto g = fine_grad.pixel(x, y);
      const double w[4] = {(1 - tx.a) * (1 - ty.a), tx.a * (1 - ty.a), (1 - tx.a) * ty.a, tx.a * ty.a};
      const int xs[4] = {tx.x0, tx.x1, tx.x0, tx.x1};
      const int ys[4] = {ty.x0, ty.x0, ty.x1, ty.x1};
      for (int k = 0; k < 4; ++k) {
        auto dst = coarse_grad.pixel(xs[k], ys[k]);
        for (int c = 0; c < D; ++c) dst[c] += w[k] * g[c];
      }
    }
  }
}

}  // namespace

Image upsample(const Image& coarse, int width, int height) {
  const int D = coarse.channels;
  Image out(width, height, D, 0.0);
  for (int y = 0; y < height; ++y) {
    const Tap ty = upsample_tap(y, coarse.height);
    for (int x = 0; x < width; ++x) {
      const Tap tx = upsample_tap(x, coarse.width);
      const auto p00 = coarse.pixel(tx.x0, ty.x0), p10 = coarse.pixel(tx.x1, ty.x0);
      const auto p01 = coarse.pixel(tx.x0, ty.x1), p11 = coarse.pixel(tx.x1, ty.x1);
      auto dst = out.pixel(x, y);
      for (int c = 0; c < D; ++c)
        dst[c] = (1 - ty.a) * ((1 - tx.a) * p00[c] + tx.a * p10[c]) + ty.a * ((1 - tx.a) * p01[c] + tx.a * p11[c]);
    }
  }
  return out;
}

Image push(const Image& coarse_filled, const Image& fine, const std::vector<double>& weights) {
  const Image up = upsample(coarse_filled, fine.width, fine.height);
  Image out = fine;
  for (std::size_t p = 0; p < fine.pixel_count(); ++p) {
    const double w = weights[p];
    auto dst = out.pixel(p);
    const auto u = up.pixel(p);
    for (int c = 0; c < fine.channels; ++c) dst[c] = w * dst[c] + (1.0 - w) * u[c];
  }
  return out;
}

std::vector<double> validity_weights(const PyramidLayer& layer) {
  std::vector<double> w(layer.counts.size());
  for (std::size_t p = 0; p < w.size(); ++p) w[p] = std::min(1.0, double(layer.counts[p]));
  return w;
}

namespace {

// Forward values kept for the backward pass.
struct Tape {
  std::vector<Image> values;                // combined V_l
  std::vector<std::vector<double>> weight;  // combined W_l
  std::vector<std::vector<double>> pulled_weight;
  std::vector<std::vector<double>> observed_weight;
  std::vector<Image> filled;                // F_l
};

int used_levels(const NeuralImagePyramid& pyr, const ReconstructConfig& cfg) {
  if (pyr.layers.empty()) throw ShapeMismatch("reconstruct: empty pyramid");
  const int L = cfg.levels > 0 ? std::min<int>(cfg.levels, int(pyr.layers.size())) : int(pyr.layers.size());
  for (int l = 1; l < L; ++l) {
    const auto& fine = pyr.layers[l - 1].image;
    const auto& coarse = pyr.layers[l].image;
    if (coarse.width != layer_extent(fine.width, 1) || coarse.height != layer_extent(fine.height, 1) ||
        coarse.channels != fine.channels)
      throw ShapeMismatch("reconstruct: pyramid level shapes are inconsistent");
  }
  return L;
}

Tape run_forward(const NeuralImagePyramid& pyr, const ReconstructConfig& cfg) {
  const int L = used_levels(pyr, cfg);
  const double eps = cfg.validity_epsilon;
  Tape t;
  t.values.resize(L);
  t.weight.resize(L);
  t.pulled_weight.resize(L);
  t.observed_weight.resize(L);
  t.filled.resize(L);

  t.values[0] = pyr.layers[0].image;
  t.observed_weight[0] = validity_weights(pyr.layers[0]);
  t.weight[0] = t.observed_weight[0];
  for (int l = 1; l < L; ++l) {
    WeightedImage p = pull(t.values[l - 1], t.weight[l - 1], eps);
    const Image& obs = pyr.layers[l].image;
    const std::vector<double> wo = validity_weights(pyr.layers[l]);
    Image v(obs.width, obs.height, obs.channels, 0.0);
    std::vector<double> w(wo.size());
    for (std::size_t q = 0; q < wo.size(); ++q) {
      const double sum = p.weights[q] + wo[q];
      w[q] = std::min(1.0, sum);
      if (sum <= eps) continue;
      auto dst = v.pixel(q);
      const auto a = std::as_const(p.image).pixel(q);
      const auto b = obs.pixel(q);
      for (int c = 0; c < obs.channels; ++c) dst[c] = (p.weights[q] * a[c] + wo[q] * b[c]) / sum;
    }
    t.values[l] = std::move(v);
    t.weight[l] = std::move(w);
    t.pulled_weight[l] = std::move(p.weights);
    t.observed_weight[l] = wo;
  }

  // The coarsest level falls back to the rasterized layer itself, which holds
  // environment values wherever no point landed.
  t.filled[L - 1] = t.values[L - 1];
  {
    Image& f = t.filled[L - 1];
    const Image& obs = pyr.layers[L - 1].image;
    for (std::size_t q = 0; q < f.pixel_count(); ++q) {
      const double w = t.weight[L - 1][q];
      auto dst = f.pixel(q);
      const auto b = obs.pixel(q);
      for (int c = 0; c < f.channels; ++c) dst[c] = w * dst[c] + (1.0 - w) * b[c];
    }
  }
  for (int l = L - 2; l >= 0; --l) t.filled[l] = push(t.filled[l + 1], t.values[l], t.weight[l]);
  return t;
}

}  // namespace

Image reconstruct_hdr(const NeuralImagePyramid& pyr, const ReconstructHead& head, const ReconstructConfig& cfg) {
  const Tape t = run_forward(pyr, cfg);
  const Image& f = t.filled[0];
  if (head.descriptor_dim() != f.channels) throw ShapeMismatch("reconstruct: head width differs from descriptors");
  Image out(f.width, f.height, 3, 0.0);
  for (std::size_t p = 0; p < f.pixel_count(); ++p) {
    const Eigen::Map<const Eigen::VectorXd> d(f.pixel(p).data(), f.channels);
    Eigen::Map<Vector3d>(out.pixel(p).data()) = head.weight * d + head.bias;
  }
  return out;
}

ReconstructGradients reconstruct_backward(const NeuralImagePyramid& pyr, const ReconstructHead& head,
                                          const Image& adjoint, const ReconstructConfig& cfg) {
  const Tape t = run_forward(pyr, cfg);
  const int L = int(t.values.size());
  const int D = t.filled[0].channels;
  if (head.descriptor_dim() != D) throw ShapeMismatch("reconstruct: head width differs from descriptors");
  if (adjoint.width != t.filled[0].width || adjoint.height != t.filled[0].height || adjoint.channels != 3)
    throw ShapeMismatch("reconstruct_backward: adjoint shape mismatch");

  ReconstructGradients g;
  g.d_weight = Eigen::Matrix<double, 3, Eigen::Dynamic>::Zero(3, D);
  g.d_layers.resize(pyr.layers.size());
  for (std::size_t l = 0; l < pyr.layers.size(); ++l) {
    const Image& img = pyr.layers[l].image;
    g.d_layers[l] = Image(img.width, img.height, img.channels, 0.0);
  }

  std::vector<Image> dF(L), dV(L);
  for (int l = 0; l < L; ++l) {
    dF[l] = Image(t.values[l].width, t.values[l].height, D, 0.0);
    dV[l] = dF[l];
  }
  for (std::size_t p = 0; p < adjoint.pixel_count(); ++p) {
    const Eigen::Map<const Vector3d> a(adjoint.pixel(p).data());
    const Eigen::Map<const Eigen::VectorXd> f(t.filled[0].pixel(p).data(), D);
    g.d_weight += a * f.transpose();
    g.d_bias += a;
    Eigen::Map<Eigen::VectorXd>(dF[0].pixel(p).data(), D) = head.weight.transpose() * a;
  }

  // Push, top-down in the forward order, so walk fine to coarse here.
  for (int l = 0; l < L; ++l) {
    const std::vector<double>& w = t.weight[l];
    Image d_up(dF[l].width, dF[l].height, D, 0.0);
    for (std::size_t q = 0; q < w.size(); ++q) {
      const auto df = dF[l].pixel(q);
      auto dv = dV[l].pixel(q);
      auto du = d_up.pixel(q);
      for (int c = 0; c < D; ++c) {
        dv[c] += w[q] * df[c];
        du[c] = (1.0 - w[q]) * df[c];
      }
    }
    if (l + 1 < L) {
      upsample_transpose(d_up, dF[l + 1]);
    } else {
      Image& di = g.d_layers[l];
      for (std::size_t q = 0; q < d_up.data.size(); ++q) di.data[q] += d_up.data[q];
    }
  }

  // Pull chain, coarse to fine.
  const double eps = cfg.validity_epsilon;
  for (int l = L - 1; l >= 1; --l) {
    const std::vector<double>& wp = t.pulled_weight[l];
    const std::vector<double>& wo = t.observed_weight[l];
    Image d_pulled(dV[l].width, dV[l].height, D, 0.0);
    for (std::size_t q = 0; q < wp.size(); ++q) {
      const double sum = wp[q] + wo[q];
      if (sum <= eps) continue;
      const auto dv = dV[l].pixel(q);
      auto dp = d_pulled.pixel(q);
      auto di = g.d_layers[l].pixel(q);
      for (int c = 0; c < D; ++c) {
        dp[c] = wp[q] / sum * dv[c];
        di[c] += wo[q] / sum * dv[c];
      }
    }
    // Transpose of the weighted 2x2 average.
    const Image& fine = t.values[l - 1];
    const std::vector<double>& fw = t.weight[l - 1];
    for (int y = 0; y < d_pulled.height; ++y)
      for (int x = 0; x < d_pulled.width; ++x) {
        double wsum = 0.0;
        for (int j = 0; j < 2; ++j)
          for (int i = 0; i < 2; ++i)
            if (fine.contains(2 * x + i, 2 * y + j)) wsum += fw[fine.index(2 * x + i, 2 * y + j)];
        if (wsum <= eps) continue;
        const auto dp = d_pulled.pixel(x, y);
        for (int j = 0; j < 2; ++j)
          for (int i = 0; i < 2; ++i) {
            if (!fine.contains(2 * x + i, 2 * y + j)) continue;
            const std::size_t q = fine.index(2 * x + i, 2 * y + j);
            if (fw[q] == 0.0) continue;
            auto dst = dV[l - 1].pixel(q);
            for (int c = 0; c < D; ++c) dst[c] += fw[q] / wsum * dp[c];
          }
      }
  }
  for (std::size_t q = 0; q < dV[0].data.size(); ++q) g.d_layers[0].data[q] += dV[0].data[q];
  return g;
}

}  // namespace pixsplat
