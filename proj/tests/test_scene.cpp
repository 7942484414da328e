#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pixsplat/errors.h"
#include "pixsplat/raster.h"
#include "pixsplat/scene.h"

using namespace pixsplat;

namespace {

std::vector<double> brute_radii(const std::vector<Vector3d>& pts, int k) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) d.push_back(std::sqrt((pts[i] - pts[j]).squaredNorm()));
    std::sort(d.begin(), d.end());
    d.resize(std::size_t(k));
    out.push_back(k % 2 ? d[k / 2] : 0.5 * (d[k / 2 - 1] + d[k / 2]));
  }
  return out;
}

PointCloud cloud_of(const std::vector<Vector3d>& pts, int D = 3) {
  PointCloud c;
  c.positions = pts;
  c.descriptors = DescriptorMatrix::Zero(Eigen::Index(pts.size()), D);
  for (std::size_t i = 0; i < pts.size(); ++i) c.descriptors(Eigen::Index(i), 0) = double(i);
  return c;
}

}  // namespace

TEST_SUITE("scene") {
  TEST_CASE("radius of an evenly spaced lattice is the spacing") {
    std::vector<Vector3d> pts;
    for (int i = 0; i < 12; ++i) pts.emplace_back(double(i), 0.0, 0.0);
    const auto r = estimate_world_radii(pts, 2);
    for (int i = 1; i < 11; ++i) CHECK(r[i] == 1.0);
  }

  TEST_CASE("radii follow the local scale of two clusters") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Vector3d> pts;
    for (int i = 0; i < 300; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
    for (int i = 0; i < 300; ++i) pts.emplace_back(10 + 0.1 * u(rng), 0.1 * u(rng), 0.1 * u(rng));
    const auto r = estimate_world_radii(pts, 4);
    const auto b = brute_radii(pts, 4);
    CHECK(r == b);
    std::vector<double> a(r.begin(), r.begin() + 300), c(r.begin() + 300, r.end());
    std::nth_element(a.begin(), a.begin() + 150, a.end());
    std::nth_element(c.begin(), c.begin() + 150, c.end());
    CHECK(a[150] / c[150] == doctest::Approx(10.0).epsilon(0.15));
  }

  TEST_CASE("radii equal the all-pairs oracle") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1, 1);
    for (std::size_t n : {5u, 37u, 600u, 2000u}) {
      std::vector<Vector3d> pts;
      for (std::size_t i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), 0.3 * u(rng));
      CHECK(estimate_world_radii(pts, 4) == brute_radii(pts, 4));
    }
    std::vector<Vector3d> few(3, Vector3d::Zero());
    CHECK_THROWS_AS(estimate_world_radii(few, 4), InvalidArgument);
  }

  TEST_CASE("coincident points get a positive radius") {
    std::vector<Vector3d> pts(6, Vector3d(1, 1, 1));
    pts.emplace_back(2, 2, 2);
    for (double r : estimate_world_radii(pts, 4)) CHECK(r > 0.0);
  }

  TEST_CASE("descriptor space selection uses a strict 400 threshold") {
    CHECK(choose_descriptor_space(426.67) == DescriptorSpace::Logarithmic);
    CHECK(choose_descriptor_space(1.0) == DescriptorSpace::Linear);
    CHECK(choose_descriptor_space(400.0) == DescriptorSpace::Linear);
    CHECK_THROWS_AS(choose_descriptor_space(0.5), InvalidArgument);
  }

  TEST_CASE("descriptor to linear conversions") {
    CHECK(descriptor_to_linear(0.5, DescriptorSpace::Linear) == 0.5);
    CHECK(descriptor_to_linear(0.0, DescriptorSpace::Logarithmic) == 1.0);
    CHECK(descriptor_to_linear(std::log(426.67), DescriptorSpace::Logarithmic) ==
          doctest::Approx(426.67).epsilon(1e-4));
    CHECK(descriptor_to_linear(1e4, DescriptorSpace::Logarithmic) == kMaxLinearDescriptor);
    for (double d : {-3.0, -0.2, 0.0, 0.7, 4.0})
      for (DescriptorSpace s : {DescriptorSpace::Linear, DescriptorSpace::Logarithmic}) {
        const double h = 1e-6;
        const double fd = (descriptor_to_linear(d + h, s) - descriptor_to_linear(d - h, s)) / (2 * h);
        CHECK(descriptor_to_linear_derivative(d, s) == doctest::Approx(fd).epsilon(1e-6));
        CHECK(descriptor_to_linear(linear_to_descriptor(descriptor_to_linear(d, s), s), s) ==
              doctest::Approx(descriptor_to_linear(d, s)).epsilon(1e-12));
      }
  }

  TEST_CASE("environment lookups") {
    EnvironmentMap env(8, 3, 0.7);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0, 1);
    double out[3];
    for (int i = 0; i < 200; ++i) {
      const Vector3d d = Vector3d(g(rng), g(rng), g(rng)).normalized();
      env_lookup(env, d, out);
      for (double v : out) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
      const EnvSample s = env_sample(env, d);
      double sum = 0.0;
      for (double w : s.weight) {
        CHECK(w >= 0.0);
        sum += w;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
    }
    // Texel centres return the texel value exactly.
    std::uniform_real_distribution<double> u(0, 1);
    for (double& v : env.texels.data) v = u(rng);
    for (int y = 0; y < env.height(); ++y)
      for (int x = 0; x < env.width(); ++x) {
        env_lookup(env, env_texel_direction(env, x, y), out);
        for (int c = 0; c < 3; ++c) CHECK(out[c] == doctest::Approx(env.texels.at(x, y, c)).epsilon(1e-12));
      }
    // Lookup is linear in the texels, so the weights are its gradient.
    const Vector3d d = Vector3d(0.3, -0.5, 0.8).normalized();
    const EnvSample s = env_sample(env, d);
    for (int k = 0; k < 4; ++k) {
      const std::size_t t = s.texel[k];
      const double saved = env.texels.data[t * 3];
      const double h = 1e-6;
      env.texels.data[t * 3] = saved + h;
      double hi[3], lo[3];
      env_lookup(env, d, hi);
      env.texels.data[t * 3] = saved - h;
      env_lookup(env, d, lo);
      env.texels.data[t * 3] = saved;
      double w = 0.0;
      for (int j = 0; j < 4; ++j)
        if (s.texel[j] == t) w += s.weight[j];
      CHECK(std::abs((hi[0] - lo[0]) / (2 * h) - w) < 1e-6);
    }
  }

  TEST_CASE("morton order of cube corners") {
    // Corner (x, y, z) in {0,1}^3 has code x + 2y + 4z per bit level.
    std::vector<Vector3d> corners;
    for (int i : {5, 3, 6, 0, 7, 1, 4, 2}) corners.emplace_back(i & 1, (i >> 1) & 1, (i >> 2) & 1);
    const MortonReorder r = morton_reorder(cloud_of(corners), 8);
    for (int k = 0; k < 8; ++k) {
      const Vector3d& p = r.cloud.positions[k];
      CHECK(int(p.x()) + 2 * int(p.y()) + 4 * int(p.z()) == k);
      CHECK(corners[r.permutation[k]] == p);
    }
    CHECK(morton_code(1, 0, 0) == 1);
    CHECK(morton_code(0, 1, 0) == 2);
    CHECK(morton_code(0, 0, 1) == 4);
    CHECK(morton_code(3, 0, 0) == 9);
  }

  TEST_CASE("morton reorder of one point and block shuffling") {
    const MortonReorder one = morton_reorder(cloud_of({Vector3d(1, 2, 3)}));
    CHECK(one.permutation == std::vector<std::size_t>{0});
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Vector3d> pts;
    for (int i = 0; i < 1000; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
    const MortonReorder a = morton_reorder(cloud_of(pts), 64, 1);
    std::vector<std::size_t> sorted = a.permutation;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(1000);
    std::iota(iota.begin(), iota.end(), std::size_t{0});
    CHECK(sorted == iota);
    CHECK(morton_reorder(cloud_of(pts), 64, 1).permutation == a.permutation);
  }

  TEST_CASE("synthetic scenes are deterministic and well formed") {
    SynthSpec spec;
    spec.shape = SynthShape::Sphere;
    spec.point_count = 500;
    spec.seed = 12;
    const SynthScene a = synth_scene(spec), b = synth_scene(spec);
    CHECK(a.cloud.positions == b.cloud.positions);
    CHECK(a.cloud.descriptors == b.cloud.descriptors);
    CHECK(a.env.texels.data == b.env.texels.data);
    a.cloud.validate();
    for (std::size_t i = 0; i < a.cloud.size(); ++i) {
      CHECK(std::abs(a.cloud.normals[i].norm() - 1.0) < 1e-12);
      CHECK(a.cloud.normals[i].dot(a.cloud.positions[i]) > 0.0);
    }
    for (const Frame& f : a.frames) CHECK(f.pose.is_valid());
  }

  TEST_CASE("near wall hides the far wall at the finest layer without fuzz") {
    SynthSpec spec;
    spec.shape = SynthShape::WallPair;
    spec.point_count = 20000;
    spec.frame_count = 1;
    SynthScene s = synth_scene(spec);
    RasterConfig cfg;
    cfg.alpha_depth = 0.0;
    const RenderView view{&s.cameras.at(0), s.frames[0].pose, 0};
    const Fragments fr = compute_fragments(s.cloud, view, 0, cfg);
    const auto min_z = depth_prepass(fr);
    // Every pixel hit by the near wall has its depth as the minimum.
    int near_pixels = 0;
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
      if (fr.pixel[i] < 0 || s.layer_of_point[i] != 0) continue;
      for (std::size_t j = 0; j < s.cloud.size(); ++j)
        if (s.layer_of_point[j] == 1 && fr.pixel[j] == fr.pixel[i]) {
          CHECK(min_z[fr.pixel[i]] < fr.z[j]);
          CHECK_FALSE(fuzzy_depth_pass(fr.z[j], min_z[fr.pixel[i]], 0.0));
        }
      ++near_pixels;
      if (near_pixels > 300) break;
    }
    CHECK(near_pixels > 100);
  }
}
