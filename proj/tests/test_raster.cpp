#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "oracle.h"
#include "pixsplat/parallel.h"
#include "pixsplat/raster.h"
#include "pixsplat/scene.h"

using namespace pixsplat;

namespace {

CameraModel camera(int w, int h, double f, double cx, double cy) {
  CameraModel c;
  c.width = w;
  c.height = h;
  c.fx = c.fy = f;
  c.cx = cx;
  c.cy = cy;
  return c;
}

PointCloud points(const std::vector<Vector3d>& pos, const std::vector<double>& values, int D = 1) {
  PointCloud c;
  c.positions = pos;
  c.descriptors = DescriptorMatrix::Zero(Eigen::Index(pos.size()), D);
  for (std::size_t i = 0; i < pos.size(); ++i)
    for (int d = 0; d < D; ++d) c.descriptors(Eigen::Index(i), d) = values[i];
  return c;
}

struct ThreadGuard {
  int saved = thread_count();
  ~ThreadGuard() { set_thread_count(saved); }
};

SynthScene random_scene(std::uint64_t seed, std::size_t n, int w, int h) {
  SynthSpec spec;
  spec.shape = SynthShape(seed % 3);
  spec.point_count = n;
  spec.seed = seed;
  spec.width = w;
  spec.height = h;
  spec.focal = 0.9 * w;
  spec.frame_count = 3;
  spec.camera = seed % 4 == 3 ? CameraKind::FisheyeEquidistant : CameraKind::PinholeDistorted;
  SynthScene s = synth_scene(spec);
  s.cameras.at(0).k = {0.02, -0.005, 0.0, 0.0};
  return s;
}

}  // namespace

TEST_SUITE("raster") {
  TEST_CASE("layer projection rounds half away from zero") {
    const CameraModel cam = camera(64, 64, 100.0, 0.0, 0.0);
    const LayerProjection a = project_to_layer(cam, Pose::identity(), {0.104, 0.206, 1.0}, 0);
    CHECK(a.pixel == Eigen::Vector2i(10, 21));
    const LayerProjection b = project_to_layer(cam, Pose::identity(), {0.104, 0.206, 1.0}, 1);
    CHECK(b.uv.x() == doctest::Approx(5.2));
    CHECK(b.uv.y() == doctest::Approx(10.3));
    CHECK(b.pixel == Eigen::Vector2i(5, 10));
    const CameraModel tie = camera(64, 64, 100.0, 10.5, 20.5);
    CHECK(project_to_layer(tie, Pose::identity(), {0, 0, 1}, 0).pixel == Eigen::Vector2i(11, 21));
    CHECK(round_half_away(-0.5) == -1.0);
    CHECK(round_half_away(2.5) == 3.0);
  }

  TEST_CASE("layer projection is the finest projection scaled by 2^-l") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    CameraModel cam = camera(200, 150, 170, 99.5, 74.5);
    cam.k = {0.05, 0.01, 0, 0};
    for (int i = 0; i < 200; ++i) {
      const Vector3d x(u(rng), u(rng), 3 + u(rng));
      const LayerProjection p0 = project_to_layer(cam, Pose::identity(), x, 0);
      for (int l = 1; l < 5; ++l)
        CHECK(project_to_layer(cam, Pose::identity(), x, l).uv == p0.uv / double(1 << l));
    }
  }

  TEST_CASE("culling") {
    RasterConfig cfg;
    const Vector3d Xc(0, 0, 1);
    CHECK_FALSE(cull_keep({-1, 5}, 10, 10, nullptr, Xc, cfg));
    CHECK_FALSE(cull_keep({10, 5}, 10, 10, nullptr, Xc, cfg));
    CHECK(cull_keep({0, 9}, 10, 10, nullptr, Xc, cfg));
    const Vector3d side(1, 0, 0), away(0, 0, 1), toward(0, 0, -1);
    CHECK(cull_keep({2, 2}, 10, 10, &toward, Xc, cfg));  // disabled: any normal passes
    cfg.normal_culling = true;
    CHECK_FALSE(cull_keep({2, 2}, 10, 10, &side, Xc, cfg));  // dot = 0 fails the strict test
    CHECK(cull_keep({2, 2}, 10, 10, &away, Xc, cfg));
    CHECK_FALSE(cull_keep({2, 2}, 10, 10, &toward, Xc, cfg));
    cfg.flip_normal_test = true;
    CHECK(cull_keep({2, 2}, 10, 10, &toward, Xc, cfg));
  }

  TEST_CASE("fuzzy depth test") {
    CHECK(fuzzy_depth_pass(2.02, 2.0, 0.01));
    CHECK_FALSE(fuzzy_depth_pass(2.03, 2.0, 0.01));
    CHECK(fuzzy_depth_pass(2.0, 2.0, 0.0));
    CHECK_FALSE(fuzzy_depth_pass(std::nextafter(2.0, 3.0), 2.0, 0.0));
  }

  TEST_CASE("depth prepass keeps the nearest fragment per pixel") {
    const CameraModel cam = camera(8, 8, 10, 3.5, 3.5);
    const PointCloud c = points({{0.05, 0.05, 1.0}, {0.1, 0.1, 2.0}}, {0.1, 0.2});
    const RenderView view{&cam, Pose::identity(), 0};
    const Fragments f = compute_fragments(c, view, 0, RasterConfig{});
    REQUIRE(f.pixel[0] == f.pixel[1]);
    const auto mz = depth_prepass(f);
    CHECK(mz[f.pixel[0]] == 1.0);
    CHECK(std::isinf(mz[0]));
  }

  TEST_CASE("threaded depth prepass equals the sequential one") {
    ThreadGuard guard;
    SynthScene s = random_scene(4, 20000, 96, 64);
    const RenderView view{&s.cameras.at(0), s.frames[0].pose, 0};
    set_thread_count(1);
    const auto a = depth_prepass(compute_fragments(s.cloud, view, 0, RasterConfig{}));
    set_thread_count(4);
    const auto b = depth_prepass(compute_fragments(s.cloud, view, 0, RasterConfig{}));
    CHECK(a == b);
  }

  TEST_CASE("blending averages the fragments of a pixel") {
    const CameraModel cam = camera(8, 8, 10, 3.5, 3.5);
    const RenderView view{&cam, Pose::identity(), 0};
    RasterConfig cfg;
    cfg.layers = 1;
    EnvironmentMap env(2, 1, 0.0);
    const PyramidLayer two = render_layer(points({{0, 0, 1}, {0, 0, 1.005}}, {0.2, 0.4}), env, view, 0, cfg);
    const std::size_t q = two.image.index(4, 4);
    CHECK(two.counts[q] == 2);
    CHECK(two.image.data[q] == doctest::Approx(0.3).epsilon(1e-15));
    const PyramidLayer one = render_layer(points({{0, 0, 1}}, {0.77}), env, view, 0, cfg);
    CHECK(one.image.data[q] == 0.77);
  }

  TEST_CASE("fast and canonical blending agree on a crowded pixel") {
    ThreadGuard guard;
    const CameraModel cam = camera(8, 8, 10, 3.5, 3.5);
    const RenderView view{&cam, Pose::identity(), 0};
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Vector3d> pos;
    std::vector<double> val;
    for (int i = 0; i < 100; ++i) {
      pos.emplace_back(0.0, 0.0, 1.0 + 0.005 * u(rng));
      val.push_back(u(rng));
    }
    const PointCloud c = points(pos, val, 3);
    EnvironmentMap env(2, 3, 0.0);
    RasterConfig fast;
    fast.deterministic = false;
    RasterConfig exact;
    set_thread_count(4);
    const PyramidLayer a = render_layer(c, env, view, 0, fast);
    const PyramidLayer b = render_layer(c, env, view, 0, exact);
    // Sequential oracle: sort the values, then take their mean.
    std::vector<double> sorted = val;
    std::sort(sorted.begin(), sorted.end());
    const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / 100.0;
    const std::size_t q = a.image.index(4, 4);
    CHECK(a.counts[q] == 100);
    for (int ch = 0; ch < 3; ++ch) {
      CHECK(std::abs(a.image.data[q * 3 + ch] - mean) < 1e-6);
      CHECK(std::abs(b.image.data[q * 3 + ch] - mean) < 1e-6);
    }
  }

  TEST_CASE("background pass") {
    const CameraModel cam = camera(12, 10, 9, 5.5, 4.5);
    const Pose pose = look_at({0.3, 0.2, -2}, {0, 0, 0});
    const RenderView view{&cam, pose, 0};
    RasterConfig cfg;
    EnvironmentMap flat(4, 2, 0.25);
    const PyramidLayer empty = render_layer(points({}, {}, 2), flat, view, 0, cfg);
    for (double v : empty.image.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    for (auto b : empty.background) CHECK(b == 1);

    EnvironmentMap env(8, 2);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (double& v : env.texels.data) v = u(rng);
    const PointCloud c = points({pose.inverse().transform({0, 0, 1.5})}, {5.0}, 2);
    const PyramidLayer l = render_layer(c, env, view, 1, cfg);
    int covered = 0;
    for (int y = 0; y < l.height(); ++y)
      for (int x = 0; x < l.width(); ++x) {
        const std::size_t q = l.image.index(x, y);
        const Vector3d ray = pose.R.transpose() * unproject(cam, Vector2d(2.0 * x, 2.0 * y));
        CHECK((pixel_ray_world(cam, pose, 1, x, y) - ray).norm() < 1e-9);
        if (l.counts[q] > 0) {
          ++covered;
          CHECK(l.image.data[q * 2] == 5.0);
          CHECK(l.background[q] == 0);
        } else {
          double e[2];
          env_lookup(env, ray, e);
          CHECK(l.image.data[q * 2] == doctest::Approx(e[0]).epsilon(1e-12));
          CHECK(l.background[q] == 1);
        }
      }
    CHECK(covered == 1);
  }

  TEST_CASE("a fronto-parallel plane of one descriptor renders that descriptor") {
    SynthSpec spec;
    spec.point_count = 40000;
    spec.frame_count = 1;
    SynthScene s = synth_scene(spec);
    for (int i = 0; i < s.cloud.descriptors.rows(); ++i) s.cloud.descriptors.row(i) << 0.3, 0.6, 0.9, 0.0;
    const RenderView view{&s.cameras.at(0), look_at({0, 0, -1.6}, {0, 0, 0}), 0};
    RasterConfig cfg;
    cfg.layers = 1;
    const NeuralImagePyramid p = render_pyramid(s.cloud, s.env, view, cfg);
    REQUIRE(p.layers.size() == 1);
    int covered = 0;
    for (std::size_t q = 0; q < p.layers[0].counts.size(); ++q)
      if (p.layers[0].counts[q] > 0) {
        ++covered;
        const auto px = p.layers[0].image.pixel(q);
        CHECK(px[0] == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(px[2] == doctest::Approx(0.9).epsilon(1e-12));
      }
    CHECK(covered > 500);
  }

  TEST_CASE("pyramid layer sizes use the ceiling rule") {
    const CameraModel cam = camera(1920, 1080, 1500, 959.5, 539.5);
    const RenderView view{&cam, Pose::identity(), 0};
    RasterConfig cfg;
    cfg.layers = 4;
    const NeuralImagePyramid p = render_pyramid(points({{0, 0, 3}}, {1.0}), EnvironmentMap(2, 1, 0.0), view, cfg);
    const int expect[4][2] = {{1920, 1080}, {960, 540}, {480, 270}, {240, 135}};
    for (int l = 0; l < 4; ++l) {
      CHECK(p.layers[l].width() == expect[l][0]);
      CHECK(p.layers[l].height() == expect[l][1]);
    }
    CHECK(layer_extent(1001, 3) == 126);
  }

  TEST_CASE("three-pass output equals the brute-force oracle") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      SynthScene s = random_scene(seed, 3000, 48 + 8 * int(seed), 40);
      RasterConfig cfg;
      cfg.layers = 3;
      cfg.alpha_depth = seed % 2 ? 0.0 : 0.01;
      cfg.normal_culling = seed % 3 == 1;
      cfg.flip_normal_test = true;
      cfg.discard.enabled = seed % 4 == 2;
      const RenderView view{&s.cameras.at(0), s.frames[seed % 3].pose, seed};
      const NeuralImagePyramid p = render_pyramid(s.cloud, s.env, view, cfg);
      for (int l = 0; l < cfg.layers; ++l) {
        const oracle::OracleLayer o = oracle::render(s.cloud, s.env, view, cfg, l);
        CHECK(p.layers[l].image.data == o.image);
        CHECK(std::vector<int>(p.layers[l].counts.begin(), p.layers[l].counts.end()) == o.counts);
      }
    }
  }

  TEST_CASE("deterministic output ignores point order and thread count") {
    ThreadGuard guard;
    SynthScene s = random_scene(5, 8000, 80, 60);
    RasterConfig cfg;
    const RenderView view{&s.cameras.at(0), s.frames[1].pose, 1};
    set_thread_count(1);
    const NeuralImagePyramid a = render_pyramid(s.cloud, s.env, view, cfg);
    std::vector<std::size_t> perm(s.cloud.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(2));
    const PointCloud shuffled = permute(s.cloud, perm);
    set_thread_count(4);
    const NeuralImagePyramid b = render_pyramid(shuffled, s.env, view, cfg);
    const NeuralImagePyramid c = render_pyramid(morton_reorder(s.cloud, 64, 3).cloud, s.env, view, cfg);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      CHECK(a.layers[l].image.data == b.layers[l].image.data);
      CHECK(a.layers[l].image.data == c.layers[l].image.data);
      CHECK(a.layers[l].counts == b.layers[l].counts);
    }
  }

  TEST_CASE("blended pairs grow with the depth tolerance") {
    SynthScene s = random_scene(2, 6000, 64, 48);
    const RenderView view{&s.cameras.at(0), s.frames[0].pose, 0};
    auto blended = [&](double alpha) {
      RasterConfig cfg;
      cfg.alpha_depth = alpha;
      const Fragments f = compute_fragments(s.cloud, view, 0, cfg);
      const auto mz = depth_prepass(f);
      std::set<std::size_t> out;
      for (std::size_t i = 0; i < f.pixel.size(); ++i)
        if (f.pixel[i] >= 0 && fuzzy_depth_pass(f.z[i], mz[f.pixel[i]], alpha)) out.insert(i);
      return out;
    };
    const auto a = blended(0.0), b = blended(0.01), c = blended(0.2);
    CHECK(std::includes(b.begin(), b.end(), a.begin(), a.end()));
    CHECK(std::includes(c.begin(), c.end(), b.begin(), b.end()));
    CHECK(c.size() > a.size());
  }

  TEST_CASE("zero count, background flag and environment value coincide") {
    SynthScene s = random_scene(1, 1500, 64, 48);
    RasterConfig cfg;
    const RenderView view{&s.cameras.at(0), s.frames[2].pose, 2};
    const NeuralImagePyramid p = render_pyramid(s.cloud, s.env, view, cfg);
    const int D = s.cloud.descriptor_dim();
    std::vector<double> e(std::size_t(D), 0.0);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const PyramidLayer& L = p.layers[l];
      for (int y = 0; y < L.height(); ++y)
        for (int x = 0; x < L.width(); ++x) {
          const std::size_t q = L.image.index(x, y);
          CHECK((L.counts[q] == 0) == (L.background[q] == 1));
          if (L.counts[q] == 0) {
            env_lookup(s.env, pixel_ray_world(*view.camera, view.pose, int(l), x, y), e);
            for (int c = 0; c < D; ++c) CHECK(L.image.pixel(q)[c] == e[std::size_t(c)]);
          }
        }
    }
  }

  TEST_CASE("discarded points do not shape the depth buffer") {
    const CameraModel cam = camera(8, 8, 10, 3.5, 3.5);
    PointCloud c = points({{0, 0, 1.0}, {0, 0, 2.0}}, {0.1, 0.9});
    c.world_radii = {1e-6, 10.0};  // the near point is far below a pixel
    RasterConfig cfg;
    cfg.discard.enabled = true;
    cfg.discard.gamma = 1.0;
    const RenderView view{&cam, Pose::identity(), 0};
    const Fragments f = compute_fragments(c, view, 0, cfg);
    CHECK(f.pixel[0] < 0);
    const PyramidLayer l = render_layer(c, EnvironmentMap(2, 1, 0.0), view, 0, cfg);
    CHECK(l.min_z[l.image.index(4, 4)] == 2.0);
    CHECK(l.image.at(4, 4, 0) == 0.9);
  }

  TEST_CASE("active mask removes points from the image") {
    SynthScene s = random_scene(3, 2000, 48, 40);
    RasterConfig cfg;
    const RenderView view{&s.cameras.at(0), s.frames[0].pose, 0};
    std::vector<std::uint8_t> none(s.cloud.size(), 0);
    const NeuralImagePyramid p = render_pyramid(s.cloud, s.env, view, cfg, none);
    for (const auto& L : p.layers)
      for (auto c : L.counts) CHECK(c == 0);
  }
}
