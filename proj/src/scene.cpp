#include "pixsplat/scene.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <random>

#include "pixsplat/errors.h"

namespace pixsplat {

void PointCloud::validate() const {
  const std::size_t n = positions.size();
  if (std::size_t(descriptors.rows()) != n) throw InvalidArgument("point cloud: descriptor row count mismatch");
  if (!normals.empty() && normals.size() != n) throw InvalidArgument("point cloud: normal count mismatch");
  if (!world_radii.empty() && world_radii.size() != n) throw InvalidArgument("point cloud: radius count mismatch");
  for (const auto& p : positions)
    if (!p.allFinite()) throw InvalidArgument("point cloud: non-finite position");
  for (const auto& nrm : normals)
    if (!nrm.allFinite() || std::abs(nrm.norm() - 1.0) > 1e-6)
      throw InvalidArgument("point cloud: normals must be unit length");
  for (double r : world_radii)
    if (!(r > 0.0) || !std::isfinite(r)) throw InvalidArgument("point cloud: radii must be positive");
  if (!descriptors.allFinite()) throw InvalidArgument("point cloud: non-finite descriptor");
}

void EnvironmentMap::validate() const {
  if (texels.height < 1 || texels.width != 2 * texels.height)
    throw InvalidArgument("environment map: width must be twice the height");
  for (double v : texels.data)
    if (!std::isfinite(v)) throw InvalidArgument("environment map: non-finite texel");
}

EnvSample env_sample(const EnvironmentMap& env, const Vector3d& d) {
  const int W = env.width();
  const int H = env.height();
  const double lon = std::atan2(d.x(), d.z());
  const double lat = std::asin(std::clamp(d.y(), -1.0, 1.0));
  // Texel (i, j) has its centre at continuous coordinate (i + 0.5, j + 0.5).
  const double fx = (lon + M_PI) / (2.0 * M_PI) * W - 0.5;
  const double fy = std::clamp((lat + M_PI_2) / M_PI * H - 0.5, 0.0, double(H - 1));
  const double x0f = std::floor(fx);
  const double y0f = std::min(std::floor(fy), double(std::max(H - 2, 0)));
  const double ax = fx - x0f;
  const double ay = fy - y0f;
  const int x0 = ((int(x0f) % W) + W) % W;
  const int x1 = (x0 + 1) % W;
  const int y0 = int(y0f);
  const int y1 = std::min(y0 + 1, H - 1);
  EnvSample s;
  s.texel = {env.texels.index(x0, y0), env.texels.index(x1, y0), env.texels.index(x0, y1), env.texels.index(x1, y1)};
  s.weight = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  return s;
}

void env_lookup(const EnvironmentMap& env, const Vector3d& direction, std::span<double> out) {
  const EnvSample s = env_sample(env, direction);
  const int D = env.channels();
  for (int c = 0; c < D; ++c) out[c] = 0.0;
  for (int k = 0; k < 4; ++k) {
    const auto texel = env.texels.pixel(s.texel[k]);
    for (int c = 0; c < D; ++c) out[c] += s.weight[k] * texel[c];
  }
}

Vector3d env_texel_direction(const EnvironmentMap& env, int x, int y) {
  const double lon = (x + 0.5) / env.width() * 2.0 * M_PI - M_PI;
  const double lat = (y + 0.5) / env.height() * M_PI - M_PI_2;
  return {std::cos(lat) * std::sin(lon), std::sin(lat), std::cos(lat) * std::cos(lon)};
}

// ---------------------------------------------------------------------------
// k nearest neighbours

namespace {

class KdTree {
 public:
  explicit KdTree(const std::vector<Vector3d>& pts) : pts_(pts), index_(pts.size()), axes_(pts.size(), 0) {
    std::iota(index_.begin(), index_.end(), std::size_t{0});
    if (!pts.empty()) build(0, pts.size());
  }

  // Squared distances to the k nearest points other than `self`, ascending.
  std::vector<double> knn(std::size_t self, int k) const {
    std::priority_queue<double> heap;
    search(pts_[self], self, std::size_t(k), heap, 0, index_.size());
    std::vector<double> out(heap.size());
    for (auto it = out.rbegin(); it != out.rend(); ++it) {
      *it = heap.top();
      heap.pop();
    }
    return out;
  }

 private:
  static constexpr std::size_t kLeaf = 12;

  // Implicit tree: node for range [lo, hi) is keyed by its midpoint.
  void build(std::size_t lo, std::size_t hi) {
    if (hi - lo <= kLeaf) return;
    Vector3d mn = Vector3d::Constant(std::numeric_limits<double>::infinity());
    Vector3d mx = -mn;
    for (std::size_t i = lo; i < hi; ++i) {
      mn = mn.cwiseMin(pts_[index_[i]]);
      mx = mx.cwiseMax(pts_[index_[i]]);
    }
    int axis;
    (mx - mn).maxCoeff(&axis);
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(index_.begin() + lo, index_.begin() + mid, index_.begin() + hi,
                     [&](std::size_t a, std::size_t b) { return pts_[a][axis] < pts_[b][axis]; });
    axes_[mid] = std::int8_t(axis);
    build(lo, mid);
    build(mid + 1, hi);
  }

  void search(const Vector3d& q, std::size_t self, std::size_t k, std::priority_queue<double>& heap,
              std::size_t lo, std::size_t hi) const {
    auto offer = [&](std::size_t idx) {
      if (idx == self) return;
      const double d2 = (pts_[idx] - q).squaredNorm();
      if (heap.size() < k) {
        heap.push(d2);
      } else if (d2 < heap.top()) {
        heap.pop();
        heap.push(d2);
      }
    };
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) offer(index_[i]);
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    const int axis = axes_[mid];
    const double diff = q[axis] - pts_[index_[mid]][axis];
    offer(index_[mid]);
    const bool left_first = diff < 0.0;
    if (left_first)
      search(q, self, k, heap, lo, mid);
    else
      search(q, self, k, heap, mid + 1, hi);
    if (heap.size() < k || diff * diff <= heap.top()) {
      if (left_first)
        search(q, self, k, heap, mid + 1, hi);
      else
        search(q, self, k, heap, lo, mid);
    }
  }

  const std::vector<Vector3d>& pts_;
  std::vector<std::size_t> index_;
  std::vector<std::int8_t> axes_;
};

double median_of_sorted(const std::vector<double>& v) {
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<double> estimate_world_radii(const std::vector<Vector3d>& positions, int k) {
  if (k < 1) throw InvalidArgument("estimate_world_radii: k must be positive");
  if (positions.size() < std::size_t(k) + 1)
    throw InvalidArgument("estimate_world_radii: need at least k + 1 points");
  Vector3d mn = positions.front(), mx = positions.front();
  for (const auto& p : positions) {
    mn = mn.cwiseMin(p);
    mx = mx.cwiseMax(p);
  }
  const double diag = (mx - mn).norm();
  const double floor_radius = diag > 0.0 ? 1e-9 * diag : 1e-9;

  const KdTree tree(positions);
  std::vector<double> radii(positions.size());
  std::vector<double> dist;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    dist = tree.knn(i, k);
    for (double& d : dist) d = std::sqrt(d);
    radii[i] = std::max(median_of_sorted(dist), floor_radius);
  }
  return radii;
}

DescriptorSpace choose_descriptor_space(double radiance_ratio) {
  if (!(radiance_ratio >= 1.0)) throw InvalidArgument("choose_descriptor_space: ratio must be >= 1");
  return radiance_ratio > 400.0 ? DescriptorSpace::Logarithmic : DescriptorSpace::Linear;
}

namespace {
const double kLogClamp = std::log(kMaxLinearDescriptor);
}

double descriptor_to_linear(double d, DescriptorSpace space) {
  if (space == DescriptorSpace::Linear) return d;
  return d >= kLogClamp ? kMaxLinearDescriptor : std::exp(d);
}

double descriptor_to_linear_derivative(double d, DescriptorSpace space) {
  if (space == DescriptorSpace::Linear) return 1.0;
  return d >= kLogClamp ? 0.0 : std::exp(d);
}

double linear_to_descriptor(double v, DescriptorSpace space) {
  return space == DescriptorSpace::Linear ? v : std::log(v);
}

// ---------------------------------------------------------------------------
// Morton ordering

namespace {
std::uint64_t spread_bits(std::uint32_t v) {
  std::uint64_t x = v & 0x1fffff;
  x = (x | x << 32) & 0x1f00000000ffffull;
  x = (x | x << 16) & 0x1f0000ff0000ffull;
  x = (x | x << 8) & 0x100f00f00f00f00full;
  x = (x | x << 4) & 0x10c30c30c30c30c3ull;
  x = (x | x << 2) & 0x1249249249249249ull;
  return x;
}
}  // namespace

std::uint64_t morton_code(std::uint32_t x, std::uint32_t y, std::uint32_t z) {
  return spread_bits(x) | (spread_bits(y) << 1) | (spread_bits(z) << 2);
}

PointCloud permute(const PointCloud& cloud, std::span<const std::size_t> perm) {
  PointCloud out;
  out.space = cloud.space;
  const std::size_t n = perm.size();
  out.positions.resize(n);
  out.descriptors.resize(Eigen::Index(n), cloud.descriptors.cols());
  if (cloud.has_normals()) out.normals.resize(n);
  if (!cloud.world_radii.empty()) out.world_radii.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = perm[i];
    out.positions[i] = cloud.positions[src];
    out.descriptors.row(Eigen::Index(i)) = cloud.descriptors.row(Eigen::Index(src));
    if (cloud.has_normals()) out.normals[i] = cloud.normals[src];
    if (!cloud.world_radii.empty()) out.world_radii[i] = cloud.world_radii[src];
  }
  return out;
}

MortonReorder morton_reorder(const PointCloud& cloud, std::size_t block_size, std::uint64_t seed) {
  const std::size_t n = cloud.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (n > 1) {
    Vector3d mn = cloud.positions.front(), mx = cloud.positions.front();
    for (const auto& p : cloud.positions) {
      mn = mn.cwiseMin(p);
      mx = mx.cwiseMax(p);
    }
    const double extent = std::max((mx - mn).maxCoeff(), std::numeric_limits<double>::min());
    constexpr double kCells = 1024.0;
    std::vector<std::uint64_t> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Vector3d q = ((cloud.positions[i] - mn) / extent * kCells).cwiseMin(kCells - 1.0);
      codes[i] = morton_code(std::uint32_t(q.x()), std::uint32_t(q.y()), std::uint32_t(q.z()));
    }
    std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return codes[a] < codes[b]; });

    if (block_size > 0 && block_size < n) {
      const std::size_t blocks = (n + block_size - 1) / block_size;
      std::vector<std::size_t> order(blocks);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(seed);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<std::size_t> shuffled;
      shuffled.reserve(n);
      for (std::size_t b : order) {
        const std::size_t lo = b * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        shuffled.insert(shuffled.end(), perm.begin() + lo, perm.begin() + hi);
      }
      perm = std::move(shuffled);
    }
  }
  return {permute(cloud, perm), std::move(perm)};
}

// ---------------------------------------------------------------------------
// Synthetic scenes

SynthShape parse_shape(const std::string& name) {
  if (name == "plane") return SynthShape::Plane;
  if (name == "sphere") return SynthShape::Sphere;
  if (name == "wall-pair" || name == "wallpair" || name == "wall_pair") return SynthShape::WallPair;
  throw InvalidArgument("unknown shape `" + name + "` (expected plane, sphere, wall-pair)");
}

std::string shape_name(SynthShape shape) {
  switch (shape) {
    case SynthShape::Plane: return "plane";
    case SynthShape::Sphere: return "sphere";
    case SynthShape::WallPair: return "wall-pair";
  }
  return "plane";
}

Pose look_at(const Vector3d& centre, const Vector3d& target) {
  const Vector3d z = (target - centre).normalized();
  Vector3d down = Vector3d::UnitY();
  if (std::abs(z.dot(down)) > 0.999) down = Vector3d::UnitZ();
  const Vector3d y = (down - down.dot(z) * z).normalized();
  const Vector3d x = y.cross(z);
  Pose p;
  p.R.row(0) = x.transpose();
  p.R.row(1) = y.transpose();
  p.R.row(2) = z.transpose();
  p.t = -(p.R * centre);
  return p;
}

namespace {

// Smooth procedural albedo on surface coordinates (u, v) in [0, 1]^2.
Vector3d texture_colour(double u, double v) {
  const double tau = 2.0 * M_PI;
  return {0.5 + 0.3 * std::sin(tau * 2.0 * u) * std::cos(tau * 1.5 * v) + 0.1 * std::sin(tau * 5.0 * v),
          0.5 + 0.3 * std::sin(tau * 1.7 * (u + v)) + 0.1 * std::cos(tau * 4.0 * u),
          0.5 + 0.3 * std::cos(tau * 2.5 * u - tau * v) + 0.1 * std::sin(tau * 3.0 * (u - v))};
}

}  // namespace

SynthScene synth_scene(const SynthSpec& spec) {
  if (spec.point_count < 1) throw InvalidArgument("synth_scene: point count must be >= 1");
  if (spec.descriptor_dim < 3) throw InvalidArgument("synth_scene: descriptor dimension must be >= 3");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SynthScene out;
  PointCloud& cloud = out.cloud;
  const std::size_t n = spec.point_count;
  cloud.space = spec.space;
  cloud.positions.resize(n);
  cloud.normals.resize(n);
  cloud.descriptors.resize(Eigen::Index(n), spec.descriptor_dim);
  std::vector<Vector2d> surface(n);

  switch (spec.shape) {
    case SynthShape::Plane:
      for (std::size_t i = 0; i < n; ++i) {
        const double u = uni(rng), v = uni(rng);
        cloud.positions[i] = {u - 0.5, v - 0.5, 0.0};
        cloud.normals[i] = -Vector3d::UnitZ();
        surface[i] = {u, v};
      }
      break;
    case SynthShape::Sphere:
      for (std::size_t i = 0; i < n; ++i) {
        Vector3d d(gauss(rng), gauss(rng), gauss(rng));
        while (d.norm() < 1e-12) d = Vector3d(gauss(rng), gauss(rng), gauss(rng));
        d.normalize();
        cloud.positions[i] = 0.5 * d;
        cloud.normals[i] = d;
        surface[i] = {std::atan2(d.x(), d.z()) / (2.0 * M_PI) + 0.5, std::asin(d.y()) / M_PI + 0.5};
      }
      break;
    case SynthShape::WallPair: {
      constexpr double kNear = 0.35, kFar = 0.6, kFarDepth = 0.4;
      const double near_share = (kNear * kNear) / (kNear * kNear + kFar * kFar);
      out.layer_of_point.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const bool near = uni(rng) < near_share;
        const double half = near ? kNear : kFar;
        const double u = uni(rng), v = uni(rng);
        cloud.positions[i] = {(2.0 * u - 1.0) * half, (2.0 * v - 1.0) * half, near ? 0.0 : kFarDepth};
        cloud.normals[i] = -Vector3d::UnitZ();
        surface[i] = near ? Vector2d(u, v) : Vector2d(0.5 * u + 0.25, 0.5 * v + 0.25);
        out.layer_of_point[i] = near ? 0 : 1;
      }
      break;
    }
  }

  const double log_range = std::log(std::max(spec.radiance_range, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    Vector3d c = texture_colour(surface[i].x(), surface[i].y());
    if (spec.shape == SynthShape::WallPair && out.layer_of_point[i] == 1) c = Vector3d(1.0, 1.0, 1.0) - 0.6 * c;
    // Brightness spans the requested radiance range across the surface.
    const double gain = std::exp(log_range * (surface[i].x() - 0.5) - 0.5 * log_range);
    const Eigen::Index r = Eigen::Index(i);
    for (int ch = 0; ch < 3; ++ch)
      cloud.descriptors(r, ch) = linear_to_descriptor(std::max(c[ch], 0.02) * (log_range > 0 ? gain : 1.0), spec.space);
    for (int ch = 3; ch < spec.descriptor_dim; ++ch) cloud.descriptors(r, ch) = 0.01 * gauss(rng);
  }
  if (spec.estimate_radii && n >= 5) cloud.world_radii = estimate_world_radii(cloud.positions, 4);

  out.env = EnvironmentMap(16, spec.descriptor_dim);
  for (int y = 0; y < out.env.height(); ++y)
    for (int x = 0; x < out.env.width(); ++x) {
      const Vector3d d = env_texel_direction(out.env, x, y);
      auto px = out.env.texels.pixel(x, y);
      px[0] = 0.25 + 0.1 * d.y();
      px[1] = 0.3 + 0.1 * d.x();
      px[2] = 0.45 - 0.1 * d.y();
      for (int ch = 3; ch < spec.descriptor_dim; ++ch) px[ch] = 0.0;
    }

  CameraModel cam;
  cam.kind = spec.camera;
  cam.width = spec.width;
  cam.height = spec.height;
  cam.fx = cam.fy = spec.focal;
  cam.cx = 0.5 * (spec.width - 1);
  cam.cy = 0.5 * (spec.height - 1);
  out.cameras.emplace(0, cam);

  const double az_span = 50.0 * M_PI / 180.0;
  const double el = 8.0 * M_PI / 180.0;
  for (int f = 0; f < spec.frame_count; ++f) {
    const double s = spec.frame_count > 1 ? double(f) / (spec.frame_count - 1) - 0.5 : 0.0;
    const double az = az_span * s;
    const double e = (f % 2 == 0 ? 1.0 : -1.0) * el;
    const Vector3d centre =
        spec.camera_distance * Vector3d(std::sin(az) * std::cos(e), std::sin(e), -std::cos(az) * std::cos(e));
    Frame frame;
    frame.id = f;
    frame.camera_id = 0;
    frame.pose = look_at(centre, Vector3d::Zero());
    out.frames.push_back(std::move(frame));
  }
  return out;
}

}  // namespace pixsplat
