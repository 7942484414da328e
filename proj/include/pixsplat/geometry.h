#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace pixsplat {

using Vector2d = Eigen::Vector2d;
using Vector3d = Eigen::Vector3d;
using Matrix3d = Eigen::Matrix3d;
using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix23d = Eigen::Matrix<double, 2, 3>;
using Matrix26d = Eigen::Matrix<double, 2, 6>;

// Rigid world-to-camera transform: x_cam = R * x_world + t.
struct Pose {
  Matrix3d R = Matrix3d::Identity();
  Vector3d t = Vector3d::Zero();

  static Pose identity() { return {}; }
  static Pose from_quaternion(const Eigen::Quaterniond& q, const Vector3d& t);

  Vector3d transform(const Vector3d& x) const { return R * x + t; }
  Pose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  Pose operator*(const Pose& o) const { return {R * o.R, R * o.t + t}; }

  // Camera centre in world coordinates.
  Vector3d centre() const { return -(R.transpose() * t); }

  bool is_valid(double tol = 1e-9) const;
  // Nearest rotation (polar decomposition); translation untouched.
  Pose orthonormalized() const;
};

// se(3) increment, ordered (translation, rotation).
struct PoseTangent {
  Vector6d xi = Vector6d::Zero();

  PoseTangent() = default;
  explicit PoseTangent(const Vector6d& v) : xi(v) {}
  Eigen::Ref<const Vector3d> translation() const { return xi.head<3>(); }
  Eigen::Ref<const Vector3d> rotation() const { return xi.tail<3>(); }
};

Matrix3d hat(const Vector3d& w);

// Exponential map se(3) -> SE(3). Throws InvalidArgument on non-finite input.
Pose se3_exp(const PoseTangent& xi);

// Left increment: exp(xi) * pose.
Pose apply_tangent(const PoseTangent& xi, const Pose& pose);

// Rotation angle of R in radians.
double rotation_angle(const Matrix3d& R);

enum class CameraKind { PinholeDistorted, FisheyeEquidistant };

constexpr int kIntrinsicCount = 8;  // fx, fy, cx, cy, k1..k4
using IntrinsicVector = Eigen::Matrix<double, kIntrinsicCount, 1>;
using Matrix2Kd = Eigen::Matrix<double, 2, kIntrinsicCount>;

struct CameraModel {
  CameraKind kind = CameraKind::PinholeDistorted;
  int width = 1;
  int height = 1;
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  std::array<double, 4> k{0.0, 0.0, 0.0, 0.0};

  // Throws InvalidArgument when fx/fy are not positive or the size is empty.
  void validate() const;

  IntrinsicVector intrinsics() const;
  void set_intrinsics(const IntrinsicVector& v);
};

struct Projection {
  Vector2d uv;  // continuous layer-0 pixel coordinates
  double z;     // camera depth (pinhole) or distance to the camera (fisheye)
};

// nullopt is the cull signal: the point is behind a pinhole camera (z <= 0)
// or at the centre of a fisheye camera.
std::optional<Projection> project(const CameraModel& cam, const Vector3d& Xc);

// Unit viewing direction in camera space. Throws ConvergenceFailure when the
// distortion cannot be inverted at uv.
Vector3d unproject(const CameraModel& cam, const Vector2d& uv);

// d(uv)/d(Xc); nullopt for points that are not projectable.
std::optional<Matrix23d> projection_jacobian(const CameraModel& cam, const Vector3d& Xc);

// Change of each intrinsic that moves the farthest image corner by about one
// pixel, in the order of CameraModel::intrinsics(). Optimizers step in units
// of this vector so one learning rate fits focal lengths and distortion.
IntrinsicVector intrinsic_step_scale(const CameraModel& cam);

// d(uv)/d(intrinsics) in the order of CameraModel::intrinsics().
std::optional<Matrix2Kd> intrinsics_jacobian(const CameraModel& cam, const Vector3d& Xc);

// d(uv)/d(xi) at xi = 0 for the left increment exp(xi) * pose.
std::optional<Matrix26d> pose_point_jacobian(const Pose& pose, const Vector3d& x_world,
                                             const CameraModel& cam);

// Camera file: `id kind width height fx fy cx cy k1 k2 k3 k4`, kind is
// `pinhole` or `fisheye`. Pose file: `image_id qw qx qy qz tx ty tz`.
std::map<int, CameraModel> read_cameras(const std::filesystem::path& path);
void write_cameras(const std::filesystem::path& path, const std::map<int, CameraModel>& cams);
std::map<int, Pose> read_poses(const std::filesystem::path& path);
void write_poses(const std::filesystem::path& path, const std::map<int, Pose>& poses);

}  // namespace pixsplat
