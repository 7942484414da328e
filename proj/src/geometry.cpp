#include "pixsplat/geometry.h"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <Eigen/SVD>

#include "pixsplat/errors.h"

namespace pixsplat {

Pose Pose::from_quaternion(const Eigen::Quaterniond& q, const Vector3d& t) {
  return {q.normalized().toRotationMatrix(), t};
}

bool Pose::is_valid(double tol) const {
  if (!R.allFinite() || !t.allFinite()) return false;
  if ((R * R.transpose() - Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(R.determinant() - 1.0) <= tol;
}

Pose Pose::orthonormalized() const {
  Eigen::JacobiSVD<Matrix3d> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3d U = svd.matrixU();
  const Matrix3d V = svd.matrixV();
  if ((U * V.transpose()).determinant() < 0) U.col(2) *= -1.0;
  return {U * V.transpose(), t};
}

Matrix3d hat(const Vector3d& w) {
  Matrix3d K;
  K << 0.0, -w.z(), w.y(),  //
      w.z(), 0.0, -w.x(),   //
      -w.y(), w.x(), 0.0;
  return K;
}

Pose se3_exp(const PoseTangent& tangent) {
  if (!tangent.xi.allFinite()) throw InvalidArgument("se3_exp: non-finite tangent");
  const Vector3d rho = tangent.translation();
  const Vector3d phi = tangent.rotation();
  const double theta2 = phi.squaredNorm();
  const double theta = std::sqrt(theta2);

  // R = I + a K + b K^2, V = I + b K + c K^2
  double a, b, c;
  if (theta < 1e-6) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Matrix3d K = hat(phi);
  const Matrix3d K2 = K * K;
  Pose out;
  out.R = Matrix3d::Identity() + a * K + b * K2;
  out.t = (Matrix3d::Identity() + b * K + c * K2) * rho;
  return out;
}

Pose apply_tangent(const PoseTangent& xi, const Pose& pose) { return se3_exp(xi) * pose; }

double rotation_angle(const Matrix3d& R) {
  const Vector3d axis(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (R.trace() - 1.0));
}

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgument("camera: focal lengths must be positive");
  if (width < 1 || height < 1) throw InvalidArgument("camera: image size must be at least 1x1");
}

IntrinsicVector CameraModel::intrinsics() const {
  IntrinsicVector v;
  v << fx, fy, cx, cy, k[0], k[1], k[2], k[3];
  return v;
}

void CameraModel::set_intrinsics(const IntrinsicVector& v) {
  fx = v[0];
  fy = v[1];
  cx = v[2];
  cy = v[3];
  for (int i = 0; i < 4; ++i) k[i] = v[4 + i];
}

IntrinsicVector intrinsic_step_scale(const CameraModel& cam) {
  const double xc = std::max(std::max(cam.cx, cam.width - 1 - cam.cx), 1.0) / cam.fx;
  const double yc = std::max(std::max(cam.cy, cam.height - 1 - cam.cy), 1.0) / cam.fy;
  const double rc = std::hypot(xc, yc);
  IntrinsicVector s;
  s << 1.0 / xc, 1.0 / yc, 1.0, 1.0, 0, 0, 0, 0;
  // k_j moves the corner by fx * rc^(2j+1) per unit.
  double r = rc;
  for (int j = 0; j < 4; ++j) {
    r *= rc * rc;
    s[4 + j] = 1.0 / (cam.fx * r);
  }
  return s;
}

namespace {

// 1 + k1 r2 + k2 r2^2 + k3 r2^3 + k4 r2^4 and its derivative in r2.
struct Radial {
  double d;
  double dd;
};

Radial radial(const std::array<double, 4>& k, double r2) {
  const double d = 1.0 + r2 * (k[0] + r2 * (k[1] + r2 * (k[2] + r2 * k[3])));
  const double dd = k[0] + r2 * (2.0 * k[1] + r2 * (3.0 * k[2] + r2 * 4.0 * k[3]));
  return {d, dd};
}

bool has_distortion(const CameraModel& cam) {
  return cam.k[0] != 0.0 || cam.k[1] != 0.0 || cam.k[2] != 0.0 || cam.k[3] != 0.0;
}

// Equidistant mapping theta -> theta * (1 + k1 th^2 + ... + k4 th^8) and derivative.
struct Fisheye {
  double g;
  double dg;
};

Fisheye fisheye_map(const std::array<double, 4>& k, double theta) {
  const double t2 = theta * theta;
  const double poly = 1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3])));
  const double dpoly = 1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])));
  return {theta * poly, dpoly};
}

constexpr int kMaxUndistortIterations = 20;
constexpr double kUndistortTolerance = 1e-6;

}  // namespace

std::optional<Projection> project(const CameraModel& cam, const Vector3d& Xc) {
  if (cam.kind == CameraKind::PinholeDistorted) {
    if (!(Xc.z() > 0.0)) return std::nullopt;
    const double x = Xc.x() / Xc.z();
    const double y = Xc.y() / Xc.z();
    const double d = radial(cam.k, x * x + y * y).d;
    return Projection{{cam.fx * x * d + cam.cx, cam.fy * y * d + cam.cy}, Xc.z()};
  }
  const double n = Xc.norm();
  if (!(n > 0.0)) return std::nullopt;
  const double rho = std::hypot(Xc.x(), Xc.y());
  if (rho == 0.0) {
    if (Xc.z() < 0.0) return std::nullopt;
    return Projection{{cam.cx, cam.cy}, n};
  }
  const double theta = std::atan2(rho, Xc.z());
  const double s = fisheye_map(cam.k, theta).g / rho;
  return Projection{{cam.fx * s * Xc.x() + cam.cx, cam.fy * s * Xc.y() + cam.cy}, n};
}

Vector3d unproject(const CameraModel& cam, const Vector2d& uv) {
  const Vector2d xd((uv.x() - cam.cx) / cam.fx, (uv.y() - cam.cy) / cam.fy);
  if (cam.kind == CameraKind::PinholeDistorted) {
    Vector2d x = xd;
    if (has_distortion(cam)) {
      // Damped fixed point x <- xd / d(|x|^2); the damping halves on any
      // increase of the residual.
      double damping = 1.0;
      double residual = (x * radial(cam.k, x.squaredNorm()).d - xd).norm();
      for (int it = 0; it < kMaxUndistortIterations && residual > 1e-14; ++it) {
        const Vector2d target = xd / radial(cam.k, x.squaredNorm()).d;
        const Vector2d next = x + damping * (target - x);
        const double next_residual = (next * radial(cam.k, next.squaredNorm()).d - xd).norm();
        if (next_residual > residual) {
          damping *= 0.5;
          continue;
        }
        x = next;
        residual = next_residual;
      }
      if (!(residual <= kUndistortTolerance) || !x.allFinite())
        throw ConvergenceFailure("unproject: distortion inversion did not converge");
    }
    return Vector3d(x.x(), x.y(), 1.0).normalized();
  }

  const double rn = xd.norm();
  if (rn == 0.0) return Vector3d::UnitZ();
  double theta = rn;
  double residual = std::abs(fisheye_map(cam.k, theta).g - rn);
  double damping = 1.0;
  for (int it = 0; it < kMaxUndistortIterations && residual > 1e-14; ++it) {
    const double poly = fisheye_map(cam.k, theta).g / theta;
    const double next = theta + damping * (rn / poly - theta);
    const double next_residual = std::abs(fisheye_map(cam.k, next).g - rn);
    if (next_residual > residual) {
      damping *= 0.5;
      continue;
    }
    theta = next;
    residual = next_residual;
  }
  if (!(residual <= kUndistortTolerance) || !(theta >= 0.0) || theta > M_PI)
    throw ConvergenceFailure("unproject: fisheye inversion did not converge");
  const double st = std::sin(theta);
  return Vector3d(st * xd.x() / rn, st * xd.y() / rn, std::cos(theta));
}

std::optional<Matrix23d> projection_jacobian(const CameraModel& cam, const Vector3d& Xc) {
  Matrix23d J;
  if (cam.kind == CameraKind::PinholeDistorted) {
    if (!(Xc.z() > 0.0)) return std::nullopt;
    const double iz = 1.0 / Xc.z();
    const double x = Xc.x() * iz;
    const double y = Xc.y() * iz;
    const auto [d, dd] = radial(cam.k, x * x + y * y);
    Eigen::Matrix2d dn;  // d(distorted)/d(normalized)
    dn << d + 2.0 * x * x * dd, 2.0 * x * y * dd,  //
        2.0 * x * y * dd, d + 2.0 * y * y * dd;
    Matrix23d dx;
    dx << iz, 0.0, -x * iz,  //
        0.0, iz, -y * iz;
    J = Eigen::Vector2d(cam.fx, cam.fy).asDiagonal() * dn * dx;
    return J;
  }

  const double n2 = Xc.squaredNorm();
  if (!(n2 > 0.0)) return std::nullopt;
  const double rho = std::hypot(Xc.x(), Xc.y());
  if (rho <= 1e-12 * std::sqrt(n2)) {
    if (Xc.z() <= 0.0) return std::nullopt;
    J << cam.fx / Xc.z(), 0.0, 0.0,  //
        0.0, cam.fy / Xc.z(), 0.0;
    return J;
  }
  const double theta = std::atan2(rho, Xc.z());
  const auto [g, dg] = fisheye_map(cam.k, theta);
  const double s = g / rho;
  const Eigen::RowVector3d dtheta(Xc.z() * Xc.x() / (rho * n2), Xc.z() * Xc.y() / (rho * n2), -rho / n2);
  const Eigen::RowVector3d drho(Xc.x() / rho, Xc.y() / rho, 0.0);
  const Eigen::RowVector3d ds = dg / rho * dtheta - g / (rho * rho) * drho;
  J.row(0) = cam.fx * (s * Eigen::RowVector3d::UnitX() + Xc.x() * ds);
  J.row(1) = cam.fy * (s * Eigen::RowVector3d::UnitY() + Xc.y() * ds);
  return J;
}

std::optional<Matrix2Kd> intrinsics_jacobian(const CameraModel& cam, const Vector3d& Xc) {
  Matrix2Kd J = Matrix2Kd::Zero();
  J(0, 2) = 1.0;
  J(1, 3) = 1.0;
  if (cam.kind == CameraKind::PinholeDistorted) {
    if (!(Xc.z() > 0.0)) return std::nullopt;
    const double x = Xc.x() / Xc.z();
    const double y = Xc.y() / Xc.z();
    const double r2 = x * x + y * y;
    const double d = radial(cam.k, r2).d;
    J(0, 0) = x * d;
    J(1, 1) = y * d;
    double p = r2;
    for (int j = 0; j < 4; ++j, p *= r2) {
      J(0, 4 + j) = cam.fx * x * p;
      J(1, 4 + j) = cam.fy * y * p;
    }
    return J;
  }
  const double n = Xc.norm();
  if (!(n > 0.0)) return std::nullopt;
  const double rho = std::hypot(Xc.x(), Xc.y());
  if (rho == 0.0) {
    if (Xc.z() < 0.0) return std::nullopt;
    return J;
  }
  const double theta = std::atan2(rho, Xc.z());
  const double s = fisheye_map(cam.k, theta).g / rho;
  J(0, 0) = s * Xc.x();
  J(1, 1) = s * Xc.y();
  double p = theta * theta * theta;
  for (int j = 0; j < 4; ++j, p *= theta * theta) {
    J(0, 4 + j) = cam.fx * Xc.x() / rho * p;
    J(1, 4 + j) = cam.fy * Xc.y() / rho * p;
  }
  return J;
}

std::optional<Matrix26d> pose_point_jacobian(const Pose& pose, const Vector3d& x_world,
                                             const CameraModel& cam) {
  const Vector3d Xc = pose.transform(x_world);
  const auto Jp = projection_jacobian(cam, Xc);
  if (!Jp) return std::nullopt;
  // d(Xc)/d(xi) = [I | -hat(Xc)] for the left increment.
  Eigen::Matrix<double, 3, 6> dX;
  dX.leftCols<3>().setIdentity();
  dX.rightCols<3>() = -hat(Xc);
  return Matrix26d(*Jp * dX);
}

namespace {

template <class Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string first;
    if (!(ss >> first)) continue;
    ss.clear();
    ss.str(line);
    fn(ss, lineno);
  }
}

[[noreturn]] void bad_line(const std::filesystem::path& path, int lineno, const std::string& what) {
  throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + what);
}

}  // namespace

std::map<int, CameraModel> read_cameras(const std::filesystem::path& path) {
  std::map<int, CameraModel> cams;
  for_each_record(path, [&](std::istringstream& ss, int lineno) {
    int id;
    std::string kind;
    CameraModel cam;
    if (!(ss >> id >> kind >> cam.width >> cam.height >> cam.fx >> cam.fy >> cam.cx >> cam.cy >> cam.k[0] >>
          cam.k[1] >> cam.k[2] >> cam.k[3]))
      bad_line(path, lineno, "expected `id kind width height fx fy cx cy k1 k2 k3 k4`");
    if (kind == "pinhole")
      cam.kind = CameraKind::PinholeDistorted;
    else if (kind == "fisheye")
      cam.kind = CameraKind::FisheyeEquidistant;
    else
      bad_line(path, lineno, "unknown camera kind `" + kind + "`");
    try {
      cam.validate();
    } catch (const InvalidArgument& e) {
      bad_line(path, lineno, e.what());
    }
    if (!cams.emplace(id, cam).second) bad_line(path, lineno, "duplicate camera id");
  });
  return cams;
}

void write_cameras(const std::filesystem::path& path, const std::map<int, CameraModel>& cams) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "# id kind width height fx fy cx cy k1 k2 k3 k4\n" << std::setprecision(17);
  for (const auto& [id, c] : cams) {
    out << id << ' ' << (c.kind == CameraKind::PinholeDistorted ? "pinhole" : "fisheye") << ' ' << c.width << ' '
        << c.height << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.k[0] << ' ' << c.k[1]
        << ' ' << c.k[2] << ' ' << c.k[3] << '\n';
  }
}

std::map<int, Pose> read_poses(const std::filesystem::path& path) {
  std::map<int, Pose> poses;
  for_each_record(path, [&](std::istringstream& ss, int lineno) {
    int id;
    double qw, qx, qy, qz;
    Vector3d t;
    if (!(ss >> id >> qw >> qx >> qy >> qz >> t.x() >> t.y() >> t.z()))
      bad_line(path, lineno, "expected `image_id qw qx qy qz tx ty tz`");
    const Eigen::Quaterniond q(qw, qx, qy, qz);
    if (!(q.norm() > 0.0)) bad_line(path, lineno, "zero quaternion");
    if (!poses.emplace(id, Pose::from_quaternion(q, t)).second) bad_line(path, lineno, "duplicate image id");
  });
  return poses;
}

void write_poses(const std::filesystem::path& path, const std::map<int, Pose>& poses) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "# image_id qw qx qy qz tx ty tz (world-to-camera)\n" << std::setprecision(17);
  for (const auto& [id, p] : poses) {
    const Eigen::Quaterniond q(p.R);
    out << id << ' ' << q.w() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << p.t.x() << ' ' << p.t.y()
        << ' ' << p.t.z() << '\n';
  }
}

}  // namespace pixsplat
