// Virtual cameras on a viewing sphere, pinhole intrinsics and the 4x4
// projective matrices consumed by the camera-aware attention branch.
//
// Conventions: poses are camera-to-world; a camera looks along -z of its own
// frame with +y up (OpenGL axes). Pixels are obtained by plain perspective
// division of K * (T^-1 * X), so the same 4x4 matrix used by the attention
// encoding also projects points.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvattn::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Thrown by project_point when the point is not strictly in front of the camera.
class BehindCameraError : public std::domain_error {
 public:
  explicit BehindCameraError(double depth)
      : std::domain_error("point is behind the camera (depth " + std::to_string(depth) + ")"),
        depth_(depth) {}
  double depth() const noexcept { return depth_; }

 private:
  double depth_;
};

inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

struct ViewSpec {
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  double radius = 2.0;

  /// Validates and wraps azimuth into [0, 360).
  static ViewSpec make(double azimuth_deg, double elevation_deg, double radius) {
    if (!(radius > 0.0) || !std::isfinite(radius)) {
      throw DomainError("view radius must be positive, got " + std::to_string(radius));
    }
    if (!(elevation_deg >= -90.0 && elevation_deg <= 90.0)) {
      throw DomainError("elevation must lie in [-90, 90], got " + std::to_string(elevation_deg));
    }
    if (!std::isfinite(azimuth_deg)) throw DomainError("azimuth must be finite");
    double az = std::fmod(azimuth_deg, 360.0);
    if (az < 0.0) az += 360.0;
    if (az >= 360.0) az = 0.0;
    return ViewSpec{az, elevation_deg, radius};
  }
};

struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Mat4 matrix() const {
    Mat4 t = Mat4::Identity();
    t.topLeftCorner<3, 3>() = rotation;
    t.topRightCorner<3, 1>() = translation;
    return t;
  }

  /// World-to-camera transform [R^T, -R^T t].
  Mat4 inverse_matrix() const {
    Mat4 t = Mat4::Identity();
    t.topLeftCorner<3, 3>() = rotation.transpose();
    t.topRightCorner<3, 1>() = -rotation.transpose() * translation;
    return t;
  }

  Vec3 to_camera(const Vec3& x_world) const { return rotation.transpose() * (x_world - translation); }
  Vec3 to_world(const Vec3& x_cam) const { return rotation * x_cam + translation; }
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  double width = 1.0;
  double height = 1.0;

  Mat3 matrix() const {
    Mat3 k = Mat3::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }

  /// Same camera expressed in image-size units (width = height = 1).
  Intrinsics normalized() const {
    return Intrinsics{fx / width, fy / height, cx / width, cy / height, 1.0, 1.0};
  }

  bool contains(double u, double v) const { return u >= 0.0 && u < width && v >= 0.0 && v < height; }
};

struct ProjectiveMatrix {
  Mat4 m = Mat4::Identity();

  ProjectiveMatrix inverse() const { return ProjectiveMatrix{m.inverse()}; }

  /// Rescaled to |det| = 1. Right-composition by a scalar is a gauge, so
  /// relative transforms are unchanged.
  ProjectiveMatrix unit_determinant() const {
    const double det = std::abs(m.determinant());
    return ProjectiveMatrix{m / std::pow(det, 0.25)};
  }
};

inline Mat3 rotation_y(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 r;
  r << c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c;
  return r;
}

inline Mat3 rotation_x(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 r;
  r << 1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c;
  return r;
}

/// Camera on the sphere of radius d: R = R_y(azimuth) R_x(elevation), t = R [0, 0, d]^T.
inline CameraPose build_virtual_camera(const ViewSpec& spec) {
  if (!(spec.radius > 0.0)) {
    throw DomainError("view radius must be positive, got " + std::to_string(spec.radius));
  }
  CameraPose pose;
  pose.rotation = rotation_y(deg_to_rad(spec.azimuth_deg)) * rotation_x(deg_to_rad(spec.elevation_deg));
  pose.translation = pose.rotation * Vec3(0.0, 0.0, spec.radius);
  return pose;
}

inline Intrinsics build_intrinsics(double width, double height, double fov_h_deg) {
  if (!(width > 0.0) || !(height > 0.0)) throw DomainError("image size must be positive");
  if (!(fov_h_deg > 0.0 && fov_h_deg < 180.0)) {
    throw DomainError("horizontal field of view must lie in (0, 180), got " + std::to_string(fov_h_deg));
  }
  const double f = (width / 2.0) / std::tan(deg_to_rad(fov_h_deg) / 2.0);
  return Intrinsics{f, f, width / 2.0, height / 2.0, width, height};
}

/// blockdiag(K, 1) * T^-1.
inline ProjectiveMatrix projective_matrix(const CameraPose& pose, const Intrinsics& intr) {
  Mat4 k4 = Mat4::Identity();
  k4.topLeftCorner<3, 3>() = intr.matrix();
  ProjectiveMatrix p{k4 * pose.inverse_matrix()};
  if (!(std::abs(p.m.determinant()) > 1e-12)) throw std::logic_error("projective matrix is singular");
  return p;
}

/// P_q * P_k^-1; invariant under right-composition of both inputs by one invertible G.
inline Mat4 relative_projective(const ProjectiveMatrix& p_q, const ProjectiveMatrix& p_k) {
  return p_q.m * p_k.m.inverse();
}

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

inline Projection project_point(const CameraPose& pose, const Intrinsics& intr, const Vec3& x_world) {
  const Vec3 xc = pose.to_camera(x_world);
  const double depth = -xc.z();
  if (!(depth > 0.0)) throw BehindCameraError(depth);
  const Vec3 h = intr.matrix() * xc;
  return Projection{h.x() / h.z(), h.y() / h.z(), depth};
}

/// Inverse of project_point for a known depth.
inline Vec3 unproject_pixel(const CameraPose& pose, const Intrinsics& intr, double u, double v, double depth) {
  const Vec3 ray = intr.matrix().inverse() * Vec3(u, v, 1.0);
  return pose.to_world(-depth * ray);
}

inline double reprojection_error(const CameraPose& pose, const Intrinsics& intr, const Vec3& x_world,
                                 const Vec2& observed_px) {
  const Projection p = project_point(pose, intr, x_world);
  return std::hypot(p.u - observed_px.x(), p.v - observed_px.y());
}

// ---------------------------------------------------------------------------
// View grids

struct ViewGrid {
  std::vector<ViewSpec> views;

  std::size_t size() const { return views.size(); }

  std::vector<CameraPose> poses() const {
    std::vector<CameraPose> out;
    out.reserve(views.size());
    for (const auto& v : views) out.push_back(build_virtual_camera(v));
    return out;
  }
};

/// Frontal view followed by 8 azimuths x elevations {-30, 0, +30, +60}: 33 views.
inline ViewGrid default_grid(double radius = 2.0) {
  ViewGrid g;
  g.views.push_back(ViewSpec::make(0.0, 0.0, radius));
  for (double el : {-30.0, 0.0, 30.0, 60.0}) {
    for (int a = 0; a < 8; ++a) g.views.push_back(ViewSpec::make(45.0 * a, el, radius));
  }
  return g;
}

/// One ring of `n` azimuths at a single elevation.
inline ViewGrid ring_grid(int n, double elevation_deg = 0.0, double radius = 2.0) {
  if (n < 1) throw DomainError("ring grid needs at least one view");
  ViewGrid g;
  for (int a = 0; a < n; ++a) g.views.push_back(ViewSpec::make(360.0 * a / n, elevation_deg, radius));
  return g;
}

/// Parses `azimuth_deg elevation_deg` per line; blank lines and '#' comments are skipped.
inline ViewGrid parse_view_grid(std::istream& in, double radius) {
  ViewGrid g;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    double az = 0.0, el = 0.0;
    if (!(ls >> az)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw DomainError("malformed view on line " + std::to_string(lineno));
    }
    std::string rest;
    if (!(ls >> el) || (ls >> rest)) throw DomainError("malformed view on line " + std::to_string(lineno));
    g.views.push_back(ViewSpec::make(az, el, radius));
  }
  if (g.views.empty()) throw DomainError("view grid is empty");
  return g;
}

inline ViewGrid read_view_grid(const std::string& path, double radius) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open view grid " + path);
  return parse_view_grid(in, radius);
}

inline std::string format_view_grid(const ViewGrid& g) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& v : g.views) os << v.azimuth_deg << ' ' << v.elevation_deg << '\n';
  return os.str();
}

}  // namespace mvattn::geometry
