#pragma once

#include <nlohmann/json.hpp>

#include "carmreg/common.hpp"

#include <algorithm>
#include <optional>

// C-arm projective geometry: intrinsics, SE(3) poses with the rotate-then-offset
// translation convention, the Z-X-Y intrinsic euler parameterization, axis-angle
// and se(3) exponential maps, and perspective projection.

namespace carmreg {

// ---------------------------------------------------------------------------
// Intrinsics

/// Pinhole model of the source/detector pair. Distances in mm, sizes in pixels.
/// The detector sits at distance f along the camera +z axis; pixel (u, v) has
/// image-plane coordinates ((u + 0.5 - W/2)*sx - ox, (v + 0.5 - H/2)*sy - oy).
struct Intrinsics {
  double f = 0.0;    // focal length == source-to-detector distance, mm
  int h = 0;         // detector rows, px
  int w = 0;         // detector cols, px
  double sx = 1.0;   // pixel spacing along u, mm/px
  double sy = 1.0;   // pixel spacing along v, mm/px
  double ox = 0.0;   // principal point offset, mm
  double oy = 0.0;

  void validate() const {
    if (!(f > 0.0) || !std::isfinite(f)) throw std::invalid_argument("intrinsics: f must be > 0");
    if (h <= 0 || w <= 0) throw std::invalid_argument("intrinsics: detector size must be positive");
    if (!(sx > 0.0) || !(sy > 0.0)) throw std::invalid_argument("intrinsics: pixel spacing must be > 0");
    if (!std::isfinite(sx) || !std::isfinite(sy) || !std::isfinite(ox) || !std::isfinite(oy))
      throw std::invalid_argument("intrinsics: non-finite field");
  }

  /// Image-plane (mm) coordinate of the center of pixel column u.
  double image_x(double u) const { return (u + 0.5 - 0.5 * w) * sx - ox; }
  /// Image-plane (mm) coordinate of the center of pixel row v.
  double image_y(double v) const { return (v + 0.5 - 0.5 * h) * sy - oy; }

  /// Intrinsic matrix of the detector: image-plane mm -> pixels.
  Mat3 pki() const {
    Mat3 m = Mat3::Identity();
    m(0, 0) = 1.0 / sx;
    m(1, 1) = 1.0 / sy;
    m(0, 2) = 0.5 * w;
    m(1, 2) = 0.5 * h;
    return m;
  }

  /// Intrinsic matrix of the source: camera frame -> image plane.
  Mat3 ikc() const {
    Mat3 m = Mat3::Identity();
    m(0, 0) = f;
    m(1, 1) = f;
    m(0, 2) = ox;
    m(1, 2) = oy;
    return m;
  }

  /// Full calibration matrix K = pki * ikc.
  Mat3 K() const { return pki() * ikc(); }

  Mat3 K_inv() const { return K().inverse(); }

  bool operator==(const Intrinsics& o) const {
    return f == o.f && h == o.h && w == o.w && sx == o.sx && sy == o.sy && ox == o.ox && oy == o.oy;
  }
};

// ---------------------------------------------------------------------------
// Rotations

inline Mat3 rot_x(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << 1, 0, 0, 0, c, -s, 0, s, c;
  return m;
}

inline Mat3 rot_y(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << c, 0, s, 0, 1, 0, -s, 0, c;
  return m;
}

inline Mat3 rot_z(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return Vec3(m(2, 1), m(0, 2), m(1, 0)); }

// ---------------------------------------------------------------------------
// Pose

/// Rigid camera pose. camera_to_world() = [[R, R*t],[0,1]]: a camera-frame
/// point q maps to world as R*(q + t), so the camera center sits at R*t.
class Pose {
 public:
  Pose() : r_(Mat3::Identity()), t_(Vec3::Zero()) {}

  Pose(const Mat3& r, const Vec3& t) : r_(r), t_(t) { validate(); }

  /// Builds from a full homogeneous matrix [[R, m],[0,1]]; the stored
  /// translation is t = R^T * m.
  static Pose from_matrix(const Mat4& m) {
    if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
      throw std::invalid_argument("pose matrix: bottom row must be [0,0,0,1]");
    Mat3 r = m.topLeftCorner<3, 3>();
    Vec3 col = m.topRightCorner<3, 1>();
    return Pose(r, r.transpose() * col);
  }

  const Mat3& rotation() const { return r_; }
  const Vec3& translation() const { return t_; }

  Mat4 camera_to_world() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r_;
    m.topRightCorner<3, 1>() = r_ * t_;
    return m;
  }

  Mat4 world_to_camera() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r_.transpose();
    m.topRightCorner<3, 1>() = -t_;
    return m;
  }

  /// Camera-frame point -> world.
  Vec3 apply(const Vec3& q) const { return r_ * (q + t_); }

  /// World point -> camera frame.
  Vec3 apply_inverse(const Vec3& x) const { return r_.transpose() * x - t_; }

  /// Camera center in world coordinates.
  Vec3 center() const { return r_ * t_; }

  /// Composition matching camera_to_world(a * b) == a.camera_to_world() * b.camera_to_world().
  Pose operator*(const Pose& o) const {
    return Pose(r_ * o.r_, o.t_ + o.r_.transpose() * t_);
  }

  Pose inverse() const { return Pose(r_.transpose(), -(r_ * t_)); }

 private:
  void validate() const {
    if (!r_.allFinite() || !t_.allFinite()) throw std::invalid_argument("pose: non-finite entries");
    const double ortho = (r_.transpose() * r_ - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (ortho > 1e-9) throw std::invalid_argument("pose: rotation block is not orthonormal");
    if (r_.determinant() < 0.0) throw std::invalid_argument("pose: rotation block has negative determinant");
  }

  Mat3 r_;
  Vec3 t_;
};

// ---------------------------------------------------------------------------
// Euler parameterization (intrinsic Z-X-Y, C-arm convention)

/// C-arm pose parameters: angles in degrees (LAO/RAO, CRA/CAU, in-plane),
/// translation in mm. R = Rz(alpha) * Rx(beta) * Ry(gamma), t = (x, y, z).
struct EulerPose {
  double alpha_deg = 0.0;
  double beta_deg = 0.0;
  double gamma_deg = 0.0;
  double x_mm = 0.0;
  double y_mm = 0.0;
  double z_mm = 0.0;

  Vec6 as_vector() const {
    Vec6 v;
    v << alpha_deg, beta_deg, gamma_deg, x_mm, y_mm, z_mm;
    return v;
  }

  static EulerPose from_vector(const Vec6& v) {
    return EulerPose{v[0], v[1], v[2], v[3], v[4], v[5]};
  }
};

inline Mat3 euler_zxy_rotation(double alpha_deg, double beta_deg, double gamma_deg) {
  return rot_z(deg2rad(alpha_deg)) * rot_x(deg2rad(beta_deg)) * rot_y(deg2rad(gamma_deg));
}

inline Pose euler_to_pose(const EulerPose& e) {
  return Pose(euler_zxy_rotation(e.alpha_deg, e.beta_deg, e.gamma_deg),
              Vec3(e.x_mm, e.y_mm, e.z_mm));
}

struct EulerDecomposition {
  EulerPose euler;
  bool gimbal_lock = false;
};

/// Recovers Z-X-Y angles. At gimbal lock (|beta| = 90 deg) alpha and gamma are
/// not separable; the canonical branch gamma := 0 is returned and the flag set.
inline EulerDecomposition pose_to_euler(const Pose& p) {
  const Mat3& r = p.rotation();
  EulerDecomposition d;
  const double sb = std::clamp(r(2, 1), -1.0, 1.0);
  d.euler.beta_deg = rad2deg(std::asin(sb));
  if (std::abs(r(2, 1)) < 1.0 - 1e-10) {
    d.euler.alpha_deg = rad2deg(std::atan2(-r(0, 1), r(1, 1)));
    d.euler.gamma_deg = rad2deg(std::atan2(-r(2, 0), r(2, 2)));
  } else {
    d.gimbal_lock = true;
    d.euler.gamma_deg = 0.0;
    if (sb > 0.0)
      d.euler.alpha_deg = rad2deg(std::atan2(r(0, 2), r(0, 0)));
    else
      d.euler.alpha_deg = rad2deg(std::atan2(-r(0, 2), r(0, 0)));
  }
  const Vec3& t = p.translation();
  d.euler.x_mm = t.x();
  d.euler.y_mm = t.y();
  d.euler.z_mm = t.z();
  return d;
}

// ---------------------------------------------------------------------------
// Axis-angle and se(3)

inline Mat3 so3_exp(const Vec3& w) {
  const double th2 = w.squaredNorm();
  const double th = std::sqrt(th2);
  const Mat3 wx = skew(w);
  double a, b;
  if (th < 1e-5) {
    a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0;
    b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
  } else {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  return Mat3::Identity() + a * wx + b * (wx * wx);
}

inline Vec3 so3_log(const Mat3& r) {
  const double cos_th = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double th = std::acos(cos_th);
  if (th < 1e-7) {
    // vee of the skew part; exact to O(th^3).
    return vee(0.5 * (r - r.transpose()));
  }
  if (kPi - th < 1e-5) {
    // Near-pi branch: axis from the dominant diagonal of the symmetric part.
    const double b = (1.0 - cos_th);  // (1 - cos)/th^2 * th^2
    Vec3 w2;
    for (int i = 0; i < 3; ++i) w2[i] = std::max(0.0, (r(i, i) - cos_th) / b) * th * th;
    int k = 0;
    if (w2[1] > w2[k]) k = 1;
    if (w2[2] > w2[k]) k = 2;
    Vec3 w = Vec3::Zero();
    w[k] = std::sqrt(w2[k]);
    const double denom = 2.0 * (b / (th * th)) * w[k];
    for (int i = 0; i < 3; ++i) {
      if (i == k) continue;
      w[i] = (r(i, k) + r(k, i)) / denom;
    }
    // Orient along the asymmetric part when it is not vanishing.
    const Vec3 asym = vee(0.5 * (r - r.transpose()));
    if (asym.dot(w) < 0.0) w = -w;
    return w;
  }
  return (th / (2.0 * std::sin(th))) * vee(r - r.transpose());
}

inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double th2 = w.squaredNorm();
  const double th = std::sqrt(th2);
  const Mat3 wx = skew(w);
  double b, c;
  if (th < 1e-5) {
    b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
    c = 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0;
  } else {
    b = (1.0 - std::cos(th)) / th2;
    c = (th - std::sin(th)) / (th2 * th);
  }
  return Mat3::Identity() + b * wx + c * (wx * wx);
}

inline Mat3 so3_left_jacobian_inv(const Vec3& w) {
  const double th2 = w.squaredNorm();
  const double th = std::sqrt(th2);
  const Mat3 wx = skew(w);
  double c;
  if (th < 1e-5) {
    c = 1.0 / 12.0 + th2 / 720.0 + th2 * th2 * (1.0 / 30240.0);
  } else {
    c = (1.0 - 0.5 * th * std::sin(th) / (1.0 - std::cos(th))) / th2;
  }
  return Mat3::Identity() - 0.5 * wx + c * (wx * wx);
}

/// Twist ordering: (omega_x, omega_y, omega_z, nu_x, nu_y, nu_z).
inline Pose se3_exp(const Vec6& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 nu = xi.tail<3>();
  const Mat3 r = so3_exp(w);
  const Vec3 m = so3_left_jacobian(w) * nu;  // translation column of the matrix
  return Pose(r, r.transpose() * m);
}

inline Vec6 se3_log(const Pose& p) {
  const Vec3 w = so3_log(p.rotation());
  const Vec3 m = p.rotation() * p.translation();
  Vec6 xi;
  xi.head<3>() = w;
  xi.tail<3>() = so3_left_jacobian_inv(w) * m;
  return xi;
}

/// Adjoint of the pose as a map on twists: Ad * xi has matrix M * hat(xi) * M^-1.
inline Mat6 adjoint(const Pose& p) {
  const Mat3& r = p.rotation();
  const Vec3 m = r * p.translation();
  Mat6 ad = Mat6::Zero();
  ad.topLeftCorner<3, 3>() = r;
  ad.bottomRightCorner<3, 3>() = r;
  ad.bottomLeftCorner<3, 3>() = skew(m) * r;
  return ad;
}

/// Right-local tangent of the euler chart: column j is the twist xi with
/// euler_to_pose(e + h*e_j) ~= euler_to_pose(e) * se3_exp(xi * h). Angle
/// columns are per degree, translation columns per mm.
inline Mat6 euler_param_jacobian(const EulerPose& e) {
  const double a = deg2rad(e.alpha_deg), b = deg2rad(e.beta_deg), g = deg2rad(e.gamma_deg);
  const Mat3 rz = rot_z(a), rx = rot_x(b), ry = rot_y(g);
  const Mat3 r = rz * rx * ry;
  const Vec3 t(e.x_mm, e.y_mm, e.z_mm);

  const double ca = std::cos(a), sa = std::sin(a);
  const double cb = std::cos(b), sb = std::sin(b);
  const double cg = std::cos(g), sg = std::sin(g);
  Mat3 dz, dx, dy;
  dz << -sa, -ca, 0, ca, -sa, 0, 0, 0, 0;
  dx << 0, 0, 0, 0, -sb, -cb, 0, cb, -sb;
  dy << -sg, 0, cg, 0, 0, 0, -cg, 0, -sg;

  const Mat3 dr[3] = {dz * rx * ry, rz * dx * ry, rz * rx * dy};

  Mat6 j = Mat6::Zero();
  for (int k = 0; k < 3; ++k) {
    const Vec3 wk = vee(r.transpose() * dr[k]) * (kPi / 180.0);
    j.block<3, 1>(0, k) = wk;
    j.block<3, 1>(3, k) = wk.cross(t);
  }
  for (int k = 0; k < 3; ++k) j(3 + k, 3 + k) = 1.0;
  return j;
}

/// Fixed reorientation aligning the pinhole depth axis (+z) with the world +y
/// axis: with this pose composed on the right, euler poses whose translation is
/// dominated by a negative y place the source at -y looking through the world
/// origin, which is the isocentric C-arm table convention the pose presets use.
inline Pose carm_mount() {
  return Pose(rot_x(-0.5 * kPi), Vec3::Zero());
}

// ---------------------------------------------------------------------------
// Projection

/// 3x4 perspective projection Pi = K [R^T | -t], world -> homogeneous pixels.
inline Mat34 projection_from(const Intrinsics& k, const Pose& p) {
  Mat34 rt;
  rt.leftCols<3>() = p.rotation().transpose();
  rt.col(3) = -p.translation();
  return k.K() * rt;
}

struct ProjectedPoints {
  std::vector<Vec2> px;           // continuous pixel coordinates
  std::vector<uint8_t> in_front;  // depth > 1e-9 after transform
};

inline ProjectedPoints project_points(const Mat34& pi, const std::vector<Vec3>& pts) {
  ProjectedPoints out;
  out.px.reserve(pts.size());
  out.in_front.reserve(pts.size());
  for (const Vec3& x : pts) {
    Eigen::Vector4d xh(x.x(), x.y(), x.z(), 1.0);
    Vec3 h = pi * xh;
    if (std::abs(h.z()) > 1e-9) {
      out.px.emplace_back(h.x() / h.z(), h.y() / h.z());
      out.in_front.push_back(h.z() > 0.0 ? 1 : 0);
    } else {
      out.px.emplace_back(std::numeric_limits<double>::quiet_NaN(),
                          std::numeric_limits<double>::quiet_NaN());
      out.in_front.push_back(0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose distance

struct PoseDistance {
  double rot_deg = 0.0;  // geodesic rotation angle
  double arc_mm = 0.0;   // (f/2) * rotation angle in radians
  double xyz_mm = 0.0;   // translation parameter distance
  double dgeo_mm = 0.0;  // sqrt(arc^2 + xyz^2)
};

inline PoseDistance pose_distance(const Pose& a, const Pose& b, double f) {
  PoseDistance d;
  const double c = std::clamp(((a.rotation().transpose() * b.rotation()).trace() - 1.0) * 0.5, -1.0, 1.0);
  const double rot_rad = std::acos(c);
  d.rot_deg = rad2deg(rot_rad);
  d.arc_mm = 0.5 * f * rot_rad;
  d.xyz_mm = (a.translation() - b.translation()).norm();
  d.dgeo_mm = std::hypot(d.arc_mm, d.xyz_mm);
  return d;
}

// ---------------------------------------------------------------------------
// Pose JSON

struct PoseJson {
  Pose pose;
  std::string parameterization;  // "euler_zxy_deg" or "matrix"
  std::optional<EulerPose> euler;
  bool partial = false;
};

inline PoseJson parse_pose_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("pose json: expected an object");
  const std::string param = j.value("parameterization", std::string());
  PoseJson out;
  out.parameterization = param;
  out.partial = j.value("partial", false);
  if (param == "euler_zxy_deg") {
    const auto& rot = j.at("rotation");
    const auto& tr = j.at("translation");
    if (!rot.is_array() || rot.size() != 3 || !tr.is_array() || tr.size() != 3)
      throw std::invalid_argument("pose json: rotation/translation must be 3-arrays");
    EulerPose e{rot[0].get<double>(), rot[1].get<double>(), rot[2].get<double>(),
                tr[0].get<double>(), tr[1].get<double>(), tr[2].get<double>()};
    out.euler = e;
    out.pose = euler_to_pose(e);
  } else if (param == "matrix") {
    const auto& m = j.at("matrix");
    if (!m.is_array() || m.size() != 4) throw std::invalid_argument("pose json: matrix must be 4x4");
    Mat4 mm;
    for (int r = 0; r < 4; ++r) {
      if (!m[r].is_array() || m[r].size() != 4)
        throw std::invalid_argument("pose json: matrix must be 4x4");
      for (int c = 0; c < 4; ++c) mm(r, c) = m[r][c].get<double>();
    }
    out.pose = Pose::from_matrix(mm);
  } else {
    throw std::invalid_argument("pose json: unknown parameterization \"" + param + "\"");
  }
  return out;
}

inline PoseJson load_pose_json(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw io_error("pose json parse error in " + path.string() + ": " + e.what());
  }
  return parse_pose_json(j);
}

inline nlohmann::json pose_to_json(const EulerPose& e, bool partial = false) {
  nlohmann::json j;
  j["parameterization"] = "euler_zxy_deg";
  j["rotation"] = {e.alpha_deg, e.beta_deg, e.gamma_deg};
  j["translation"] = {e.x_mm, e.y_mm, e.z_mm};
  if (partial) j["partial"] = true;
  return j;
}

inline nlohmann::json pose_to_json(const Pose& p) {
  nlohmann::json j;
  j["parameterization"] = "matrix";
  const Mat4 m = p.camera_to_world();
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  j["matrix"] = rows;
  return j;
}

// ---------------------------------------------------------------------------
// Intrinsics JSON

inline Intrinsics parse_intrinsics_json(const nlohmann::json& j) {
  Intrinsics k;
  try {
    k.f = j.at("focal_length_mm").get<double>();
    k.h = j.at("detector_height_px").get<int>();
    k.w = j.at("detector_width_px").get<int>();
    k.sx = j.at("pixel_spacing_mm").at(0).get<double>();
    k.sy = j.at("pixel_spacing_mm").at(1).get<double>();
    if (j.contains("optical_center_mm")) {
      k.ox = j.at("optical_center_mm").at(0).get<double>();
      k.oy = j.at("optical_center_mm").at(1).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("intrinsics json: ") + e.what());
  }
  k.validate();
  return k;
}

inline Intrinsics load_intrinsics_json(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw io_error("intrinsics json parse error in " + path.string() + ": " + e.what());
  }
  return parse_intrinsics_json(j);
}

inline nlohmann::json intrinsics_to_json(const Intrinsics& k) {
  nlohmann::json j;
  j["focal_length_mm"] = k.f;
  j["detector_height_px"] = k.h;
  j["detector_width_px"] = k.w;
  j["pixel_spacing_mm"] = {k.sx, k.sy};
  j["optical_center_mm"] = {k.ox, k.oy};
  return j;
}

}  // namespace carmreg
