#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carmreg/common.hpp"
#include "carmreg/geometry.hpp"
#include "carmreg/volume.hpp"

namespace carmreg {

/// World point to pixel coordinates under a pose. The camera looks down its
/// own +z axis; points at or behind the source have no projection.
inline Vec2 project_to_pixels(const Pose& pose, const Intrinsics& k, const Vec3& x_world) {
  const Vec3 q = pose.apply_inverse(x_world);
  if (!(q[2] > 0.0)) throw std::domain_error("point does not project (behind the camera)");
  const double det_x = q[0] * k.f / q[2];
  const double det_y = q[1] * k.f / q[2];
  const double u = (det_x + k.ox) / k.sx + 0.5 * k.w - 0.5;
  const double v = (det_y + k.oy) / k.sy + 0.5 * k.h - 0.5;
  return {u, v};
}

namespace detail {

inline Vec2 project_named(const Pose& pose, const Intrinsics& k, const Vec3& x,
                          const std::string& name) {
  try {
    return project_to_pixels(pose, k, x);
  } catch (const std::domain_error&) {
    throw std::domain_error("fiducial \"" + name + "\" is behind the camera");
  }
}

inline void require_fiducials(const FiducialSet& x, const char* op) {
  if (x.size() == 0)
    throw std::invalid_argument(std::string(op) + ": fiducial set is empty");
}

}  // namespace detail

inline double mpe_px(const Pose& gt, const Pose& est, const Intrinsics& k, const FiducialSet& x) {
  detail::require_fiducials(x, "mpe");
  double sum = 0;
  for (std::size_t m = 0; m < x.size(); ++m) {
    const Vec2 a = detail::project_named(gt, k, x.points[m], x.names[m]);
    const Vec2 b = detail::project_named(est, k, x.points[m], x.names[m]);
    sum += (a - b).norm();
  }
  return sum / static_cast<double>(x.size());
}

/// Pixel-space mean projection distance reported in millimeters through the
/// geometric mean of the detector pixel pitches.
inline double mpe(const Pose& gt, const Pose& est, const Intrinsics& k, const FiducialSet& x) {
  return std::sqrt(k.sx * k.sy) * mpe_px(gt, est, k, x);
}

/// Projected pixel differences lifted back to detector millimeters: the pixel
/// offset is homogenized with last coordinate 0, so the principal point drops
/// out and f * K^-1 reduces to per-axis pixel pitch scaling.
inline double mrpe(const Pose& gt, const Pose& est, const Intrinsics& k, const FiducialSet& x) {
  detail::require_fiducials(x, "mrpe");
  double sum = 0;
  for (std::size_t m = 0; m < x.size(); ++m) {
    const Vec2 a = detail::project_named(gt, k, x.points[m], x.names[m]);
    const Vec2 b = detail::project_named(est, k, x.points[m], x.names[m]);
    sum += std::hypot(k.sx * (a[0] - b[0]), k.sy * (a[1] - b[1]));
  }
  return sum / static_cast<double>(x.size());
}

/// Mean distance between fiducials carried through the two poses as rigid
/// world transforms.
inline double mtre(const Pose& gt, const Pose& est, const FiducialSet& x) {
  detail::require_fiducials(x, "mtre");
  double sum = 0;
  for (std::size_t m = 0; m < x.size(); ++m) {
    sum += (gt.apply(x.points[m]) - est.apply(x.points[m])).norm();
  }
  return sum / static_cast<double>(x.size());
}

struct FiducialError {
  std::string name;
  double mpe_px = 0;
  double mpe_mm = 0;
  double mtre_mm = 0;
};

struct ErrorReport {
  double mpe_px = 0;
  double mpe_mm = 0;
  double mrpe_mm = 0;
  double rot_deg = 0;
  double arc_mm = 0;
  double xyz_mm = 0;
  double dgeo_mm = 0;
  double mtre_mm = 0;
  bool submillimeter = false;
  bool has_fiducials = false;
  std::vector<FiducialError> per_fiducial;
};

inline ErrorReport full_report(const Pose& gt, const Pose& est, const Intrinsics& k,
                               const FiducialSet* x = nullptr) {
  ErrorReport r;
  const PoseDistance d = pose_distance(gt, est, k.f);
  r.rot_deg = d.rot_deg;
  r.arc_mm = d.arc_mm;
  r.xyz_mm = d.xyz_mm;
  r.dgeo_mm = d.dgeo_mm;
  if (x != nullptr) {
    r.has_fiducials = true;
    r.mpe_px = mpe_px(gt, est, k, *x);
    r.mpe_mm = std::sqrt(k.sx * k.sy) * r.mpe_px;
    r.mrpe_mm = mrpe(gt, est, k, *x);
    r.mtre_mm = mtre(gt, est, *x);
    r.submillimeter = r.mtre_mm < 1.0;
    for (std::size_t m = 0; m < x->size(); ++m) {
      FiducialError fe;
      fe.name = x->names[m];
      const Vec2 a = detail::project_named(gt, k, x->points[m], x->names[m]);
      const Vec2 b = detail::project_named(est, k, x->points[m], x->names[m]);
      fe.mpe_px = (a - b).norm();
      fe.mpe_mm = std::sqrt(k.sx * k.sy) * fe.mpe_px;
      fe.mtre_mm = (gt.apply(x->points[m]) - est.apply(x->points[m])).norm();
      r.per_fiducial.push_back(fe);
    }
  }
  return r;
}

inline nlohmann::json report_to_json(const ErrorReport& r) {
  nlohmann::json j;
  j["rot_deg"] = r.rot_deg;
  j["arc_mm"] = r.arc_mm;
  j["xyz_mm"] = r.xyz_mm;
  j["dgeo_mm"] = r.dgeo_mm;
  if (r.has_fiducials) {
    j["mpe_px"] = r.mpe_px;
    j["mpe_mm"] = r.mpe_mm;
    j["mrpe_mm"] = r.mrpe_mm;
    j["mtre_mm"] = r.mtre_mm;
    j["submillimeter"] = r.submillimeter;
    j["per_fiducial"] = nlohmann::json::array();
    for (const FiducialError& fe : r.per_fiducial)
      j["per_fiducial"].push_back({{"name", fe.name},
                                   {"mpe_px", fe.mpe_px},
                                   {"mpe_mm", fe.mpe_mm},
                                   {"mtre_mm", fe.mtre_mm}});
  }
  return j;
}

}  // namespace carmreg
