#pragma once

#include <nlohmann/json.hpp>

#include "carmreg/volume.hpp"

#include <optional>

// Analytic voxel phantoms with known fiducial geometry. Voxels are classified
// by their center point, and box-like shapes are snapped to the voxel grid so
// chord lengths through them are exact.

namespace carmreg {

struct PhantomResult {
  Volume volume;
  std::optional<LabelMap> labels;
  FiducialSet fiducials;
};

namespace detail {

inline void check_keys(const nlohmann::json& params, std::initializer_list<const char*> allowed,
                       const std::string& kind) {
  for (const auto& item : params.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (item.key() == a) ok = true;
    if (!ok)
      throw std::invalid_argument("phantom " + kind + ": unknown parameter \"" + item.key() + "\"");
  }
}

inline Volume grid_for_box(const Vec3& lo, const Vec3& hi, double voxel) {
  Volume v;
  for (int a = 0; a < 3; ++a) {
    v.n[a] = std::max(1, static_cast<int>(std::llround((hi[a] - lo[a]) / voxel)));
    v.spacing[a] = voxel;
    v.origin[a] = lo[a];
  }
  v.data.assign(v.voxel_count(), 0.0);
  return v;
}

inline void add_corners(FiducialSet& f, const std::string& prefix, const Vec3& lo, const Vec3& hi) {
  for (int c = 0; c < 8; ++c) {
    const Vec3 p(c & 1 ? hi.x() : lo.x(), c & 2 ? hi.y() : lo.y(), c & 4 ? hi.z() : lo.z());
    std::string name = prefix + "_corner_";
    name += (c & 1) ? 'p' : 'n';
    name += (c & 2) ? 'p' : 'n';
    name += (c & 4) ? 'p' : 'n';
    f.add(name, p);
  }
}

}  // namespace detail

/// kind = "uniform_cube" | "sphere" | "nested_spheres" | "two_boxes".
/// params is a JSON object; unknown keys are rejected. nested_spheres also
/// produces a label map (1 = inner, 2 = shell).
inline PhantomResult make_phantom(const std::string& kind, const nlohmann::json& params = {}) {
  if (!params.is_null() && !params.is_object())
    throw std::invalid_argument("phantom params must be a JSON object");
  const auto get = [&](const char* key, double dflt) {
    return params.is_object() ? params.value(key, dflt) : dflt;
  };

  PhantomResult out;

  if (kind == "uniform_cube") {
    detail::check_keys(params, {"edge_mm", "mu", "voxel_mm"}, kind);
    const double edge = get("edge_mm", 10.0);
    const double mu = get("mu", 0.02);
    const double voxel = get("voxel_mm", 1.0);
    if (!(edge > 0) || !(voxel > 0) || mu < 0)
      throw std::invalid_argument("uniform_cube: edge/voxel must be > 0 and mu >= 0");
    const Vec3 half(0.5 * edge, 0.5 * edge, 0.5 * edge);
    out.volume = detail::grid_for_box(-half, half, voxel);
    std::fill(out.volume.data.begin(), out.volume.data.end(), mu);
    out.fiducials.add("center", Vec3::Zero());
    detail::add_corners(out.fiducials, "cube", -half, half);
    return out;
  }

  if (kind == "sphere") {
    detail::check_keys(params, {"radius_mm", "mu", "voxel_mm", "center_offset_mm", "box_mu", "box_edge_mm"},
                       kind);
    const double radius = get("radius_mm", 20.0);
    const double mu = get("mu", 0.02);
    const double voxel = get("voxel_mm", 1.0);
    const double box_mu = get("box_mu", 0.0);
    Vec3 off = Vec3::Zero();
    if (params.is_object() && params.contains("center_offset_mm")) {
      const auto& o = params.at("center_offset_mm");
      off = Vec3(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
    }
    if (!(radius > 0) || !(voxel > 0) || mu < 0 || box_mu < 0)
      throw std::invalid_argument("sphere: radius/voxel must be > 0 and attenuations >= 0");
    double edge = get("box_edge_mm", 0.0);
    if (edge <= 0.0) edge = 2.0 * (radius + off.cwiseAbs().maxCoeff() + 4.0 * voxel);
    const Vec3 half(0.5 * edge, 0.5 * edge, 0.5 * edge);
    for (int a = 0; a < 3; ++a)
      if (std::abs(off[a]) + radius > half[a])
        throw std::invalid_argument("sphere: sphere does not fit inside the box");
    out.volume = detail::grid_for_box(-half, half, voxel);
    Volume& v = out.volume;
    const double r2 = radius * radius;
    for (int k = 0; k < v.n[2]; ++k)
      for (int j = 0; j < v.n[1]; ++j)
        for (int i = 0; i < v.n[0]; ++i) {
          const Vec3 c = v.origin + Vec3((i + 0.5) * voxel, (j + 0.5) * voxel, (k + 0.5) * voxel);
          v.at(i, j, k) = ((c - off).squaredNorm() <= r2) ? mu : box_mu;
        }
    out.fiducials.add("sphere_center", off);
    const char* axes = "xyz";
    for (int a = 0; a < 3; ++a) {
      Vec3 d = Vec3::Zero();
      d[a] = radius;
      out.fiducials.add(std::string("sphere_p") + axes[a], off + d);
      out.fiducials.add(std::string("sphere_n") + axes[a], off - d);
    }
    detail::add_corners(out.fiducials, "box", -half, half);
    return out;
  }

  if (kind == "nested_spheres") {
    detail::check_keys(params, {"r_inner_mm", "r_outer_mm", "mu_inner", "mu_outer", "voxel_mm"}, kind);
    const double ri = get("r_inner_mm", 10.0);
    const double ro = get("r_outer_mm", 20.0);
    const double mu_in = get("mu_inner", 0.01);
    const double mu_out = get("mu_outer", 0.02);
    const double voxel = get("voxel_mm", 0.5);
    if (!(ri > 0) || !(ro > ri) || !(voxel > 0) || mu_in < 0 || mu_out < 0)
      throw std::invalid_argument("nested_spheres: need 0 < r_inner < r_outer, voxel > 0, mus >= 0");
    const double edge = 2.0 * (ro + 4.0 * voxel);
    const Vec3 half(0.5 * edge, 0.5 * edge, 0.5 * edge);
    out.volume = detail::grid_for_box(-half, half, voxel);
    LabelMap lm;
    lm.n = out.volume.n;
    lm.spacing = out.volume.spacing;
    lm.origin = out.volume.origin;
    lm.labels.assign(out.volume.voxel_count(), 0);
    lm.names = {{1, "inner"}, {2, "shell"}};
    Volume& v = out.volume;
    for (int k = 0; k < v.n[2]; ++k)
      for (int j = 0; j < v.n[1]; ++j)
        for (int i = 0; i < v.n[0]; ++i) {
          const Vec3 c = v.origin + Vec3((i + 0.5) * voxel, (j + 0.5) * voxel, (k + 0.5) * voxel);
          const double d2 = c.squaredNorm();
          if (d2 <= ri * ri) {
            v.at(i, j, k) = mu_in;
            lm.at(i, j, k) = 1;
          } else if (d2 <= ro * ro) {
            v.at(i, j, k) = mu_out;
            lm.at(i, j, k) = 2;
          }
        }
    out.labels = std::move(lm);
    out.fiducials.add("center", Vec3::Zero());
    const char* axes = "xyz";
    for (int a = 0; a < 3; ++a) {
      Vec3 d = Vec3::Zero();
      d[a] = ro;
      out.fiducials.add(std::string("outer_p") + axes[a], d);
      out.fiducials.add(std::string("outer_n") + axes[a], -d);
    }
    return out;
  }

  if (kind == "two_boxes") {
    detail::check_keys(params, {"size_mm", "gap_mm", "mu", "voxel_mm"}, kind);
    const double size = get("size_mm", 20.0);
    const double gap = get("gap_mm", 10.0);
    const double mu = get("mu", 0.02);
    const double voxel = get("voxel_mm", 1.0);
    if (!(size > 0) || gap < 0 || !(voxel > 0) || mu < 0)
      throw std::invalid_argument("two_boxes: size/voxel must be > 0, gap/mu >= 0");
    const double hx = 0.5 * gap + size + 2.0 * voxel;
    const Vec3 half(hx, 0.5 * size + 2.0 * voxel, 0.5 * size + 2.0 * voxel);
    out.volume = detail::grid_for_box(-half, half, voxel);
    Volume& v = out.volume;
    for (int k = 0; k < v.n[2]; ++k)
      for (int j = 0; j < v.n[1]; ++j)
        for (int i = 0; i < v.n[0]; ++i) {
          const Vec3 c = v.origin + Vec3((i + 0.5) * voxel, (j + 0.5) * voxel, (k + 0.5) * voxel);
          const double ax = std::abs(c.x());
          const bool in_x = ax >= 0.5 * gap && ax <= 0.5 * gap + size;
          const bool in_yz = std::abs(c.y()) <= 0.5 * size && std::abs(c.z()) <= 0.5 * size;
          if (in_x && in_yz) v.at(i, j, k) = mu;
        }
    const double cx = 0.5 * gap + 0.5 * size;
    out.fiducials.add("box_p_center", Vec3(cx, 0, 0));
    out.fiducials.add("box_n_center", Vec3(-cx, 0, 0));
    detail::add_corners(out.fiducials, "box_p", Vec3(0.5 * gap, -0.5 * size, -0.5 * size),
                        Vec3(0.5 * gap + size, 0.5 * size, 0.5 * size));
    detail::add_corners(out.fiducials, "box_n", Vec3(-0.5 * gap - size, -0.5 * size, -0.5 * size),
                        Vec3(-0.5 * gap, 0.5 * size, 0.5 * size));
    return out;
  }

  throw std::invalid_argument("unknown phantom kind \"" + kind + "\"");
}

}  // namespace carmreg
