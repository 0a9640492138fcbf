#pragma once

#include "carmreg/common.hpp"

#include <array>
#include <set>

// Attenuation volumes, label maps, fiducials, and HU conversion.
//
// Grid convention: data is stored x-fastest; voxel (i, j, k) occupies the axis
// aligned cell [origin + index*spacing, origin + (index+1)*spacing] and its
// center sits at origin + (index + 0.5)*spacing. The affine maps indices to
// cell corners.

namespace carmreg {

struct Volume {
  std::array<int, 3> n{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};  // mm, strictly positive
  Vec3 origin{0.0, 0.0, 0.0};   // mm, world position of the (0,0,0) cell corner
  std::vector<double> data;     // x fastest

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(n[0]) * (static_cast<std::size_t>(j) +
                                             static_cast<std::size_t>(n[1]) * static_cast<std::size_t>(k));
  }
  double at(int i, int j, int k) const { return data[index(i, j, k)]; }
  double& at(int i, int j, int k) { return data[index(i, j, k)]; }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(n[0]) * static_cast<std::size_t>(n[1]) *
           static_cast<std::size_t>(n[2]);
  }

  void validate() const {
    if (n[0] <= 0 || n[1] <= 0 || n[2] <= 0)
      throw std::invalid_argument("volume: dimensions must be positive");
    for (int a = 0; a < 3; ++a)
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw std::invalid_argument("volume: spacing must be > 0");
    if (!origin.allFinite()) throw std::invalid_argument("volume: non-finite origin");
    if (data.size() != voxel_count())
      throw std::invalid_argument("volume: data size does not match shape");
  }

  Mat4 affine() const {
    Mat4 a = Mat4::Identity();
    for (int i = 0; i < 3; ++i) a(i, i) = spacing[i];
    a.topRightCorner<3, 1>() = origin;
    return a;
  }

  Vec3 isocenter() const {
    return origin + 0.5 * Vec3(n[0] * spacing[0], n[1] * spacing[1], n[2] * spacing[2]);
  }

  Vec3 world_min() const { return origin; }
  Vec3 world_max() const {
    return origin + Vec3(n[0] * spacing[0], n[1] * spacing[1], n[2] * spacing[2]);
  }
};

struct LabelMap {
  std::array<int, 3> n{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<uint16_t> labels;  // x fastest
  std::vector<std::pair<uint16_t, std::string>> names;

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(n[0]) * (static_cast<std::size_t>(j) +
                                             static_cast<std::size_t>(n[1]) * static_cast<std::size_t>(k));
  }
  uint16_t at(int i, int j, int k) const { return labels[index(i, j, k)]; }
  uint16_t& at(int i, int j, int k) { return labels[index(i, j, k)]; }
};

struct FiducialSet {
  std::vector<std::string> names;
  std::vector<Vec3> points;  // world mm

  std::size_t size() const { return points.size(); }
  void add(std::string name, const Vec3& p) {
    names.push_back(std::move(name));
    points.push_back(p);
  }
};

/// mu = mu_water * (1 + HU/1000), clamped at zero. -1000 HU (air) maps to 0,
/// 0 HU (water) maps to mu_water.
inline double hu_to_attenuation(double hu, double mu_water = 0.02) {
  if (!(mu_water > 0.0)) throw std::invalid_argument("hu_to_attenuation: mu_water must be > 0");
  return std::max(0.0, mu_water * (1.0 + hu / 1000.0));
}

inline Volume hu_to_attenuation(const Volume& hu, double mu_water = 0.02) {
  if (!(mu_water > 0.0)) throw std::invalid_argument("hu_to_attenuation: mu_water must be > 0");
  Volume out = hu;
  for (double& v : out.data) v = hu_to_attenuation(v, mu_water);
  return out;
}

/// Zeroes every voxel whose label is not in keep. Grids must match exactly.
inline Volume mask_structures(const Volume& v, const LabelMap& lm, const std::set<int>& keep) {
  if (v.n != lm.n) throw std::invalid_argument("mask_structures: shape mismatch");
  if ((v.spacing - lm.spacing).cwiseAbs().maxCoeff() > 1e-9 ||
      (v.origin - lm.origin).cwiseAbs().maxCoeff() > 1e-9)
    throw std::invalid_argument("mask_structures: grid mismatch");
  Volume out = v;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (keep.count(static_cast<int>(lm.labels[i])) == 0) out.data[i] = 0.0;
  return out;
}

}  // namespace carmreg
