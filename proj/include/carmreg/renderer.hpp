#pragma once

#include "carmreg/geometry.hpp"
#include "carmreg/image.hpp"
#include "carmreg/volume.hpp"

#include <atomic>
#include <thread>
#include <utility>

namespace carmreg {

enum class Chart { euler_zxy, se3 };
enum class RenderMethod { siddon, trilinear };

/// One ray per detector pixel, all emanating from the source point.
struct RayBundle {
  Vec3 source = Vec3::Zero();
  int width = 0;
  int height = 0;
  std::vector<Vec3> targets;  // row major, u fastest
  std::optional<Intrinsics> intrinsics;
  std::optional<Pose> pose;

  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(u);
  }
  const Vec3& target(int u, int v) const { return targets[index(u, v)]; }

  void validate() const {
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("rays: dimensions must be positive");
    if (targets.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
      throw std::invalid_argument("rays: target count does not match dimensions");
  }
};

/// Source at the camera center, one target per pixel center on the detector
/// plane a focal length away along the camera depth axis.
inline RayBundle make_rays(const Intrinsics& k, const Pose& p) {
  k.validate();
  RayBundle rays;
  rays.width = k.w;
  rays.height = k.h;
  rays.source = p.apply(Vec3::Zero());
  rays.targets.resize(static_cast<std::size_t>(k.w) * static_cast<std::size_t>(k.h));
  for (int v = 0; v < k.h; ++v)
    for (int u = 0; u < k.w; ++u)
      rays.targets[rays.index(u, v)] = p.apply(Vec3(k.image_x(u), k.image_y(v), k.f));
  rays.intrinsics = k;
  rays.pose = p;
  return rays;
}

/// Per-pixel derivative of the line integral with respect to the six pose
/// parameters: (alpha, beta, gamma, x, y, z) per (deg, mm) for the euler
/// chart, (omega, nu) for the right-local se(3) chart.
struct RenderGradient {
  int width = 0;
  int height = 0;
  Chart chart = Chart::se3;
  std::vector<Vec6> d_pixels;  // row major, u fastest

  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(u);
  }
  const Vec6& at(int u, int v) const { return d_pixels[index(u, v)]; }
};

inline int default_sample_count(const Volume& v) {
  return 2 * std::max({v.n[0], v.n[1], v.n[2]});
}

namespace detail {

template <class Fn>
inline void parallel_rows(int height, int threads, Fn&& fn) {
  const int t = std::min(std::max(1, threads), height);
  if (t == 1) {
    for (int v = 0; v < height; ++v) fn(v);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i)
    pool.emplace_back([&] {
      for (int v = next.fetch_add(1); v < height; v = next.fetch_add(1)) fn(v);
    });
  for (auto& th : pool) th.join();
}

struct SlabHit {
  bool hit = false;
  double entry = 0.0;
  double exit = 1.0;
  int axis_in = -1;   // -1 when entry stayed clamped at the segment start
  int axis_out = -1;  // -1 when exit stayed clamped at the segment end
};

/// Clips the segment s + alpha*(u), alpha in [0,1], against the volume box.
inline SlabHit slab_clip(const Volume& vol, const Vec3& s, const Vec3& u) {
  SlabHit r;
  double entry = 0.0, exit = 1.0;
  int ain = -1, aout = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = vol.origin[a];
    const double hi = lo + vol.n[a] * vol.spacing[a];
    if (std::abs(u[a]) <= 1e-12) {
      if (s[a] < lo || s[a] > hi) return r;
      continue;
    }
    double t0 = (lo - s[a]) / u[a];
    double t1 = (hi - s[a]) / u[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > entry) {
      entry = t0;
      ain = a;
    }
    if (t1 < exit) {
      exit = t1;
      aout = a;
    }
  }
  if (!(entry < exit)) return r;
  r.hit = true;
  r.entry = entry;
  r.exit = exit;
  r.axis_in = ain;
  r.axis_out = aout;
  return r;
}

/// Trilinear lookup at world point x. Points outside the volume box read 0;
/// points inside clamp their stencil into the voxel-center box, so a uniform
/// volume reads its constant value all the way to the faces. grad_mm, when
/// requested, is the spatial derivative of the implemented lookup (zero along
/// clamped axes).
inline double trilinear_sample(const Volume& vol, const Vec3& x, Vec3* grad_mm = nullptr) {
  double f[3];
  int i0[3];
  bool clamped[3];
  for (int a = 0; a < 3; ++a) {
    // Sample points come from the slab clip, so x is on the box up to
    // rounding. The clamp both replicates the border skin and absorbs that
    // rounding; returning 0 for dust just outside the face would make the
    // integrand discontinuous exactly where the end samples sit.
    double q = (x[a] - vol.origin[a]) / vol.spacing[a] - 0.5;
    clamped[a] = false;
    if (q <= 0.0) {
      q = 0.0;
      clamped[a] = true;
    }
    const double qmax = static_cast<double>(vol.n[a] - 1);
    if (q >= qmax) {
      q = qmax;
      clamped[a] = true;
    }
    int i = static_cast<int>(q);
    if (i > vol.n[a] - 2) i = std::max(0, vol.n[a] - 2);
    i0[a] = i;
    f[a] = q - static_cast<double>(i);
  }
  const int i1[3] = {std::min(i0[0] + 1, vol.n[0] - 1), std::min(i0[1] + 1, vol.n[1] - 1),
                     std::min(i0[2] + 1, vol.n[2] - 1)};
  const double c000 = vol.at(i0[0], i0[1], i0[2]);
  const double c100 = vol.at(i1[0], i0[1], i0[2]);
  const double c010 = vol.at(i0[0], i1[1], i0[2]);
  const double c110 = vol.at(i1[0], i1[1], i0[2]);
  const double c001 = vol.at(i0[0], i0[1], i1[2]);
  const double c101 = vol.at(i1[0], i0[1], i1[2]);
  const double c011 = vol.at(i0[0], i1[1], i1[2]);
  const double c111 = vol.at(i1[0], i1[1], i1[2]);
  const double fx = f[0], fy = f[1], fz = f[2];
  const double c00 = c000 + (c100 - c000) * fx;
  const double c10 = c010 + (c110 - c010) * fx;
  const double c01 = c001 + (c101 - c001) * fx;
  const double c11 = c011 + (c111 - c011) * fx;
  const double c0 = c00 + (c10 - c00) * fy;
  const double c1 = c01 + (c11 - c01) * fy;
  const double value = c0 + (c1 - c0) * fz;
  if (grad_mm) {
    const double gx = ((c100 - c000) * (1.0 - fy) + (c110 - c010) * fy) * (1.0 - fz) +
                      ((c101 - c001) * (1.0 - fy) + (c111 - c011) * fy) * fz;
    const double gy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
    const double gz = c1 - c0;
    (*grad_mm)[0] = clamped[0] ? 0.0 : gx / vol.spacing[0];
    (*grad_mm)[1] = clamped[1] ? 0.0 : gy / vol.spacing[1];
    (*grad_mm)[2] = clamped[2] ? 0.0 : gz / vol.spacing[2];
  }
  return value;
}

inline double siddon_pixel(const Volume& vol, const Vec3& s, const Vec3& tgt,
                           std::vector<double>& crossings) {
  const Vec3 u = tgt - s;
  const double len = u.norm();
  const SlabHit sl = slab_clip(vol, s, u);
  if (!sl.hit) return 0.0;
  crossings.clear();
  crossings.push_back(sl.entry);
  for (int a = 0; a < 3; ++a) {
    if (std::abs(u[a]) <= 1e-12) continue;
    const double inv = 1.0 / u[a];
    const double xa0 = s[a] + sl.entry * u[a];
    const double xa1 = s[a] + sl.exit * u[a];
    const double flo = (std::min(xa0, xa1) - vol.origin[a]) / vol.spacing[a];
    const double fhi = (std::max(xa0, xa1) - vol.origin[a]) / vol.spacing[a];
    long ilo = static_cast<long>(std::ceil(flo));
    long ihi = static_cast<long>(std::floor(fhi));
    ilo = std::max(ilo, 0L);
    ihi = std::min(ihi, static_cast<long>(vol.n[a]));
    for (long i = ilo; i <= ihi; ++i) {
      const double alpha = (vol.origin[a] + static_cast<double>(i) * vol.spacing[a] - s[a]) * inv;
      if (alpha > sl.entry && alpha < sl.exit) crossings.push_back(alpha);
    }
  }
  crossings.push_back(sl.exit);
  std::sort(crossings.begin(), crossings.end());
  double acc = 0.0;
  for (std::size_t m = 0; m + 1 < crossings.size(); ++m) {
    const double a0 = crossings[m];
    const double a1 = crossings[m + 1];
    if (!(a1 > a0)) continue;
    const double mid = 0.5 * (a0 + a1);
    int idx[3];
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double q = (s[a] + mid * u[a] - vol.origin[a]) / vol.spacing[a];
      const int i = static_cast<int>(std::floor(q));
      if (i < 0 || i >= vol.n[a]) {
        inside = false;
        break;
      }
      idx[a] = i;
    }
    if (inside) acc += (a1 - a0) * static_cast<double>(vol.at(idx[0], idx[1], idx[2]));
  }
  return len * acc;
}

}  // namespace detail

/// Exact line integral of the piecewise-constant volume along each ray.
inline Image render_siddon(const Volume& v, const RayBundle& rays, int threads = 1) {
  v.validate();
  rays.validate();
  Image img = Image::zeros(rays.width, rays.height);
  img.intrinsics = rays.intrinsics;
  img.pose = rays.pose;
  detail::parallel_rows(rays.height, threads, [&](int row) {
    std::vector<double> crossings;
    crossings.reserve(static_cast<std::size_t>(v.n[0] + v.n[1] + v.n[2] + 2));
    for (int u = 0; u < rays.width; ++u)
      img.at(u, row) = detail::siddon_pixel(v, rays.source, rays.target(u, row), crossings);
  });
  return img;
}

/// Trapezoid quadrature of the trilinearly interpolated volume over the
/// ray's bounding-box intersection, n_samples evenly spaced points.
inline Image render_trilinear(const Volume& v, const RayBundle& rays, int n_samples,
                              int threads = 1) {
  v.validate();
  rays.validate();
  if (n_samples < 2) throw std::invalid_argument("render_trilinear: need n_samples >= 2");
  Image img = Image::zeros(rays.width, rays.height);
  img.intrinsics = rays.intrinsics;
  img.pose = rays.pose;
  detail::parallel_rows(rays.height, threads, [&](int row) {
    for (int u = 0; u < rays.width; ++u) {
      const Vec3& tgt = rays.target(u, row);
      const Vec3 dir = tgt - rays.source;
      const double len = dir.norm();
      const detail::SlabHit sl = detail::slab_clip(v, rays.source, dir);
      if (!sl.hit) continue;
      const double h = (sl.exit - sl.entry) / static_cast<double>(n_samples - 1);
      double acc = 0.0;
      for (int m = 0; m < n_samples; ++m) {
        const double alpha = sl.entry + h * static_cast<double>(m);
        const double c = (m == 0 || m == n_samples - 1) ? 0.5 : 1.0;
        acc += c * detail::trilinear_sample(v, rays.source + alpha * dir);
      }
      img.at(u, row) = len * h * acc;
    }
  });
  return img;
}

/// Image identical to render_trilinear on make_rays(k, p), plus the exact
/// derivative of that discrete sum with respect to the pose chart. The euler
/// chart refuses gimbal-locked poses; the se3 chart is defined everywhere.
inline std::pair<Image, RenderGradient> render_trilinear_with_grad(const Volume& v,
                                                                   const Intrinsics& k,
                                                                   const Pose& p, int n_samples,
                                                                   Chart chart, int threads = 1) {
  v.validate();
  if (n_samples < 2) throw std::invalid_argument("render_trilinear: need n_samples >= 2");

  Mat6 pullback = Mat6::Identity();
  if (chart == Chart::euler_zxy) {
    const EulerDecomposition dec = pose_to_euler(p);
    if (dec.gimbal_lock)
      throw numerical_error(
          "euler chart is singular at |beta| = 90 deg; use the se3 chart for this pose");
    pullback = euler_param_jacobian(dec.euler);
  }

  const RayBundle rays = make_rays(k, p);
  Image img = Image::zeros(rays.width, rays.height);
  img.intrinsics = k;
  img.pose = p;
  RenderGradient grad;
  grad.width = rays.width;
  grad.height = rays.height;
  grad.chart = chart;
  grad.d_pixels.assign(rays.targets.size(), Vec6::Zero());

  const Mat3& r = p.rotation();
  // Right-local se(3) motion of the ray endpoints: rotations swing the
  // targets about the source, translations move both together.
  std::array<Vec3, 6> d_source, d_dir_base;
  for (int i = 0; i < 3; ++i) {
    d_source[i] = Vec3::Zero();
    d_source[3 + i] = r.col(i);
    d_dir_base[i] = Vec3::Zero();
    d_dir_base[3 + i] = Vec3::Zero();
  }

  detail::parallel_rows(rays.height, threads, [&](int row) {
    std::array<Vec3, 6> d_dir = d_dir_base;
    for (int u = 0; u < rays.width; ++u) {
      const Vec3& tgt = rays.target(u, row);
      const Vec3 dir = tgt - rays.source;
      const double len = dir.norm();
      const detail::SlabHit sl = detail::slab_clip(v, rays.source, dir);
      if (!sl.hit) continue;

      const Vec3 d_cam(k.image_x(u), k.image_y(row), k.f);
      for (int i = 0; i < 3; ++i) d_dir[i] = r * Vec3(Vec3::Unit(i).cross(d_cam));

      // entry/exit move only when an actual face, not the segment end,
      // bounds the sample range
      Vec6 d_entry = Vec6::Zero(), d_exit = Vec6::Zero();
      if (sl.axis_in >= 0) {
        const int a = sl.axis_in;
        for (int i = 0; i < 6; ++i)
          d_entry[i] = -(d_source[i][a] + sl.entry * d_dir[i][a]) / dir[a];
      }
      if (sl.axis_out >= 0) {
        const int a = sl.axis_out;
        for (int i = 0; i < 6; ++i)
          d_exit[i] = -(d_source[i][a] + sl.exit * d_dir[i][a]) / dir[a];
      }

      const double h = (sl.exit - sl.entry) / static_cast<double>(n_samples - 1);
      const Vec6 d_h = (d_exit - d_entry) / static_cast<double>(n_samples - 1);

      double acc = 0.0;
      Vec6 acc_g = Vec6::Zero();
      Vec3 grad_mm;
      for (int m = 0; m < n_samples; ++m) {
        const double alpha = sl.entry + h * static_cast<double>(m);
        const double c = (m == 0 || m == n_samples - 1) ? 0.5 : 1.0;
        const double value = detail::trilinear_sample(v, rays.source + alpha * dir, &grad_mm);
        acc += c * value;
        for (int i = 0; i < 6; ++i) {
          const double d_alpha = d_entry[i] + static_cast<double>(m) * d_h[i];
          const Vec3 dx = d_source[i] + alpha * d_dir[i] + d_alpha * dir;
          acc_g[i] += c * grad_mm.dot(dx);
        }
      }
      img.at(u, row) = len * h * acc;
      const Vec6 g = len * (d_h * acc + h * acc_g);
      grad.d_pixels[grad.index(u, row)] =
          (chart == Chart::euler_zxy) ? Vec6(pullback.transpose() * g) : g;
    }
  });
  return {std::move(img), std::move(grad)};
}

inline Image to_beer_lambert(const Image& img, double i0) {
  if (!(i0 > 0.0)) throw std::invalid_argument("to_beer_lambert: I0 must be > 0");
  Image out = img;
  for (double& p : out.pixels) p = i0 * std::exp(-p);
  return out;
}

inline Image from_beer_lambert(const Image& img, double i0) {
  if (!(i0 > 0.0)) throw std::invalid_argument("from_beer_lambert: I0 must be > 0");
  Image out = img;
  for (double& p : out.pixels) {
    if (!(p > 0.0)) throw numerical_error("from_beer_lambert: intensity must be > 0");
    p = -std::log(p / i0);
  }
  return out;
}

/// Renders only the voxels whose label is kept. Defined as the literal
/// mask-then-render composition so structure renders match it exactly.
inline Image render_structure(const Volume& v, const LabelMap& lm, const std::set<int>& keep,
                              const RayBundle& rays, RenderMethod method, int n_samples = -1,
                              int threads = 1) {
  const Volume masked = mask_structures(v, lm, keep);
  if (method == RenderMethod::siddon) return render_siddon(masked, rays, threads);
  if (n_samples < 0) n_samples = default_sample_count(v);
  return render_trilinear(masked, rays, n_samples, threads);
}

}  // namespace carmreg
