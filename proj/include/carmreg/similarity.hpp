#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "carmreg/common.hpp"
#include "carmreg/geometry.hpp"
#include "carmreg/image.hpp"
#include "carmreg/renderer.hpp"
#include "carmreg/volume.hpp"

namespace carmreg {

enum class Metric { ncc, mncc, gncc, mncc_gncc_mean };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::ncc: return "ncc";
    case Metric::mncc: return "mncc";
    case Metric::gncc: return "gncc";
    case Metric::mncc_gncc_mean: return "mncc_gncc_mean";
  }
  throw std::invalid_argument("metric_name: bad enum value");
}

inline Metric metric_from_string(const std::string& s) {
  if (s == "ncc") return Metric::ncc;
  if (s == "mncc") return Metric::mncc;
  if (s == "gncc") return Metric::gncc;
  if (s == "mncc_gncc_mean") return Metric::mncc_gncc_mean;
  throw std::invalid_argument("unknown metric \"" + s + "\"");
}

struct SimilarityConfig {
  Metric metric = Metric::mncc_gncc_mean;
  int pyramid_levels = 4;
  double epsilon = 1e-8;

  void validate() const {
    if (pyramid_levels < 1) throw std::invalid_argument("pyramid_levels must be >= 1");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  }
};

namespace detail {

struct NccStats {
  double mean_a = 0, mean_b = 0;
  double cov = 0, sd_a = 0, sd_b = 0;
  double value = 0;
  bool degenerate = false;
};

inline NccStats ncc_stats(const Image& a, const Image& b, double eps) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("ncc: image dimensions differ");
  const std::size_t n = a.pixels.size();
  if (n == 0) throw std::invalid_argument("ncc: empty image");
  NccStats s;
  for (std::size_t i = 0; i < n; ++i) {
    s.mean_a += a.pixels[i];
    s.mean_b += b.pixels[i];
  }
  s.mean_a /= static_cast<double>(n);
  s.mean_b /= static_cast<double>(n);
  double vaa = 0, vbb = 0, vab = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a.pixels[i] - s.mean_a;
    const double db = b.pixels[i] - s.mean_b;
    vaa += da * da;
    vbb += db * db;
    vab += da * db;
  }
  s.cov = vab / static_cast<double>(n);
  s.sd_a = std::sqrt(vaa / static_cast<double>(n));
  s.sd_b = std::sqrt(vbb / static_cast<double>(n));
  s.degenerate = s.sd_a == 0.0 && s.sd_b == 0.0;
  s.value = std::clamp(s.cov / (s.sd_a * s.sd_b + eps), -1.0, 1.0);
  return s;
}

// Factor-2 average pooling; odd extents replicate the last row or column so
// every output cell averages exactly four taps.
inline Image avg_pool2(const Image& in) {
  const int wo = (in.width + 1) / 2;
  const int ho = (in.height + 1) / 2;
  Image out = Image::zeros(wo, ho);
  for (int j = 0; j < ho; ++j)
    for (int i = 0; i < wo; ++i) {
      double s = 0;
      for (int dj = 0; dj < 2; ++dj)
        for (int di = 0; di < 2; ++di) {
          const int u = std::min(2 * i + di, in.width - 1);
          const int v = std::min(2 * j + dj, in.height - 1);
          s += in.at(u, v);
        }
      out.at(i, j) = 0.25 * s;
    }
  return out;
}

inline Image avg_pool2_adjoint(const Image& g_out, int in_width, int in_height) {
  Image g_in = Image::zeros(in_width, in_height);
  for (int j = 0; j < g_out.height; ++j)
    for (int i = 0; i < g_out.width; ++i) {
      const double g = 0.25 * g_out.at(i, j);
      for (int dj = 0; dj < 2; ++dj)
        for (int di = 0; di < 2; ++di) {
          const int u = std::min(2 * i + di, in_width - 1);
          const int v = std::min(2 * j + dj, in_height - 1);
          g_in.at(u, v) += g;
        }
    }
  return g_in;
}

inline int max_pyramid_levels(int width, int height) {
  const int m = std::min(width, height);
  int levels = 0;
  while ((1 << (levels + 1)) <= m) ++levels;
  return levels;  // largest L with 2^L <= min extent
}

constexpr double kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr double kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

inline Image sobel(const Image& in, const double (&k)[3][3]) {
  if (in.width < 3 || in.height < 3)
    throw std::invalid_argument("gncc: image smaller than the 3x3 kernel");
  Image out = Image::zeros(in.width, in.height);
  for (int v = 0; v < in.height; ++v)
    for (int u = 0; u < in.width; ++u) {
      double s = 0;
      for (int j = -1; j <= 1; ++j)
        for (int i = -1; i <= 1; ++i) {
          const int uu = std::clamp(u + i, 0, in.width - 1);
          const int vv = std::clamp(v + j, 0, in.height - 1);
          s += k[j + 1][i + 1] * in.at(uu, vv);
        }
      out.at(u, v) = s;
    }
  return out;
}

inline Image sobel_adjoint(const Image& g_out, const double (&k)[3][3]) {
  Image g_in = Image::zeros(g_out.width, g_out.height);
  for (int v = 0; v < g_out.height; ++v)
    for (int u = 0; u < g_out.width; ++u) {
      const double g = g_out.at(u, v);
      for (int j = -1; j <= 1; ++j)
        for (int i = -1; i <= 1; ++i) {
          const int uu = std::clamp(u + i, 0, g_out.width - 1);
          const int vv = std::clamp(v + j, 0, g_out.height - 1);
          g_in.at(uu, vv) += k[j + 1][i + 1] * g;
        }
    }
  return g_in;
}

// d ncc(a, b) / d a. The clamp in the value never binds beyond rounding
// (|cov| <= sd_a * sd_b by Cauchy-Schwarz), so the unclamped quotient is
// differentiated. A constant a contributes only through the first term.
inline Image ncc_grad_a(const Image& a, const Image& b, double eps) {
  const NccStats s = ncc_stats(a, b, eps);
  const double n = static_cast<double>(a.pixels.size());
  const double denom = s.sd_a * s.sd_b + eps;
  const double c2 = s.sd_a > 0.0 ? s.cov * s.sd_b / (s.sd_a * denom * denom) : 0.0;
  Image g = Image::zeros(a.width, a.height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    const double da = a.pixels[i] - s.mean_a;
    const double db = b.pixels[i] - s.mean_b;
    g.pixels[i] = (db / denom - c2 * da) / n;
  }
  return g;
}

}  // namespace detail

struct NccValue {
  double value = 0;
  bool degenerate = false;
};

inline NccValue ncc_full(const Image& a, const Image& b, double eps = 1e-8) {
  const detail::NccStats s = detail::ncc_stats(a, b, eps);
  return {s.degenerate ? 0.0 : s.value, s.degenerate};
}

inline double ncc(const Image& a, const Image& b, double eps = 1e-8) {
  return ncc_full(a, b, eps).value;
}

inline double mncc(const Image& a, const Image& b, int levels, double eps = 1e-8) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mncc: image dimensions differ");
  if (levels < 1) throw std::invalid_argument("mncc: levels must be >= 1");
  if (levels > detail::max_pyramid_levels(a.width, a.height))
    throw std::invalid_argument("mncc: " + std::to_string(levels) +
                                " levels exceed log2 of the smaller image extent");
  Image pa = a, pb = b;
  double sum = ncc(pa, pb, eps);
  for (int l = 1; l < levels; ++l) {
    pa = detail::avg_pool2(pa);
    pb = detail::avg_pool2(pb);
    sum += ncc(pa, pb, eps);
  }
  return sum / static_cast<double>(levels);
}

inline double gncc(const Image& a, const Image& b, double eps = 1e-8) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("gncc: image dimensions differ");
  const double gx = ncc(detail::sobel(a, detail::kSobelX), detail::sobel(b, detail::kSobelX), eps);
  const double gy = ncc(detail::sobel(a, detail::kSobelY), detail::sobel(b, detail::kSobelY), eps);
  return 0.5 * (gx + gy);
}

inline double combined(const Image& a, const Image& b, const SimilarityConfig& cfg) {
  cfg.validate();
  switch (cfg.metric) {
    case Metric::ncc: return ncc(a, b, cfg.epsilon);
    case Metric::mncc: return mncc(a, b, cfg.pyramid_levels, cfg.epsilon);
    case Metric::gncc: return gncc(a, b, cfg.epsilon);
    case Metric::mncc_gncc_mean:
      return 0.5 * (mncc(a, b, cfg.pyramid_levels, cfg.epsilon) + gncc(a, b, cfg.epsilon));
  }
  throw std::invalid_argument("combined: bad metric enum value");
}

inline Image mncc_grad_a(const Image& a, const Image& b, int levels, double eps = 1e-8) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mncc: image dimensions differ");
  if (levels < 1) throw std::invalid_argument("mncc: levels must be >= 1");
  if (levels > detail::max_pyramid_levels(a.width, a.height))
    throw std::invalid_argument("mncc: " + std::to_string(levels) +
                                " levels exceed log2 of the smaller image extent");
  std::vector<Image> pa{a}, pb{b};
  for (int l = 1; l < levels; ++l) {
    pa.push_back(detail::avg_pool2(pa.back()));
    pb.push_back(detail::avg_pool2(pb.back()));
  }
  const double inv = 1.0 / static_cast<double>(levels);
  Image acc = detail::ncc_grad_a(pa[levels - 1], pb[levels - 1], eps);
  for (auto& g : acc.pixels) g *= inv;
  for (int l = levels - 2; l >= 0; --l) {
    acc = detail::avg_pool2_adjoint(acc, pa[l].width, pa[l].height);
    const Image gl = detail::ncc_grad_a(pa[l], pb[l], eps);
    for (std::size_t i = 0; i < acc.pixels.size(); ++i) acc.pixels[i] += inv * gl.pixels[i];
  }
  return acc;
}

inline Image gncc_grad_a(const Image& a, const Image& b, double eps = 1e-8) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("gncc: image dimensions differ");
  const Image sxa = detail::sobel(a, detail::kSobelX);
  const Image sxb = detail::sobel(b, detail::kSobelX);
  const Image sya = detail::sobel(a, detail::kSobelY);
  const Image syb = detail::sobel(b, detail::kSobelY);
  Image gx = detail::ncc_grad_a(sxa, sxb, eps);
  Image gy = detail::ncc_grad_a(sya, syb, eps);
  for (auto& g : gx.pixels) g *= 0.5;
  for (auto& g : gy.pixels) g *= 0.5;
  Image out = detail::sobel_adjoint(gx, detail::kSobelX);
  const Image oy = detail::sobel_adjoint(gy, detail::kSobelY);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] += oy.pixels[i];
  return out;
}

inline Image combined_grad_a(const Image& a, const Image& b, const SimilarityConfig& cfg) {
  cfg.validate();
  switch (cfg.metric) {
    case Metric::ncc: return detail::ncc_grad_a(a, b, cfg.epsilon);
    case Metric::mncc: return mncc_grad_a(a, b, cfg.pyramid_levels, cfg.epsilon);
    case Metric::gncc: return gncc_grad_a(a, b, cfg.epsilon);
    case Metric::mncc_gncc_mean: {
      Image m = mncc_grad_a(a, b, cfg.pyramid_levels, cfg.epsilon);
      const Image g = gncc_grad_a(a, b, cfg.epsilon);
      for (std::size_t i = 0; i < m.pixels.size(); ++i)
        m.pixels[i] = 0.5 * (m.pixels[i] + g.pixels[i]);
      return m;
    }
  }
  throw std::invalid_argument("combined_grad_a: bad metric enum value");
}

struct MetricGradient {
  double value = 0;
  Vec6 grad = Vec6::Zero();
};

/// Renders at the pose and chains the metric adjoint through the per-pixel
/// pose gradient of the renderer; grad lives in the requested chart.
inline MetricGradient similarity_value_and_gradient(const Image& target, const Volume& v,
                                                    const Intrinsics& k, const Pose& pose,
                                                    int n_samples, const SimilarityConfig& cfg,
                                                    Chart chart = Chart::se3, int threads = 1) {
  cfg.validate();
  const auto [img, rg] = render_trilinear_with_grad(v, k, pose, n_samples, chart, threads);
  MetricGradient out;
  out.value = combined(img, target, cfg);
  const Image gi = combined_grad_a(img, target, cfg);
  for (std::size_t i = 0; i < gi.pixels.size(); ++i) out.grad += gi.pixels[i] * rg.d_pixels[i];
  return out;
}

inline Vec6 similarity_gradient_wrt_pose(const Image& target, const Volume& v, const Intrinsics& k,
                                         const Pose& pose, int n_samples,
                                         const SimilarityConfig& cfg, Chart chart = Chart::se3,
                                         int threads = 1) {
  return similarity_value_and_gradient(target, v, k, pose, n_samples, cfg, chart, threads).grad;
}

/// One-dimensional metric sweeps around a ground-truth pose expressed in user
/// euler parameters; the mount composes on the right, exactly as the
/// registration layer builds world poses. Every sample row reports all four
/// metrics. The sample count must be odd so the zero offset is on the grid.
inline std::string landscape_csv(const Volume& v, const Intrinsics& k, const Pose& mount,
                                 const EulerPose& gt, const Image& target,
                                 const SimilarityConfig& cfg, int n_samples,
                                 double rot_half_range_deg = 60.0,
                                 double trans_half_range_mm = 100.0, int samples_per_axis = 25,
                                 int threads = 1) {
  cfg.validate();
  if (samples_per_axis < 3 || samples_per_axis % 2 == 0)
    throw std::invalid_argument("landscape: samples_per_axis must be odd and >= 3");
  static const char* axis_names[6] = {"alpha", "beta", "gamma", "x", "y", "z"};
  std::string csv = "axis,offset,metric,value\n";
  char buf[400];
  for (int axis = 0; axis < 6; ++axis) {
    const double half = axis < 3 ? rot_half_range_deg : trans_half_range_mm;
    for (int s = 0; s < samples_per_axis; ++s) {
      const double lambda = static_cast<double>(s) / static_cast<double>(samples_per_axis - 1);
      const double offset = -half * (1.0 - lambda) + half * lambda;
      Vec6 params = gt.as_vector();
      params[axis] += offset;
      const Pose pose = euler_to_pose(EulerPose::from_vector(params)) * mount;
      const Image img = render_trilinear(v, make_rays(k, pose), n_samples, threads);
      const double vm = mncc(img, target, cfg.pyramid_levels, cfg.epsilon);
      const double vg = gncc(img, target, cfg.epsilon);
      const double vn = ncc(img, target, cfg.epsilon);
      const double pairs[4] = {vn, vm, vg, 0.5 * (vm + vg)};
      static const char* names[4] = {"ncc", "mncc", "gncc", "mncc_gncc_mean"};
      for (int m = 0; m < 4; ++m) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%s,%.17g\n", axis_names[axis], offset, names[m],
                      pairs[m]);
        csv += buf;
      }
    }
  }
  return csv;
}

}  // namespace carmreg
