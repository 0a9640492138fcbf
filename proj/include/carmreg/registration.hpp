#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "carmreg/common.hpp"
#include "carmreg/geometry.hpp"
#include "carmreg/image.hpp"
#include "carmreg/pose_metrics.hpp"
#include "carmreg/similarity.hpp"
#include "carmreg/volume.hpp"

namespace carmreg {

// ---------------------------------------------------------------------------
// Initialization strategies

struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Uniform sampling box over the six user pose parameters, degrees and mm.
struct PoseRanges {
  ParamRange alpha, beta, gamma, x, y, z;

  void validate() const {
    for (const ParamRange* r : {&alpha, &beta, &gamma, &x, &y, &z}) {
      if (!(r->lo <= r->hi) || !std::isfinite(r->lo) || !std::isfinite(r->hi))
        throw std::invalid_argument("pose ranges: each range needs min <= max and finite bounds");
    }
  }
};

inline PoseRanges preset_ranges(const std::string& name) {
  if (name == "pelvis")
    return {{-45, 45}, {-45, 45}, {-15, 15}, {-150, 150}, {-1000, -450}, {-150, 150}};
  if (name == "neurovasculature")
    return {{-45, 90}, {-5, 5}, {-5, 5}, {-25, 25}, {700, 800}, {-25, 25}};
  if (name == "skull")
    return {{-125, 125}, {-45, 45}, {-15, 15}, {-200, 200}, {-1000, -500}, {-200, 200}};
  throw std::invalid_argument("unknown pose range preset \"" + name + "\"");
}

enum class InitKind { fixed, multistart };

struct InitStrategy {
  InitKind kind = InitKind::fixed;
  std::optional<EulerPose> fixed_pose;
  std::optional<PoseRanges> ranges;
  int n_starts = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (kind == InitKind::fixed && !fixed_pose)
      throw std::invalid_argument("init strategy: fixed kind requires fixed_pose");
    if (kind == InitKind::multistart) {
      if (!ranges) throw std::invalid_argument("init strategy: multistart requires ranges");
      ranges->validate();
      if (n_starts < 1) throw std::invalid_argument("init strategy: n_starts must be >= 1");
    }
  }
};

// ---------------------------------------------------------------------------
// Multiscale plumbing

/// Block-mean downsampling by an integer factor; edge blocks replicate the
/// last row and column so partial blocks still average factor^2 taps. The
/// factor 2 case coincides with the similarity pyramid's pooling.
inline Image downsample_image(const Image& img, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_image: factor must be >= 1");
  if (factor == 1) return img;
  const int ow = (img.width + factor - 1) / factor;
  const int oh = (img.height + factor - 1) / factor;
  Image out = Image::zeros(ow, oh);
  const double inv = 1.0 / (static_cast<double>(factor) * static_cast<double>(factor));
  for (int v = 0; v < oh; ++v)
    for (int u = 0; u < ow; ++u) {
      double acc = 0;
      for (int dv = 0; dv < factor; ++dv)
        for (int du = 0; du < factor; ++du)
          acc += img.at(std::min(u * factor + du, img.width - 1),
                        std::min(v * factor + dv, img.height - 1));
      out.at(u, v) = acc * inv;
    }
  return out;
}

/// Detector seen at a coarser grid: fewer, larger pixels covering the same
/// physical plate. Focal length and principal point are physical quantities
/// and do not change.
inline Intrinsics scale_intrinsics(const Intrinsics& k, int factor) {
  if (factor < 1) throw std::invalid_argument("scale_intrinsics: factor must be >= 1");
  Intrinsics out = k;
  out.w = (k.w + factor - 1) / factor;
  out.h = (k.h + factor - 1) / factor;
  out.sx = k.sx * factor;
  out.sy = k.sy * factor;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  Vec6 m = Vec6::Zero();
  Vec6 v = Vec6::Zero();
  int step = 0;
};

/// One bias-corrected Adam ascent step. Returns the parameter increment for
/// gradient g under per-parameter learning rates lr.
inline Vec6 adam_step(AdamState& st, const Vec6& g, const Vec6& lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  if (!g.allFinite()) throw numerical_error("adam_step: non-finite gradient");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
    throw std::invalid_argument("adam_step: betas must lie in (0, 1)");
  st.step += 1;
  st.m = beta1 * st.m + (1.0 - beta1) * g;
  st.v = beta2 * st.v + (1.0 - beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(beta1, st.step);
  const double c2 = 1.0 - std::pow(beta2, st.step);
  Vec6 delta;
  for (int i = 0; i < 6; ++i) {
    const double mh = st.m[i] / c1;
    const double vh = st.v[i] / c2;
    delta[i] = lr[i] * mh / (std::sqrt(vh) + eps);
  }
  return delta;
}

// ---------------------------------------------------------------------------
// Configuration

struct RefineConfig {
  std::vector<int> scales = {8, 4, 2, 1};
  double lr_rot_deg = 0.5;
  double lr_trans_mm = 2.0;
  double lr_depth_factor = 4.0;  // depth translation gets lr_trans_mm * this
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int plateau_window = 10;
  double plateau_tol = 1e-4;
  int max_iters_per_scale = 150;
  Chart chart = Chart::se3;
  int n_samples = -1;  // ray samples per render; -1 means the renderer default
  SimilarityConfig similarity;

  void validate() const {
    if (scales.empty()) throw std::invalid_argument("refine config: scales must be nonempty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (scales[i] < 1) throw std::invalid_argument("refine config: scales must be >= 1");
      if (i > 0 && scales[i] >= scales[i - 1])
        throw std::invalid_argument("refine config: scales must be strictly decreasing");
    }
    if (scales.back() != 1) throw std::invalid_argument("refine config: last scale must be 1");
    if (!(lr_rot_deg > 0.0) || !(lr_trans_mm > 0.0) || !(lr_depth_factor > 0.0))
      throw std::invalid_argument("refine config: learning rates must be > 0");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0))
      throw std::invalid_argument("refine config: adam betas must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw std::invalid_argument("refine config: adam eps must be > 0");
    if (plateau_window < 1) throw std::invalid_argument("refine config: plateau window must be >= 1");
    if (!(plateau_tol > 0.0)) throw std::invalid_argument("refine config: plateau tol must be > 0");
    if (max_iters_per_scale < 0)
      throw std::invalid_argument("refine config: max iters must be >= 0");
    if (n_samples != -1 && n_samples < 1)
      throw std::invalid_argument("refine config: n_samples must be >= 1 or -1 for the default");
    similarity.validate();
  }
};

inline const char* chart_name(Chart c) { return c == Chart::euler_zxy ? "euler_zxy" : "se3"; }

inline Chart chart_from_string(const std::string& s) {
  if (s == "euler_zxy") return Chart::euler_zxy;
  if (s == "se3") return Chart::se3;
  throw std::invalid_argument("unknown chart \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Trace

struct TraceRow {
  int scale = 1;
  int iter = 0;
  double metric = 0.0;
  EulerPose pose;  // user frame, before the step of this iteration
  double grad_norm = 0.0;
  double ms = 0.0;
};

struct RegistrationTrace {
  std::vector<TraceRow> rows;
  EulerPose final_pose;
  Pose final_world;
  double final_metric = 0.0;
  double final_grad_norm = 0.0;
  std::string termination;  // plateau | max_iters | non_finite
  bool switched_to_se3 = false;
  int switch_scale = -1;
  int switch_iter = -1;
};

inline std::string trace_to_csv(const RegistrationTrace& tr) {
  std::string out = "scale,iter,metric,alpha,beta,gamma,x,y,z,grad_norm,ms\n";
  char buf[360];
  for (const TraceRow& r : tr.rows) {
    std::snprintf(buf, sizeof buf,
                  "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.scale, r.iter,
                  r.metric, r.pose.alpha_deg, r.pose.beta_deg, r.pose.gamma_deg, r.pose.x_mm,
                  r.pose.y_mm, r.pose.z_mm, r.grad_norm, r.ms);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

struct ScoredPose {
  EulerPose pose;
  double score = 0.0;
};

namespace detail {

inline double coarse_score(const Image& target_coarse, const Volume& v, const Intrinsics& k_coarse,
                           const EulerPose& e, const Pose& mount, int n_samples,
                           const SimilarityConfig& cfg, int threads) {
  const Pose world = euler_to_pose(e) * mount;
  const RayBundle rays = make_rays(k_coarse, world);
  const Image img = render_trilinear(v, rays, n_samples, threads);
  return combined(img, target_coarse, cfg);
}

}  // namespace detail

/// Candidate starting poses, best coarse score first. Fixed strategies yield
/// one candidate; multistart draws each parameter uniformly from its range,
/// in the order alpha, beta, gamma, x, y, z, one pose after another, so a
/// seed pins the whole list.
inline std::vector<ScoredPose> initialize(const InitStrategy& strategy, const Image& target,
                                          const Volume& v, const Intrinsics& k, int n_samples,
                                          int coarsest_scale, const SimilarityConfig& simcfg,
                                          const Pose& mount = carm_mount(), int threads = 1) {
  strategy.validate();
  if (n_samples < 0) n_samples = default_sample_count(v);
  const Image tgt = downsample_image(target, coarsest_scale);
  const Intrinsics ks = scale_intrinsics(k, coarsest_scale);
  SimilarityConfig cfg = simcfg;
  cfg.pyramid_levels = std::min(cfg.pyramid_levels, detail::max_pyramid_levels(tgt.width, tgt.height));

  std::vector<ScoredPose> out;
  if (strategy.kind == InitKind::fixed) {
    const EulerPose e = *strategy.fixed_pose;
    out.push_back({e, detail::coarse_score(tgt, v, ks, e, mount, n_samples, cfg, threads)});
    return out;
  }

  std::mt19937_64 rng(strategy.seed);
  const PoseRanges& r = *strategy.ranges;
  out.reserve(static_cast<std::size_t>(strategy.n_starts));
  for (int i = 0; i < strategy.n_starts; ++i) {
    EulerPose e;
    e.alpha_deg = uniform_in(rng, r.alpha.lo, r.alpha.hi);
    e.beta_deg = uniform_in(rng, r.beta.lo, r.beta.hi);
    e.gamma_deg = uniform_in(rng, r.gamma.lo, r.gamma.hi);
    e.x_mm = uniform_in(rng, r.x.lo, r.x.hi);
    e.y_mm = uniform_in(rng, r.y.lo, r.y.hi);
    e.z_mm = uniform_in(rng, r.z.lo, r.z.hi);
    out.push_back({e, detail::coarse_score(tgt, v, ks, e, mount, n_samples, cfg, threads)});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ScoredPose& a, const ScoredPose& b) { return a.score > b.score; });
  return out;
}

// ---------------------------------------------------------------------------
// Refinement

namespace detail {

inline double wrap_deg(double d) {
  d = std::fmod(d + 180.0, 360.0);
  if (d < 0) d += 360.0;
  return d - 180.0;
}

/// The euler chart loses a direction where the alpha and gamma axes align.
inline bool near_gimbal(double beta_deg, double tol_deg = 0.5) {
  return std::abs(std::abs(wrap_deg(beta_deg)) - 90.0) < tol_deg;
}

inline Vec6 chart_learning_rates(Chart chart, const RefineConfig& cfg) {
  Vec6 lr;
  if (chart == Chart::euler_zxy) {
    // user parameters (alpha, beta, gamma, x, y, z); y is the depth axis
    lr << cfg.lr_rot_deg, cfg.lr_rot_deg, cfg.lr_rot_deg, cfg.lr_trans_mm,
        cfg.lr_trans_mm * cfg.lr_depth_factor, cfg.lr_trans_mm;
  } else {
    // twist (omega, nu) in camera body coordinates; nu_z looks along the ray
    const double r = deg2rad(cfg.lr_rot_deg);
    lr << r, r, r, cfg.lr_trans_mm, cfg.lr_trans_mm, cfg.lr_trans_mm * cfg.lr_depth_factor;
  }
  return lr;
}

}  // namespace detail

/// Coarse-to-fine ascent of the similarity metric. The pose state is the user
/// euler parameter vector; the world pose composes the mount on the right.
/// Each scale restarts the optimizer moments, warm starts from the best pose
/// of the previous scale, and stops on plateau or the iteration cap. The
/// returned pose is the best iterate of the finest scale.
inline std::pair<EulerPose, RegistrationTrace> refine(const Image& target, const Volume& v,
                                                      const Intrinsics& k, const EulerPose& init,
                                                      const RefineConfig& cfg,
                                                      const Pose& mount = carm_mount(),
                                                      int threads = 1) {
  cfg.validate();
  k.validate();

  RegistrationTrace tr;
  EulerPose e = init;
  Pose world = euler_to_pose(e) * mount;
  tr.final_pose = e;
  tr.final_world = world;

  if (cfg.max_iters_per_scale == 0) {
    tr.termination = "max_iters";
    return {e, tr};
  }

  const int n_samples = cfg.n_samples < 0 ? default_sample_count(v) : cfg.n_samples;
  Chart chart = cfg.chart;
  AdamState st;
  const auto switch_chart = [&](int scale, int iter) {
    chart = Chart::se3;
    st = AdamState{};  // the moment vectors change units with the chart
    tr.switched_to_se3 = true;
    tr.switch_scale = scale;
    tr.switch_iter = iter;
  };
  if (chart == Chart::euler_zxy && detail::near_gimbal(e.beta_deg))
    switch_chart(cfg.scales.front(), 0);

  const Mat6 mount_pullback = adjoint(mount.inverse());

  double best_metric = -std::numeric_limits<double>::infinity();
  double best_grad_norm = 0.0;

  for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
    const int scale = cfg.scales[si];
    const Image tgt = downsample_image(target, scale);
    const Intrinsics ks = scale_intrinsics(k, scale);
    SimilarityConfig scfg = cfg.similarity;
    scfg.pyramid_levels = std::min(scfg.pyramid_levels, detail::max_pyramid_levels(tgt.width, tgt.height));

    // Steps shrink with the pixel pitch: the nominal rates apply at the
    // coarsest scale and each finer scale tightens the limit cycle the
    // optimizer settles into, which is what lets the finest scale polish.
    const double lr_atten = static_cast<double>(scale) / static_cast<double>(cfg.scales.front());

    double sig_best = -std::numeric_limits<double>::infinity();
    int last_sig = 0;
    best_metric = -std::numeric_limits<double>::infinity();
    EulerPose best_e = e;
    Pose best_world = world;
    best_grad_norm = 0.0;
    std::string reason = "max_iters";

    for (int iter = 0; iter < cfg.max_iters_per_scale; ++iter) {
      if (iter - last_sig >= cfg.plateau_window) {
        reason = "plateau";
        break;
      }
      const auto t0 = std::chrono::steady_clock::now();
      const MetricGradient mg = similarity_value_and_gradient(tgt, v, ks, world, n_samples, scfg,
                                                              Chart::se3, threads);
      if (!std::isfinite(mg.value) || !mg.grad.allFinite()) {
        tr.termination = "non_finite";
        tr.final_pose = best_metric > -std::numeric_limits<double>::infinity() ? best_e : e;
        tr.final_world = euler_to_pose(tr.final_pose) * mount;
        tr.final_metric = best_metric;
        tr.final_grad_norm = best_grad_norm;
        return {tr.final_pose, tr};
      }

      Vec6 g;
      if (chart == Chart::euler_zxy)
        g = (mount_pullback * euler_param_jacobian(e)).transpose() * mg.grad;
      else
        g = mg.grad;
      const double gn = g.norm();
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      tr.rows.push_back({scale, iter, mg.value, e, gn, ms});

      if (mg.value > best_metric) {
        best_metric = mg.value;
        best_e = e;
        best_world = world;
        best_grad_norm = gn;
      }
      if (mg.value > sig_best + cfg.plateau_tol) {
        sig_best = mg.value;
        last_sig = iter;
      }

      const Vec6 delta =
          adam_step(st, g, lr_atten * detail::chart_learning_rates(chart, cfg), cfg.adam_beta1,
                    cfg.adam_beta2, cfg.adam_eps);
      if (chart == Chart::euler_zxy) {
        e.alpha_deg += delta[0];
        e.beta_deg += delta[1];
        e.gamma_deg += delta[2];
        e.x_mm += delta[3];
        e.y_mm += delta[4];
        e.z_mm += delta[5];
        world = euler_to_pose(e) * mount;
        if (detail::near_gimbal(e.beta_deg)) switch_chart(scale, iter + 1);
      } else {
        world = world * se3_exp(delta);
        e = pose_to_euler(world * mount.inverse()).euler;
      }
    }

    e = best_e;
    world = best_world;
    tr.termination = reason;
  }

  tr.final_pose = e;
  tr.final_world = world;
  tr.final_metric = best_metric;
  tr.final_grad_norm = best_grad_norm;
  return {e, tr};
}

// ---------------------------------------------------------------------------
// Top-level driver

struct RegisterResult {
  EulerPose pose;
  Pose world;
  double metric = 0.0;
  double grad_norm = 0.0;
  RegistrationTrace trace;
  std::vector<ScoredPose> candidates;
  std::optional<ErrorReport> report;  // filled when a ground-truth pose is supplied
};

/// initialize + refine over the top_r candidates; best final metric wins,
/// ties broken by the lower gradient norm at the winning iterate.
inline RegisterResult register_pose(const Image& target, const Volume& v, const Intrinsics& k,
                                    const InitStrategy& strategy, const RefineConfig& cfg,
                                    int top_r = 1, const Pose& mount = carm_mount(),
                                    int threads = 1, const Pose* gt_world = nullptr,
                                    const FiducialSet* fiducials = nullptr) {
  cfg.validate();
  if (top_r < 1) throw std::invalid_argument("register: top_r must be >= 1");
  if (strategy.kind == InitKind::multistart && top_r > strategy.n_starts)
    throw std::invalid_argument("register: top_r must not exceed n_starts");

  RegisterResult res;
  res.candidates = initialize(strategy, target, v, k, cfg.n_samples, cfg.scales.front(),
                              cfg.similarity, mount, threads);

  const int n_refine = std::min<int>(top_r, static_cast<int>(res.candidates.size()));
  bool have = false;
  for (int i = 0; i < n_refine; ++i) {
    auto [pose, trace] = refine(target, v, k, res.candidates[i].pose, cfg, mount, threads);
    const bool better =
        !have || trace.final_metric > res.metric ||
        (trace.final_metric == res.metric && trace.final_grad_norm < res.grad_norm);
    if (better) {
      have = true;
      res.pose = pose;
      res.world = trace.final_world;
      res.metric = trace.final_metric;
      res.grad_norm = trace.final_grad_norm;
      res.trace = std::move(trace);
    }
  }

  if (gt_world) res.report = full_report(*gt_world, res.world, k, fiducials);
  return res;
}

// ---------------------------------------------------------------------------
// Config JSON

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const char* what) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* key : known)
      if (item.key() == key) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument(std::string(what) + ": unknown key \"" + item.key() + "\"");
  }
}

inline ParamRange range_from_json(const nlohmann::json& j, const char* key) {
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2)
    throw std::invalid_argument(std::string("init strategy: ") + key + " must be [min, max]");
  return {a[0].get<double>(), a[1].get<double>()};
}

inline EulerPose euler_pose_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"parameterization", "rotation", "translation", "partial"},
                      "fixed_pose");
  if (j.contains("parameterization") && j["parameterization"].get<std::string>() != "euler_zxy_deg")
    throw std::invalid_argument("fixed_pose: parameterization must be euler_zxy_deg");
  const auto& rot = j.at("rotation");
  const auto& tr = j.at("translation");
  if (!rot.is_array() || rot.size() != 3 || !tr.is_array() || tr.size() != 3)
    throw std::invalid_argument("fixed_pose: rotation/translation must be 3-arrays");
  return {rot[0].get<double>(), rot[1].get<double>(), rot[2].get<double>(),
          tr[0].get<double>(),  tr[1].get<double>(),  tr[2].get<double>()};
}

}  // namespace detail

inline RefineConfig refine_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("refine config: expected an object");
  detail::reject_unknown_keys(
      j,
      {"scales", "lr_rot_deg", "lr_trans_mm", "lr_depth_factor", "adam_beta1", "adam_beta2",
       "adam_eps", "plateau_window", "plateau_tol", "max_iters_per_scale", "chart", "n_samples",
       "similarity"},
      "refine config");
  RefineConfig cfg;
  if (j.contains("scales")) cfg.scales = j["scales"].get<std::vector<int>>();
  if (j.contains("lr_rot_deg")) cfg.lr_rot_deg = j["lr_rot_deg"].get<double>();
  if (j.contains("lr_trans_mm")) cfg.lr_trans_mm = j["lr_trans_mm"].get<double>();
  if (j.contains("lr_depth_factor")) cfg.lr_depth_factor = j["lr_depth_factor"].get<double>();
  if (j.contains("adam_beta1")) cfg.adam_beta1 = j["adam_beta1"].get<double>();
  if (j.contains("adam_beta2")) cfg.adam_beta2 = j["adam_beta2"].get<double>();
  if (j.contains("adam_eps")) cfg.adam_eps = j["adam_eps"].get<double>();
  if (j.contains("plateau_window")) cfg.plateau_window = j["plateau_window"].get<int>();
  if (j.contains("plateau_tol")) cfg.plateau_tol = j["plateau_tol"].get<double>();
  if (j.contains("max_iters_per_scale"))
    cfg.max_iters_per_scale = j["max_iters_per_scale"].get<int>();
  if (j.contains("chart")) cfg.chart = chart_from_string(j["chart"].get<std::string>());
  if (j.contains("n_samples")) cfg.n_samples = j["n_samples"].get<int>();
  if (j.contains("similarity")) {
    const auto& s = j["similarity"];
    detail::reject_unknown_keys(s, {"metric", "pyramid_levels", "epsilon"}, "similarity config");
    if (s.contains("metric")) cfg.similarity.metric = metric_from_string(s["metric"].get<std::string>());
    if (s.contains("pyramid_levels")) cfg.similarity.pyramid_levels = s["pyramid_levels"].get<int>();
    if (s.contains("epsilon")) cfg.similarity.epsilon = s["epsilon"].get<double>();
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json refine_config_to_json(const RefineConfig& cfg) {
  nlohmann::json j;
  j["scales"] = cfg.scales;
  j["lr_rot_deg"] = cfg.lr_rot_deg;
  j["lr_trans_mm"] = cfg.lr_trans_mm;
  j["lr_depth_factor"] = cfg.lr_depth_factor;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["plateau_window"] = cfg.plateau_window;
  j["plateau_tol"] = cfg.plateau_tol;
  j["max_iters_per_scale"] = cfg.max_iters_per_scale;
  j["chart"] = chart_name(cfg.chart);
  j["n_samples"] = cfg.n_samples;
  j["similarity"] = {{"metric", metric_name(cfg.similarity.metric)},
                     {"pyramid_levels", cfg.similarity.pyramid_levels},
                     {"epsilon", cfg.similarity.epsilon}};
  return j;
}

inline InitStrategy init_strategy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("init strategy: expected an object");
  detail::reject_unknown_keys(j, {"kind", "fixed_pose", "ranges", "preset", "n_starts", "seed"},
                              "init strategy");
  InitStrategy s;
  const std::string kind = j.value("kind", std::string("fixed"));
  if (kind == "fixed")
    s.kind = InitKind::fixed;
  else if (kind == "multistart")
    s.kind = InitKind::multistart;
  else
    throw std::invalid_argument("init strategy: unknown kind \"" + kind + "\"");
  if (j.contains("fixed_pose")) s.fixed_pose = detail::euler_pose_from_json(j["fixed_pose"]);
  if (j.contains("preset") && j.contains("ranges"))
    throw std::invalid_argument("init strategy: preset and ranges are mutually exclusive");
  if (j.contains("preset")) s.ranges = preset_ranges(j["preset"].get<std::string>());
  if (j.contains("ranges")) {
    const auto& r = j["ranges"];
    detail::reject_unknown_keys(r, {"alpha_deg", "beta_deg", "gamma_deg", "x_mm", "y_mm", "z_mm"},
                                "init strategy ranges");
    PoseRanges pr;
    pr.alpha = detail::range_from_json(r, "alpha_deg");
    pr.beta = detail::range_from_json(r, "beta_deg");
    pr.gamma = detail::range_from_json(r, "gamma_deg");
    pr.x = detail::range_from_json(r, "x_mm");
    pr.y = detail::range_from_json(r, "y_mm");
    pr.z = detail::range_from_json(r, "z_mm");
    s.ranges = pr;
  }
  if (j.contains("n_starts")) s.n_starts = j["n_starts"].get<int>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  s.validate();
  return s;
}

inline nlohmann::json init_strategy_to_json(const InitStrategy& s) {
  nlohmann::json j;
  j["kind"] = s.kind == InitKind::fixed ? "fixed" : "multistart";
  if (s.fixed_pose) {
    j["fixed_pose"] = {{"parameterization", "euler_zxy_deg"},
                       {"rotation", {s.fixed_pose->alpha_deg, s.fixed_pose->beta_deg,
                                     s.fixed_pose->gamma_deg}},
                       {"translation", {s.fixed_pose->x_mm, s.fixed_pose->y_mm,
                                        s.fixed_pose->z_mm}}};
  }
  if (s.ranges) {
    j["ranges"] = {{"alpha_deg", {s.ranges->alpha.lo, s.ranges->alpha.hi}},
                   {"beta_deg", {s.ranges->beta.lo, s.ranges->beta.hi}},
                   {"gamma_deg", {s.ranges->gamma.lo, s.ranges->gamma.hi}},
                   {"x_mm", {s.ranges->x.lo, s.ranges->x.hi}},
                   {"y_mm", {s.ranges->y.lo, s.ranges->y.hi}},
                   {"z_mm", {s.ranges->z.lo, s.ranges->z.hi}}};
  }
  j["n_starts"] = s.n_starts;
  j["seed"] = s.seed;
  return j;
}

}  // namespace carmreg
