#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "carmreg/acquisition.hpp"
#include "carmreg/phantom.hpp"
#include "carmreg/pose_metrics.hpp"
#include "carmreg/registration.hpp"
#include "carmreg/renderer.hpp"
#include "carmreg/similarity.hpp"
#include "carmreg/volume_io.hpp"

namespace fs = std::filesystem;
using namespace carmreg;

namespace {

int g_log_rank = 1;  // 0 quiet, 1 info, 2 debug

void log_info(const std::string& msg) {
  if (g_log_rank >= 1) std::fprintf(stderr, "carmreg: %s\n", msg.c_str());
}

void log_warn(const std::string& msg) {
  if (g_log_rank >= 1) std::fprintf(stderr, "carmreg: warning: %s\n", msg.c_str());
}

void log_debug(const std::string& msg) {
  if (g_log_rank >= 2) std::fprintf(stderr, "carmreg: %s\n", msg.c_str());
}

Pose mount_from_string(const std::string& s) {
  if (s == "carm") return carm_mount();
  if (s == "none") return Pose{};
  throw std::invalid_argument("unknown mount \"" + s + "\" (want carm or none)");
}

nlohmann::json load_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw io_error("json parse error in " + path.string() + ": " + e.what());
  }
}

/// User-frame euler parameters of a pose file; matrix poses are decomposed.
EulerPose euler_from_pose_file(const fs::path& path, bool* partial = nullptr) {
  const PoseJson pj = load_pose_json(path);
  if (partial) *partial = pj.partial;
  if (pj.euler) return *pj.euler;
  const EulerDecomposition d = pose_to_euler(pj.pose);
  if (d.gimbal_lock)
    log_warn("pose in " + path.string() + " decomposes at a gimbal lock; gamma folded into alpha");
  return d.euler;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomOpts {
  std::string kind;
  fs::path out;
  double edge_mm = 0, mu = 0, voxel_mm = 0, radius_mm = 0, box_mu = 0, box_edge_mm = 0;
  double size_mm = 0, gap_mm = 0, r_inner_mm = 0, r_outer_mm = 0, mu_inner = 0, mu_outer = 0;
  std::vector<double> center_offset_mm;
};

int run_phantom(const PhantomOpts& o, const CLI::App& sub) {
  nlohmann::json params = nlohmann::json::object();
  const auto take = [&](const char* flag, const char* key, double v) {
    if (sub.count(flag)) params[key] = v;
  };
  take("--edge-mm", "edge_mm", o.edge_mm);
  take("--mu", "mu", o.mu);
  take("--voxel-mm", "voxel_mm", o.voxel_mm);
  take("--radius-mm", "radius_mm", o.radius_mm);
  take("--box-mu", "box_mu", o.box_mu);
  take("--box-edge-mm", "box_edge_mm", o.box_edge_mm);
  take("--size-mm", "size_mm", o.size_mm);
  take("--gap-mm", "gap_mm", o.gap_mm);
  take("--r-inner-mm", "r_inner_mm", o.r_inner_mm);
  take("--r-outer-mm", "r_outer_mm", o.r_outer_mm);
  take("--mu-inner", "mu_inner", o.mu_inner);
  take("--mu-outer", "mu_outer", o.mu_outer);
  if (sub.count("--center-offset-mm"))
    params["center_offset_mm"] = o.center_offset_mm;

  const PhantomResult ph = make_phantom(o.kind, params);

  const fs::path vol_path = fs::path(o.out.string() + ".volume.json");
  const fs::path fid_path = fs::path(o.out.string() + ".fiducials.json");
  save_volume_rawjson(vol_path, ph.volume);
  save_fiducials_json(fid_path, ph.fiducials);
  log_info("wrote " + vol_path.string());
  log_info("wrote " + fid_path.string());
  if (ph.labels) {
    const fs::path lab_path = fs::path(o.out.string() + ".labels.json");
    save_labelmap_rawjson(lab_path, *ph.labels);
    log_info("wrote " + lab_path.string());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// render

struct RenderOpts {
  fs::path volume, pose, intrinsics, out, labels;
  std::string method = "siddon";
  std::string mount = "carm";
  int samples = -1;
  std::vector<int> keep;
  int threads = 1;
};

int run_render(const RenderOpts& o) {
  const Volume v = load_volume(o.volume);
  const Intrinsics k = load_intrinsics_json(o.intrinsics);
  const PoseJson pj = load_pose_json(o.pose);
  if (pj.partial) log_warn("pose is flagged partial; missing parameters render as zero");
  const Pose world = pj.pose * mount_from_string(o.mount);
  const RayBundle rays = make_rays(k, world);

  RenderMethod method;
  if (o.method == "siddon") method = RenderMethod::siddon;
  else if (o.method == "trilinear") method = RenderMethod::trilinear;
  else throw std::invalid_argument("unknown method \"" + o.method + "\" (want siddon or trilinear)");

  Image img;
  if (!o.labels.empty()) {
    const LabelMap lm = load_labelmap_rawjson(o.labels);
    const std::set<int> keep(o.keep.begin(), o.keep.end());
    img = render_structure(v, lm, keep, rays, method, o.samples, o.threads);
  } else if (method == RenderMethod::siddon) {
    img = render_siddon(v, rays, o.threads);
  } else {
    const int m = o.samples < 0 ? default_sample_count(v) : o.samples;
    img = render_trilinear(v, rays, m, o.threads);
  }
  img.intrinsics = k;
  img.pose = world;
  save_image(o.out, img);
  log_info("wrote " + o.out.string());
  return 0;
}

// ---------------------------------------------------------------------------
// register

/// Edge map of the render (Sobel magnitude, top decile) at half opacity over
/// the min-max normalized target. Diagnostic output only.
Image overlay_edges(const Image& target, const Image& render) {
  const Image gx = carmreg::detail::sobel(render, carmreg::detail::kSobelX);
  const Image gy = carmreg::detail::sobel(render, carmreg::detail::kSobelY);
  std::vector<double> mag(render.pixel_count());
  for (std::size_t i = 0; i < mag.size(); ++i)
    mag[i] = std::hypot(gx.pixels[i], gy.pixels[i]);
  std::vector<double> sorted = mag;
  const std::size_t idx = static_cast<std::size_t>(0.9 * static_cast<double>(sorted.size() - 1));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(idx), sorted.end());
  const double thr = sorted[idx];

  double lo = target.pixels[0], hi = target.pixels[0];
  for (double p : target.pixels) {
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
  Image out = target;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double tn = (target.pixels[i] - lo) * scale;
    const double edge = mag[i] >= thr && thr > 0.0 ? 1.0 : 0.0;
    out.pixels[i] = 0.5 * tn + 0.5 * edge;
  }
  return out;
}

struct RegisterOpts {
  fs::path target, volume, intrinsics, init, config, out_dir, gt, fiducials;
  std::string preset;
  std::string mount = "carm";
  int n_starts = 50;
  int top_r = 1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

int run_register(const RegisterOpts& o, const CLI::App& sub) {
  if (o.init.empty() == o.preset.empty())
    throw std::invalid_argument("register: give exactly one of --init or --preset");

  const Image target = load_image(o.target);
  const Volume v = load_volume(o.volume);
  const Intrinsics k = load_intrinsics_json(o.intrinsics);
  const Pose mount = mount_from_string(o.mount);

  InitStrategy st;
  if (!o.init.empty()) {
    const nlohmann::json j = load_json_file(o.init);
    if (j.is_object() && j.contains("kind")) {
      st = init_strategy_from_json(j);
    } else {
      const PoseJson pj = parse_pose_json(j);
      if (pj.partial)
        log_warn("initial pose is flagged partial; unspecified parameters start at zero");
      st.kind = InitKind::fixed;
      st.fixed_pose = pj.euler ? *pj.euler : pose_to_euler(pj.pose).euler;
    }
  } else {
    st.kind = InitKind::multistart;
    st.ranges = preset_ranges(o.preset);
    st.n_starts = o.n_starts;
  }
  if (o.seed_set) st.seed = o.seed;

  RefineConfig cfg;
  if (!o.config.empty()) cfg = refine_config_from_json(load_json_file(o.config));

  std::optional<Pose> gt_world;
  FiducialSet fids;
  if (sub.count("--gt")) {
    gt_world = euler_to_pose(euler_from_pose_file(o.gt)) * mount;
    if (o.fiducials.empty())
      throw std::invalid_argument("register: --gt needs --fiducials for the error report");
    fids = load_fiducials_json(o.fiducials);
  }

  const RegisterResult res =
      register_pose(target, v, k, st, cfg, o.top_r, mount, o.threads,
                    gt_world ? &*gt_world : nullptr, gt_world ? &fids : nullptr);

  ensure_directory(o.out_dir);
  atomic_write_bytes(o.out_dir / "pose.json", pose_to_json(res.pose).dump(2) + "\n");
  atomic_write_bytes(o.out_dir / "trace.csv", trace_to_csv(res.trace));

  nlohmann::json summary;
  summary["final_metric"] = res.metric;
  summary["grad_norm"] = res.grad_norm;
  summary["iterations"] = res.trace.rows.size();
  summary["termination"] = res.trace.termination;
  if (res.report && res.report->has_fiducials) summary["mtre_mm"] = res.report->mtre_mm;

  if (res.trace.termination == "non_finite") {
    // pose and trace are on disk; the overlay would blend the very pixels
    // that poisoned the metric, so it is skipped
    std::printf("%s\n", summary.dump(2).c_str());
    log_warn("optimization hit a non-finite metric; outputs hold the best pose before the abort");
    return 3;
  }

  const int m = cfg.n_samples < 0 ? default_sample_count(v) : cfg.n_samples;
  const Image final_render = render_trilinear(v, make_rays(k, res.world), m, o.threads);
  save_image_pgm(o.out_dir / "overlay.pgm", overlay_edges(target, final_render));
  if (res.report)
    atomic_write_bytes(o.out_dir / "report.json", report_to_json(*res.report).dump(2) + "\n");
  log_info("wrote " + (o.out_dir / "pose.json").string());
  std::printf("%s\n", summary.dump(2).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// metrics

struct MetricsOpts {
  fs::path gt, est, intrinsics, fiducials;
  std::string mount = "carm";
};

int run_metrics(const MetricsOpts& o, const CLI::App& sub) {
  const Pose mount = mount_from_string(o.mount);
  const Pose gtw = euler_to_pose(euler_from_pose_file(o.gt)) * mount;
  const Pose estw = euler_to_pose(euler_from_pose_file(o.est)) * mount;
  const Intrinsics k = load_intrinsics_json(o.intrinsics);
  FiducialSet fids;
  const bool have_fids = sub.count("--fiducials") > 0;
  if (have_fids) fids = load_fiducials_json(o.fiducials);
  else log_info("no fiducials supplied; mTRE omitted from the report");
  const ErrorReport rep = full_report(gtw, estw, k, have_fids ? &fids : nullptr);
  std::printf("%s\n", report_to_json(rep).dump(2).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// landscape

struct LandscapeOpts {
  fs::path target, volume, intrinsics, gt, out;
  std::vector<std::string> axes;
  double range_deg = 60.0;
  double range_mm = 100.0;
  int steps = 121;
  std::string metric = "mncc_gncc_mean";
  std::string mount = "carm";
  int samples = -1;
  int threads = 1;
};

int run_landscape(const LandscapeOpts& o) {
  static const char* all_axes[] = {"alpha", "beta", "gamma", "x", "y", "z"};
  std::vector<std::string> axes = o.axes;
  if (axes.empty()) axes.assign(std::begin(all_axes), std::end(all_axes));
  for (const auto& a : axes)
    if (std::find(std::begin(all_axes), std::end(all_axes), a) == std::end(all_axes))
      throw std::invalid_argument("unknown axis \"" + a + "\"");
  if (o.steps < 2) throw std::invalid_argument("landscape: steps must be >= 2");

  const Image target = load_image(o.target);
  const Volume v = load_volume(o.volume);
  const Intrinsics k = load_intrinsics_json(o.intrinsics);
  const Pose mount = mount_from_string(o.mount);
  const EulerPose gt = euler_from_pose_file(o.gt);
  SimilarityConfig scfg;
  scfg.metric = metric_from_string(o.metric);
  const int m = o.samples < 0 ? default_sample_count(v) : o.samples;

  std::string csv = "axis,offset,value\n";
  char buf[128];
  for (const auto& axis : axes) {
    const bool rotational = axis == "alpha" || axis == "beta" || axis == "gamma";
    const double range = rotational ? o.range_deg : o.range_mm;
    for (int s = 0; s < o.steps; ++s) {
      const double off = -range + 2.0 * range * static_cast<double>(s) /
                                      static_cast<double>(o.steps - 1);
      EulerPose e = gt;
      if (axis == "alpha") e.alpha_deg += off;
      else if (axis == "beta") e.beta_deg += off;
      else if (axis == "gamma") e.gamma_deg += off;
      else if (axis == "x") e.x_mm += off;
      else if (axis == "y") e.y_mm += off;
      else e.z_mm += off;
      const Image img = render_trilinear(v, make_rays(k, euler_to_pose(e) * mount), m, o.threads);
      const double val = combined(img, target, scfg);
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n", axis.c_str(), off, val);
      csv += buf;
    }
    log_debug("swept " + axis);
  }
  atomic_write_bytes(o.out, csv);
  log_info("wrote " + o.out.string());
  return 0;
}

// ---------------------------------------------------------------------------
// resample

struct ResampleOpts {
  fs::path image, src_intrinsics, canon_intrinsics, out;
};

int run_resample(const ResampleOpts& o) {
  const Image img = load_image(o.image);
  const Intrinsics ks = load_intrinsics_json(o.src_intrinsics);
  const Intrinsics kc = load_intrinsics_json(o.canon_intrinsics);
  const CanonicalizeResult r = canonicalize(img, ks, kc);
  if (r.empty_overlap)
    log_warn("detectors do not overlap; output image is all zero");
  save_image(o.out, r.image);
  log_info("wrote " + o.out.string());
  return 0;
}

// ---------------------------------------------------------------------------
// parse-meta

struct ParseMetaOpts {
  fs::path in;
  std::string format = "auto";
  std::string emit = "meta";
  std::string depth_sign = "negative_y";
};

int run_parse_meta(const ParseMetaOpts& o) {
  MetaFormat fmt;
  if (o.format == "auto")
    fmt = o.in.extension() == ".dcm" ? MetaFormat::dicom_min : MetaFormat::json_sidecar;
  else
    fmt = meta_format_from_string(o.format);
  const AcquisitionMeta m = parse_meta(o.in, fmt);

  if (o.emit == "meta") {
    std::printf("%s\n", meta_to_json(m).dump(2).c_str());
  } else if (o.emit == "pose") {
    const PoseJson p = pose_from_meta(m, depth_sign_from_string(o.depth_sign));
    std::printf("%s\n", pose_to_json(*p.euler, p.partial).dump(2).c_str());
  } else if (o.emit == "intrinsics") {
    std::printf("%s\n", intrinsics_to_json(intrinsics_from_meta(m)).dump(2).c_str());
  } else {
    throw std::invalid_argument("unknown emit \"" + o.emit + "\" (want meta, pose, or intrinsics)");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"X-ray rendering and 2D/3D rigid registration toolkit"};
  app.require_subcommand(1);

  int rc = 0;
  int threads = 1;
  std::uint64_t seed = 0;
  std::string log_level = "info";
  app.add_option("--threads", threads, "Renderer worker threads")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", seed, "Seed for stochastic initialization");
  app.add_option("--log-level", log_level, "quiet, info, or debug")
      ->check(CLI::IsMember({"quiet", "info", "debug"}));
  const auto apply_globals = [&] {
    g_log_rank = log_level == "quiet" ? 0 : log_level == "debug" ? 2 : 1;
  };

  PhantomOpts po;
  auto* sp = app.add_subcommand("phantom", "Generate an analytic phantom volume");
  sp->fallthrough();
  sp->add_option("--kind", po.kind, "uniform_cube, sphere, nested_spheres, or two_boxes")
      ->required();
  sp->add_option("--out", po.out, "Output path prefix")->required();
  sp->add_option("--edge-mm", po.edge_mm, "Cube edge length");
  sp->add_option("--mu", po.mu, "Attenuation coefficient");
  sp->add_option("--voxel-mm", po.voxel_mm, "Voxel pitch");
  sp->add_option("--radius-mm", po.radius_mm, "Sphere radius");
  sp->add_option("--center-offset-mm", po.center_offset_mm, "Sphere center offset")
      ->expected(3);
  sp->add_option("--box-mu", po.box_mu, "Embedding box attenuation");
  sp->add_option("--box-edge-mm", po.box_edge_mm, "Embedding box edge length");
  sp->add_option("--size-mm", po.size_mm, "Box edge length (two_boxes)");
  sp->add_option("--gap-mm", po.gap_mm, "Gap between boxes (two_boxes)");
  sp->add_option("--r-inner-mm", po.r_inner_mm, "Inner sphere radius (nested_spheres)");
  sp->add_option("--r-outer-mm", po.r_outer_mm, "Outer sphere radius (nested_spheres)");
  sp->add_option("--mu-inner", po.mu_inner, "Inner attenuation (nested_spheres)");
  sp->add_option("--mu-outer", po.mu_outer, "Shell attenuation (nested_spheres)");
  sp->callback([&] {
    apply_globals();
    rc = run_phantom(po, *sp);
  });

  RenderOpts ro;
  auto* sr = app.add_subcommand("render", "Render an X-ray image from a volume");
  sr->fallthrough();
  sr->add_option("--volume", ro.volume, "Volume file (.json or .nii)")->required();
  sr->add_option("--pose", ro.pose, "Pose JSON")->required();
  sr->add_option("--intrinsics", ro.intrinsics, "Intrinsics JSON")->required();
  sr->add_option("--out", ro.out, "Output image (.pgm or .json)")->required();
  sr->add_option("--method", ro.method, "siddon or trilinear");
  sr->add_option("--samples", ro.samples, "Samples per ray (trilinear)");
  auto* labels_opt = sr->add_option("--labels", ro.labels, "Label map for structure rendering");
  sr->add_option("--keep", ro.keep, "Labels to keep")->delimiter(',')->needs(labels_opt);
  sr->add_option("--mount", ro.mount, "carm or none");
  sr->callback([&] {
    apply_globals();
    ro.threads = threads;
    rc = run_render(ro);
  });

  RegisterOpts go;
  auto* sg = app.add_subcommand("register", "Register a volume to a target X-ray");
  sg->fallthrough();
  sg->add_option("--target", go.target, "Target image")->required();
  sg->add_option("--volume", go.volume, "Volume file")->required();
  sg->add_option("--intrinsics", go.intrinsics, "Intrinsics JSON")->required();
  sg->add_option("--out-dir", go.out_dir, "Output directory")->required();
  auto* init_opt = sg->add_option("--init", go.init, "Initial pose JSON or strategy JSON");
  sg->add_option("--preset", go.preset, "Multistart search range preset")->excludes(init_opt);
  sg->add_option("--n-starts", go.n_starts, "Multistart candidate count");
  sg->add_option("--top-r", go.top_r, "Candidates refined to completion");
  sg->add_option("--config", go.config, "Refinement config JSON");
  sg->add_option("--gt", go.gt, "Ground-truth pose JSON for an error report");
  sg->add_option("--fiducials", go.fiducials, "Fiducial JSON for the error report");
  sg->add_option("--mount", go.mount, "carm or none");
  sg->callback([&] {
    apply_globals();
    go.threads = threads;
    go.seed = seed;
    go.seed_set = seed_opt->count() > 0;
    rc = run_register(go, *sg);
  });

  MetricsOpts mo;
  auto* sm = app.add_subcommand("metrics", "Pose error report between two poses");
  sm->fallthrough();
  sm->add_option("--gt", mo.gt, "Ground-truth pose JSON")->required();
  sm->add_option("--est", mo.est, "Estimated pose JSON")->required();
  sm->add_option("--intrinsics", mo.intrinsics, "Intrinsics JSON")->required();
  sm->add_option("--fiducials", mo.fiducials, "Fiducial JSON");
  sm->add_option("--mount", mo.mount, "carm or none");
  sm->callback([&] {
    apply_globals();
    rc = run_metrics(mo, *sm);
  });

  LandscapeOpts lo;
  auto* sl = app.add_subcommand("landscape", "Similarity sweeps around a pose");
  sl->fallthrough();
  sl->add_option("--target", lo.target, "Target image")->required();
  sl->add_option("--volume", lo.volume, "Volume file")->required();
  sl->add_option("--intrinsics", lo.intrinsics, "Intrinsics JSON")->required();
  sl->add_option("--gt", lo.gt, "Center pose JSON")->required();
  sl->add_option("--out", lo.out, "Output CSV")->required();
  sl->add_option("--axes", lo.axes, "Subset of alpha,beta,gamma,x,y,z")->delimiter(',');
  sl->add_option("--range-deg", lo.range_deg, "Rotation sweep half-range");
  sl->add_option("--range-mm", lo.range_mm, "Translation sweep half-range");
  sl->add_option("--steps", lo.steps, "Samples per axis");
  sl->add_option("--metric", lo.metric, "ncc, mncc, gncc, or mncc_gncc_mean");
  sl->add_option("--samples", lo.samples, "Samples per ray");
  sl->add_option("--mount", lo.mount, "carm or none");
  sl->callback([&] {
    apply_globals();
    lo.threads = threads;
    rc = run_landscape(lo);
  });

  ResampleOpts eo;
  auto* se = app.add_subcommand("resample", "Resample an image to canonical intrinsics");
  se->fallthrough();
  se->add_option("--image", eo.image, "Input image")->required();
  se->add_option("--src-intrinsics", eo.src_intrinsics, "Source intrinsics JSON")->required();
  se->add_option("--canon-intrinsics", eo.canon_intrinsics, "Canonical intrinsics JSON")
      ->required();
  se->add_option("--out", eo.out, "Output image")->required();
  se->callback([&] {
    apply_globals();
    rc = run_resample(eo);
  });

  ParseMetaOpts ao;
  auto* sa = app.add_subcommand("parse-meta", "Read acquisition metadata");
  sa->fallthrough();
  sa->add_option("--in", ao.in, "Metadata file")->required();
  sa->add_option("--format", ao.format, "json_sidecar, dicom_min, or auto");
  sa->add_option("--emit", ao.emit, "meta, pose, or intrinsics");
  sa->add_option("--depth-sign", ao.depth_sign, "negative_y or positive_y");
  sa->callback([&] {
    apply_globals();
    rc = run_parse_meta(ao);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const io_error& e) {
    std::fprintf(stderr, "carmreg: error: %s\n", e.what());
    return 1;
  } catch (const numerical_error& e) {
    std::fprintf(stderr, "carmreg: error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "carmreg: error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "carmreg: error: %s\n", e.what());
    return 1;
  }
  return rc;
}
