#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carmreg/common.hpp"
#include "carmreg/geometry.hpp"
#include "carmreg/image.hpp"

namespace carmreg {

// ---------------------------------------------------------------------------
// Acquisition metadata
//
// Fields mirror the handful of attributes a C-arm acquisition carries that
// matter for pose and intrinsics. Every field is optional so that a sparse
// sidecar or DICOM stream still parses; consumers name the attribute they
// are missing when they need it.

struct AcquisitionMeta {
  std::optional<double> primary_angle_deg;
  std::optional<double> secondary_angle_deg;
  std::optional<double> source_to_patient_mm;
  std::optional<double> source_to_detector_mm;
  std::optional<double> pixel_spacing_x_mm;  // column spacing
  std::optional<double> pixel_spacing_y_mm;  // row spacing
  std::optional<int> rows;
  std::optional<int> cols;
  std::optional<double> principal_point_x_mm;
  std::optional<double> principal_point_y_mm;

  void validate() const {
    const auto positive = [](const std::optional<double>& v, const char* name) {
      if (v && !(*v > 0.0))
        throw std::invalid_argument(std::string(name) + " must be > 0");
    };
    positive(source_to_patient_mm, "source to patient distance");
    positive(source_to_detector_mm, "source to detector distance");
    positive(pixel_spacing_x_mm, "imager pixel spacing");
    positive(pixel_spacing_y_mm, "imager pixel spacing");
    if (rows && *rows <= 0) throw std::invalid_argument("rows must be > 0");
    if (cols && *cols <= 0) throw std::invalid_argument("columns must be > 0");
  }
};

namespace detail {

inline double require_attr(const std::optional<double>& v, const char* name) {
  if (!v) throw std::invalid_argument(std::string(name) + " absent");
  return *v;
}

inline int require_attr(const std::optional<int>& v, const char* name) {
  if (!v) throw std::invalid_argument(std::string(name) + " absent");
  return *v;
}

}  // namespace detail

/// Detector intrinsics implied by the metadata. The focal length of the
/// pinhole model is the source-to-detector distance; an absent principal
/// point means a centered detector.
inline Intrinsics intrinsics_from_meta(const AcquisitionMeta& m) {
  Intrinsics k;
  k.f = detail::require_attr(m.source_to_detector_mm, "source to detector distance");
  k.h = detail::require_attr(m.rows, "rows");
  k.w = detail::require_attr(m.cols, "columns");
  k.sx = detail::require_attr(m.pixel_spacing_x_mm, "imager pixel spacing");
  k.sy = detail::require_attr(m.pixel_spacing_y_mm, "imager pixel spacing");
  k.ox = m.principal_point_x_mm.value_or(0.0);
  k.oy = m.principal_point_y_mm.value_or(0.0);
  k.validate();
  return k;
}

// ---------------------------------------------------------------------------
// Partial pose from positioner angles
//
// The primary and secondary positioner angles map to the alpha and beta
// rotations and the source-to-patient distance to the depth translation.
// That covers three of the six degrees of freedom and says nothing about
// the patient's position, so the result is flagged partial. Vendors do not
// agree on the sign of the depth axis; the convention is explicit, and the
// negative-y default matches the preset search ranges (y in [-1000, -450]).

enum class DepthSign { negative_y, positive_y };

inline DepthSign depth_sign_from_string(const std::string& s) {
  if (s == "negative_y") return DepthSign::negative_y;
  if (s == "positive_y") return DepthSign::positive_y;
  throw std::invalid_argument("unknown depth sign convention \"" + s + "\"");
}

inline PoseJson pose_from_meta(const AcquisitionMeta& m,
                               DepthSign sign = DepthSign::negative_y) {
  const double alpha = detail::require_attr(m.primary_angle_deg, "primary positioner angle");
  const double beta = detail::require_attr(m.secondary_angle_deg, "secondary positioner angle");
  const double spd = detail::require_attr(m.source_to_patient_mm, "source to patient distance");
  EulerPose e{alpha, beta, 0.0, 0.0,
              sign == DepthSign::negative_y ? -spd : spd, 0.0};
  PoseJson out;
  out.parameterization = "euler_zxy_deg";
  out.euler = e;
  out.pose = euler_to_pose(e);
  out.partial = true;
  return out;
}

// ---------------------------------------------------------------------------
// Intrinsics canonicalization
//
// Resamples an image acquired with one set of intrinsics onto the pixel grid
// of another, in a single bilinear pass. Output pixel (u', v') samples the
// source location whose image-plane physical coordinates equal its own, so
// the world ray through every resampled pixel is unchanged. Resampling
// cannot change perspective, so the focal lengths must agree.

struct CanonicalizeResult {
  Image image;
  bool empty_overlap = false;
};

inline CanonicalizeResult canonicalize(const Image& src, const Intrinsics& k_src,
                                       const Intrinsics& k_canon) {
  k_src.validate();
  k_canon.validate();
  if (src.width != k_src.w || src.height != k_src.h)
    throw std::invalid_argument("canonicalize: image size does not match source intrinsics");
  if (k_src.f != k_canon.f) {
    std::ostringstream os;
    os << "canonicalize: focal length mismatch, source " << k_src.f
       << " mm vs canonical " << k_canon.f << " mm";
    throw std::invalid_argument(os.str());
  }

  CanonicalizeResult out;
  out.image.width = k_canon.w;
  out.image.height = k_canon.h;
  out.image.pixels.assign(
      static_cast<std::size_t>(k_canon.w) * static_cast<std::size_t>(k_canon.h), 0.0);
  out.image.intrinsics = k_canon;
  out.image.pose = src.pose;

  const bool same_grid = k_src.w == k_canon.w && k_src.h == k_canon.h &&
                         k_src.sx == k_canon.sx && k_src.sy == k_canon.sy &&
                         k_src.ox == k_canon.ox && k_src.oy == k_canon.oy;
  if (same_grid) {
    out.image.pixels = src.pixels;
    return out;
  }

  const auto src_u = [&](int uc) {
    return (k_canon.image_x(uc) + k_src.ox) / k_src.sx + 0.5 * k_src.w - 0.5;
  };
  const auto src_v = [&](int vc) {
    return (k_canon.image_y(vc) + k_src.oy) / k_src.sy + 0.5 * k_src.h - 0.5;
  };

  // The bilinear footprint of source index t is nonzero only for
  // t in (-1, W); spacings are positive so the index map is increasing.
  const double u_lo = src_u(0), u_hi = src_u(k_canon.w - 1);
  const double v_lo = src_v(0), v_hi = src_v(k_canon.h - 1);
  if (u_hi <= -1.0 || u_lo >= static_cast<double>(k_src.w) || v_hi <= -1.0 ||
      v_lo >= static_cast<double>(k_src.h)) {
    out.empty_overlap = true;
    return out;
  }

  const auto tap = [&](int i, int j) {
    return (i < 0 || j < 0 || i >= k_src.w || j >= k_src.h) ? 0.0 : src.at(i, j);
  };
  for (int vc = 0; vc < k_canon.h; ++vc) {
    const double vf = src_v(vc);
    const int j0 = static_cast<int>(std::floor(vf));
    const double dv = vf - j0;
    for (int uc = 0; uc < k_canon.w; ++uc) {
      const double uf = src_u(uc);
      const int i0 = static_cast<int>(std::floor(uf));
      const double du = uf - i0;
      out.image.at(uc, vc) =
          (1.0 - du) * (1.0 - dv) * tap(i0, j0) + du * (1.0 - dv) * tap(i0 + 1, j0) +
          (1.0 - du) * dv * tap(i0, j0 + 1) + du * dv * tap(i0 + 1, j0 + 1);
    }
  }
  return out;
}

inline CanonicalizeResult canonicalize(const Image& src, const Intrinsics& k_canon) {
  if (!src.intrinsics)
    throw std::invalid_argument("canonicalize: image carries no intrinsics");
  return canonicalize(src, *src.intrinsics, k_canon);
}

// ---------------------------------------------------------------------------
// Metadata parsing

enum class MetaFormat { json_sidecar, dicom_min };

inline MetaFormat meta_format_from_string(const std::string& s) {
  if (s == "json_sidecar") return MetaFormat::json_sidecar;
  if (s == "dicom_min") return MetaFormat::dicom_min;
  throw std::invalid_argument("unknown metadata format \"" + s + "\"");
}

inline AcquisitionMeta meta_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("acquisition meta: expected an object");
  static const char* known[] = {"primary_angle_deg",     "secondary_angle_deg",
                                "source_to_patient_mm",  "source_to_detector_mm",
                                "pixel_spacing_mm",      "rows",
                                "cols",                  "principal_point_mm"};
  for (const auto& item : j.items()) {
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return item.key() == k; }) == std::end(known))
      throw std::invalid_argument("acquisition meta: unknown key \"" + item.key() + "\"");
  }
  const auto pair_field = [&](const char* key, std::optional<double>& first,
                              std::optional<double>& second) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 2)
      throw std::invalid_argument(std::string("acquisition meta: ") + key +
                                  " must be a 2-array");
    first = a[0].get<double>();
    second = a[1].get<double>();
  };
  AcquisitionMeta m;
  if (j.contains("primary_angle_deg")) m.primary_angle_deg = j.at("primary_angle_deg").get<double>();
  if (j.contains("secondary_angle_deg"))
    m.secondary_angle_deg = j.at("secondary_angle_deg").get<double>();
  if (j.contains("source_to_patient_mm"))
    m.source_to_patient_mm = j.at("source_to_patient_mm").get<double>();
  if (j.contains("source_to_detector_mm"))
    m.source_to_detector_mm = j.at("source_to_detector_mm").get<double>();
  pair_field("pixel_spacing_mm", m.pixel_spacing_x_mm, m.pixel_spacing_y_mm);
  pair_field("principal_point_mm", m.principal_point_x_mm, m.principal_point_y_mm);
  if (j.contains("rows")) m.rows = j.at("rows").get<int>();
  if (j.contains("cols")) m.cols = j.at("cols").get<int>();
  m.validate();
  return m;
}

inline nlohmann::json meta_to_json(const AcquisitionMeta& m) {
  nlohmann::json j = nlohmann::json::object();
  if (m.primary_angle_deg) j["primary_angle_deg"] = *m.primary_angle_deg;
  if (m.secondary_angle_deg) j["secondary_angle_deg"] = *m.secondary_angle_deg;
  if (m.source_to_patient_mm) j["source_to_patient_mm"] = *m.source_to_patient_mm;
  if (m.source_to_detector_mm) j["source_to_detector_mm"] = *m.source_to_detector_mm;
  if (m.pixel_spacing_x_mm && m.pixel_spacing_y_mm)
    j["pixel_spacing_mm"] = {*m.pixel_spacing_x_mm, *m.pixel_spacing_y_mm};
  if (m.rows) j["rows"] = *m.rows;
  if (m.cols) j["cols"] = *m.cols;
  if (m.principal_point_x_mm && m.principal_point_y_mm)
    j["principal_point_mm"] = {*m.principal_point_x_mm, *m.principal_point_y_mm};
  return j;
}

namespace detail {

inline std::uint16_t dcm_u16(const char* p) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                    (static_cast<unsigned char>(p[1]) << 8));
}

inline std::uint32_t dcm_u32(const char* p) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(p[0])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[3])) << 24);
}

inline std::string dcm_tag_name(std::uint16_t group, std::uint16_t elem) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "(%04x,%04x)", group, elem);
  return buf;
}

/// Backslash separated decimal strings, possibly space padded.
inline std::vector<double> dcm_decimal_values(const std::string& raw,
                                              const std::string& tag) {
  std::vector<double> vals;
  std::size_t start = 0;
  while (start <= raw.size()) {
    std::size_t end = raw.find('\\', start);
    if (end == std::string::npos) end = raw.size();
    const std::string item = raw.substr(start, end - start);
    char* stop = nullptr;
    const double v = std::strtod(item.c_str(), &stop);
    if (stop == item.c_str())
      throw io_error("dicom: bad decimal string in " + tag);
    vals.push_back(v);
    if (end == raw.size()) break;
    start = end + 1;
  }
  return vals;
}

}  // namespace detail

/// Explicit-VR little-endian stream holding at most the six attributes of
/// interest; everything else is skipped by its declared length.
inline AcquisitionMeta meta_from_dicom_bytes(const std::string& bytes) {
  if (bytes.size() < 132)
    throw io_error("dicom: file shorter than the 132 byte preamble");
  if (std::memcmp(bytes.data() + 128, "DICM", 4) != 0)
    throw io_error("dicom: missing DICM marker at offset 128");

  AcquisitionMeta m;
  std::size_t p = 132;
  while (p < bytes.size()) {
    if (p + 8 > bytes.size()) throw io_error("dicom: truncated element header");
    const std::uint16_t group = detail::dcm_u16(&bytes[p]);
    const std::uint16_t elem = detail::dcm_u16(&bytes[p + 2]);
    const char vr0 = bytes[p + 4];
    const char vr1 = bytes[p + 5];
    if (vr0 < 'A' || vr0 > 'Z' || vr1 < 'A' || vr1 > 'Z')
      throw io_error("dicom: implicit VR transfer syntax unsupported");
    const std::string vr{vr0, vr1};
    const std::string tag = detail::dcm_tag_name(group, elem);
    p += 6;

    std::size_t len = 0;
    if (vr == "OB" || vr == "OW" || vr == "OF" || vr == "SQ" || vr == "UT" || vr == "UN") {
      // two reserved bytes, then a 32 bit length
      if (p + 6 > bytes.size()) throw io_error("dicom: truncated element header in " + tag);
      const std::uint32_t l32 = detail::dcm_u32(&bytes[p + 2]);
      if (l32 == 0xFFFFFFFFu)
        throw io_error("dicom: undefined element length unsupported in " + tag);
      len = l32;
      p += 6;
    } else {
      len = detail::dcm_u16(&bytes[p]);
      p += 2;
    }
    if (p + len > bytes.size()) throw io_error("dicom: truncated value in " + tag);

    const auto decimal = [&]() {
      if (vr != "DS") throw io_error("dicom: expected VR DS in " + tag + ", got " + vr);
      return detail::dcm_decimal_values(bytes.substr(p, len), tag);
    };
    const auto decimal1 = [&]() {
      const auto vals = decimal();
      if (vals.size() != 1)
        throw io_error("dicom: expected a single value in " + tag);
      return vals[0];
    };
    const auto ushort1 = [&]() {
      if (vr != "US") throw io_error("dicom: expected VR US in " + tag + ", got " + vr);
      if (len != 2) throw io_error("dicom: expected a single value in " + tag);
      return static_cast<int>(detail::dcm_u16(&bytes[p]));
    };

    const std::uint32_t key = (static_cast<std::uint32_t>(group) << 16) | elem;
    switch (key) {
      case 0x00181510u: m.primary_angle_deg = decimal1(); break;
      case 0x00181511u: m.secondary_angle_deg = decimal1(); break;
      case 0x00181111u: m.source_to_patient_mm = decimal1(); break;
      case 0x00181110u: m.source_to_detector_mm = decimal1(); break;
      case 0x00181164u: {
        // imager pixel spacing is ordered row spacing, then column spacing
        const auto vals = decimal();
        if (vals.size() != 2) throw io_error("dicom: expected two values in " + tag);
        m.pixel_spacing_y_mm = vals[0];
        m.pixel_spacing_x_mm = vals[1];
        break;
      }
      case 0x00280010u: m.rows = ushort1(); break;
      case 0x00280011u: m.cols = ushort1(); break;
      default: break;
    }
    p += len;
  }
  m.validate();
  return m;
}

inline AcquisitionMeta parse_meta(const std::filesystem::path& path, MetaFormat fmt) {
  const std::string bytes = read_file_bytes(path);
  try {
    if (fmt == MetaFormat::dicom_min) return meta_from_dicom_bytes(bytes);
    return meta_from_json(nlohmann::json::parse(bytes));
  } catch (const io_error&) {
    throw;
  } catch (const std::exception& e) {
    throw io_error(std::string(e.what()) + " in " + path.string());
  }
}

}  // namespace carmreg
