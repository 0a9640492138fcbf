#pragma once

#include <nlohmann/json.hpp>

#include "carmreg/volume.hpp"

#include <cstring>

// Volume file formats.
//
// rawjson: a small JSON header naming a sibling little-endian binary payload.
//   { "shape": [nx,ny,nz], "spacing_mm": [...], "origin_mm": [...],
//     "dtype": "f32"|"i16", "data": "name.bin", "label_names": {...}? }
//
// NIfTI-1: single .nii file, 348-byte header + 4 pad bytes, magic "n+1",
// float32 or int16 payloads, scl_slope/scl_inter honored, diagonal affines
// only. The NIfTI affine addresses voxel centers, so qoffset/srow offsets are
// origin + spacing/2.

namespace carmreg {

namespace detail {

inline void put_bytes(std::string& buf, std::size_t off, const void* src, std::size_t len) {
  std::memcpy(buf.data() + off, src, len);
}
inline void put_i16(std::string& buf, std::size_t off, int16_t v) { put_bytes(buf, off, &v, 2); }
inline void put_i32(std::string& buf, std::size_t off, int32_t v) { put_bytes(buf, off, &v, 4); }
inline void put_f32(std::string& buf, std::size_t off, float v) { put_bytes(buf, off, &v, 4); }

inline int16_t get_i16(const std::string& buf, std::size_t off) {
  int16_t v;
  std::memcpy(&v, buf.data() + off, 2);
  return v;
}
inline int32_t get_i32(const std::string& buf, std::size_t off) {
  int32_t v;
  std::memcpy(&v, buf.data() + off, 4);
  return v;
}
inline float get_f32(const std::string& buf, std::size_t off) {
  float v;
  std::memcpy(&v, buf.data() + off, 4);
  return v;
}

static_assert(std::endian::native == std::endian::little,
              "volume io assumes a little-endian host");

}  // namespace detail

// ---------------------------------------------------------------------------
// rawjson

inline void save_volume_rawjson(const std::filesystem::path& header_path, const Volume& v,
                                const std::string& dtype = "f32") {
  v.validate();
  if (dtype != "f32" && dtype != "i16")
    throw std::invalid_argument("rawjson: dtype must be f32 or i16");
  std::filesystem::path bin_path = header_path;
  bin_path.replace_extension(".bin");

  std::string payload;
  if (dtype == "f32") {
    payload.resize(v.data.size() * 4);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      const float f = static_cast<float>(v.data[i]);
      std::memcpy(payload.data() + 4 * i, &f, 4);
    }
  } else {
    payload.resize(v.data.size() * 2);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      const double d = v.data[i];
      const double r = std::nearbyint(d);
      if (std::abs(d - r) > 1e-6 || r < -32768.0 || r > 32767.0)
        throw std::invalid_argument("rawjson: value not representable as i16");
      const int16_t s = static_cast<int16_t>(r);
      std::memcpy(payload.data() + 2 * i, &s, 2);
    }
  }

  nlohmann::json j;
  j["shape"] = {v.n[0], v.n[1], v.n[2]};
  j["spacing_mm"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  j["origin_mm"] = {v.origin[0], v.origin[1], v.origin[2]};
  j["dtype"] = dtype;
  j["data"] = bin_path.filename().string();

  atomic_write_bytes(bin_path, payload);
  atomic_write_bytes(header_path, j.dump(2) + "\n");
}

inline Volume load_volume_rawjson(const std::filesystem::path& header_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(header_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw io_error("rawjson header parse error in " + header_path.string() + ": " + e.what());
  }
  Volume v;
  try {
    for (int a = 0; a < 3; ++a) {
      v.n[a] = j.at("shape").at(a).get<int>();
      v.spacing[a] = j.at("spacing_mm").at(a).get<double>();
      v.origin[a] = j.at("origin_mm").at(a).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error("rawjson header missing fields in " + header_path.string() + ": " + e.what());
  }
  const std::string dtype = j.value("dtype", std::string());
  if (dtype != "f32" && dtype != "i16")
    throw io_error("rawjson: unsupported dtype \"" + dtype + "\" in " + header_path.string());
  const std::filesystem::path bin_path =
      header_path.parent_path() / j.value("data", std::string());
  const std::string payload = read_file_bytes(bin_path);

  const std::size_t count = static_cast<std::size_t>(v.n[0]) * v.n[1] * v.n[2];
  const std::size_t expected = count * (dtype == "f32" ? 4 : 2);
  if (payload.size() != expected)
    throw io_error("rawjson: payload size " + std::to_string(payload.size()) + " does not match shape (expected " +
                   std::to_string(expected) + ") for " + bin_path.string());

  v.data.resize(count);
  if (dtype == "f32") {
    for (std::size_t i = 0; i < count; ++i)
      v.data[i] = static_cast<double>(detail::get_f32(payload, 4 * i));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      int16_t s;
      std::memcpy(&s, payload.data() + 2 * i, 2);
      v.data[i] = static_cast<double>(s);
    }
  }
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// NIfTI-1

inline void save_volume_nifti(const std::filesystem::path& path, const Volume& v,
                              const std::string& dtype = "f32") {
  v.validate();
  if (dtype != "f32" && dtype != "i16")
    throw std::invalid_argument("nifti: dtype must be f32 or i16");
  using namespace detail;

  std::string hdr(352, '\0');
  put_i32(hdr, 0, 348);
  put_i16(hdr, 40, 3);  // dim[0]
  for (int a = 0; a < 3; ++a) put_i16(hdr, 42 + 2 * a, static_cast<int16_t>(v.n[a]));
  for (int a = 3; a < 7; ++a) put_i16(hdr, 42 + 2 * a, 1);
  put_i16(hdr, 70, dtype == "f32" ? 16 : 4);
  put_i16(hdr, 72, dtype == "f32" ? 32 : 16);
  put_f32(hdr, 76, 1.0f);  // qfac
  for (int a = 0; a < 3; ++a) put_f32(hdr, 80 + 4 * a, static_cast<float>(v.spacing[a]));
  put_f32(hdr, 108, 352.0f);  // vox_offset
  put_f32(hdr, 112, 1.0f);    // scl_slope
  put_f32(hdr, 116, 0.0f);    // scl_inter
  put_i16(hdr, 252, 0);       // qform_code
  put_i16(hdr, 254, 1);       // sform_code
  // srow rows address voxel centers.
  const Vec3 center0 = v.origin + 0.5 * v.spacing;
  put_f32(hdr, 280, static_cast<float>(v.spacing[0]));
  put_f32(hdr, 280 + 12, static_cast<float>(center0[0]));
  put_f32(hdr, 296 + 4, static_cast<float>(v.spacing[1]));
  put_f32(hdr, 296 + 12, static_cast<float>(center0[1]));
  put_f32(hdr, 312 + 8, static_cast<float>(v.spacing[2]));
  put_f32(hdr, 312 + 12, static_cast<float>(center0[2]));
  hdr[344] = 'n';
  hdr[345] = '+';
  hdr[346] = '1';
  hdr[347] = '\0';
  // bytes 348..351: extension flag, all zero

  std::string out = hdr;
  if (dtype == "f32") {
    out.resize(352 + v.data.size() * 4);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      const float f = static_cast<float>(v.data[i]);
      std::memcpy(out.data() + 352 + 4 * i, &f, 4);
    }
  } else {
    out.resize(352 + v.data.size() * 2);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
      const double d = v.data[i];
      const double r = std::nearbyint(d);
      if (std::abs(d - r) > 1e-6 || r < -32768.0 || r > 32767.0)
        throw std::invalid_argument("nifti: value not representable as i16");
      const int16_t s = static_cast<int16_t>(r);
      std::memcpy(out.data() + 352 + 2 * i, &s, 2);
    }
  }
  atomic_write_bytes(path, out);
}

inline Volume load_volume_nifti(const std::filesystem::path& path) {
  using namespace detail;
  const std::string buf = read_file_bytes(path);
  if (buf.size() < 352) throw io_error("nifti: file too small: " + path.string());
  if (get_i32(buf, 0) != 348)
    throw io_error("nifti: bad sizeof_hdr (byte-swapped headers unsupported): " + path.string());
  if (!(buf[344] == 'n' && buf[345] == '+' && buf[346] == '1'))
    throw io_error("nifti: magic is not n+1 (two-file or non-NIfTI input): " + path.string());

  const int16_t ndim = get_i16(buf, 40);
  if (ndim < 3) throw io_error("nifti: expected a 3D dataset: " + path.string());
  Volume v;
  for (int a = 0; a < 3; ++a) v.n[a] = get_i16(buf, 42 + 2 * a);
  for (int a = 3; a < ndim; ++a)
    if (get_i16(buf, 42 + 2 * a) > 1)
      throw io_error("nifti: more than three non-trivial dimensions: " + path.string());

  const int16_t datatype = get_i16(buf, 70);
  if (datatype != 4 && datatype != 16)
    throw io_error("nifti: unsupported datatype " + std::to_string(datatype) +
                   " (only int16 and float32): " + path.string());

  for (int a = 0; a < 3; ++a) v.spacing[a] = get_f32(buf, 80 + 4 * a);

  float slope = get_f32(buf, 112);
  const float inter = get_f32(buf, 116);
  if (slope == 0.0f) slope = 1.0f;

  // Orientation: diagonal affines only. Signs may flip axes.
  Vec3 diag(v.spacing[0], v.spacing[1], v.spacing[2]);
  Vec3 center0 = Vec3::Zero();
  const int16_t sform = get_i16(buf, 254);
  const int16_t qform = get_i16(buf, 252);
  if (sform > 0) {
    double row[3][4];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) row[r][c] = get_f32(buf, 280 + 16 * r + 4 * c);
    double maxdiag = 0.0;
    for (int r = 0; r < 3; ++r) maxdiag = std::max(maxdiag, std::abs(row[r][r]));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (r != c && std::abs(row[r][c]) > 1e-5 * std::max(1.0, maxdiag))
          throw io_error("nifti: rotated or oblique affine unsupported: " + path.string());
    for (int a = 0; a < 3; ++a) {
      diag[a] = row[a][a];
      center0[a] = row[a][3];
    }
  } else if (qform > 0) {
    const float b = get_f32(buf, 256), c = get_f32(buf, 260), d = get_f32(buf, 264);
    if (std::abs(b) > 1e-6 || std::abs(c) > 1e-6 || std::abs(d) > 1e-6)
      throw io_error("nifti: rotated qform unsupported: " + path.string());
    const float qfac = get_f32(buf, 76) < 0.0f ? -1.0f : 1.0f;
    diag[0] = v.spacing[0];
    diag[1] = v.spacing[1];
    diag[2] = qfac * v.spacing[2];
    center0 = Vec3(get_f32(buf, 268), get_f32(buf, 272), get_f32(buf, 276));
  } else {
    center0 = 0.5 * diag;  // origin at zero
  }

  const std::size_t vox_offset = static_cast<std::size_t>(get_f32(buf, 108));
  if (vox_offset < 348 || vox_offset > buf.size())
    throw io_error("nifti: bad vox_offset: " + path.string());

  const std::size_t count = static_cast<std::size_t>(v.n[0]) * v.n[1] * v.n[2];
  const std::size_t bpv = (datatype == 16) ? 4 : 2;
  if (buf.size() - vox_offset < count * bpv)
    throw io_error("nifti: payload truncated: " + path.string());

  v.data.resize(count);
  const double dslope = static_cast<double>(slope);
  const double dinter = static_cast<double>(inter);
  if (datatype == 16) {
    for (std::size_t i = 0; i < count; ++i)
      v.data[i] = dslope * static_cast<double>(get_f32(buf, vox_offset + 4 * i)) + dinter;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      int16_t s;
      std::memcpy(&s, buf.data() + vox_offset + 2 * i, 2);
      v.data[i] = dslope * static_cast<double>(s) + dinter;
    }
  }

  // Negative diagonals: flip those axes so spacing stays positive.
  std::array<bool, 3> flip{};
  for (int a = 0; a < 3; ++a) {
    if (diag[a] < 0.0) {
      flip[a] = true;
      center0[a] = center0[a] + (v.n[a] - 1) * diag[a];
      diag[a] = -diag[a];
    }
    if (!(diag[a] > 0.0)) throw io_error("nifti: zero spacing: " + path.string());
    v.spacing[a] = diag[a];
  }
  if (flip[0] || flip[1] || flip[2]) {
    std::vector<double> flipped(count);
    for (int k = 0; k < v.n[2]; ++k)
      for (int j = 0; j < v.n[1]; ++j)
        for (int i = 0; i < v.n[0]; ++i) {
          const int si = flip[0] ? v.n[0] - 1 - i : i;
          const int sj = flip[1] ? v.n[1] - 1 - j : j;
          const int sk = flip[2] ? v.n[2] - 1 - k : k;
          flipped[v.index(i, j, k)] = v.data[v.index(si, sj, sk)];
        }
    v.data = std::move(flipped);
  }

  v.origin = center0 - 0.5 * v.spacing;
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Extension dispatch

inline Volume load_volume(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".nii") return load_volume_nifti(path);
  if (ext == ".json") return load_volume_rawjson(path);
  if (ext == ".gz") throw io_error("compressed volumes unsupported, decompress first: " + path.string());
  throw io_error("unknown volume extension \"" + ext + "\": " + path.string());
}

inline void save_volume(const std::filesystem::path& path, const Volume& v,
                        const std::string& dtype = "f32") {
  const std::string ext = path.extension().string();
  if (ext == ".nii")
    save_volume_nifti(path, v, dtype);
  else if (ext == ".json")
    save_volume_rawjson(path, v, dtype);
  else
    throw io_error("unknown volume extension \"" + ext + "\": " + path.string());
}

// ---------------------------------------------------------------------------
// Label maps (rawjson i16 payloads with an optional name table)

inline void save_labelmap_rawjson(const std::filesystem::path& header_path, const LabelMap& lm) {
  std::filesystem::path bin_path = header_path;
  bin_path.replace_extension(".bin");
  const std::size_t count = static_cast<std::size_t>(lm.n[0]) * lm.n[1] * lm.n[2];
  if (lm.labels.size() != count) throw std::invalid_argument("labelmap: data size mismatch");

  std::string payload(count * 2, '\0');
  for (std::size_t i = 0; i < count; ++i) {
    if (lm.labels[i] > 32767) throw std::invalid_argument("labelmap: label exceeds i16 range");
    const int16_t s = static_cast<int16_t>(lm.labels[i]);
    std::memcpy(payload.data() + 2 * i, &s, 2);
  }

  nlohmann::json j;
  j["shape"] = {lm.n[0], lm.n[1], lm.n[2]};
  j["spacing_mm"] = {lm.spacing[0], lm.spacing[1], lm.spacing[2]};
  j["origin_mm"] = {lm.origin[0], lm.origin[1], lm.origin[2]};
  j["dtype"] = "i16";
  j["data"] = bin_path.filename().string();
  if (!lm.names.empty()) {
    nlohmann::json names;
    for (const auto& [id, name] : lm.names) names[std::to_string(id)] = name;
    j["label_names"] = names;
  }

  atomic_write_bytes(bin_path, payload);
  atomic_write_bytes(header_path, j.dump(2) + "\n");
}

inline LabelMap load_labelmap_rawjson(const std::filesystem::path& header_path) {
  const Volume v = load_volume_rawjson(header_path);
  LabelMap lm;
  lm.n = v.n;
  lm.spacing = v.spacing;
  lm.origin = v.origin;
  lm.labels.resize(v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const float f = v.data[i];
    if (f < 0.0f) throw io_error("labelmap: negative label in " + header_path.string());
    lm.labels[i] = static_cast<uint16_t>(f);
  }
  nlohmann::json j = nlohmann::json::parse(read_file_bytes(header_path));
  if (j.contains("label_names"))
    for (const auto& [key, val] : j.at("label_names").items())
      lm.names.emplace_back(static_cast<uint16_t>(std::stoi(key)), val.get<std::string>());
  return lm;
}

// ---------------------------------------------------------------------------
// Fiducials

inline void save_fiducials_json(const std::filesystem::path& path, const FiducialSet& f) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < f.points.size(); ++i) {
    nlohmann::json e;
    e["name"] = i < f.names.size() ? f.names[i] : ("f" + std::to_string(i));
    e["position_mm"] = {f.points[i].x(), f.points[i].y(), f.points[i].z()};
    arr.push_back(e);
  }
  nlohmann::json j;
  j["fiducials"] = arr;
  atomic_write_bytes(path, j.dump(2) + "\n");
}

inline FiducialSet load_fiducials_json(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw io_error("fiducial json parse error in " + path.string() + ": " + e.what());
  }
  FiducialSet f;
  try {
    for (const auto& e : j.at("fiducials")) {
      const auto& p = e.at("position_mm");
      f.add(e.value("name", "f" + std::to_string(f.size())),
            Vec3(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error("fiducial json malformed in " + path.string() + ": " + e.what());
  }
  return f;
}

}  // namespace carmreg
