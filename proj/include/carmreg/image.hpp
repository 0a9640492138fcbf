#pragma once

#include <nlohmann/json.hpp>

#include "carmreg/common.hpp"
#include "carmreg/geometry.hpp"

#include <cstring>
#include <filesystem>
#include <optional>

namespace carmreg {

/// Line-integral image on the detector grid. Row major, u (column) fastest.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;
  std::optional<Intrinsics> intrinsics;
  std::optional<Pose> pose;

  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(u);
  }
  double at(int u, int v) const { return pixels[index(u, v)]; }
  double& at(int u, int v) { return pixels[index(u, v)]; }

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }

  void validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("image: dimensions must be positive");
    if (pixels.size() != pixel_count())
      throw std::invalid_argument("image: pixel count does not match dimensions");
    for (double p : pixels)
      if (!std::isfinite(p)) throw std::invalid_argument("image: non-finite pixel");
  }

  static Image zeros(int w, int h) {
    Image img;
    img.width = w;
    img.height = h;
    img.pixels.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.0);
    return img;
  }
};

inline std::filesystem::path pgm_window_sidecar(const std::filesystem::path& pgm_path) {
  return std::filesystem::path(pgm_path.string() + ".window.json");
}

/// 16-bit P5 with big-endian samples, min-max windowed; the window is recorded
/// in a sidecar JSON next to the image so the loader can undo the scaling.
inline void save_image_pgm(const std::filesystem::path& path, const Image& img) {
  img.validate();
  double lo = img.pixels[0], hi = img.pixels[0];
  for (double p : img.pixels) {
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  std::string bytes = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                      "\n65535\n";
  const std::size_t header = bytes.size();
  bytes.resize(header + img.pixel_count() * 2);
  const double scale = hi > lo ? 65535.0 / (hi - lo) : 0.0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const long q = std::lround((img.pixels[i] - lo) * scale);
    const auto s = static_cast<uint16_t>(std::clamp(q, 0L, 65535L));
    bytes[header + 2 * i] = static_cast<char>(s >> 8);
    bytes[header + 2 * i + 1] = static_cast<char>(s & 0xff);
  }
  nlohmann::json j;
  j["window"] = {lo, hi};
  atomic_write_bytes(path, bytes);
  atomic_write_bytes(pgm_window_sidecar(path), j.dump(2) + "\n");
}

inline Image load_image_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t pos = 0;
  const auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw io_error("pgm: truncated header in " + path.string());
    return bytes.substr(start, pos - start);
  };

  if (next_token() != "P5") throw io_error("pgm: not a P5 file: " + path.string());
  Image img;
  try {
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 65535) throw io_error("pgm: expected maxval 65535 in " + path.string());
  } catch (const std::logic_error&) {
    throw io_error("pgm: malformed header in " + path.string());
  }
  if (img.width <= 0 || img.height <= 0) throw io_error("pgm: bad dimensions in " + path.string());
  ++pos;  // single whitespace byte after maxval
  if (bytes.size() - pos < img.pixel_count() * 2)
    throw io_error("pgm: truncated pixel data in " + path.string());

  double lo = 0.0, hi = 65535.0;
  bool windowed = false;
  const auto sidecar = pgm_window_sidecar(path);
  if (std::filesystem::exists(sidecar)) {
    try {
      const auto j = nlohmann::json::parse(read_file_bytes(sidecar));
      lo = j.at("window").at(0).get<double>();
      hi = j.at("window").at(1).get<double>();
      windowed = true;
    } catch (const nlohmann::json::exception& e) {
      throw io_error("pgm: bad window sidecar " + sidecar.string() + ": " + e.what());
    }
  }

  img.pixels.resize(img.pixel_count());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto b0 = static_cast<unsigned char>(bytes[pos + 2 * i]);
    const auto b1 = static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
    const double q = static_cast<double>((static_cast<unsigned>(b0) << 8) | b1);
    img.pixels[i] = windowed ? (hi > lo ? lo + q * (hi - lo) / 65535.0 : lo) : q;
  }
  return img;
}

inline void save_image_rawf32(const std::filesystem::path& header_path, const Image& img) {
  img.validate();
  std::filesystem::path bin_path = header_path;
  bin_path.replace_extension(".bin");
  std::string payload(img.pixel_count() * 4, '\0');
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const float f = static_cast<float>(img.pixels[i]);
    std::memcpy(payload.data() + 4 * i, &f, 4);
  }
  nlohmann::json j;
  j["width"] = img.width;
  j["height"] = img.height;
  j["dtype"] = "f32";
  j["data"] = bin_path.filename().string();
  atomic_write_bytes(bin_path, payload);
  atomic_write_bytes(header_path, j.dump(2) + "\n");
}

inline Image load_image_rawf32(const std::filesystem::path& header_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(header_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw io_error("rawf32 header parse error in " + header_path.string() + ": " + e.what());
  }
  Image img;
  try {
    img.width = j.at("width").get<int>();
    img.height = j.at("height").get<int>();
    if (j.at("dtype").get<std::string>() != "f32")
      throw io_error("rawf32: dtype must be f32 in " + header_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw io_error("rawf32 header error in " + header_path.string() + ": " + e.what());
  }
  if (img.width <= 0 || img.height <= 0)
    throw io_error("rawf32: bad dimensions in " + header_path.string());
  const auto bin_path = header_path.parent_path() / j.at("data").get<std::string>();
  const std::string payload = read_file_bytes(bin_path);
  if (payload.size() != img.pixel_count() * 4)
    throw io_error("rawf32: payload size mismatch in " + bin_path.string());
  img.pixels.resize(img.pixel_count());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    float f;
    std::memcpy(&f, payload.data() + 4 * i, 4);
    img.pixels[i] = static_cast<double>(f);
  }
  return img;
}

inline Image load_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return load_image_pgm(path);
  if (ext == ".json") return load_image_rawf32(path);
  throw io_error("image: unsupported extension \"" + ext + "\" (want .pgm or .json)");
}

inline void save_image(const std::filesystem::path& path, const Image& img) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return save_image_pgm(path, img);
  if (ext == ".json") return save_image_rawf32(path, img);
  throw io_error("image: unsupported extension \"" + ext + "\" (want .pgm or .json)");
}

}  // namespace carmreg
