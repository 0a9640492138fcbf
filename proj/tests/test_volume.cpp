#include <catch2/catch_amalgamated.hpp>

#include "carmreg/phantom.hpp"
#include "carmreg/volume.hpp"
#include "carmreg/volume_io.hpp"

#include <cstring>
#include <filesystem>
#include <random>

using namespace carmreg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "carmreg_volume_tests";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Volume make_test_volume(int nx, int ny, int nz, uint64_t seed) {
  Volume v;
  v.n = {nx, ny, nz};
  v.spacing = Vec3(0.5, 0.75, 1.25);
  v.origin = Vec3(-8.0, 3.5, -20.25);
  v.data.resize(v.voxel_count());
  std::mt19937_64 rng(seed);
  for (auto& x : v.data) x = static_cast<double>(static_cast<float>(uniform_in(rng, -0.5, 2.0)));
  return v;
}

// Independent NIfTI-1 header builder used as an IO oracle. Only the fields
// consumed by the loader are populated.
struct HeaderBuilder {
  std::string bytes = std::string(352, '\0');
  void put16(size_t off, int16_t v) { std::memcpy(&bytes[off], &v, 2); }
  void put32(size_t off, int32_t v) { std::memcpy(&bytes[off], &v, 4); }
  void putf(size_t off, float v) { std::memcpy(&bytes[off], &v, 4); }
  HeaderBuilder() {
    put32(0, 348);
    bytes[344] = 'n';
    bytes[345] = '+';
    bytes[346] = '1';
    bytes[347] = 0;
    putf(108, 352.0f);  // vox_offset
  }
  void set_dims(int nx, int ny, int nz) {
    put16(40, 3);
    put16(42, static_cast<int16_t>(nx));
    put16(44, static_cast<int16_t>(ny));
    put16(46, static_cast<int16_t>(nz));
    for (int a = 4; a <= 7; ++a) put16(40 + 2 * a, 1);
  }
  void set_sform(const Vec3& diag, const Vec3& offset) {
    put16(254, 1);
    const size_t rows[3] = {280, 296, 312};
    for (int r = 0; r < 3; ++r) {
      putf(rows[r] + 4 * r, static_cast<float>(diag[r]));
      putf(rows[r] + 12, static_cast<float>(offset[r]));
    }
  }
};

}  // namespace

TEST_CASE("volume grid conventions") {
  Volume v;
  v.n = {100, 100, 100};
  v.spacing = Vec3(1, 1, 1);
  v.origin = Vec3(-50, -50, -50);
  v.data.assign(v.voxel_count(), 0.0);
  v.validate();

  CHECK(v.isocenter().norm() == 0.0);
  CHECK(v.world_min() == Vec3(-50, -50, -50));
  CHECK(v.world_max() == Vec3(50, 50, 50));

  Volume w;
  w.n = {4, 3, 2};
  w.spacing = Vec3(0.5, 2.0, 1.5);
  w.origin = Vec3(1.0, -2.0, 3.0);
  w.data.assign(w.voxel_count(), 0.0);
  const Mat4 A = w.affine();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 idx(uniform_in(rng, 0, 4), uniform_in(rng, 0, 3), uniform_in(rng, 0, 2));
    const Vec3 mapped = (A * idx.homogeneous()).head<3>();
    const Vec3 expected = w.origin + idx.cwiseProduct(w.spacing);
    CHECK((mapped - expected).norm() < 1e-12);
  }

  SECTION("validate rejects bad grids") {
    Volume bad = w;
    bad.n[1] = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = w;
    bad.spacing.y() = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = w;
    bad.data.pop_back();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = w;
    bad.origin.x() = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }

  SECTION("linear index is x-fastest") {
    Volume u;
    u.n = {3, 2, 2};
    u.spacing = Vec3(1, 1, 1);
    u.origin = Vec3::Zero();
    u.data.resize(u.voxel_count());
    for (size_t i = 0; i < u.data.size(); ++i) u.data[i] = static_cast<double>(i);
    CHECK(u.at(1, 0, 0) == 1.0);
    CHECK(u.at(0, 1, 0) == 3.0);
    CHECK(u.at(0, 0, 1) == 6.0);
    CHECK(u.at(2, 1, 1) == 11.0);
  }
}

TEST_CASE("hounsfield to attenuation") {
  CHECK(hu_to_attenuation(0.0, 0.02) == Catch::Approx(0.02).margin(1e-15));
  CHECK(hu_to_attenuation(-1000.0, 0.02) == Catch::Approx(0.0).margin(1e-15));
  CHECK(hu_to_attenuation(1000.0, 0.02) == Catch::Approx(0.04).margin(1e-15));
  CHECK(hu_to_attenuation(-2000.0, 0.02) == 0.0);  // clamped at vacuum
  double prev = -1.0;
  for (double hu = -1000.0; hu <= 3000.0; hu += 250.0) {
    const double mu = hu_to_attenuation(hu, 0.02);
    CHECK(mu >= prev);
    prev = mu;
  }
  CHECK_THROWS_AS(hu_to_attenuation(0.0, 0.0), std::invalid_argument);

  Volume v = make_test_volume(4, 4, 4, 11);
  for (auto& x : v.data) x = 1000.0 * x;
  Volume mu = hu_to_attenuation(v, 0.02);
  REQUIRE(mu.data.size() == v.data.size());
  for (size_t i = 0; i < v.data.size(); ++i)
    CHECK(mu.data[i] == Catch::Approx(hu_to_attenuation(v.data[i], 0.02)).margin(1e-12));
}

TEST_CASE("structure masking") {
  Volume v = make_test_volume(6, 5, 4, 3);
  for (auto& x : v.data) x = std::abs(x) + 0.1;
  LabelMap lm;
  lm.n = v.n;
  lm.spacing = v.spacing;
  lm.origin = v.origin;
  lm.labels.resize(v.voxel_count());
  for (size_t i = 0; i < lm.labels.size(); ++i) lm.labels[i] = static_cast<uint16_t>(i % 3);
  lm.names = {{1, "left"}, {2, "right"}};

  Volume kept = mask_structures(v, lm, {1});
  for (size_t i = 0; i < v.data.size(); ++i) {
    if (lm.labels[i] == 1)
      CHECK(kept.data[i] == v.data[i]);
    else
      CHECK(kept.data[i] == 0.0);
  }

  Volume both = mask_structures(v, lm, {1, 2});
  for (size_t i = 0; i < v.data.size(); ++i)
    CHECK(both.data[i] == (lm.labels[i] == 0 ? 0.0 : v.data[i]));

  Volume none = mask_structures(v, lm, {});
  for (double x : none.data) CHECK(x == 0.0);

  LabelMap wrong = lm;
  wrong.n[0] += 1;
  wrong.labels.resize(static_cast<size_t>(wrong.n[0]) * wrong.n[1] * wrong.n[2]);
  CHECK_THROWS_AS(mask_structures(v, wrong, {1}), std::invalid_argument);
  wrong = lm;
  wrong.origin.x() += 0.5;
  CHECK_THROWS_AS(mask_structures(v, wrong, {1}), std::invalid_argument);
}

TEST_CASE("raw json volume round trip") {
  const fs::path base = temp_dir() / "vol_f32.json";
  Volume v = make_test_volume(7, 5, 3, 21);
  save_volume_rawjson(base, v, "f32");
  Volume r = load_volume_rawjson(base);
  CHECK(r.n == v.n);
  CHECK((r.spacing - v.spacing).norm() == 0.0);
  CHECK((r.origin - v.origin).norm() == 0.0);
  REQUIRE(r.data.size() == v.data.size());
  CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(double)) == 0);

  SECTION("i16 dtype stores integers exactly") {
    Volume h = v;
    std::mt19937_64 rng(5);
    for (auto& x : h.data) x = static_cast<double>(std::lround(uniform_in(rng, -1000.0, 3000.0)));
    const fs::path p = temp_dir() / "vol_i16.json";
    save_volume_rawjson(p, h, "i16");
    Volume hr = load_volume_rawjson(p);
    REQUIRE(hr.data.size() == h.data.size());
    CHECK(std::memcmp(hr.data.data(), h.data.data(), h.data.size() * sizeof(double)) == 0);
    const auto meta = nlohmann::json::parse(read_file_bytes(p));
    CHECK(meta.at("dtype") == "i16");
  }

  SECTION("i16 dtype rejects non integral data") {
    Volume h = v;
    h.data[0] = 0.25;
    CHECK_THROWS_AS(save_volume_rawjson(temp_dir() / "bad_i16.json", h, "i16"), std::invalid_argument);
  }

  SECTION("payload size mismatch detected") {
    const fs::path p = temp_dir() / "vol_trunc.json";
    save_volume_rawjson(p, v, "f32");
    fs::path bin = p;
    bin.replace_extension(".bin");
    auto bytes = read_file_bytes(bin);
    bytes.pop_back();
    atomic_write_bytes(bin, bytes);
    CHECK_THROWS_AS(load_volume_rawjson(p), io_error);
  }
}

TEST_CASE("nifti writer and loader round trip") {
  // float32-representable spacing and origin keep the affine exact.
  Volume v = make_test_volume(6, 4, 5, 33);
  v.spacing = Vec3(0.5, 1.5, 2.0);
  v.origin = Vec3(-24.0, 10.5, -3.25);
  const fs::path p = temp_dir() / "vol.nii";
  save_volume_nifti(p, v);
  Volume r = load_volume_nifti(p);
  CHECK(r.n == v.n);
  CHECK((r.spacing - v.spacing).norm() == 0.0);
  CHECK((r.origin - v.origin).norm() == 0.0);
  REQUIRE(r.data.size() == v.data.size());
  CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(double)) == 0);

  SECTION("extension dispatch") {
    Volume d = load_volume(p);
    CHECK(d.n == v.n);
    CHECK_THROWS_AS(load_volume(temp_dir() / "vol.nii.gz"), io_error);
    CHECK_THROWS_AS(load_volume(temp_dir() / "vol.xyz"), io_error);
  }
}

TEST_CASE("nifti reference header with int16 and rescale slope") {
  const int nx = 3, ny = 2, nz = 2;
  HeaderBuilder hb;
  hb.set_dims(nx, ny, nz);
  hb.put16(70, 4);   // datatype int16
  hb.put16(72, 16);  // bitpix
  hb.putf(112, 0.5f);  // scl_slope
  hb.putf(116, 0.0f);  // scl_inter
  const Vec3 spacing(1.5, 1.5, 2.0);
  const Vec3 origin(-2.25, -1.5, -2.0);
  const Vec3 center0 = origin + 0.5 * spacing;
  hb.set_sform(spacing, center0);

  std::string bytes = hb.bytes;
  const int16_t stored[nx * ny * nz] = {0, 2, 4, 6, 8, 10, -2, -4, -6, -8, -10, 12};
  const size_t payload = sizeof(stored);
  bytes.resize(352 + payload);
  std::memcpy(bytes.data() + 352, stored, payload);
  const fs::path p = temp_dir() / "reference.nii";
  atomic_write_bytes(p, bytes);

  Volume v = load_volume_nifti(p);
  REQUIRE(v.n == std::array<int, 3>{nx, ny, nz});
  CHECK((v.spacing - spacing).norm() == 0.0);
  CHECK((v.origin - origin).norm() == 0.0);
  for (int i = 0; i < nx * ny * nz; ++i)
    CHECK(v.data[static_cast<size_t>(i)] == 0.5 * static_cast<double>(stored[i]));

  SECTION("scl_slope zero means identity") {
    std::string b2 = bytes;
    const float zero = 0.0f;
    std::memcpy(b2.data() + 112, &zero, 4);
    const fs::path p2 = temp_dir() / "reference_slope0.nii";
    atomic_write_bytes(p2, b2);
    Volume v2 = load_volume_nifti(p2);
    for (int i = 0; i < nx * ny * nz; ++i)
      CHECK(v2.data[static_cast<size_t>(i)] == static_cast<double>(stored[i]));
  }

  SECTION("negative diagonal flips the axis") {
    HeaderBuilder hf;
    hf.set_dims(nx, ny, nz);
    hf.put16(70, 16);  // float32
    hf.put16(72, 32);
    // x axis stored right-to-left: diag -1.5, offset at the first stored center.
    hf.set_sform(Vec3(-1.5, 1.5, 2.0), Vec3(1.5, -0.75, -1.0));
    std::string bf = hf.bytes;
    float vals[nx * ny * nz];
    for (int i = 0; i < nx * ny * nz; ++i) vals[i] = static_cast<float>(i + 1);
    bf.resize(352 + sizeof(vals));
    std::memcpy(bf.data() + 352, vals, sizeof(vals));
    const fs::path pf = temp_dir() / "reference_flip.nii";
    atomic_write_bytes(pf, bf);
    Volume vf = load_volume_nifti(pf);
    CHECK(vf.spacing.x() == 1.5);
    // stored centers along x: 1.5, 0.0, -1.5 -> flipped origin = -1.5 - 0.75
    CHECK(vf.origin.x() == Catch::Approx(-2.25).margin(1e-12));
    // data reversed along x within each row
    CHECK(vf.at(0, 0, 0) == 3.0);
    CHECK(vf.at(1, 0, 0) == 2.0);
    CHECK(vf.at(2, 0, 0) == 1.0);
    CHECK(vf.at(0, 1, 1) == 12.0);
  }

  SECTION("oblique affine rejected") {
    std::string b3 = bytes;
    const float shear = 0.4f;
    std::memcpy(b3.data() + 280 + 4, &shear, 4);  // srow_x[1]
    const fs::path p3 = temp_dir() / "reference_oblique.nii";
    atomic_write_bytes(p3, b3);
    CHECK_THROWS_AS(load_volume_nifti(p3), io_error);
  }

  SECTION("unsupported datatype rejected") {
    std::string b4 = bytes;
    const int16_t dt = 2;  // uint8
    std::memcpy(b4.data() + 70, &dt, 2);
    const fs::path p4 = temp_dir() / "reference_dtype.nii";
    atomic_write_bytes(p4, b4);
    CHECK_THROWS_AS(load_volume_nifti(p4), io_error);
  }
}

TEST_CASE("labelmap and fiducial io") {
  LabelMap lm;
  lm.n = {4, 3, 2};
  lm.spacing = Vec3(1.0, 1.0, 2.0);
  lm.origin = Vec3(-2.0, -1.5, -2.0);
  lm.labels.resize(24);
  for (size_t i = 0; i < lm.labels.size(); ++i) lm.labels[i] = static_cast<uint16_t>(i % 4);
  lm.names = {{1, "inner"}, {2, "shell"}, {3, "frame"}};
  const fs::path p = temp_dir() / "labels.json";
  save_labelmap_rawjson(p, lm);
  LabelMap r = load_labelmap_rawjson(p);
  CHECK(r.n == lm.n);
  CHECK(r.labels == lm.labels);
  CHECK(r.names == lm.names);

  FiducialSet f;
  f.add("tip", Vec3(1.25, -3.5, 10.0));
  f.add("base", Vec3(0.0, 0.0, -7.75));
  const fs::path pf = temp_dir() / "fiducials.json";
  save_fiducials_json(pf, f);
  FiducialSet g = load_fiducials_json(pf);
  REQUIRE(g.names.size() == 2);
  CHECK(g.names[0] == "tip");
  CHECK(g.names[1] == "base");
  CHECK((g.points[0] - f.points[0]).norm() == 0.0);
  CHECK((g.points[1] - f.points[1]).norm() == 0.0);
}

TEST_CASE("phantom shapes") {
  SECTION("uniform cube") {
    PhantomResult p = make_phantom("uniform_cube", {{"edge_mm", 10.0}, {"mu", 0.02}});
    CHECK(p.volume.n == std::array<int, 3>{10, 10, 10});
    CHECK((p.volume.origin - Vec3(-5, -5, -5)).norm() == 0.0);
    for (double x : p.volume.data) CHECK(x == 0.02);
    CHECK(p.volume.isocenter().norm() == 0.0);
    REQUIRE(p.fiducials.names.size() == 9);
    CHECK(p.fiducials.names[0] == "center");
    CHECK(!p.labels.has_value());
  }

  SECTION("sphere with offset inside a box") {
    nlohmann::json params = {{"radius_mm", 20.0},      {"mu", 0.01},
                             {"voxel_mm", 1.0},        {"center_offset_mm", {10.0, 8.0, -12.0}},
                             {"box_mu", 0.0},          {"box_edge_mm", 96.0}};
    PhantomResult p = make_phantom("sphere", params);
    CHECK(p.volume.n == std::array<int, 3>{96, 96, 96});
    CHECK(p.volume.isocenter().norm() == 0.0);
    const Vec3 off(10.0, 8.0, -12.0);
    // voxel centers classified against the analytic sphere
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 500; ++trial) {
      const int i = static_cast<int>(uniform_in(rng, 0, 96));
      const int j = static_cast<int>(uniform_in(rng, 0, 96));
      const int k = static_cast<int>(uniform_in(rng, 0, 96));
      const Vec3 c = p.volume.origin + Vec3(i + 0.5, j + 0.5, k + 0.5);
      const double expect = (c - off).squaredNorm() <= 400.0 ? 0.01 : 0.0;
      CHECK(p.volume.at(i, j, k) == expect);
    }
    bool found_center = false;
    for (size_t i = 0; i < p.fiducials.names.size(); ++i)
      if (p.fiducials.names[i] == "sphere_center") {
        found_center = true;
        CHECK((p.fiducials.points[i] - off).norm() == 0.0);
      }
    CHECK(found_center);

    params["center_offset_mm"] = {40.0, 0.0, 0.0};
    CHECK_THROWS_AS(make_phantom("sphere", params), std::invalid_argument);
  }

  SECTION("nested spheres produce labels") {
    PhantomResult p = make_phantom("nested_spheres", {{"r_inner_mm", 10.0},
                                                      {"r_outer_mm", 20.0},
                                                      {"mu_inner", 0.01},
                                                      {"mu_outer", 0.02},
                                                      {"voxel_mm", 1.0}});
    REQUIRE(p.labels.has_value());
    const Volume& v = p.volume;
    const LabelMap& lm = *p.labels;
    CHECK(lm.names == std::vector<std::pair<uint16_t, std::string>>{{1, "inner"}, {2, "shell"}});
    size_t n_inner = 0, n_shell = 0;
    for (int k = 0; k < v.n[2]; ++k)
      for (int j = 0; j < v.n[1]; ++j)
        for (int i = 0; i < v.n[0]; ++i) {
          const Vec3 c = v.origin + Vec3(i + 0.5, j + 0.5, k + 0.5);
          const double d = c.norm();
          const uint16_t lab = lm.at(i, j, k);
          if (d <= 10.0) {
            CHECK(lab == 1);
            CHECK(v.at(i, j, k) == 0.01);
            ++n_inner;
          } else if (d <= 20.0) {
            CHECK(lab == 2);
            CHECK(v.at(i, j, k) == 0.02);
            ++n_shell;
          } else {
            CHECK(lab == 0);
            CHECK(v.at(i, j, k) == 0.0);
          }
        }
    // voxelized volumes approximate the analytic ball volumes
    CHECK(std::abs(static_cast<double>(n_inner) - 4.0 / 3.0 * kPi * 1000.0) / (4.0 / 3.0 * kPi * 1000.0) < 0.05);
    const double shell_analytic = 4.0 / 3.0 * kPi * (8000.0 - 1000.0);
    CHECK(std::abs(static_cast<double>(n_shell) - shell_analytic) / shell_analytic < 0.05);

    Volume inner_only = mask_structures(v, lm, {1});
    double total = 0.0, kept = 0.0;
    for (double x : v.data) total += x;
    for (double x : inner_only.data) kept += x;
    CHECK(kept == Catch::Approx(0.01 * static_cast<double>(n_inner)).epsilon(1e-9));
    CHECK(kept < total);
  }

  SECTION("two boxes leave an empty gap") {
    PhantomResult p = make_phantom("two_boxes", {{"size_mm", 20.0}, {"gap_mm", 10.0}, {"mu", 0.02}});
    const Volume& v = p.volume;
    for (int k = 0; k < v.n[2]; ++k)
      for (int j = 0; j < v.n[1]; ++j)
        for (int i = 0; i < v.n[0]; ++i) {
          const Vec3 c = v.origin + Vec3(i + 0.5, j + 0.5, k + 0.5);
          const bool in_x = std::abs(c.x()) >= 5.0 && std::abs(c.x()) <= 25.0;
          const bool in_yz = std::abs(c.y()) <= 10.0 && std::abs(c.z()) <= 10.0;
          CHECK(v.at(i, j, k) == ((in_x && in_yz) ? 0.02 : 0.0));
        }
    bool found = false;
    for (size_t i = 0; i < p.fiducials.names.size(); ++i)
      if (p.fiducials.names[i] == "box_p_center") {
        found = true;
        CHECK((p.fiducials.points[i] - Vec3(15, 0, 0)).norm() == 0.0);
      }
    CHECK(found);
  }

  SECTION("bad inputs rejected") {
    CHECK_THROWS_AS(make_phantom("donut"), std::invalid_argument);
    CHECK_THROWS_AS(make_phantom("uniform_cube", {{"edge", 10.0}}), std::invalid_argument);
    CHECK_THROWS_AS(make_phantom("uniform_cube", {{"edge_mm", -1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(make_phantom("nested_spheres", {{"r_inner_mm", 30.0}}), std::invalid_argument);
  }
}
