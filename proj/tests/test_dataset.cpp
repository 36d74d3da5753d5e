#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>

#include "prtg/dataset.hpp"
#include "prtg/rng.hpp"

using namespace prtg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Camera test_camera() { return look_at({1.0, -3.5, 1.2}, {0, 0, 0}, {0, 0, 1}, 80.0, 64, 48); }

Manifest small_manifest() {
  Manifest m;
  m.scene = "unit";
  m.hdr_cutoff = 4.4019;
  m.bound_center = {0, 0, 0};
  m.bound_radius = 1.0;
  Group g;
  g.name = "g0";
  for (int c = 0; c < 2; ++c) {
    CameraRecord rec;
    rec.id = c;
    rec.camera = look_at({4.0 * std::cos(c), 4.0 * std::sin(c), 0.7}, {0, 0, 0}, {0, 0, 1}, 70.0, 8, 6);
    rec.split = c == 0 ? Split::Train : Split::Test;
    g.cameras.push_back(rec);
    g.masks.push_back({c, mask_path(0, c)});
  }
  for (int l = 0; l < 2; ++l) {
    LightRecord rec;
    rec.id = l;
    rec.direction = normalized({0.3 * l, 0.2, 1.0});
    rec.split = l == 0 ? Split::Train : Split::Test;
    g.lights.push_back(rec);
  }
  for (int c = 0; c < 2; ++c)
    for (int l = 0; l < 2; ++l)
      g.frames.push_back({c, l, c == 0 && l == 0 ? Split::Train : Split::Test, image_path(0, c, l)});
  m.groups.push_back(g);
  return m;
}

}  // namespace

TEST_CASE("1x1 PFM has a 12-byte payload and round-trips exactly") {
  TempDir dir("prtg_test_pfm1");
  Image img(1, 1, 3);
  img.set_rgb(0, 0, {0.5, 1.0, 2.0});
  const auto path = dir.path / "a.pfm";
  write_pfm(path, img);
  const std::string bytes = slurp(path);
  const std::string header = "PF\n1 1\n-1.0\n";
  REQUIRE(bytes.size() == header.size() + 12);
  CHECK(bytes.substr(0, header.size()) == header);
  float v[3];
  std::memcpy(v, bytes.data() + header.size(), 12);
  CHECK(v[0] == 0.5f);
  CHECK(v[1] == 1.0f);
  CHECK(v[2] == 2.0f);
  CHECK(read_pfm(path) == img);
}

TEST_CASE("PFM rows are stored bottom to top and gray images use Pf") {
  TempDir dir("prtg_test_pfm2");
  Image img(2, 2, 1);
  img.at(0, 0, 0) = 1.0f;  // top-left
  const auto path = dir.path / "g.pfm";
  write_pfm(path, img);
  const std::string bytes = slurp(path);
  CHECK(bytes.substr(0, 3) == "Pf\n");
  float last_row_first = 0.0f;
  std::memcpy(&last_row_first, bytes.data() + bytes.size() - 8, 4);
  CHECK(last_row_first == 1.0f);
  CHECK(read_pfm(path) == img);
}

TEST_CASE("large PFM round-trips byte-identically") {
  TempDir dir("prtg_test_pfm3");
  Image img(2048, 1366, 3);
  Rng rng(1);
  for (float& v : img.data) v = static_cast<float>(10.0 * uniform01(rng));
  write_pfm(dir.path / "big.pfm", img);
  write_pfm(dir.path / "big2.pfm", read_pfm(dir.path / "big.pfm"));
  const std::string a = slurp(dir.path / "big.pfm");
  CHECK(a.size() > 33'000'000);
  CHECK(std::hash<std::string>{}(a) == std::hash<std::string>{}(slurp(dir.path / "big2.pfm")));
}

TEST_CASE("PFM errors") {
  TempDir dir("prtg_test_pfm4");
  Image img(2, 1, 3);
  img.at(1, 0, 2) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(write_pfm(dir.path / "nan.pfm", img), InvalidInput);

  Image ok(4, 4, 3);
  write_pfm(dir.path / "t.pfm", ok);
  fs::resize_file(dir.path / "t.pfm", fs::file_size(dir.path / "t.pfm") - 7);
  CHECK_THROWS_WITH_AS(read_pfm(dir.path / "t.pfm"), doctest::Contains("truncated"), InvalidInput);

  std::ofstream(dir.path / "bad.pfm") << "P6\n1 1\n255\n";
  CHECK_THROWS_AS(read_pfm(dir.path / "bad.pfm"), InvalidInput);
  std::ofstream(dir.path / "dims.pfm") << "PF\n-1 2\n-1.0\n";
  CHECK_THROWS_AS(read_pfm(dir.path / "dims.pfm"), InvalidInput);
  CHECK_THROWS_AS(read_pfm(dir.path / "missing.pfm"), InvalidInput);
}

TEST_CASE("principal pixel looks along the optical axis") {
  const Camera cam = test_camera();
  const double cx = cam.K(0, 2) - 0.5;
  const double cy = cam.K(1, 2) - 0.5;
  const Ray r = make_ray(cam, cx, cy, 0.1, 10.0);
  const Vec3 axis = cam.axis();
  CHECK(dot(r.direction, axis) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(norm(r.origin - cam.center()) < 1e-12);
  // The axis points from the camera towards the look-at target.
  CHECK(dot(axis, normalized(Vec3{0, 0, 0} - cam.center())) == doctest::Approx(1.0).epsilon(1e-12));

  const Ray off = make_ray(cam, -10.0, -10.0, 0.1, 10.0);
  CHECK_NOTHROW(validate(off));
  CHECK(dot(off.direction, axis) < 0.999);
}

TEST_CASE("project inverts make_ray") {
  const Camera cam = test_camera();
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double u = -20.0 + 100.0 * uniform01(rng);
    const double v = -20.0 + 90.0 * uniform01(rng);
    const Ray r = make_ray(cam, u, v, 0.1, 10.0);
    const double d = 0.5 + 6.0 * uniform01(rng);
    const auto [pu, pv] = project(cam, r.origin + d * r.direction);
    REQUIRE(std::abs(pu - u) < 1e-6);
    REQUIRE(std::abs(pv - v) < 1e-6);
  }
}

TEST_CASE("camera validation") {
  Camera cam = test_camera();
  CHECK_NOTHROW(validate(cam));
  cam.R(0, 0) *= 1.01;
  CHECK_THROWS_AS(validate(cam), InvalidInput);
  cam = test_camera();
  cam.K(0, 0) = -1.0;
  CHECK_THROWS_AS(validate(cam), InvalidInput);
  cam = test_camera();
  cam.K(1, 0) = 0.3;
  CHECK_THROWS_AS(validate(cam), InvalidInput);
}

TEST_CASE("sphere bounds enclose the padded sphere") {
  const Camera cam = test_camera();
  const auto [near, far] = sphere_bounds(cam, {0, 0, 0}, 1.0);
  const double d = norm(cam.center());
  CHECK(near == doctest::Approx(d - 1.1));
  CHECK(far == doctest::Approx(d + 1.1));
}

TEST_CASE("mask bands of a disc match a distance oracle") {
  const int size = 64;
  const double cx = 31.5, cy = 31.5;
  Mask disc(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) disc.set(x, y, std::hypot(x - cx, y - cy) <= 20.0);
  const int radius = 4;
  const auto bands = compute_mask_bands(disc, radius, 0.25);
  CHECK(bands.pad_x == 16);
  CHECK(bands.padded_width() == 96);

  // A pixel is dilated when some mask pixel lies within the radius, eroded when every
  // pixel within the radius (including off-image ones) is in the mask.
  auto min_distance_to = [&](int x, int y, bool target) {
    double best = 1e9;
    for (int qy = -radius - 1; qy < size + radius + 1; ++qy)
      for (int qx = -radius - 1; qx < size + radius + 1; ++qx) {
        const bool in = qx >= 0 && qy >= 0 && qx < size && qy < size && disc.at(qx, qy);
        if (in == target) best = std::min(best, std::hypot(qx - x, qy - y));
      }
    return best;
  };
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool dilated = min_distance_to(x, y, true) <= radius;
      const bool eroded = min_distance_to(x, y, false) > radius;
      const Region expected = dilated && !eroded ? Region::NearSilhouette
                              : disc.at(x, y)    ? Region::Foreground
                                                 : Region::Background;
      REQUIRE(bands.at(x, y) == expected);
      const double r = std::hypot(x - cx, y - cy);
      if (r <= 15.0) CHECK(bands.at(x, y) == Region::Foreground);
      if (r > 17.0 && r < 23.0) CHECK(bands.at(x, y) == Region::NearSilhouette);
      if (r >= 25.0) CHECK(bands.at(x, y) == Region::Background);
    }
  for (int v = -bands.pad_y; v < size + bands.pad_y; ++v)
    for (int u = -bands.pad_x; u < size + bands.pad_x; ++u) {
      const bool off = u < 0 || v < 0 || u >= size || v >= size;
      REQUIRE((bands.at(u, v) == Region::Padded) == off);
    }
}

TEST_CASE("degenerate masks") {
  Mask empty(10, 8);
  const auto e = compute_mask_bands(empty, 2, 0.0);
  for (Region r : e.labels) CHECK(r == Region::Background);

  Mask full(10, 8);
  std::fill(full.values.begin(), full.values.end(), 1);
  const auto f = compute_mask_bands(full, 2, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 10; ++x) {
      const bool border = x < 2 || y < 2 || x >= 8 || y >= 6;
      CHECK((f.at(x, y) == Region::NearSilhouette) == border);
      if (!border) CHECK(f.at(x, y) == Region::Foreground);
    }
  CHECK_THROWS_AS(compute_mask_bands(full, 0, 0.0), InvalidInput);
}

TEST_CASE("band radius scales with width") {
  CHECK(band_radius_for_width(2048) == 8);
  CHECK(band_radius_for_width(1024) == 4);
  CHECK(band_radius_for_width(64) == 1);
  CHECK(band_radius_for_width(4096) == 16);
}

TEST_CASE("manifest save and load reach a fixpoint") {
  TempDir dir("prtg_test_manifest");
  const Manifest m = small_manifest();
  save_manifest(dir.path / "a.json", m);
  const Manifest back = load_manifest(dir.path / "a.json");
  save_manifest(dir.path / "b.json", back);
  CHECK(slurp(dir.path / "a.json") == slurp(dir.path / "b.json"));
  CHECK(back.groups[0].frames.size() == 4);
  CHECK(back.groups[0].cameras[1].split == Split::Test);
  CHECK(manifest_from_json(manifest_to_json(back)).groups[0].lights[1].direction.x ==
        m.groups[0].lights[1].direction.x);

  // With a root every referenced file must exist.
  CHECK_THROWS_AS(load_manifest(dir.path / "a.json", dir.path), InvalidInput);
}

TEST_CASE("manifest rejects invalid poses and unknown versions") {
  Manifest m = small_manifest();
  m.groups[0].cameras[0].camera.R(1, 1) = 2.0;
  CHECK_THROWS_AS(manifest_from_json(manifest_to_json(m)), InvalidInput);
  std::string text = manifest_to_json(small_manifest());
  const auto pos = text.find("\"version\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 12, "\"version\": 9");
  CHECK_THROWS_AS(manifest_from_json(text), InvalidInput);
  CHECK_THROWS_AS(manifest_from_json("{not json"), InvalidInput);
}

TEST_CASE("dataset loading") {
  TempDir dir("prtg_test_dataset");
  const Manifest m = small_manifest();
  fs::create_directories(dir.path / "images");
  fs::create_directories(dir.path / "masks");
  for (const auto& f : m.groups[0].frames) {
    Image img(8, 6, 3);
    img.set_rgb(1, 2, {0.1 * f.camera, 0.2 * f.light, 0.3});
    write_pfm(dir.path / f.image, img);
  }
  for (const auto& mk : m.groups[0].masks) {
    Mask mask(8, 6);
    mask.set(3, 3, true);
    write_pfm(dir.path / mk.path, mask_to_image(mask));
  }
  save_manifest(dir.path / "manifest.json", m);
  const OlatDataset ds = load_dataset(dir.path);
  CHECK(ds.views.size() == 2);
  CHECK(ds.lights.size() == 2);
  CHECK(ds.frames_in(Split::Train).size() == 1);
  CHECK(ds.frames_in(Split::Test).size() == 3);
  CHECK(ds.views[0].mask.at(3, 3));
  CHECK(ds.frames[3].image.rgb(1, 2).y == doctest::Approx(0.2));

  Image wrong(5, 5, 3);
  write_pfm(dir.path / m.groups[0].frames[0].image, wrong);
  CHECK_THROWS_AS(load_dataset(dir.path), InvalidInput);
}
