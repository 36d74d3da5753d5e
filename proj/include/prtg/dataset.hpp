#pragma once

// HDR images, camera geometry, mask bands and the on-disk dataset layout:
//   scene/manifest.json
//   scene/images/g{G}_c{C}_l{L}.pfm
//   scene/masks/g{G}_c{C}.pfm

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "prtg/common.hpp"
#include "prtg/volume.hpp"

namespace prtg {

/// Row-major (row 0 = top) float image with 1 or 3 interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c = 3) : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0f) {}

  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  Vec3 rgb(int x, int y) const;
  void set_rgb(int x, int y, Vec3 v);

  friend bool operator==(const Image&, const Image&) = default;
};

/// Portable FloatMap: "PF" (RGB) or "Pf" (gray) header, scale -1.0 (little
/// endian), rows stored bottom-to-top. Throws InvalidInput on non-finite data.
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

/// Pinhole camera: x_cam = R X + t, pixel = K x_cam / z. Pixel (i, j) has
/// its center at image-plane coordinate (i + 0.5, j + 0.5).
struct Camera {
  Mat3 K;
  Mat3 R;
  Vec3 t;
  int width = 0;
  int height = 0;

  Vec3 center() const;
  /// Unit viewing direction of the optical axis in world space.
  Vec3 axis() const;
};

/// Throws InvalidInput unless R is orthonormal (1e-5), K is upper-triangular
/// with positive focal lengths and the image size is positive.
void validate(const Camera& camera);

Camera look_at(Vec3 eye, Vec3 target, Vec3 up, double focal, int width, int height);

/// Ray through pixel (u, v); coordinates outside the image are allowed.
Ray make_ray(const Camera& camera, double u, double v, double near, double far);
/// Pixel coordinates (u, v) of a world point, inverse of make_ray.
std::pair<double, double> project(const Camera& camera, Vec3 point);

/// Near/far along rays of a camera for a bounding sphere padded by 10%.
std::pair<double, double> sphere_bounds(const Camera& camera, Vec3 center, double radius);

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}
  bool at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { values[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

Image mask_to_image(const Mask& mask);
Mask image_to_mask(const Image& image);

enum class Region : std::uint8_t { Foreground, NearSilhouette, Background, Padded };

/// Labels over the padded grid [-pad_x, width + pad_x) x [-pad_y, height + pad_y).
struct MaskBands {
  int width = 0;
  int height = 0;
  int pad_x = 0;
  int pad_y = 0;
  std::vector<Region> labels;

  int padded_width() const { return width + 2 * pad_x; }
  int padded_height() const { return height + 2 * pad_y; }
  /// (u, v) in image pixel coordinates, possibly negative.
  Region at(int u, int v) const {
    return labels[static_cast<std::size_t>(v + pad_y) * padded_width() + (u + pad_x)];
  }
};

/// Near-silhouette = dilation minus erosion of the mask with a disc of the
/// given radius (pixels outside the image count as background for erosion).
/// Off-image pixels of the padded border are labeled Padded.
MaskBands compute_mask_bands(const Mask& mask, int radius, double pad_fraction);

/// Band radius of 8 px at 2048 px width, scaled to the image width (>= 1).
int band_radius_for_width(int width);

enum class Split : std::uint8_t { Train, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct CameraRecord {
  int id = 0;
  Camera camera;
  Split split = Split::Train;
};

struct LightRecord {
  int id = 0;
  Vec3 direction;
  double distance = 100.0;
  double intensity = 1.0;
  Split split = Split::Train;
};

struct FrameRecord {
  int camera = 0;  // record id within the group
  int light = 0;
  Split split = Split::Train;
  std::string image;  // relative path
};

struct MaskRecord {
  int camera = 0;
  std::string path;
};

struct Group {
  std::string name;
  std::vector<CameraRecord> cameras;
  std::vector<LightRecord> lights;
  std::vector<FrameRecord> frames;
  std::vector<MaskRecord> masks;
};

struct Manifest {
  std::string scene;
  double hdr_cutoff = 4.4019;
  Vec3 bound_center;
  double bound_radius = 1.0;
  std::vector<Group> groups;
};

inline constexpr int kManifestVersion = 1;

std::string image_path(int group, int camera, int light);
std::string mask_path(int group, int camera);

std::string manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const std::string& text);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);
/// Parses and validates poses. When `root` is non-empty every referenced
/// file must exist under it.
Manifest load_manifest(const std::filesystem::path& path, const std::filesystem::path& root = {});

/// A manifest with its images and masks loaded into memory. Cameras and
/// lights are flattened across groups.
struct OlatDataset {
  struct View {
    int group = 0;
    int id = 0;
    Camera camera;
    Split split = Split::Train;
    Mask mask;
  };
  struct Light {
    int group = 0;
    int id = 0;
    Vec3 direction;
    double intensity = 1.0;
    Split split = Split::Train;
  };
  struct Frame {
    int view = 0;   // index into views
    int light = 0;  // index into lights
    Split split = Split::Train;
    Image image;
  };

  std::filesystem::path root;
  Manifest manifest;
  std::vector<View> views;
  std::vector<Light> lights;
  std::vector<Frame> frames;

  std::vector<int> frames_in(Split split) const;
  /// Bounds for rays of a view from the manifest's bounding sphere.
  std::pair<double, double> bounds(int view) const;
};

OlatDataset load_dataset(const std::filesystem::path& dir);

}  // namespace prtg
