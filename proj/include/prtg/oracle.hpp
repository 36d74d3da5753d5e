#pragma once

// Analytic ground-truth renderer for OLAT datasets.
//
// Radiance along a camera ray under a point light:
//   L = albedo k_d max(0, n.l) T_light(x_hit) T_view(x_hit) I(x_hit)      (first surface hit)
//     + int albedo alpha sigma_t(x) T_view(x) T_light(x) I(x) dt           (single scattering)
// with straight-line transmittances through the piecewise-constant extinction
// field and I(x) = intensity * distance^2 / |p_light - x|^2.
//
// Scene file (JSON):
//   {"name": "...", "quadrature_segments": 16,
//    "primitives": [{"shape": "sphere" | "box", "center": [x,y,z],
//                    "radius": r | "half_extents": [hx,hy,hz],
//                    "albedo": [r,g,b], "sigma_t": s, "alpha": a, "k_d": k,
//                    "embedded": false}, ...]}
// Embedded primitives only add extinction and scattering; they have no
// surface term and do not count toward the mask.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prtg/common.hpp"
#include "prtg/dataset.hpp"
#include "prtg/lighting.hpp"

namespace prtg {

struct OracleMaterial {
  Vec3 albedo{0.8, 0.8, 0.8};
  double sigma_t = 1.0;
  double alpha = 0.9;
  double k_d = 0.5;
};

enum class Shape : std::uint8_t { Sphere, Box };

struct Primitive {
  Shape shape = Shape::Sphere;
  Vec3 center;
  Vec3 size{1, 1, 1};  // sphere: radius in x; box: half extents
  OracleMaterial material;
  bool embedded = false;
};

struct OracleScene {
  std::string name = "scene";
  std::vector<Primitive> primitives;
  int quadrature_segments = 16;  // Gauss-Legendre panels per constant-density interval
};

void validate(const OracleScene& scene);
OracleScene scene_from_json(const std::string& text);
std::string scene_to_json(const OracleScene& scene);
OracleScene load_scene(const std::filesystem::path& path);

/// Entry/exit distances of the line o + t d (d unit); false when missed.
bool intersect(const Primitive& p, Vec3 origin, Vec3 direction, double& t0, double& t1);
bool contains(const Primitive& p, Vec3 x);
Vec3 surface_normal(const Primitive& p, Vec3 x);

/// Extinction at a point (sum over containing primitives).
double extinction_at(const OracleScene& scene, Vec3 x);
/// Integral of extinction along the segment a -> b.
double optical_depth(const OracleScene& scene, Vec3 a, Vec3 b);

/// Radius of a sphere around `center` enclosing every primitive.
double bounding_radius(const OracleScene& scene, Vec3 center);

struct OracleSample {
  Vec3 radiance;
  bool hit = false;
};

/// Radiance along a ray (t >= 0) lit by a point light at
/// center + light.direction * light.distance.
OracleSample trace_oracle(const OracleScene& scene, Vec3 origin, Vec3 direction, const OlatLight& light,
                          Vec3 center);

struct OracleImage {
  Image image;
  Mask mask;
};

/// One ray per pixel center. Background pixels are exactly zero.
OracleImage render_olat_gt(const OracleScene& scene, const Camera& camera, const OlatLight& light, Vec3 center);

/// Capture rig description (JSON):
///   {"width": 64, "height": 64, "fov_deg": 40, "distance": 4,
///    "train_cameras": 16, "min_elevation_deg": 5, "max_elevation_deg": 65,
///    "test_cameras": [[azimuth_deg, elevation_deg], ...],
///    "train_lights": [grid index, ...], "test_lights": [grid index, ...],
///    "eval_lights": 4, "light_distance": 100, "seed": 0}
/// Grid indices refer to olat_grid(); train lights must be grid-train
/// entries and test lights grid-test entries. Test views are captured under
/// the first eval_lights test lights; train views under all train lights
/// and the remaining test lights.
struct RigSpec {
  int width = 64;
  int height = 64;
  double fov_deg = 40.0;
  double distance = 4.0;
  int train_cameras = 16;
  double min_elevation_deg = 5.0;
  double max_elevation_deg = 65.0;
  std::vector<std::pair<double, double>> test_cameras;
  std::vector<int> train_lights;
  std::vector<int> test_lights;
  int eval_lights = 4;
  double light_distance = 100.0;
  std::uint64_t seed = 0;
};

void validate(const RigSpec& spec);
RigSpec rig_spec_from_json(const std::string& text);
RigSpec load_rig_spec(const std::filesystem::path& path);

/// Manifest with cameras, lights and frames (single group); no files.
Manifest build_manifest(const OracleScene& scene, const RigSpec& spec);

/// Renders every frame and mask of build_manifest() into out_dir and writes
/// the manifest. Deterministic given the inputs.
Manifest generate_dataset(const OracleScene& scene, const RigSpec& spec, const std::filesystem::path& out_dir);

}  // namespace prtg
