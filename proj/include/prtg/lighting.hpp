#pragma once

// OLAT light parameterization, equirectangular environment maps, median-cut
// light extraction, and envmap relighting by accumulating OLAT predictions.
//
// Equirectangular convention: row 0 is the zenith (+z); the center of row r
// has polar angle pi (r + 0.5) / height. Column c is centered at azimuth
// 2 pi c / width measured from +x toward +y.

#include <string>
#include <vector>

#include "prtg/common.hpp"
#include "prtg/dataset.hpp"
#include "prtg/field.hpp"
#include "prtg/volume.hpp"

namespace prtg {

struct OlatLight {
  Vec3 direction;  // unit, from the scene center toward the light
  double intensity = 1.0;
  double distance = 100.0;
};

void validate(const OlatLight& light);

struct GridDirection {
  Vec3 direction;
  int row = 0;  // envmap row
  int col = 0;
  bool train = true;
};

/// Pixel-center directions of rows [first_row, first_row + n_lat) of an
/// env_rows x n_lon envmap, row-major; every other entry (flattened order)
/// is held out.
std::vector<GridDirection> olat_grid(int n_lat = 7, int n_lon = 32, int env_rows = 16, int first_row = 1);

/// Direction of continuous pixel-center coordinates (row, col) of an
/// height x width equirectangular map.
Vec3 envmap_direction(double row, double col, int height, int width);
/// Pixel (row, col) whose cell contains the direction.
std::pair<int, int> envmap_pixel(Vec3 direction, int height, int width);

/// cos(latitude) at the center of `row`.
double latitude_weight(int row, int height);

/// Throws InvalidInput for an empty map or negative / non-finite values.
void validate_envmap(const Image& env);
Image load_envmap(const std::string& path);

struct DirectionalLight {
  Vec3 direction;
  Vec3 energy;  // latitude-weighted RGB sum over the source region
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;  // exclusive
  int col1 = 0;  // exclusive
};

/// Luminance weights used for median splitting.
double luminance(Vec3 rgb);

/// Recursive equal-energy partition into n_lights regions (n_lights a power
/// of two). Regions split along their longer angular extent at the
/// luminance median, at pixel boundaries, ties toward the lower index.
/// Single-pixel regions are not split further, so tiny maps can yield fewer
/// lights. Total energy is conserved exactly up to rounding.
std::vector<DirectionalLight> median_cut(const Image& env, int n_lights);

/// One light per pixel: the brute-force accumulation reference.
std::vector<DirectionalLight> pixel_lights(const Image& env);

/// sum_k energy_k (componentwise) render(field, ray, light_k).fine.
Vec3 relight_envmap(const FieldParams& field, const Ray& ray, const std::vector<DirectionalLight>& lights,
                    const RenderConfig& cfg);
/// Batched version; ray i uses sampling stream i like render_rays.
std::vector<Vec3> relight_rays(const FieldParams& field, std::span<const Ray> rays,
                               const std::vector<DirectionalLight>& lights, const RenderConfig& cfg);

/// JSON text: [{"direction": [...], "energy": [...], "rect": [row0, col0, row1, col1]}, ...]
std::string lights_to_json(const std::vector<DirectionalLight>& lights);

}  // namespace prtg
