#include "prtg/lighting.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace prtg {

void validate(const OlatLight& light) {
  if (!is_unit(light.direction)) throw InvalidInput("light direction must be unit length");
  if (!(light.intensity > 0.0)) throw InvalidInput("light intensity must be positive");
}

Vec3 envmap_direction(double row, double col, int height, int width) {
  const double theta = kPi * (row + 0.5) / height;
  const double phi = 2.0 * kPi * col / width;
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

std::pair<int, int> envmap_pixel(Vec3 direction, int height, int width) {
  const Vec3 d = normalized(direction);
  const double theta = std::acos(std::clamp(d.z, -1.0, 1.0));
  const int row = std::clamp(static_cast<int>(std::floor(theta / kPi * height)), 0, height - 1);
  double phi = std::atan2(d.y, d.x);
  if (phi < 0.0) phi += 2.0 * kPi;
  int col = static_cast<int>(std::floor(phi / (2.0 * kPi) * width + 0.5));
  col = ((col % width) + width) % width;
  return {row, col};
}

double latitude_weight(int row, int height) {
  if (row < 0 || row >= height) throw InvalidInput("latitude_weight: row out of range");
  const double latitude = kPi / 2.0 - kPi * (row + 0.5) / height;
  return std::cos(latitude);
}

std::vector<GridDirection> olat_grid(int n_lat, int n_lon, int env_rows, int first_row) {
  if (n_lat < 1 || n_lon < 1) throw InvalidInput("olat_grid: counts must be positive");
  if (first_row < 0 || first_row + n_lat > env_rows)
    throw InvalidInput("olat_grid: rows exceed the envmap height");
  std::vector<GridDirection> out;
  for (int i = 0; i < n_lat; ++i) {
    for (int c = 0; c < n_lon; ++c) {
      GridDirection g;
      g.row = first_row + i;
      g.col = c;
      g.direction = envmap_direction(g.row, c, env_rows, n_lon);
      g.train = out.size() % 2 == 0;
      out.push_back(g);
    }
  }
  return out;
}

void validate_envmap(const Image& env) {
  if (env.width < 1 || env.height < 1) throw InvalidInput("envmap: empty");
  if (env.channels != 3 && env.channels != 1) throw InvalidInput("envmap: 1 or 3 channels required");
  for (float v : env.data)
    if (!(v >= 0.0f) || !std::isfinite(v)) throw InvalidInput("envmap: values must be finite and >= 0");
}

Image load_envmap(const std::string& path) {
  Image env = read_pfm(path);
  validate_envmap(env);
  return env;
}

double luminance(Vec3 rgb) { return 0.2126 * rgb.x + 0.7152 * rgb.y + 0.0722 * rgb.z; }

namespace {

struct Rect {
  int r0, c0, r1, c1;
};

struct WeightedMap {
  int height;
  int width;
  std::vector<Vec3> energy;  // latitude-weighted RGB
  std::vector<double> lum;

  const Vec3& e(int r, int c) const { return energy[static_cast<std::size_t>(r) * width + c]; }
  double l(int r, int c) const { return lum[static_cast<std::size_t>(r) * width + c]; }
};

WeightedMap weigh(const Image& env) {
  WeightedMap m{env.height, env.width, {}, {}};
  m.energy.resize(static_cast<std::size_t>(env.width) * env.height);
  m.lum.resize(m.energy.size());
  for (int r = 0; r < env.height; ++r) {
    const double w = latitude_weight(r, env.height);
    for (int c = 0; c < env.width; ++c) {
      const Vec3 e = env.rgb(c, r) * w;
      m.energy[static_cast<std::size_t>(r) * env.width + c] = e;
      m.lum[static_cast<std::size_t>(r) * env.width + c] = luminance(e);
    }
  }
  return m;
}

bool split(const WeightedMap& m, const Rect& reg, Rect& a, Rect& b) {
  const int h = reg.r1 - reg.r0;
  const int w = reg.c1 - reg.c0;
  if (h == 1 && w == 1) return false;
  const double center_lat = kPi / 2.0 - kPi * (0.5 * (reg.r0 + reg.r1)) / m.height;
  const double angular_w = w * (2.0 * kPi / m.width) * std::cos(center_lat);
  const double angular_h = h * (kPi / m.height);
  const bool by_cols = h == 1 || (w > 1 && angular_w > angular_h);
  const int len = by_cols ? w : h;
  std::vector<double> marginal(static_cast<std::size_t>(len), 0.0);
  for (int r = reg.r0; r < reg.r1; ++r)
    for (int c = reg.c0; c < reg.c1; ++c)
      marginal[static_cast<std::size_t>(by_cols ? c - reg.c0 : r - reg.r0)] += m.l(r, c);
  double total = 0.0;
  for (double v : marginal) total += v;
  int best = len / 2;
  if (total > 0.0) {
    double prefix = 0.0;
    double best_gap = INFINITY;
    for (int k = 1; k < len; ++k) {
      prefix += marginal[static_cast<std::size_t>(k - 1)];
      const double gap = std::abs(2.0 * prefix - total);
      if (gap < best_gap) {
        best_gap = gap;
        best = k;
      }
    }
  }
  a = reg;
  b = reg;
  if (by_cols) {
    a.c1 = reg.c0 + best;
    b.c0 = reg.c0 + best;
  } else {
    a.r1 = reg.r0 + best;
    b.r0 = reg.r0 + best;
  }
  return true;
}

DirectionalLight make_light(const WeightedMap& m, const Rect& reg) {
  DirectionalLight light;
  light.row0 = reg.r0;
  light.col0 = reg.c0;
  light.row1 = reg.r1;
  light.col1 = reg.c1;
  double lum_total = 0.0;
  double row_acc = 0.0;
  double col_acc = 0.0;
  for (int r = reg.r0; r < reg.r1; ++r)
    for (int c = reg.c0; c < reg.c1; ++c) {
      light.energy += m.e(r, c);
      const double l = m.l(r, c);
      lum_total += l;
      row_acc += l * r;
      col_acc += l * c;
    }
  double row = 0.5 * (reg.r0 + reg.r1 - 1);
  double col = 0.5 * (reg.c0 + reg.c1 - 1);
  if (lum_total > 0.0) {
    row = row_acc / lum_total;
    col = col_acc / lum_total;
  }
  light.direction = envmap_direction(row, col, m.height, m.width);
  return light;
}

}  // namespace

std::vector<DirectionalLight> median_cut(const Image& env, int n_lights) {
  validate_envmap(env);
  if (n_lights < 1 || (n_lights & (n_lights - 1)) != 0)
    throw InvalidInput("median_cut: n_lights must be a power of two");
  const WeightedMap m = weigh(env);
  std::vector<Rect> regions{{0, 0, env.height, env.width}};
  while (static_cast<int>(regions.size()) < n_lights) {
    std::vector<Rect> next;
    bool any = false;
    std::size_t remaining = regions.size();
    for (const Rect& reg : regions) {
      --remaining;
      Rect a{}, b{};
      // Splitting stops once the count would pass n_lights; this only happens when
      // single-pixel regions were carried over unsplit.
      if (next.size() + remaining + 2 <= static_cast<std::size_t>(n_lights) && split(m, reg, a, b)) {
        next.push_back(a);
        next.push_back(b);
        any = true;
      } else {
        next.push_back(reg);
      }
    }
    regions = std::move(next);
    if (!any) break;
  }
  std::vector<DirectionalLight> lights;
  lights.reserve(regions.size());
  for (const Rect& reg : regions) lights.push_back(make_light(m, reg));
  return lights;
}

std::vector<DirectionalLight> pixel_lights(const Image& env) {
  validate_envmap(env);
  const WeightedMap m = weigh(env);
  std::vector<DirectionalLight> lights;
  lights.reserve(static_cast<std::size_t>(env.width) * env.height);
  for (int r = 0; r < env.height; ++r)
    for (int c = 0; c < env.width; ++c) {
      DirectionalLight l;
      l.direction = envmap_direction(r, c, env.height, env.width);
      l.energy = m.e(r, c);
      l.row0 = r;
      l.col0 = c;
      l.row1 = r + 1;
      l.col1 = c + 1;
      lights.push_back(l);
    }
  return lights;
}

std::vector<Vec3> relight_rays(const FieldParams& field, std::span<const Ray> rays,
                               const std::vector<DirectionalLight>& lights, const RenderConfig& cfg) {
  std::vector<Vec3> out(rays.size());
  if (lights.empty()) return out;
  std::vector<Vec3> dirs;
  std::vector<Vec3> energies;
  for (const auto& l : lights) {
    if (l.energy == Vec3{}) continue;
    dirs.push_back(normalized(l.direction));
    energies.push_back(l.energy);
  }
  render_light_sweep<float>(field, rays, dirs, cfg, [&](std::size_t k, std::size_t r, Vec3 v) {
    out[r] += hadamard(energies[k], v);
  });
  return out;
}

Vec3 relight_envmap(const FieldParams& field, const Ray& ray, const std::vector<DirectionalLight>& lights,
                    const RenderConfig& cfg) {
  const Ray rays[1] = {ray};
  return relight_rays(field, rays, lights, cfg).front();
}

std::string lights_to_json(const std::vector<DirectionalLight>& lights) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : lights)
    arr.push_back({{"direction", {l.direction.x, l.direction.y, l.direction.z}},
                   {"energy", {l.energy.x, l.energy.y, l.energy.z}},
                   {"rect", {l.row0, l.col0, l.row1, l.col1}}});
  return arr.dump(2) + "\n";
}

}  // namespace prtg
