#include "prtg/oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "prtg/rng.hpp"

namespace prtg {

using nlohmann::json;

namespace {

// 8-point Gauss-Legendre rule on [-1, 1].
constexpr std::array<double, 8> kGlNodes = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                             -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                             0.7966664774136267,  0.9602898564975363};
constexpr std::array<double, 8> kGlWeights = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                               0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                               0.2223810344533745, 0.1012285362903763};

Vec3 read_vec(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw InvalidInput(std::string("expected 3-vector for ") + what);
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double deg(double d) { return d * kPi / 180.0; }

}  // namespace

void validate(const OracleScene& scene) {
  if (scene.primitives.empty()) throw InvalidInput("scene has no primitives");
  if (scene.quadrature_segments < 1) throw InvalidInput("quadrature_segments must be >= 1");
  for (const auto& p : scene.primitives) {
    const auto& m = p.material;
    if (!(m.sigma_t >= 0.0) || !std::isfinite(m.sigma_t)) throw InvalidInput("sigma_t must be >= 0");
    if (!(m.alpha >= 0.0 && m.alpha <= 1.0)) throw InvalidInput("alpha must be in [0, 1]");
    if (!(m.k_d >= 0.0)) throw InvalidInput("k_d must be >= 0");
    if (!(m.albedo.x >= 0 && m.albedo.y >= 0 && m.albedo.z >= 0)) throw InvalidInput("albedo must be >= 0");
    if (!is_finite(p.center)) throw InvalidInput("primitive center must be finite");
    if (p.shape == Shape::Sphere && !(p.size.x > 0.0)) throw InvalidInput("sphere radius must be positive");
    if (p.shape == Shape::Box && !(p.size.x > 0.0 && p.size.y > 0.0 && p.size.z > 0.0))
      throw InvalidInput("box half extents must be positive");
  }
}

OracleScene scene_from_json(const std::string& text) {
  OracleScene scene;
  try {
    const json j = json::parse(text);
    scene.name = j.value("name", std::string("scene"));
    scene.quadrature_segments = j.value("quadrature_segments", 16);
    for (const auto& pj : j.at("primitives")) {
      Primitive p;
      const std::string shape = pj.at("shape").get<std::string>();
      if (shape == "sphere") {
        p.shape = Shape::Sphere;
        const double r = pj.at("radius").get<double>();
        p.size = {r, r, r};
      } else if (shape == "box") {
        p.shape = Shape::Box;
        p.size = read_vec(pj.at("half_extents"), "half_extents");
      } else {
        throw InvalidInput("unknown shape '" + shape + "'");
      }
      p.center = read_vec(pj.at("center"), "center");
      if (pj.contains("albedo")) p.material.albedo = read_vec(pj["albedo"], "albedo");
      p.material.sigma_t = pj.value("sigma_t", p.material.sigma_t);
      p.material.alpha = pj.value("alpha", p.material.alpha);
      p.material.k_d = pj.value("k_d", p.material.k_d);
      p.embedded = pj.value("embedded", false);
      scene.primitives.push_back(p);
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("scene: ") + e.what());
  }
  validate(scene);
  return scene;
}

std::string scene_to_json(const OracleScene& scene) {
  json prims = json::array();
  for (const auto& p : scene.primitives) {
    json pj;
    pj["shape"] = p.shape == Shape::Sphere ? "sphere" : "box";
    pj["center"] = {p.center.x, p.center.y, p.center.z};
    if (p.shape == Shape::Sphere)
      pj["radius"] = p.size.x;
    else
      pj["half_extents"] = {p.size.x, p.size.y, p.size.z};
    pj["albedo"] = {p.material.albedo.x, p.material.albedo.y, p.material.albedo.z};
    pj["sigma_t"] = p.material.sigma_t;
    pj["alpha"] = p.material.alpha;
    pj["k_d"] = p.material.k_d;
    pj["embedded"] = p.embedded;
    prims.push_back(pj);
  }
  json j;
  j["name"] = scene.name;
  j["quadrature_segments"] = scene.quadrature_segments;
  j["primitives"] = prims;
  return j.dump(2) + "\n";
}

OracleScene load_scene(const std::filesystem::path& path) { return scene_from_json(read_text(path)); }

bool intersect(const Primitive& p, Vec3 origin, Vec3 direction, double& t0, double& t1) {
  if (p.shape == Shape::Sphere) {
    const Vec3 oc = origin - p.center;
    const double b = dot(oc, direction);
    const double c = dot(oc, oc) - p.size.x * p.size.x;
    const double disc = b * b - c;
    if (disc <= 0.0) return false;
    const double s = std::sqrt(disc);
    t0 = -b - s;
    t1 = -b + s;
    return true;
  }
  t0 = -std::numeric_limits<double>::infinity();
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.size[a];
    const double hi = p.center[a] + p.size[a];
    if (direction[a] == 0.0) {
      if (origin[a] <= lo || origin[a] >= hi) return false;
      continue;
    }
    double ta = (lo - origin[a]) / direction[a];
    double tb = (hi - origin[a]) / direction[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t0 < t1;
}

bool contains(const Primitive& p, Vec3 x) {
  const Vec3 d = x - p.center;
  if (p.shape == Shape::Sphere) return dot(d, d) < p.size.x * p.size.x;
  return std::abs(d.x) < p.size.x && std::abs(d.y) < p.size.y && std::abs(d.z) < p.size.z;
}

Vec3 surface_normal(const Primitive& p, Vec3 x) {
  const Vec3 d = x - p.center;
  if (p.shape == Shape::Sphere) return normalized(d);
  int axis = 0;
  double best = -1.0;
  for (int a = 0; a < 3; ++a) {
    const double q = std::abs(d[a]) / p.size[a];
    if (q > best) {
      best = q;
      axis = a;
    }
  }
  Vec3 n;
  n[axis] = d[axis] >= 0.0 ? 1.0 : -1.0;
  return n;
}

double extinction_at(const OracleScene& scene, Vec3 x) {
  double s = 0.0;
  for (const auto& p : scene.primitives)
    if (contains(p, x)) s += p.material.sigma_t;
  return s;
}

double optical_depth(const OracleScene& scene, Vec3 a, Vec3 b) {
  const Vec3 ab = b - a;
  const double len = norm(ab);
  if (len == 0.0) return 0.0;
  const Vec3 d = ab / len;
  double tau = 0.0;
  for (const auto& p : scene.primitives) {
    double t0 = 0.0, t1 = 0.0;
    if (!intersect(p, a, d, t0, t1)) continue;
    const double chord = std::min(t1, len) - std::max(t0, 0.0);
    if (chord > 0.0) tau += p.material.sigma_t * chord;
  }
  return tau;
}

double bounding_radius(const OracleScene& scene, Vec3 center) {
  double r = 0.0;
  for (const auto& p : scene.primitives) {
    const double extent = p.shape == Shape::Sphere ? p.size.x : norm(p.size);
    r = std::max(r, norm(p.center - center) + extent);
  }
  return r;
}

OracleSample trace_oracle(const OracleScene& scene, Vec3 origin, Vec3 direction, const OlatLight& light,
                          Vec3 center) {
  const Vec3 d = normalized(direction);
  const Vec3 light_pos = center + light.direction * light.distance;
  const double d2 = light.distance * light.distance;

  struct Span {
    double t0, t1;
    const Primitive* p;
  };
  std::vector<Span> spans;
  std::vector<double> breaks;
  OracleSample out;
  double t_surface = std::numeric_limits<double>::infinity();
  const Primitive* surface = nullptr;
  for (const auto& p : scene.primitives) {
    double t0 = 0.0, t1 = 0.0;
    if (!intersect(p, origin, d, t0, t1) || t1 <= 0.0) continue;
    t0 = std::max(t0, 0.0);
    spans.push_back({t0, t1, &p});
    breaks.push_back(t0);
    breaks.push_back(t1);
    if (!p.embedded) {
      out.hit = true;
      if (t0 > 0.0 && t0 < t_surface) {
        t_surface = t0;
        surface = &p;
      }
    }
  }
  if (spans.empty()) return out;

  auto view_depth = [&](double t) {
    double tau = 0.0;
    for (const auto& s : spans) {
      const double c = std::min(t, s.t1) - s.t0;
      if (c > 0.0) tau += s.p->material.sigma_t * c;
    }
    return tau;
  };
  auto irradiance = [&](Vec3 x) {
    const Vec3 to_light = light_pos - x;
    return std::exp(-optical_depth(scene, x, light_pos)) * d2 / dot(to_light, to_light);
  };

  Vec3 radiance;
  if (surface != nullptr) {
    const Vec3 x = origin + d * t_surface;
    const Vec3 n = surface_normal(*surface, x);
    const double cosine = std::max(0.0, dot(n, normalized(light_pos - x)));
    if (cosine > 0.0) {
      const double f = surface->material.k_d * cosine * std::exp(-view_depth(t_surface)) * irradiance(x);
      radiance += surface->material.albedo * f;
    }
  }

  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
  const int panels = scene.quadrature_segments;
  for (std::size_t k = 0; k + 1 < breaks.size(); ++k) {
    const double a = breaks[k];
    const double b = breaks[k + 1];
    if (b <= a) continue;
    const double mid = 0.5 * (a + b);
    Vec3 scatter;
    for (const auto& s : spans)
      if (s.t0 <= mid && mid < s.t1) scatter += s.p->material.albedo * (s.p->material.alpha * s.p->material.sigma_t);
    if (scatter == Vec3{}) continue;
    const double h = (b - a) / panels;
    double integral = 0.0;
    for (int q = 0; q < panels; ++q) {
      const double lo = a + h * q;
      for (std::size_t g = 0; g < kGlNodes.size(); ++g) {
        const double t = lo + 0.5 * h * (kGlNodes[g] + 1.0);
        integral += 0.5 * h * kGlWeights[g] * std::exp(-view_depth(t)) * irradiance(origin + d * t);
      }
    }
    radiance += scatter * integral;
  }
  out.radiance = radiance * light.intensity;
  return out;
}

OracleImage render_olat_gt(const OracleScene& scene, const Camera& camera, const OlatLight& light, Vec3 center) {
  validate(camera);
  validate(light);
  OracleImage out{Image(camera.width, camera.height, 3), Mask(camera.width, camera.height)};
  const Vec3 origin = camera.center();
#pragma omp parallel for schedule(dynamic, 4)
  for (int v = 0; v < camera.height; ++v)
    for (int u = 0; u < camera.width; ++u) {
      const Ray ray = make_ray(camera, u, v, 0.0, 1.0);
      const OracleSample s = trace_oracle(scene, origin, ray.direction, light, center);
      out.image.set_rgb(u, v, s.radiance);
      out.mask.set(u, v, s.hit);
    }
  return out;
}

void validate(const RigSpec& spec) {
  if (spec.width < 1 || spec.height < 1) throw InvalidInput("rig: image size must be positive");
  if (!(spec.fov_deg > 0.0 && spec.fov_deg < 180.0)) throw InvalidInput("rig: fov_deg must be in (0, 180)");
  if (!(spec.distance > 0.0)) throw InvalidInput("rig: distance must be positive");
  if (spec.train_cameras < 1) throw InvalidInput("rig: need at least one train camera");
  if (!(spec.light_distance > 0.0)) throw InvalidInput("rig: light_distance must be positive");
  if (spec.train_lights.empty()) throw InvalidInput("rig: need at least one train light");
  if (spec.eval_lights < 0 || spec.eval_lights > static_cast<int>(spec.test_lights.size()))
    throw InvalidInput("rig: eval_lights exceeds the number of test lights");
  const auto grid = olat_grid();
  auto check = [&](const std::vector<int>& ids, bool train) {
    for (int k : ids) {
      if (k < 0 || k >= static_cast<int>(grid.size())) throw InvalidInput("rig: light index out of range");
      if (grid[static_cast<std::size_t>(k)].train != train)
        throw InvalidInput("rig: light " + std::to_string(k) + " is in the wrong grid split");
    }
  };
  check(spec.train_lights, true);
  check(spec.test_lights, false);
}

RigSpec rig_spec_from_json(const std::string& text) {
  RigSpec s;
  try {
    const json j = json::parse(text);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.fov_deg = j.value("fov_deg", s.fov_deg);
    s.distance = j.value("distance", s.distance);
    s.train_cameras = j.value("train_cameras", s.train_cameras);
    s.min_elevation_deg = j.value("min_elevation_deg", s.min_elevation_deg);
    s.max_elevation_deg = j.value("max_elevation_deg", s.max_elevation_deg);
    if (j.contains("test_cameras"))
      for (const auto& c : j["test_cameras"]) s.test_cameras.emplace_back(c.at(0).get<double>(), c.at(1).get<double>());
    s.train_lights = j.at("train_lights").get<std::vector<int>>();
    s.test_lights = j.value("test_lights", std::vector<int>{});
    s.eval_lights = j.value("eval_lights", std::min<int>(4, static_cast<int>(s.test_lights.size())));
    s.light_distance = j.value("light_distance", s.light_distance);
    s.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("rig: ") + e.what());
  }
  validate(s);
  return s;
}

RigSpec load_rig_spec(const std::filesystem::path& path) { return rig_spec_from_json(read_text(path)); }

Manifest build_manifest(const OracleScene& scene, const RigSpec& spec) {
  validate(scene);
  validate(spec);
  const Vec3 center{};
  const double focal = 0.5 * spec.width / std::tan(0.5 * deg(spec.fov_deg));
  auto camera_at = [&](double azimuth, double elevation) {
    const Vec3 eye = center + Vec3{std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth),
                                   std::sin(elevation)} * spec.distance;
    return look_at(eye, center, {0, 0, 1}, focal, spec.width, spec.height);
  };

  Manifest m;
  m.scene = scene.name;
  m.bound_center = center;
  m.bound_radius = bounding_radius(scene, center);
  Group g;
  g.name = "g0";
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < spec.train_cameras; ++i) {
    Rng rng = make_stream(spec.seed, static_cast<std::uint64_t>(i));
    const double f = spec.train_cameras > 1 ? static_cast<double>(i) / (spec.train_cameras - 1) : 0.0;
    const double elev = deg(spec.min_elevation_deg + f * (spec.max_elevation_deg - spec.min_elevation_deg));
    const double az = golden * i + deg(6.0 * (uniform01(rng) - 0.5));
    g.cameras.push_back({i, camera_at(az, elev), Split::Train});
  }
  for (const auto& [az, elev] : spec.test_cameras)
    g.cameras.push_back({static_cast<int>(g.cameras.size()), camera_at(deg(az), deg(elev)), Split::Test});

  const auto grid = olat_grid();
  for (int k : spec.train_lights)
    g.lights.push_back({static_cast<int>(g.lights.size()), grid[static_cast<std::size_t>(k)].direction,
                        spec.light_distance, 1.0, Split::Train});
  for (int k : spec.test_lights)
    g.lights.push_back({static_cast<int>(g.lights.size()), grid[static_cast<std::size_t>(k)].direction,
                        spec.light_distance, 1.0, Split::Test});

  const int n_train_lights = static_cast<int>(spec.train_lights.size());
  auto add_frame = [&](int cam, int light, Split split) {
    g.frames.push_back({cam, light, split, image_path(0, cam, light)});
  };
  for (const auto& c : g.cameras) {
    if (c.split == Split::Train) {
      for (int l = 0; l < n_train_lights; ++l) add_frame(c.id, l, Split::Train);
      for (int l = n_train_lights + spec.eval_lights; l < static_cast<int>(g.lights.size()); ++l)
        add_frame(c.id, l, Split::Test);
    } else {
      for (int l = n_train_lights; l < n_train_lights + spec.eval_lights; ++l) add_frame(c.id, l, Split::Test);
    }
    g.masks.push_back({c.id, mask_path(0, c.id)});
  }
  m.groups.push_back(std::move(g));
  return m;
}

Manifest generate_dataset(const OracleScene& scene, const RigSpec& spec, const std::filesystem::path& out_dir) {
  const Manifest m = build_manifest(scene, spec);
  const Group& g = m.groups.front();
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "masks");
  for (const auto& c : g.cameras) {
    const OlatLight probe{{0, 0, 1}, 1.0, spec.light_distance};
    const OracleImage img = render_olat_gt(scene, c.camera, probe, m.bound_center);
    write_pfm(out_dir / mask_path(0, c.id), mask_to_image(img.mask));
  }
  for (const auto& f : g.frames) {
    const auto& cam = g.cameras[static_cast<std::size_t>(f.camera)];
    const auto& lr = g.lights[static_cast<std::size_t>(f.light)];
    const OlatLight light{lr.direction, lr.intensity, lr.distance};
    const OracleImage img = render_olat_gt(scene, cam.camera, light, m.bound_center);
    write_pfm(out_dir / f.image, img.image);
  }
  save_manifest(out_dir / "manifest.json", m);
  return m;
}

}  // namespace prtg
