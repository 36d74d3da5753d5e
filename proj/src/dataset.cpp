#include "prtg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace prtg {

using nlohmann::json;

Vec3 Image::rgb(int x, int y) const {
  if (channels == 1) {
    const double v = at(x, y, 0);
    return {v, v, v};
  }
  return {at(x, y, 0), at(x, y, 1), at(x, y, 2)};
}

void Image::set_rgb(int x, int y, Vec3 v) {
  if (channels == 1) {
    at(x, y, 0) = static_cast<float>(v.x);
    return;
  }
  for (int c = 0; c < 3; ++c) at(x, y, c) = static_cast<float>(v[c]);
}

void write_pfm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw InvalidInput("write_pfm: 1 or 3 channels required");
  if (image.width < 1 || image.height < 1) throw InvalidInput("write_pfm: empty image");
  for (float v : image.data)
    if (!std::isfinite(v)) throw InvalidInput("write_pfm: non-finite pixel in " + path.string());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("write_pfm: cannot open " + path.string());
  os << (image.channels == 3 ? "PF" : "Pf") << '\n' << image.width << ' ' << image.height << "\n-1.0\n";
  const std::size_t row_values = static_cast<std::size_t>(image.width) * image.channels;
  std::vector<unsigned char> buf(row_values * 4);
  for (int y = image.height - 1; y >= 0; --y) {
    const float* src = image.data.data() + static_cast<std::size_t>(y) * row_values;
    for (std::size_t i = 0; i < row_values; ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(src[i]);
      for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw InvalidInput("write_pfm: write failed for " + path.string());
}

namespace {

std::string next_token(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  if (!(is >> tok)) throw InvalidInput("read_pfm: malformed header in " + path.string());
  return tok;
}

}  // namespace

Image read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("read_pfm: cannot open " + path.string());
  const std::string magic = next_token(is, path);
  int channels = 0;
  if (magic == "PF") channels = 3;
  else if (magic == "Pf") channels = 1;
  else throw InvalidInput("read_pfm: bad magic '" + magic + "' in " + path.string());
  int width = 0;
  int height = 0;
  double scale = 0.0;
  try {
    width = std::stoi(next_token(is, path));
    height = std::stoi(next_token(is, path));
    scale = std::stod(next_token(is, path));
  } catch (const std::logic_error&) {
    throw InvalidInput("read_pfm: malformed header in " + path.string());
  }
  if (width < 1 || height < 1 || scale == 0.0 || !std::isfinite(scale))
    throw InvalidInput("read_pfm: invalid dimensions or scale in " + path.string());
  const int sep = is.get();
  if (sep != '\n' && sep != ' ' && sep != '\r' && sep != '\t')
    throw InvalidInput("read_pfm: missing separator after header in " + path.string());
  const bool little = scale < 0.0;
  Image img(width, height, channels);
  const std::size_t row_values = static_cast<std::size_t>(width) * channels;
  std::vector<unsigned char> buf(row_values * 4);
  for (int y = height - 1; y >= 0; --y) {
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw InvalidInput("read_pfm: truncated payload in " + path.string());
    float* dst = img.data.data() + static_cast<std::size_t>(y) * row_values;
    for (std::size_t i = 0; i < row_values; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        const int shift = little ? 8 * b : 8 * (3 - b);
        bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << shift;
      }
      dst[i] = std::bit_cast<float>(bits);
    }
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw InvalidInput("read_pfm: trailing bytes in " + path.string());
  return img;
}

Vec3 Camera::center() const { return -(transpose(R) * t); }

Vec3 Camera::axis() const { return transpose(R) * Vec3{0, 0, 1}; }

void validate(const Camera& camera) {
  const Mat3 rtr = transpose(camera.R) * camera.R;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (std::abs(rtr(r, c) - (r == c ? 1.0 : 0.0)) > 1e-5)
        throw InvalidInput("camera: rotation is not orthonormal");
  const Mat3& k = camera.K;
  if (k(1, 0) != 0.0 || k(2, 0) != 0.0 || k(2, 1) != 0.0)
    throw InvalidInput("camera: intrinsics must be upper-triangular");
  if (!(k(0, 0) > 0.0 && k(1, 1) > 0.0)) throw InvalidInput("camera: focal lengths must be positive");
  if (std::abs(k(2, 2) - 1.0) > 1e-12) throw InvalidInput("camera: K(2,2) must be 1");
  if (camera.width < 1 || camera.height < 1) throw InvalidInput("camera: image size must be positive");
  if (!is_finite(camera.t)) throw InvalidInput("camera: non-finite translation");
}

Camera look_at(Vec3 eye, Vec3 target, Vec3 up, double focal, int width, int height) {
  const Vec3 f = normalized(target - eye);
  const Vec3 r = normalized(cross(f, up));
  const Vec3 d = cross(f, r);
  Camera cam;
  for (int c = 0; c < 3; ++c) {
    cam.R(0, c) = r[c];
    cam.R(1, c) = d[c];
    cam.R(2, c) = f[c];
  }
  cam.t = -(cam.R * eye);
  cam.K = Mat3{{focal, 0.0, width / 2.0, 0.0, focal, height / 2.0, 0.0, 0.0, 1.0}};
  cam.width = width;
  cam.height = height;
  return cam;
}

Ray make_ray(const Camera& camera, double u, double v, double near, double far) {
  const Mat3& k = camera.K;
  const double pu = u + 0.5;
  const double pv = v + 0.5;
  const double y = (pv - k(1, 2)) / k(1, 1);
  const double x = (pu - k(0, 2) - k(0, 1) * y) / k(0, 0);
  Ray ray;
  ray.origin = camera.center();
  ray.direction = normalized(transpose(camera.R) * Vec3{x, y, 1.0});
  ray.near = near;
  ray.far = far;
  ray.u = u;
  ray.v = v;
  return ray;
}

std::pair<double, double> project(const Camera& camera, Vec3 point) {
  const Vec3 p = camera.K * (camera.R * point + camera.t);
  return {p.x / p.z - 0.5, p.y / p.z - 0.5};
}

std::pair<double, double> sphere_bounds(const Camera& camera, Vec3 center, double radius) {
  const double padded = 1.1 * radius;
  const double dist = norm(camera.center() - center);
  return {std::max(0.0, dist - padded), dist + padded};
}

Image mask_to_image(const Mask& mask) {
  Image img(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < mask.values.size(); ++i) img.data[i] = mask.values[i] ? 1.0f : 0.0f;
  return img;
}

Mask image_to_mask(const Image& image) {
  Mask m(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) m.set(x, y, image.at(x, y, 0) > 0.5f);
  return m;
}

int band_radius_for_width(int width) {
  return std::max(1, static_cast<int>(std::lround(8.0 * width / 2048.0)));
}

MaskBands compute_mask_bands(const Mask& mask, int radius, double pad_fraction) {
  if (radius < 1) throw InvalidInput("compute_mask_bands: radius must be >= 1");
  if (pad_fraction < 0.0) throw InvalidInput("compute_mask_bands: negative padding");
  MaskBands bands;
  bands.width = mask.width;
  bands.height = mask.height;
  bands.pad_x = static_cast<int>(std::lround(pad_fraction * mask.width));
  bands.pad_y = static_cast<int>(std::lround(pad_fraction * mask.height));
  bands.labels.assign(static_cast<std::size_t>(bands.padded_width()) * bands.padded_height(), Region::Padded);

  std::vector<std::pair<int, int>> disc;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) disc.emplace_back(dx, dy);

  const int w = mask.width;
  const int h = mask.height;
#pragma omp parallel for schedule(static) if (w * h > 65536)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool dilated = false;
      bool eroded = true;
      for (const auto& [dx, dy] : disc) {
        const int qx = x + dx;
        const int qy = y + dy;
        const bool inside = qx >= 0 && qy >= 0 && qx < w && qy < h;
        const bool set = inside && mask.at(qx, qy);
        dilated = dilated || set;
        eroded = eroded && set;
      }
      Region label = Region::Background;
      if (dilated && !eroded) label = Region::NearSilhouette;
      else if (mask.at(x, y)) label = Region::Foreground;
      bands.labels[static_cast<std::size_t>(y + bands.pad_y) * bands.padded_width() + (x + bands.pad_x)] = label;
    }
  }
  return bands;
}

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw InvalidInput("unknown split label '" + s + "'");
}

std::string image_path(int group, int camera, int light) {
  return "images/g" + std::to_string(group) + "_c" + std::to_string(camera) + "_l" +
         std::to_string(light) + ".pfm";
}

std::string mask_path(int group, int camera) {
  return "masks/g" + std::to_string(group) + "_c" + std::to_string(camera) + ".pfm";
}

namespace {

json vec_json(Vec3 v) { return json::array({v.x, v.y, v.z}); }
json mat_json(const Mat3& m) { return json(m.m); }

Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidInput("manifest: expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

Mat3 json_mat(const json& j) {
  if (!j.is_array() || j.size() != 9) throw InvalidInput("manifest: expected 9 matrix entries");
  Mat3 m;
  for (std::size_t i = 0; i < 9; ++i) m.m[i] = j[i].get<double>();
  return m;
}

}  // namespace

std::string manifest_to_json(const Manifest& m) {
  json root;
  root["format"] = "prtg-manifest";
  root["version"] = kManifestVersion;
  root["scene"] = m.scene;
  root["hdr_cutoff"] = m.hdr_cutoff;
  root["bounding_sphere"] = {{"center", vec_json(m.bound_center)}, {"radius", m.bound_radius}};
  json groups = json::array();
  for (const Group& g : m.groups) {
    json jg;
    jg["name"] = g.name;
    json cams = json::array();
    for (const auto& c : g.cameras)
      cams.push_back({{"id", c.id}, {"K", mat_json(c.camera.K)}, {"R", mat_json(c.camera.R)},
                      {"t", vec_json(c.camera.t)}, {"width", c.camera.width},
                      {"height", c.camera.height}, {"split", to_string(c.split)}});
    jg["cameras"] = cams;
    json lights = json::array();
    for (const auto& l : g.lights)
      lights.push_back({{"id", l.id}, {"direction", vec_json(l.direction)}, {"distance", l.distance},
                        {"intensity", l.intensity}, {"split", to_string(l.split)}});
    jg["lights"] = lights;
    json frames = json::array();
    for (const auto& f : g.frames)
      frames.push_back({{"camera", f.camera}, {"light", f.light}, {"split", to_string(f.split)},
                        {"image", f.image}});
    jg["frames"] = frames;
    json masks = json::array();
    for (const auto& mk : g.masks) masks.push_back({{"camera", mk.camera}, {"path", mk.path}});
    jg["masks"] = masks;
    groups.push_back(jg);
  }
  root["groups"] = groups;
  return root.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("manifest: parse error: ") + e.what());
  }
  try {
    if (root.at("format").get<std::string>() != "prtg-manifest")
      throw InvalidInput("manifest: unexpected format tag");
    if (root.at("version").get<int>() != kManifestVersion)
      throw InvalidInput("manifest: unsupported version");
    Manifest m;
    m.scene = root.at("scene").get<std::string>();
    m.hdr_cutoff = root.at("hdr_cutoff").get<double>();
    m.bound_center = json_vec(root.at("bounding_sphere").at("center"));
    m.bound_radius = root.at("bounding_sphere").at("radius").get<double>();
    if (!(m.bound_radius > 0.0)) throw InvalidInput("manifest: bounding radius must be positive");
    for (const auto& jg : root.at("groups")) {
      Group g;
      g.name = jg.at("name").get<std::string>();
      for (const auto& jc : jg.at("cameras")) {
        CameraRecord c;
        c.id = jc.at("id").get<int>();
        c.camera.K = json_mat(jc.at("K"));
        c.camera.R = json_mat(jc.at("R"));
        c.camera.t = json_vec(jc.at("t"));
        c.camera.width = jc.at("width").get<int>();
        c.camera.height = jc.at("height").get<int>();
        c.split = split_from_string(jc.at("split").get<std::string>());
        validate(c.camera);
        g.cameras.push_back(c);
      }
      for (const auto& jl : jg.at("lights")) {
        LightRecord l;
        l.id = jl.at("id").get<int>();
        l.direction = json_vec(jl.at("direction"));
        l.distance = jl.at("distance").get<double>();
        l.intensity = jl.at("intensity").get<double>();
        l.split = split_from_string(jl.at("split").get<std::string>());
        if (!is_unit(l.direction)) throw InvalidInput("manifest: light direction must be unit length");
        g.lights.push_back(l);
      }
      for (const auto& jf : jg.at("frames")) {
        FrameRecord f;
        f.camera = jf.at("camera").get<int>();
        f.light = jf.at("light").get<int>();
        f.split = split_from_string(jf.at("split").get<std::string>());
        f.image = jf.at("image").get<std::string>();
        g.frames.push_back(f);
      }
      for (const auto& jm : jg.at("masks")) g.masks.push_back({jm.at("camera").get<int>(), jm.at("path").get<std::string>()});
      m.groups.push_back(std::move(g));
    }
    return m;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("manifest: ") + e.what());
  }
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write manifest " + path.string());
  os << manifest_to_json(manifest);
}

Manifest load_manifest(const std::filesystem::path& path, const std::filesystem::path& root) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  Manifest m = manifest_from_json(ss.str());
  if (!root.empty()) {
    for (const Group& g : m.groups) {
      for (const auto& f : g.frames)
        if (!std::filesystem::exists(root / f.image)) throw InvalidInput("manifest: missing file " + f.image);
      for (const auto& mk : g.masks)
        if (!std::filesystem::exists(root / mk.path)) throw InvalidInput("manifest: missing file " + mk.path);
    }
  }
  return m;
}

std::vector<int> OlatDataset::frames_in(Split split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (frames[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

std::pair<double, double> OlatDataset::bounds(int view) const {
  return sphere_bounds(views.at(static_cast<std::size_t>(view)).camera, manifest.bound_center,
                       manifest.bound_radius);
}

OlatDataset load_dataset(const std::filesystem::path& dir) {
  OlatDataset ds;
  ds.root = dir;
  ds.manifest = load_manifest(dir / "manifest.json", dir);
  for (std::size_t gi = 0; gi < ds.manifest.groups.size(); ++gi) {
    const Group& g = ds.manifest.groups[gi];
    const int view_base = static_cast<int>(ds.views.size());
    const int light_base = static_cast<int>(ds.lights.size());
    auto view_index = [&](int id) {
      for (std::size_t i = 0; i < g.cameras.size(); ++i)
        if (g.cameras[i].id == id) return view_base + static_cast<int>(i);
      throw InvalidInput("manifest: unknown camera id " + std::to_string(id));
    };
    auto light_index = [&](int id) {
      for (std::size_t i = 0; i < g.lights.size(); ++i)
        if (g.lights[i].id == id) return light_base + static_cast<int>(i);
      throw InvalidInput("manifest: unknown light id " + std::to_string(id));
    };
    for (const auto& c : g.cameras)
      ds.views.push_back({static_cast<int>(gi), c.id, c.camera, c.split, Mask(c.camera.width, c.camera.height)});
    for (const auto& l : g.lights)
      ds.lights.push_back({static_cast<int>(gi), l.id, l.direction, l.intensity, l.split});
    for (const auto& mk : g.masks) {
      auto& view = ds.views[static_cast<std::size_t>(view_index(mk.camera))];
      const Image img = read_pfm(dir / mk.path);
      if (img.width != view.camera.width || img.height != view.camera.height)
        throw InvalidInput("dataset: mask size differs from camera for " + mk.path);
      view.mask = image_to_mask(img);
    }
    for (const auto& f : g.frames) {
      OlatDataset::Frame frame;
      frame.view = view_index(f.camera);
      frame.light = light_index(f.light);
      frame.split = f.split;
      frame.image = read_pfm(dir / f.image);
      const auto& cam = ds.views[static_cast<std::size_t>(frame.view)].camera;
      if (frame.image.width != cam.width || frame.image.height != cam.height || frame.image.channels != 3)
        throw InvalidInput("dataset: image size differs from camera for " + f.image);
      ds.frames.push_back(std::move(frame));
    }
  }
  return ds;
}

}  // namespace prtg
