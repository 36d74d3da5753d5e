#include "prtg/eval.hpp"

#include <chrono>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "prtg/metrics.hpp"
#include "prtg/training.hpp"

namespace prtg {

Image render_image(const FieldParams& field, const OlatDataset& ds, int view, Vec3 light, const RenderConfig& cfg) {
  const Camera& cam = ds.views.at(static_cast<std::size_t>(view)).camera;
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(cam.width) * cam.height);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      Ray r = view_ray(ds, view, u, v);
      if (cfg.far > 0.0) {
        r.near = cfg.near;
        r.far = cfg.far;
      }
      rays.push_back(r);
    }
  const std::vector<Vec3> lights(rays.size(), normalized(light));
  const auto out = render_rays<float>(field, rays, lights, cfg);
  Image img(cam.width, cam.height, 3);
  for (std::size_t i = 0; i < out.size(); ++i)
    img.set_rgb(static_cast<int>(i % static_cast<std::size_t>(cam.width)),
                static_cast<int>(i / static_cast<std::size_t>(cam.width)), out[i].fine);
  return img;
}

std::vector<int> heldout_frames(const OlatDataset& ds) {
  std::vector<int> out;
  for (std::size_t f = 0; f < ds.frames.size(); ++f) {
    const auto& fr = ds.frames[f];
    if (fr.split == Split::Test && ds.views[static_cast<std::size_t>(fr.view)].split == Split::Test &&
        ds.lights[static_cast<std::size_t>(fr.light)].split == Split::Test)
      out.push_back(static_cast<int>(f));
  }
  return out;
}

double light_view_cosine(const OlatDataset& ds, int frame) {
  const auto& fr = ds.frames.at(static_cast<std::size_t>(frame));
  const Vec3 to_cam = normalized(ds.views[static_cast<std::size_t>(fr.view)].camera.center() - ds.manifest.bound_center);
  return dot(normalized(ds.lights[static_cast<std::size_t>(fr.light)].direction), to_cam);
}

EvalReport evaluate(const OlatDataset& ds, const std::function<Image(int frame)>& render) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.scene = ds.manifest.scene;
  const auto frames = heldout_frames(ds);
  if (frames.empty()) throw InvalidInput("evaluate: dataset has no held-out frames");
  for (int f : frames) {
    const auto& fr = ds.frames[static_cast<std::size_t>(f)];
    const Image pred = tonemap(render(f));
    const Image gt = tonemap(fr.image);
    EvalCase c;
    c.frame = f;
    c.view = fr.view;
    c.light = fr.light;
    c.psnr = psnr(pred, gt);
    c.ssim = ssim(pred, gt);
    c.light_view_cosine = light_view_cosine(ds, f);
    rep.cases.push_back(c);
  }
  for (const auto& c : rep.cases) {
    rep.mean_psnr += c.psnr;
    rep.mean_ssim += c.ssim;
  }
  rep.mean_psnr /= static_cast<double>(rep.cases.size());
  rep.mean_ssim /= static_cast<double>(rep.cases.size());
  rep.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

EvalReport evaluate(const FieldParams& field, const OlatDataset& ds, const RenderConfig& cfg) {
  EvalReport rep = evaluate(ds, [&](int f) {
    const auto& fr = ds.frames[static_cast<std::size_t>(f)];
    return render_image(field, ds, fr.view, ds.lights[static_cast<std::size_t>(fr.light)].direction, cfg);
  });
  rep.fingerprint = fingerprint(field, cfg);
  return rep;
}

std::string fingerprint(const FieldParams& field, const RenderConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  const FieldArch& a = field.arch;
  for (int v : {a.pos_freqs, a.dir_freqs, a.width, a.depth, a.skip_layer, a.head_width, cfg.n_coarse, cfg.n_fine})
    mix(&v, sizeof v);
  mix(&cfg.seed, sizeof cfg.seed);
  mix(&cfg.near, sizeof cfg.near);
  mix(&cfg.far, sizeof cfg.far);
  for (const Matrix<float>* m : tensor_list(field)) mix(m->flat().data(), m->flat().size() * sizeof(float));
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"frame", c.frame},
                     {"view", c.view},
                     {"light", c.light},
                     {"psnr", c.psnr},
                     {"ssim", c.ssim},
                     {"light_view_cosine", c.light_view_cosine}});
  nlohmann::json j;
  j["scene"] = r.scene;
  j["cases"] = cases;
  j["mean_psnr"] = r.mean_psnr;
  j["mean_ssim"] = r.mean_ssim;
  j["lpips"] = "unavailable";
  j["notes"] = "metrics include background pixels";
  j["fingerprint"] = r.fingerprint;
  j["runtime_s"] = r.runtime_s;
  return j.dump(2) + "\n";
}

}  // namespace prtg
