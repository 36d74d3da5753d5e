// prtg command-line interface.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "prtg/dataset.hpp"
#include "prtg/eval.hpp"
#include "prtg/field.hpp"
#include "prtg/lighting.hpp"
#include "prtg/oracle.hpp"
#include "prtg/parallel.hpp"
#include "prtg/training.hpp"

namespace fs = std::filesystem;
using namespace prtg;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitNumerical = 3;

Vec3 parse_vec3(const std::string& s) {
  Vec3 v;
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  if (!(is >> v.x >> c1 >> v.y >> c2 >> v.z) || c1 != ',' || c2 != ',' || !(is >> std::ws).eof())
    throw InvalidInput("expected x,y,z but got '" + s + "'");
  return v;
}

struct RenderFlags {
  std::string config;
  int n_coarse = 64;
  int n_fine = 64;
};

void add_render_flags(CLI::App* cmd, RenderFlags& f) {
  cmd->add_option("--render-cfg", f.config, "Render settings file (key = value)");
  cmd->add_option("--n-coarse", f.n_coarse, "Coarse samples per ray");
  cmd->add_option("--n-fine", f.n_fine, "Fine samples per ray");
}

RenderConfig make_render_config(const RenderFlags& f, std::uint64_t seed) {
  RenderConfig cfg;
  if (!f.config.empty()) return load_render_config(f.config);
  cfg.n_coarse = f.n_coarse;
  cfg.n_fine = f.n_fine;
  cfg.seed = seed;
  validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Keep large tape buffers in the heap between steps instead of unmapping them.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Relightable neural field training and rendering"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  int threads = 0;
  bool verbose = false;
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads (0 = all; PRTG_THREADS overrides)");
  app.add_flag("-v,--verbose", verbose, "Progress output on stderr");

  std::string scene_path, rig_path, out_path;
  auto* gen = app.add_subcommand("generate-data", "Render an OLAT dataset with the analytic oracle");
  gen->add_option("scene", scene_path, "Scene JSON")->required();
  gen->add_option("rig", rig_path, "Capture rig JSON")->required();
  gen->add_option("out", out_path, "Output directory")->required();

  std::string dataset_path, cfg_path;
  bool resume = false;
  auto* tr = app.add_subcommand("train", "Fit a field to a dataset");
  tr->add_option("dataset", dataset_path, "Dataset directory")->required();
  tr->add_option("config", cfg_path, "Training config (key = value)")->required();
  tr->add_option("out", out_path, "Checkpoint directory")->required();
  tr->add_flag("--resume", resume, "Continue from out/checkpoint.bin and out/adam.bin");
  std::int64_t stop_after = -1;
  tr->add_option("--stop-after", stop_after, "Stop after this many total steps, keeping the schedule of the full run");

  std::string ckpt_path, light_str, image_out;
  int view = 0;
  RenderFlags render_flags;
  auto* ro = app.add_subcommand("render-olat", "Render a dataset view under one light direction");
  ro->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();
  ro->add_option("--dataset", dataset_path, "Dataset supplying the camera")->required();
  ro->add_option("--view", view, "Dataset view index")->required();
  ro->add_option("--light", light_str, "Light direction x,y,z")->required();
  ro->add_option("--out", image_out, "Output PFM")->required();
  add_render_flags(ro, render_flags);

  std::string envmap_path, lights_json;
  int n_lights = 64;
  auto* re = app.add_subcommand("relight-envmap", "Relight a dataset view with an environment map");
  re->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();
  re->add_option("envmap", envmap_path, "Equirectangular PFM")->required();
  re->add_option("--lights", n_lights, "Median-cut light count (power of two; 0 = every pixel)");
  re->add_option("--dataset", dataset_path, "Dataset supplying the camera")->required();
  re->add_option("--view", view, "Dataset view index")->required();
  re->add_option("--out", image_out, "Output PFM")->required();
  re->add_option("--lights-json", lights_json, "Also write the extracted lights");
  add_render_flags(re, render_flags);

  std::string report_path;
  auto* ev = app.add_subcommand("eval", "Score held-out views and lights");
  ev->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();
  ev->add_option("dataset", dataset_path, "Dataset directory")->required();
  ev->add_option("--report", report_path, "Report JSON")->required();
  add_render_flags(ev, render_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    set_thread_count(threads_from_env().value_or(threads));

    if (*gen) {
      const OracleScene scene = load_scene(scene_path);
      RigSpec rig = load_rig_spec(rig_path);
      if (app.count("--seed") > 0) rig.seed = seed;
      const Manifest m = generate_dataset(scene, rig, out_path);
      if (verbose)
        std::cerr << "wrote " << m.groups.front().frames.size() << " frames to " << out_path << "\n";
    } else if (*tr) {
      const OlatDataset ds = load_dataset(dataset_path);
      TrainConfig cfg = load_train_config(cfg_path);
      if (app.count("--seed") > 0) cfg.seed = seed;
      TrainOptions opt;
      opt.out_dir = out_path;
      opt.stop_after = stop_after;
      if (resume) {
        TrainState st;
        st.params = load_checkpoint(fs::path(out_path) / "checkpoint.bin");
        st.adam = load_adam(fs::path(out_path) / "adam.bin");
        opt.resume = std::move(st);
      }
      if (verbose)
        opt.on_step = [&](const LossReport& r) {
          if ((r.step + 1) % 100 == 0 || r.step == 0)
            std::fprintf(stderr, "step %lld  loss %.6f  color %.6f  mask %.6f  lr %.2e\n",
                         static_cast<long long>(r.step + 1), r.total, r.color, r.mask, r.lr);
        };
      train(ds, cfg, opt);
    } else if (*ro) {
      const FieldParams field = load_checkpoint(ckpt_path);
      const OlatDataset ds = load_dataset(dataset_path);
      if (view < 0 || view >= static_cast<int>(ds.views.size())) throw InvalidInput("--view out of range");
      const Vec3 light = parse_vec3(light_str);
      if (!is_unit(light, 1e-3)) throw InvalidInput("--light must be a unit vector");
      write_pfm(image_out, render_image(field, ds, view, light, make_render_config(render_flags, seed)));
    } else if (*re) {
      const FieldParams field = load_checkpoint(ckpt_path);
      const OlatDataset ds = load_dataset(dataset_path);
      if (view < 0 || view >= static_cast<int>(ds.views.size())) throw InvalidInput("--view out of range");
      const Image env = load_envmap(envmap_path);
      const auto lights = n_lights == 0 ? pixel_lights(env) : median_cut(env, n_lights);
      if (!lights_json.empty()) {
        std::ofstream os(lights_json);
        os << lights_to_json(lights);
      }
      const Camera& cam = ds.views[static_cast<std::size_t>(view)].camera;
      std::vector<Ray> rays;
      for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) rays.push_back(view_ray(ds, view, u, v));
      const auto rgb = relight_rays(field, rays, lights, make_render_config(render_flags, seed));
      Image img(cam.width, cam.height, 3);
      for (std::size_t i = 0; i < rgb.size(); ++i)
        img.set_rgb(static_cast<int>(i % static_cast<std::size_t>(cam.width)),
                    static_cast<int>(i / static_cast<std::size_t>(cam.width)), rgb[i]);
      write_pfm(image_out, img);
    } else if (*ev) {
      const FieldParams field = load_checkpoint(ckpt_path);
      const OlatDataset ds = load_dataset(dataset_path);
      const EvalReport rep = evaluate(field, ds, make_render_config(render_flags, seed));
      std::ofstream os(report_path);
      if (!os) throw InvalidInput("cannot write " + report_path);
      os << report_to_json(rep);
      if (verbose) std::cerr << "mean PSNR " << rep.mean_psnr << " dB, mean SSIM " << rep.mean_ssim << "\n";
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
