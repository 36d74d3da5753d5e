#include "prtg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prtg/config.hpp"

namespace prtg {

void validate(const TrainConfig& cfg) {
  if (cfg.steps < 0) throw InvalidInput("train config: steps must be >= 0");
  if (cfg.batch < 8 || cfg.batch % 8 != 0) throw InvalidInput("train config: batch must be a positive multiple of 8");
  if (!(cfg.lr > 0.0) || !(cfg.lr_final > 0.0)) throw InvalidInput("train config: learning rates must be positive");
  if (!(cfg.lambda_mask >= 0.0)) throw InvalidInput("train config: lambda_mask must be >= 0");
  if (!(cfg.eps_tonemap > 0.0)) throw InvalidInput("train config: eps_tonemap must be positive");
  if (cfg.ckpt_every < 0) throw InvalidInput("train config: ckpt_every must be >= 0");
  if (cfg.n_coarse < 1 || cfg.n_fine < 0) throw InvalidInput("train config: bad sample counts");
  validate(cfg.arch);
}

TrainConfig parse_train_config(const std::string& text) {
  const auto kv = KeyValueConfig::parse(text);
  kv.require_known({"steps", "batch", "lr", "lr_final", "lambda_mask", "eps_tonemap", "seed", "ckpt_every",
                    "n_coarse", "n_fine", "pos_freqs", "dir_freqs", "width", "depth", "skip_layer",
                    "head_width"});
  TrainConfig c;
  c.steps = kv.get_int("steps", c.steps);
  c.batch = kv.get_int("batch", c.batch);
  c.lr = kv.get_double("lr", c.lr);
  c.lr_final = kv.get_double("lr_final", c.lr_final);
  c.lambda_mask = kv.get_double("lambda_mask", c.lambda_mask);
  c.eps_tonemap = kv.get_double("eps_tonemap", c.eps_tonemap);
  c.seed = kv.get_uint64("seed", c.seed);
  c.ckpt_every = kv.get_int("ckpt_every", c.ckpt_every);
  c.n_coarse = kv.get_int("n_coarse", c.n_coarse);
  c.n_fine = kv.get_int("n_fine", c.n_fine);
  c.arch.pos_freqs = kv.get_int("pos_freqs", c.arch.pos_freqs);
  c.arch.dir_freqs = kv.get_int("dir_freqs", c.arch.dir_freqs);
  c.arch.width = kv.get_int("width", c.arch.width);
  c.arch.depth = kv.get_int("depth", c.arch.depth);
  c.arch.skip_layer = kv.get_int("skip_layer", c.arch.skip_layer);
  c.arch.head_width = kv.get_int("head_width", c.arch.head_width);
  validate(c);
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string train_config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "steps = " << c.steps << "\nbatch = " << c.batch << "\nlr = " << c.lr << "\nlr_final = " << c.lr_final
     << "\nlambda_mask = " << c.lambda_mask << "\neps_tonemap = " << c.eps_tonemap << "\nseed = " << c.seed
     << "\nckpt_every = " << c.ckpt_every << "\nn_coarse = " << c.n_coarse << "\nn_fine = " << c.n_fine
     << "\npos_freqs = " << c.arch.pos_freqs << "\ndir_freqs = " << c.arch.dir_freqs
     << "\nwidth = " << c.arch.width << "\ndepth = " << c.arch.depth << "\nskip_layer = " << c.arch.skip_layer
     << "\nhead_width = " << c.arch.head_width << "\n";
  return os.str();
}

RenderConfig render_config(const TrainConfig& cfg) {
  RenderConfig r;
  r.n_coarse = cfg.n_coarse;
  r.n_fine = cfg.n_fine;
  r.seed = cfg.seed;
  return r;
}

double tonemapped_loss(Vec3 pred, Vec3 target, double eps) {
  double loss = 0.0;
  for (int c = 0; c < 3; ++c) {
    if (!(pred[c] >= 0.0) || !(target[c] >= 0.0)) throw InvalidInput("tonemapped_loss: inputs must be >= 0");
    const double d = (pred[c] - target[c]) / (pred[c] + eps);
    loss += d * d;
  }
  return loss;
}

double mask_loss(const std::vector<double>& sigma) {
  if (sigma.empty()) return 0.0;
  double s = 0.0;
  for (double v : sigma) {
    if (!(v >= 0.0)) throw InvalidInput("mask_loss: sigma must be >= 0");
    s += v * v;
  }
  return s / static_cast<double>(sigma.size());
}

Ray view_ray(const OlatDataset& ds, int view, double u, double v) {
  const auto [near, far] = ds.bounds(view);
  return make_ray(ds.views.at(static_cast<std::size_t>(view)).camera, u, v, near, far);
}

RaySampler::RaySampler(const OlatDataset& ds) : ds_(ds) {
  for (const auto& view : ds.views) {
    const MaskBands b = compute_mask_bands(view.mask, band_radius_for_width(view.mask.width), kBackgroundPad);
    std::array<std::vector<Pixel>, 3> lists;
    for (int v = -b.pad_y; v < b.height + b.pad_y; ++v)
      for (int u = -b.pad_x; u < b.width + b.pad_x; ++u) {
        switch (b.at(u, v)) {
          case Region::Foreground: lists[kForeground].push_back({u, v}); break;
          case Region::NearSilhouette: lists[kBand].push_back({u, v}); break;
          default: lists[kBackground].push_back({u, v}); break;
        }
      }
    bands_.push_back(b);
    pixels_.push_back(std::move(lists));
  }
  frames_ = ds.frames_in(Split::Train);
  if (frames_.empty()) throw InvalidInput("dataset has no train frames");
}

int RaySampler::pick_frame(int frame, Kind kind) const {
  auto usable = [&](int f) {
    return !pixels_[static_cast<std::size_t>(ds_.frames[static_cast<std::size_t>(f)].view)][kind].empty();
  };
  if (usable(frame)) return frame;
  const int light = ds_.frames[static_cast<std::size_t>(frame)].light;
  const auto it = std::find(frames_.begin(), frames_.end(), frame);
  const std::size_t start = static_cast<std::size_t>(it - frames_.begin());
  for (std::size_t k = 1; k < frames_.size(); ++k) {
    const int f = frames_[(start + k) % frames_.size()];
    if (ds_.frames[static_cast<std::size_t>(f)].light == light && usable(f)) return f;
  }
  throw InvalidInput("no train image of light " + std::to_string(light) + " has pixels of the requested region");
}

RayBatch RaySampler::sample(int batch, Rng& rng) const {
  if (batch < 8 || batch % 8 != 0) throw InvalidInput("sample_ray_batch: batch must be a positive multiple of 8");
  RayBatch out;
  const int counts[3] = {batch / 2, 3 * batch / 8, batch / 8};
  const double cutoff = ds_.manifest.hdr_cutoff;
  for (int kind = 0; kind < 3; ++kind) {
    for (int n = 0; n < counts[kind]; ++n) {
      const int drawn = frames_[uniform_index(rng, frames_.size())];
      const int f = pick_frame(drawn, static_cast<Kind>(kind));
      const auto& frame = ds_.frames[static_cast<std::size_t>(f)];
      const auto& list = pixels_[static_cast<std::size_t>(frame.view)][static_cast<std::size_t>(kind)];
      const Pixel p = list[uniform_index(rng, list.size())];
      const Region region = bands_[static_cast<std::size_t>(frame.view)].at(p.u, p.v);
      Vec3 target;
      if (region != Region::Padded) {
        const Vec3 raw = frame.image.rgb(p.u, p.v);
        target = {std::min(raw.x, cutoff), std::min(raw.y, cutoff), std::min(raw.z, cutoff)};
      }
      out.rays.push_back(view_ray(ds_, frame.view, p.u, p.v));
      out.targets.push_back(target);
      out.regions.push_back(region);
      out.lights.push_back(ds_.lights[static_cast<std::size_t>(frame.light)].direction);
      out.images.push_back(f);
    }
  }
  return out;
}

RayBatch sample_ray_batch(const RaySampler& sampler, int batch, Rng& rng) { return sampler.sample(batch, rng); }

template <typename T>
LossGraph<T> record_loss(FieldGraph<T>& graph, const RayBatch& batch, const TrainConfig& cfg, double hdr_cutoff,
                         std::uint64_t render_seed, const std::vector<SampleSet>* fixed_coarse,
                         const std::vector<SampleSet>* fixed_fine) {
  Tape<T>& tape = graph.tape();
  LossGraph<T> g;
  g.render = record_render<T>(graph, batch.rays, batch.lights, render_config(cfg), render_seed, fixed_coarse,
                              fixed_fine);
  const std::size_t n = batch.rays.size();
  Matrix<T> target(static_cast<int>(n), 3);
  for (std::size_t r = 0; r < n; ++r)
    for (int c = 0; c < 3; ++c) target(static_cast<int>(r), c) = static_cast<T>(std::min(batch.targets[r][c], hdr_cutoff));
  const T eps = static_cast<T>(cfg.eps_tonemap);
  g.color_coarse = tape.tonemapped_l2(g.render.coarse_rgb, target, eps);
  g.color_fine = tape.tonemapped_l2(g.render.fine_rgb, target, eps);

  auto background_rows = [&](const std::vector<int>& offsets) {
    std::vector<int> rows;
    for (std::size_t r = 0; r < n; ++r)
      if (batch.regions[r] == Region::Background || batch.regions[r] == Region::Padded)
        for (int i = offsets[r]; i < offsets[r + 1]; ++i) rows.push_back(i);
    return rows;
  };
  g.mask_coarse = tape.mean_square_rows(g.render.coarse_sigma, background_rows(g.render.coarse_offsets));
  g.mask_fine = tape.mean_square_rows(g.render.fine_sigma, background_rows(g.render.fine_offsets));
  const auto color = tape.add(g.color_coarse, g.color_fine);
  const auto mask = tape.add(g.mask_coarse, g.mask_fine);
  g.total = tape.add(color, tape.scale(mask, static_cast<T>(cfg.lambda_mask)));
  return g;
}

template LossGraph<float> record_loss<float>(FieldGraph<float>&, const RayBatch&, const TrainConfig&, double,
                                             std::uint64_t, const std::vector<SampleSet>*,
                                             const std::vector<SampleSet>*);
template LossGraph<double> record_loss<double>(FieldGraph<double>&, const RayBatch&, const TrainConfig&, double,
                                               std::uint64_t, const std::vector<SampleSet>*,
                                               const std::vector<SampleSet>*);

namespace {

constexpr char kAdamMagic[4] = {'P', 'R', 'T', 'A'};
constexpr std::uint32_t kAdamVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const std::filesystem::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw InvalidInput("truncated file " + path.string());
  return v;
}

double level_grad_norm(const FieldParams& grads, const char* prefix) {
  double s = 0.0;
  for_each_tensor<float>(grads, [&](const std::string& name, const Matrix<float>& m) {
    if (name.rfind(prefix, 0) != 0) return;
    for (float v : m.flat()) s += static_cast<double>(v) * v;
  });
  return std::sqrt(s);
}

void save_state(const std::filesystem::path& dir, const TrainState& state) {
  std::filesystem::create_directories(dir);
  // Write then rename so an interrupted save never replaces a good checkpoint.
  save_checkpoint(dir / "checkpoint.bin.tmp", state.params);
  save_adam(dir / "adam.bin.tmp", state.adam);
  std::filesystem::rename(dir / "checkpoint.bin.tmp", dir / "checkpoint.bin");
  std::filesystem::rename(dir / "checkpoint.bin.tmp.manifest", dir / "checkpoint.bin.manifest");
  std::filesystem::rename(dir / "adam.bin.tmp", dir / "adam.bin");
  write_loss_history(dir / "loss.csv", state.history);
}

}  // namespace

TrainState train(const OlatDataset& ds, const TrainConfig& cfg, const TrainOptions& options) {
  validate(cfg);
  const RaySampler sampler(ds);
  TrainState state;
  if (options.resume) {
    state = *options.resume;
    if (!(state.params.arch == cfg.arch)) throw InvalidInput("resume: architecture differs from the config");
  } else {
    state.params = init_params<float>(cfg.seed, cfg.arch);
    state.adam = AdamState<float>::zeros_like(tensor_list(std::as_const(state.params)));
  }
  const double cutoff = ds.manifest.hdr_cutoff;

  const std::int64_t end = options.stop_after >= 0 ? std::min<std::int64_t>(cfg.steps, options.stop_after) : cfg.steps;
  for (std::int64_t step = state.adam.step; step < end; ++step) {
    Rng rng = make_stream(splitmix64(cfg.seed), static_cast<std::uint64_t>(step));
    const RayBatch batch = sampler.sample(cfg.batch, rng);

    Tape<float> tape;
    FieldParams grads = zero_params<float>(cfg.arch);
    FieldGraph<float> graph(tape, state.params, &grads);
    const std::uint64_t render_seed = splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(step) + 1));
    const LossGraph<float> g = record_loss<float>(graph, batch, cfg, cutoff, render_seed);

    LossReport rep;
    rep.step = step;
    rep.color_coarse = tape.value(g.color_coarse)(0, 0);
    rep.color_fine = tape.value(g.color_fine)(0, 0);
    rep.mask_coarse = tape.value(g.mask_coarse)(0, 0);
    rep.mask_fine = tape.value(g.mask_fine)(0, 0);
    rep.color = rep.color_coarse + rep.color_fine;
    rep.mask = rep.mask_coarse + rep.mask_fine;
    rep.total = tape.value(g.total)(0, 0);
    if (!std::isfinite(rep.total)) throw NumericalError("non-finite loss at step " + std::to_string(step));

    tape.backward(g.total);
    rep.grad_norm_coarse = level_grad_norm(grads, "coarse.");
    rep.grad_norm_fine = level_grad_norm(grads, "fine.");
    rep.lr = decayed_learning_rate(cfg.lr, cfg.lr_final, step, cfg.steps);
    adam_step<float>(state.adam, tensor_list(state.params), tensor_list(std::as_const(grads)), rep.lr);
    if (!all_finite(state.params))
      throw NumericalError("non-finite parameters after step " + std::to_string(step));

    state.history.push_back(rep);
    if (options.on_step) options.on_step(rep);
    if (!options.out_dir.empty() && cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0)
      save_state(options.out_dir, state);
  }
  if (!options.out_dir.empty()) save_state(options.out_dir, state);
  return state;
}

void save_adam(const std::filesystem::path& path, const AdamState<float>& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write " + path.string());
  os.write(kAdamMagic, 4);
  put<std::uint32_t>(os, kAdamVersion);
  put<std::int64_t>(os, state.step);
  put<double>(os, state.beta1);
  put<double>(os, state.beta2);
  put<double>(os, state.epsilon);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(state.first_moment.size()));
  for (std::size_t i = 0; i < state.first_moment.size(); ++i) {
    const auto& m = state.first_moment[i];
    const auto& v = state.second_moment[i];
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    for (float x : m.flat()) put<float>(os, x);
    for (float x : v.flat()) put<float>(os, x);
  }
  if (!os) throw InvalidInput("failed writing " + path.string());
}

AdamState<float> load_adam(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kAdamMagic, 4) != 0)
    throw InvalidInput("adam state: bad magic in " + path.string());
  if (get<std::uint32_t>(is, path) != kAdamVersion) throw InvalidInput("adam state: unsupported version");
  AdamState<float> s;
  s.step = get<std::int64_t>(is, path);
  s.beta1 = get<double>(is, path);
  s.beta2 = get<double>(is, path);
  s.epsilon = get<double>(is, path);
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rows = get<std::uint32_t>(is, path);
    const auto cols = get<std::uint32_t>(is, path);
    Matrix<float> m(static_cast<int>(rows), static_cast<int>(cols)), v(static_cast<int>(rows), static_cast<int>(cols));
    for (float& x : m.flat()) x = get<float>(is, path);
    for (float& x : v.flat()) x = get<float>(is, path);
    s.first_moment.push_back(std::move(m));
    s.second_moment.push_back(std::move(v));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw InvalidInput("adam state: trailing data");
  return s;
}

void write_loss_history(const std::filesystem::path& path, const std::vector<LossReport>& history) {
  std::ofstream os(path);
  if (!os) throw InvalidInput("cannot write " + path.string());
  os.precision(9);
  os << "step,total,color,mask,color_coarse,color_fine,mask_coarse,mask_fine,lr\n";
  for (const auto& r : history)
    os << r.step << ',' << r.total << ',' << r.color << ',' << r.mask << ',' << r.color_coarse << ','
       << r.color_fine << ',' << r.mask_coarse << ',' << r.mask_fine << ',' << r.lr << '\n';
}

}  // namespace prtg
