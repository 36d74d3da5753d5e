#include "prtg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prtg/config.hpp"
#include "prtg/kernels.hpp"

namespace prtg {

void validate(const Ray& ray) {
  if (!(ray.near >= 0.0 && ray.near < ray.far) || !std::isfinite(ray.far))
    throw InvalidInput("ray: require 0 <= near < far");
  if (!is_unit(ray.direction)) throw InvalidInput("ray: direction must be unit length");
  if (!is_finite(ray.origin)) throw InvalidInput("ray: non-finite origin");
}

double WeightProfile::total() const {
  return std::accumulate(weights.begin(), weights.end(), 0.0);
}

void validate(const RenderConfig& cfg) {
  if (cfg.n_coarse < 2) throw InvalidInput("render config: n_coarse must be >= 2");
  if (cfg.n_fine < 0) throw InvalidInput("render config: n_fine must be >= 0");
  if (cfg.batch_rows < 1) throw InvalidInput("render config: batch_rows must be >= 1");
  if (cfg.near < 0.0 || cfg.far < 0.0 || (cfg.far > 0.0 && cfg.near >= cfg.far))
    throw InvalidInput("render config: require 0 <= near < far");
}

RenderConfig load_render_config(const std::string& path) {
  const auto kv = KeyValueConfig::load(path);
  kv.require_known({"n_coarse", "n_fine", "near", "far", "seed", "batch_rows"});
  RenderConfig cfg;
  cfg.n_coarse = kv.get_int("n_coarse", cfg.n_coarse);
  cfg.n_fine = kv.get_int("n_fine", cfg.n_fine);
  cfg.near = kv.get_double("near", cfg.near);
  cfg.far = kv.get_double("far", cfg.far);
  cfg.seed = kv.get_uint64("seed", cfg.seed);
  cfg.batch_rows = kv.get_int("batch_rows", cfg.batch_rows);
  validate(cfg);
  return cfg;
}

SampleSet make_sample_set(const Ray& ray, std::vector<double> depths) {
  SampleSet s;
  for (std::size_t i = 0; i < depths.size(); ++i) {
    if (!(depths[i] >= ray.near && depths[i] < ray.far))
      throw InvalidInput("sample set: depth outside [near, far)");
    if (i > 0 && !(depths[i] > depths[i - 1]))
      throw InvalidInput("sample set: depths must be strictly increasing");
  }
  s.deltas.resize(depths.size());
  s.positions.resize(depths.size());
  for (std::size_t i = 0; i < depths.size(); ++i) {
    const double next = i + 1 < depths.size() ? depths[i + 1] : ray.far;
    s.deltas[i] = next - depths[i];
    s.positions[i] = ray.origin + depths[i] * ray.direction;
  }
  s.depths = std::move(depths);
  return s;
}

SampleSet sample_stratified(const Ray& ray, std::span<const double> jitter) {
  validate(ray);
  const std::size_t n = jitter.size();
  if (n < 2) throw InvalidInput("sample_stratified: need at least 2 samples");
  const double step = (ray.far - ray.near) / static_cast<double>(n);
  std::vector<double> depths(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(jitter[i] >= 0.0 && jitter[i] < 1.0)) throw InvalidInput("sample_stratified: jitter outside [0, 1)");
    depths[i] = ray.near + (static_cast<double>(i) + jitter[i]) * step;
  }
  return make_sample_set(ray, std::move(depths));
}

SampleSet sample_stratified(const Ray& ray, int n, Rng& rng) {
  if (n < 2) throw InvalidInput("sample_stratified: need at least 2 samples");
  std::vector<double> jitter(static_cast<std::size_t>(n));
  for (double& j : jitter) j = uniform01(rng);
  return sample_stratified(ray, jitter);
}

WeightProfile compute_weights(std::span<const double> sigma, std::span<const double> delta) {
  if (sigma.size() != delta.size()) throw InvalidInput("compute_weights: length mismatch");
  WeightProfile p;
  p.weights.resize(sigma.size());
  p.transmittance.resize(sigma.size());
  double optical = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (!(sigma[i] >= 0.0)) throw InvalidInput("compute_weights: negative density");
    if (!(delta[i] >= 0.0)) throw InvalidInput("compute_weights: negative segment length");
    const double a = sigma[i] * delta[i];
    p.transmittance[i] = std::exp(-optical);
    p.weights[i] = p.transmittance[i] * -std::expm1(-a);
    optical += a;
  }
  p.residual = std::exp(-optical);
  return p;
}

Vec3 integrate_transfer(const WeightProfile& w, std::span<const Vec3> h) {
  if (w.weights.size() != h.size()) throw InvalidInput("integrate_transfer: length mismatch");
  Vec3 out;
  for (std::size_t i = 0; i < h.size(); ++i) out += w.weights[i] * h[i];
  return out;
}

std::vector<double> draw_hierarchical(const SampleSet& coarse, const WeightProfile& w, double far,
                                      int n_fine, Rng& rng) {
  const std::size_t bins = coarse.size();
  if (w.weights.size() != bins) throw InvalidInput("sample_hierarchical: profile/sample mismatch");
  if (bins == 0) throw InvalidInput("sample_hierarchical: empty coarse set");
  const double wsum = w.total();
  const double dsum = far - coarse.depths.front();
  std::vector<double> cdf(bins + 1, 0.0);
  for (std::size_t i = 0; i < bins; ++i) {
    const double uniform = coarse.deltas[i] / dsum;
    const double p = wsum > 0.0
                         ? (1.0 - kHierarchicalFloor) * w.weights[i] / wsum + kHierarchicalFloor * uniform
                         : uniform;
    cdf[i + 1] = cdf[i] + p;
  }
  std::vector<double> out(static_cast<std::size_t>(n_fine));
  for (double& t : out) {
    const double u = uniform01(rng) * cdf.back();
    auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    std::size_t bin = static_cast<std::size_t>(std::distance(cdf.begin(), it)) - 1;
    bin = std::min(bin, bins - 1);
    const double p = cdf[bin + 1] - cdf[bin];
    const double frac = p > 0.0 ? std::clamp((u - cdf[bin]) / p, 0.0, 1.0) : 0.5;
    t = coarse.depths[bin] + frac * coarse.deltas[bin];
  }
  return out;
}

SampleSet sample_hierarchical(const Ray& ray, const SampleSet& coarse, const WeightProfile& w,
                              int n_fine, Rng& rng) {
  if (n_fine < 1) throw InvalidInput("sample_hierarchical: n_fine must be >= 1");
  std::vector<double> depths = draw_hierarchical(coarse, w, ray.far, n_fine, rng);
  depths.insert(depths.end(), coarse.depths.begin(), coarse.depths.end());
  std::sort(depths.begin(), depths.end());
  // Enforce strict increase; coincident draws are nudged up by one ulp.
  for (std::size_t i = 1; i < depths.size(); ++i)
    if (!(depths[i] > depths[i - 1])) depths[i] = std::nextafter(depths[i - 1], ray.far);
  while (!depths.empty() && depths.back() >= ray.far) depths.pop_back();
  return make_sample_set(ray, std::move(depths));
}

namespace {

template <typename T>
struct PackedSamples {
  Matrix<T> positions;
  std::vector<T> deltas;
  std::vector<int> offsets;
};

template <typename T>
PackedSamples<T> pack(std::span<const SampleSet> sets) {
  PackedSamples<T> p;
  p.offsets.push_back(0);
  for (const auto& s : sets) p.offsets.push_back(p.offsets.back() + static_cast<int>(s.size()));
  p.positions = Matrix<T>(p.offsets.back(), 3);
  p.deltas.resize(static_cast<std::size_t>(p.offsets.back()));
  for (std::size_t r = 0; r < sets.size(); ++r) {
    for (std::size_t i = 0; i < sets[r].size(); ++i) {
      const int row = p.offsets[r] + static_cast<int>(i);
      for (int c = 0; c < 3; ++c) p.positions(row, c) = static_cast<T>(sets[r].positions[i][c]);
      p.deltas[static_cast<std::size_t>(row)] = static_cast<T>(sets[r].deltas[i]);
    }
  }
  return p;
}

/// Per-sample rows [enc(view of its ray) | enc(light)].
template <typename T>
Matrix<T> direction_rows(std::span<const Ray> rays, std::span<const Vec3> lights,
                         const std::vector<int>& offsets, int freqs) {
  const int dim = encoded_dim(freqs);
  Matrix<T> out(offsets.back(), 2 * dim);
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const auto view = positional_encode(rays[r].direction, freqs);
    const auto light = positional_encode(lights[r], freqs);
    for (int row = offsets[r]; row < offsets[r + 1]; ++row) {
      for (int c = 0; c < dim; ++c) {
        out(row, c) = static_cast<T>(view[static_cast<std::size_t>(c)]);
        out(row, dim + c) = static_cast<T>(light[static_cast<std::size_t>(c)]);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<WeightProfile> profiles(const Matrix<T>& sigma, std::span<const SampleSet> sets,
                                    const std::vector<int>& offsets) {
  std::vector<WeightProfile> out;
  out.reserve(sets.size());
  for (std::size_t r = 0; r < sets.size(); ++r) {
    std::vector<double> s(sets[r].size());
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = static_cast<double>(sigma(offsets[r] + static_cast<int>(i), 0));
    out.push_back(compute_weights(s, sets[r].deltas));
  }
  return out;
}

template <typename T>
void check_finite(const Matrix<T>& m, const char* what) {
  for (T v : m.flat())
    if (!std::isfinite(v)) throw NumericalError(std::string("render: non-finite ") + what);
}

template <typename T>
std::vector<SampleSet> fine_sets(std::span<const Ray> rays, std::span<const SampleSet> coarse,
                                 const std::vector<WeightProfile>& w, int n_fine,
                                 std::vector<Rng>& streams) {
  std::vector<SampleSet> out;
  out.reserve(rays.size());
  for (std::size_t r = 0; r < rays.size(); ++r)
    out.push_back(n_fine > 0 ? sample_hierarchical(rays[r], coarse[r], w[r], n_fine, streams[r])
                             : coarse[r]);
  return out;
}

}  // namespace

template <typename T>
std::vector<PixelRender> render_rays(const BasicFieldParams<T>& field, std::span<const Ray> rays,
                                     std::span<const Vec3> lights, const RenderConfig& cfg,
                                     std::uint64_t stream_base) {
  validate(cfg);
  if (rays.size() != lights.size()) throw InvalidInput("render_rays: one light per ray required");
  std::vector<PixelRender> out(rays.size());
  const FieldArch& arch = field.arch;
  for (std::size_t begin = 0; begin < rays.size(); begin += static_cast<std::size_t>(cfg.batch_rows)) {
    const std::size_t end = std::min(rays.size(), begin + static_cast<std::size_t>(cfg.batch_rows));
    const auto chunk = rays.subspan(begin, end - begin);
    const auto chunk_lights = lights.subspan(begin, end - begin);
    std::vector<Rng> streams;
    std::vector<SampleSet> coarse;
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      validate(chunk[r]);
      if (!is_unit(chunk_lights[r])) throw InvalidInput("render_rays: light must be unit length");
      streams.push_back(make_stream(cfg.seed, stream_base + begin + r));
      coarse.push_back(sample_stratified(chunk[r], cfg.n_coarse, streams.back()));
    }

    auto run_level = [&](Level level, std::span<const SampleSet> sets, Matrix<T>* sigma_out) {
      const auto packed = pack<T>(sets);
      const auto enc = encode_rows(packed.positions, arch.pos_freqs);
      const auto& nets = field.level(level);
      Matrix<T> sigma = forward_density(nets.density, arch, enc);
      check_finite(sigma, "density");
      const auto dirs = direction_rows<T>(chunk, chunk_lights, packed.offsets, arch.dir_freqs);
      const auto h = forward_transfer_head(
          nets.transfer, forward_transfer_features(nets.transfer, arch, enc), dirs);
      check_finite(h, "transfer gradient");
      Matrix<T> rgb(static_cast<int>(sets.size()), 3);
      std::vector<T> weights(packed.deltas.size());
      kernels::composite_forward<T>(sigma.flat(), h, packed.deltas, packed.offsets, weights, rgb);
      if (sigma_out != nullptr) *sigma_out = std::move(sigma);
      return std::pair{rgb, packed.offsets};
    };

    Matrix<T> coarse_sigma;
    const auto [coarse_rgb, coarse_offsets] = run_level(Level::Coarse, coarse, &coarse_sigma);
    const auto w = profiles(coarse_sigma, std::span<const SampleSet>(coarse), coarse_offsets);
    const auto fine = fine_sets<T>(chunk, coarse, w, cfg.n_fine, streams);
    const auto [fine_rgb, fine_offsets] = run_level(Level::Fine, fine, nullptr);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const int ri = static_cast<int>(r);
      out[begin + r].coarse = {coarse_rgb(ri, 0), coarse_rgb(ri, 1), coarse_rgb(ri, 2)};
      out[begin + r].fine = {fine_rgb(ri, 0), fine_rgb(ri, 1), fine_rgb(ri, 2)};
    }
  }
  return out;
}

PixelRender render_pixel(const FieldParams& field, const Ray& ray, Vec3 light,
                         const RenderConfig& cfg) {
  const Ray rays[1] = {ray};
  const Vec3 lights[1] = {light};
  return render_rays<float>(field, rays, lights, cfg, 0).front();
}

template <typename T>
void render_light_sweep(const BasicFieldParams<T>& field, std::span<const Ray> rays,
                        std::span<const Vec3> lights, const RenderConfig& cfg,
                        const std::function<void(std::size_t, std::size_t, Vec3)>& sink,
                        std::uint64_t stream_base) {
  validate(cfg);
  for (const Vec3& l : lights)
    if (!is_unit(l)) throw InvalidInput("render_light_sweep: light must be unit length");
  const FieldArch& arch = field.arch;
  const int dim = encoded_dim(arch.dir_freqs);
  std::vector<std::vector<double>> light_enc;
  for (const Vec3& l : lights) light_enc.push_back(positional_encode(l, arch.dir_freqs));

  for (std::size_t begin = 0; begin < rays.size(); begin += static_cast<std::size_t>(cfg.batch_rows)) {
    const std::size_t end = std::min(rays.size(), begin + static_cast<std::size_t>(cfg.batch_rows));
    const auto chunk = rays.subspan(begin, end - begin);
    std::vector<Rng> streams;
    std::vector<SampleSet> coarse;
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      validate(chunk[r]);
      streams.push_back(make_stream(cfg.seed, stream_base + begin + r));
      coarse.push_back(sample_stratified(chunk[r], cfg.n_coarse, streams.back()));
    }
    const auto coarse_packed = pack<T>(std::span<const SampleSet>(coarse));
    const Matrix<T> coarse_sigma = forward_density(
        field.coarse.density, arch, encode_rows(coarse_packed.positions, arch.pos_freqs));
    check_finite(coarse_sigma, "density");
    const auto w = profiles(coarse_sigma, std::span<const SampleSet>(coarse), coarse_packed.offsets);
    const auto fine = fine_sets<T>(chunk, coarse, w, cfg.n_fine, streams);

    const auto packed = pack<T>(std::span<const SampleSet>(fine));
    const auto enc = encode_rows(packed.positions, arch.pos_freqs);
    const Matrix<T> sigma = forward_density(field.fine.density, arch, enc);
    check_finite(sigma, "density");
    const Matrix<T> features = forward_transfer_features(field.fine.transfer, arch, enc);

    Matrix<T> dirs(packed.offsets.back(), 2 * dim);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const auto view = positional_encode(chunk[r].direction, arch.dir_freqs);
      for (int row = packed.offsets[r]; row < packed.offsets[r + 1]; ++row)
        for (int c = 0; c < dim; ++c) dirs(row, c) = static_cast<T>(view[static_cast<std::size_t>(c)]);
    }
    std::vector<T> weights(packed.deltas.size());
    Matrix<T> rgb(static_cast<int>(chunk.size()), 3);
    for (std::size_t k = 0; k < lights.size(); ++k) {
      for (int row = 0; row < dirs.rows(); ++row)
        for (int c = 0; c < dim; ++c)
          dirs(row, dim + c) = static_cast<T>(light_enc[k][static_cast<std::size_t>(c)]);
      const Matrix<T> h = forward_transfer_head(field.fine.transfer, features, dirs);
      check_finite(h, "transfer gradient");
      kernels::composite_forward<T>(sigma.flat(), h, packed.deltas, packed.offsets, weights, rgb);
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        const int ri = static_cast<int>(r);
        sink(k, begin + r, Vec3{rgb(ri, 0), rgb(ri, 1), rgb(ri, 2)});
      }
    }
  }
}

template <typename T>
RecordedRender<T> record_render(FieldGraph<T>& graph, std::span<const Ray> rays,
                                std::span<const Vec3> lights, const RenderConfig& cfg,
                                std::uint64_t seed, const std::vector<SampleSet>* fixed_coarse,
                                const std::vector<SampleSet>* fixed_fine) {
  validate(cfg);
  if (rays.size() != lights.size()) throw InvalidInput("record_render: one light per ray required");
  Tape<T>& tape = graph.tape();
  const FieldArch& arch = graph.arch();
  RecordedRender<T> out;
  std::vector<Rng> streams;
  if (fixed_coarse != nullptr) {
    if (fixed_coarse->size() != rays.size()) throw InvalidInput("record_render: fixed sample count");
    out.coarse_samples = *fixed_coarse;
  } else {
    for (std::size_t r = 0; r < rays.size(); ++r) {
      streams.push_back(make_stream(seed, r));
      out.coarse_samples.push_back(sample_stratified(rays[r], cfg.n_coarse, streams.back()));
    }
  }

  auto record_level = [&](Level level, const std::vector<SampleSet>& sets, typename Tape<T>::Id& sigma_id,
                          std::vector<int>& offsets) {
    const auto packed = pack<T>(std::span<const SampleSet>(sets));
    offsets = packed.offsets;
    const auto enc = tape.constant(encode_rows(packed.positions, arch.pos_freqs));
    sigma_id = graph.density(level, enc);
    const auto dirs = tape.constant(direction_rows<T>(rays, lights, packed.offsets, arch.dir_freqs));
    const auto h = graph.transfer(level, enc, dirs);
    check_finite(tape.value(sigma_id), "density");
    check_finite(tape.value(h), "transfer gradient");
    return tape.composite(sigma_id, h, packed.deltas, packed.offsets);
  };

  out.coarse_rgb = record_level(Level::Coarse, out.coarse_samples, out.coarse_sigma, out.coarse_offsets);
  if (fixed_fine != nullptr) {
    if (fixed_fine->size() != rays.size()) throw InvalidInput("record_render: fixed sample count");
    out.fine_samples = *fixed_fine;
  } else {
    if (streams.empty())
      for (std::size_t r = 0; r < rays.size(); ++r) streams.push_back(make_stream(seed, r));
    const auto w = profiles(tape.value(out.coarse_sigma), std::span<const SampleSet>(out.coarse_samples),
                            out.coarse_offsets);
    out.fine_samples = fine_sets<T>(rays, out.coarse_samples, w, cfg.n_fine, streams);
  }
  out.fine_rgb = record_level(Level::Fine, out.fine_samples, out.fine_sigma, out.fine_offsets);
  return out;
}

template std::vector<PixelRender> render_rays<float>(const BasicFieldParams<float>&, std::span<const Ray>,
                                                     std::span<const Vec3>, const RenderConfig&, std::uint64_t);
template std::vector<PixelRender> render_rays<double>(const BasicFieldParams<double>&, std::span<const Ray>,
                                                      std::span<const Vec3>, const RenderConfig&, std::uint64_t);
template void render_light_sweep<float>(const BasicFieldParams<float>&, std::span<const Ray>,
                                        std::span<const Vec3>, const RenderConfig&,
                                        const std::function<void(std::size_t, std::size_t, Vec3)>&,
                                        std::uint64_t);
template void render_light_sweep<double>(const BasicFieldParams<double>&, std::span<const Ray>,
                                         std::span<const Vec3>, const RenderConfig&,
                                         const std::function<void(std::size_t, std::size_t, Vec3)>&,
                                         std::uint64_t);
template RecordedRender<float> record_render<float>(FieldGraph<float>&, std::span<const Ray>,
                                                    std::span<const Vec3>, const RenderConfig&, std::uint64_t,
                                                    const std::vector<SampleSet>*, const std::vector<SampleSet>*);
template RecordedRender<double> record_render<double>(FieldGraph<double>&, std::span<const Ray>,
                                                      std::span<const Vec3>, const RenderConfig&, std::uint64_t,
                                                      const std::vector<SampleSet>*, const std::vector<SampleSet>*);

}  // namespace prtg
