#pragma once

// Ray sampling and volume integration of the transfer gradient:
//   I(r; w) = sum_i w_i h_i,  w_i = T_i (1 - exp(-sigma_i delta_i)),
//   T_i = exp(-sum_{j<i} sigma_j delta_j),  delta_i = t_{i+1} - t_i.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "prtg/common.hpp"
#include "prtg/field.hpp"
#include "prtg/rng.hpp"

namespace prtg {

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
  double near = 0.0;
  double far = 1.0;
  double u = 0.0;
  double v = 0.0;
};

/// Throws InvalidInput unless 0 <= near < far and the direction is unit length.
void validate(const Ray& ray);

struct SampleSet {
  std::vector<double> depths;  // strictly increasing, inside [near, far)
  std::vector<double> deltas;  // t_{i+1} - t_i, last one capped at far - t_N
  std::vector<Vec3> positions;

  std::size_t size() const { return depths.size(); }
};

struct WeightProfile {
  std::vector<double> weights;
  std::vector<double> transmittance;  // T_i before sample i
  double residual = 1.0;              // transmittance past the last sample

  double total() const;
};

struct RenderConfig {
  int n_coarse = 64;
  int n_fine = 64;
  /// Overrides for the per-camera bounds; both zero means "derive from the
  /// scene's bounding sphere".
  double near = 0.0;
  double far = 0.0;
  std::uint64_t seed = 0;
  /// Rays per forward chunk.
  int batch_rows = 1024;
};

/// Reads n_coarse, n_fine, near, far, seed, batch_rows from a key = value file.
RenderConfig load_render_config(const std::string& path);
void validate(const RenderConfig& cfg);

/// Builds a sample set from sorted depths (throws unless strictly increasing
/// and inside [near, far)).
SampleSet make_sample_set(const Ray& ray, std::vector<double> depths);

/// One jittered sample per equal bin of [near, far).
SampleSet sample_stratified(const Ray& ray, int n, Rng& rng);
/// Same with explicit per-bin jitter in [0, 1).
SampleSet sample_stratified(const Ray& ray, std::span<const double> jitter);

/// Throws InvalidInput for negative sigma/delta or a length mismatch.
WeightProfile compute_weights(std::span<const double> sigma, std::span<const double> delta);

/// sum_i w_i h_i per channel; throws InvalidInput on a length mismatch.
Vec3 integrate_transfer(const WeightProfile& w, std::span<const Vec3> h);

/// Weight of the uniform component mixed into the resampling PDF.
inline constexpr double kHierarchicalFloor = 0.05;

/// Draws n_fine depths from the piecewise-constant PDF over the coarse
/// segments (0.95 * normalized weights + 0.05 * uniform) and merges them with
/// the coarse depths.
SampleSet sample_hierarchical(const Ray& ray, const SampleSet& coarse, const WeightProfile& w,
                              int n_fine, Rng& rng);
/// Only the fine draws, unsorted-merge-free; used by the statistical tests.
std::vector<double> draw_hierarchical(const SampleSet& coarse, const WeightProfile& w,
                                      double far, int n_fine, Rng& rng);

struct PixelRender {
  Vec3 coarse;
  Vec3 fine;
};

/// Renders rays (ray i lit from lights[i]); ray i draws its samples from the
/// stream (cfg.seed, stream_base + i), independent of chunking and threads.
template <typename T>
std::vector<PixelRender> render_rays(const BasicFieldParams<T>& field, std::span<const Ray> rays,
                                     std::span<const Vec3> lights, const RenderConfig& cfg,
                                     std::uint64_t stream_base = 0);

/// render_rays for a single ray on stream 0.
PixelRender render_pixel(const FieldParams& field, const Ray& ray, Vec3 light,
                         const RenderConfig& cfg);

/// Fine-level output of every ray under every light. Samples depend only on
/// density, so they are shared across lights. `sink(light, ray, value)` is
/// called sequentially, light-major.
template <typename T>
void render_light_sweep(const BasicFieldParams<T>& field, std::span<const Ray> rays,
                        std::span<const Vec3> lights, const RenderConfig& cfg,
                        const std::function<void(std::size_t, std::size_t, Vec3)>& sink,
                        std::uint64_t stream_base = 0);

/// Tape-recorded render of a batch of rays for training.
template <typename T>
struct RecordedRender {
  using Id = typename Tape<T>::Id;
  Id coarse_rgb = -1;
  Id fine_rgb = -1;
  Id coarse_sigma = -1;
  Id fine_sigma = -1;
  std::vector<SampleSet> coarse_samples;
  std::vector<SampleSet> fine_samples;
  std::vector<int> coarse_offsets;
  std::vector<int> fine_offsets;
};

/// Records coarse and fine passes. When fixed sample sets are given they are
/// used as-is (no random draws), which keeps the graph a fixed function of
/// the parameters for gradient checking.
template <typename T>
RecordedRender<T> record_render(FieldGraph<T>& graph, std::span<const Ray> rays,
                                std::span<const Vec3> lights, const RenderConfig& cfg,
                                std::uint64_t seed,
                                const std::vector<SampleSet>* fixed_coarse = nullptr,
                                const std::vector<SampleSet>* fixed_fine = nullptr);

}  // namespace prtg
