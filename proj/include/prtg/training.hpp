#pragma once

// Losses, importance ray sampling over mask bands, and the Adam training loop.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prtg/autodiff.hpp"
#include "prtg/dataset.hpp"
#include "prtg/field.hpp"
#include "prtg/rng.hpp"
#include "prtg/volume.hpp"

namespace prtg {

/// Off-image padding on each side, as a fraction of the image size.
inline constexpr double kBackgroundPad = 0.25;

struct TrainConfig {
  int steps = 20000;
  int batch = 1024;
  double lr = 5e-4;
  double lr_final = 5e-5;
  double lambda_mask = 0.1;
  double eps_tonemap = 1e-3;
  std::uint64_t seed = 0;
  int ckpt_every = 1000;
  int n_coarse = 64;
  int n_fine = 64;
  FieldArch arch;
};

void validate(const TrainConfig& cfg);
/// Keys: steps, batch, lr, lr_final, lambda_mask, eps_tonemap, seed,
/// ckpt_every, n_coarse, n_fine and the architecture keys pos_freqs,
/// dir_freqs, width, depth, skip_layer, head_width.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string train_config_to_text(const TrainConfig& cfg);

/// Render settings matching a training configuration.
RenderConfig render_config(const TrainConfig& cfg);

/// sum_c (pred_c - target_c)^2 / (pred_c + eps)^2. Throws InvalidInput for
/// negative components.
double tonemapped_loss(Vec3 pred, Vec3 target, double eps);
/// Mean of sigma^2 (0 for an empty list). Throws InvalidInput for negative sigma.
double mask_loss(const std::vector<double>& sigma);

/// Ray through pixel (u, v) of a dataset view with that view's bounds.
Ray view_ray(const OlatDataset& ds, int view, double u, double v);

struct RayBatch {
  std::vector<Ray> rays;
  std::vector<Vec3> targets;
  std::vector<Region> regions;
  std::vector<Vec3> lights;
  std::vector<int> images;  // frame index
};

/// Precomputed mask bands and per-region pixel lists for the train frames.
class RaySampler {
 public:
  explicit RaySampler(const OlatDataset& ds);

  const OlatDataset& dataset() const { return ds_; }
  const MaskBands& bands(int view) const { return bands_.at(static_cast<std::size_t>(view)); }
  const std::vector<int>& train_frames() const { return frames_; }

  /// Exactly batch/2 foreground, 3 batch/8 near-silhouette and batch/8
  /// background rays (background includes padded off-image pixels), in that
  /// order. A frame whose view has no pixels of a region is replaced by the
  /// next train frame with the same light that has some.
  RayBatch sample(int batch, Rng& rng) const;

 private:
  enum Kind { kForeground = 0, kBand = 1, kBackground = 2 };
  struct Pixel {
    int u, v;
  };
  int pick_frame(int frame, Kind kind) const;

  const OlatDataset& ds_;
  std::vector<MaskBands> bands_;
  std::vector<std::array<std::vector<Pixel>, 3>> pixels_;  // per view
  std::vector<int> frames_;
};

RayBatch sample_ray_batch(const RaySampler& sampler, int batch, Rng& rng);

struct LossReport {
  std::int64_t step = 0;
  double total = 0.0;
  double color = 0.0;
  double mask = 0.0;
  double color_coarse = 0.0;
  double color_fine = 0.0;
  double mask_coarse = 0.0;
  double mask_fine = 0.0;
  double lr = 0.0;
  double grad_norm_coarse = 0.0;
  double grad_norm_fine = 0.0;
};

/// Loss graph of one batch. Returned ids index the tape.
template <typename T>
struct LossGraph {
  using Id = typename Tape<T>::Id;
  RecordedRender<T> render;
  Id color_coarse = -1;
  Id color_fine = -1;
  Id mask_coarse = -1;
  Id mask_fine = -1;
  Id total = -1;
};

/// Records render -> loss for a batch. Targets are clamped at hdr_cutoff;
/// mask terms cover every sample of background and padded rays.
template <typename T>
LossGraph<T> record_loss(FieldGraph<T>& graph, const RayBatch& batch, const TrainConfig& cfg, double hdr_cutoff,
                         std::uint64_t render_seed, const std::vector<SampleSet>* fixed_coarse = nullptr,
                         const std::vector<SampleSet>* fixed_fine = nullptr);

struct TrainState {
  FieldParams params;
  AdamState<float> adam;
  std::vector<LossReport> history;
};

struct TrainOptions {
  /// Checkpoint directory (checkpoint.bin, adam.bin); none when empty.
  std::filesystem::path out_dir;
  /// Continue from this state instead of a fresh initialization.
  std::optional<TrainState> resume;
  std::function<void(const LossReport&)> on_step;
  /// Stop once this many steps are done (schedule unchanged); -1 runs to cfg.steps.
  std::int64_t stop_after = -1;
};

/// Runs cfg.steps iterations of sample -> render -> loss -> backward ->
/// Adam. Throws NumericalError on a non-finite loss or parameter; the last
/// checkpoint on disk is left untouched.
TrainState train(const OlatDataset& ds, const TrainConfig& cfg, const TrainOptions& options = {});

/// "PRTA", u32 version, i64 step, f64 beta1/beta2/epsilon, u32 count, then
/// per tensor u32 rows, u32 cols and f32 first/second moments.
void save_adam(const std::filesystem::path& path, const AdamState<float>& state);
AdamState<float> load_adam(const std::filesystem::path& path);

/// CSV: step,total,color,mask,color_coarse,color_fine,mask_coarse,mask_fine,lr
void write_loss_history(const std::filesystem::path& path, const std::vector<LossReport>& history);

}  // namespace prtg
