#pragma once

// Held-out OLAT evaluation: every test frame whose view and light are both
// held out.

#include <functional>
#include <string>
#include <vector>

#include "prtg/dataset.hpp"
#include "prtg/field.hpp"
#include "prtg/volume.hpp"

namespace prtg {

/// Fine-level HDR image of a dataset view under a light direction.
Image render_image(const FieldParams& field, const OlatDataset& ds, int view, Vec3 light, const RenderConfig& cfg);

struct EvalCase {
  int frame = 0;
  int view = 0;   // dataset view index
  int light = 0;  // dataset light index
  double psnr = 0.0;
  double ssim = 0.0;
  /// light direction . unit vector from the bound center to the camera
  double light_view_cosine = 0.0;
};

struct EvalReport {
  std::string scene;
  std::vector<EvalCase> cases;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::string fingerprint;
  double runtime_s = 0.0;
};

/// Frames with split, view and light all Test.
std::vector<int> heldout_frames(const OlatDataset& ds);

double light_view_cosine(const OlatDataset& ds, int frame);

/// Scores render(frame) against the stored image of every held-out frame.
EvalReport evaluate(const OlatDataset& ds, const std::function<Image(int frame)>& render);
EvalReport evaluate(const FieldParams& field, const OlatDataset& ds, const RenderConfig& cfg);

/// Stable hex digest of the parameters and render settings.
std::string fingerprint(const FieldParams& field, const RenderConfig& cfg);

std::string report_to_json(const EvalReport& report);

}  // namespace prtg
