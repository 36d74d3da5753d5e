#pragma once

// Image quality metrics on tonemapped, clamped images.

#include "prtg/dataset.hpp"

namespace prtg {

inline constexpr double kPsnrCap = 99.0;

/// y / (1 + y) per value, clamped to [0, 1].
Image tonemap(const Image& hdr);

/// 10 log10(1 / MSE) over all pixels and channels, capped at 99 dB. Inputs
/// are expected in [0, 1]. Throws InvalidInput on shape mismatch.
double psnr(const Image& pred, const Image& gt);

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, per channel then averaged. Throws InvalidInput on shape
/// mismatch or images smaller than the window.
double ssim(const Image& pred, const Image& gt);

}  // namespace prtg
