#pragma once

// Finite-difference check of the full render -> loss gradient in f64.

#include <cstdint>
#include <vector>

#include "prtg/training.hpp"

namespace prtg {

struct GradCheckOptions {
  int rays = 8;
  int probes = 500;
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Relative errors divide by max(|analytic|, |numeric|, floor).
  double floor = 1e-8;
  std::uint64_t seed = 0;
};

struct GradProbe {
  int tensor = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  double loss = 0.0;         // record_loss value
  double frozen_loss = 0.0;  // same graph with fixed samples and weights
  /// Largest relative difference between record_loss gradients and the
  /// frozen graph's gradients (the tonemap weight passes no gradient).
  double graph_mismatch = 0.0;
  int agreeing = 0;
  std::vector<GradProbe> probes;
};

/// Samples a batch, records the loss once in f64 with cfg's sample counts,
/// then freezes the samples and tonemap weights and compares central
/// differences against the tape gradient on randomly chosen parameters.
GradCheckResult gradient_check(const OlatDataset& ds, const TrainConfig& cfg, const GradCheckOptions& opt = {});

}  // namespace prtg
