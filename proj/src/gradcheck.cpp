#include "prtg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace prtg {

namespace {

using ParamsD = BasicFieldParams<double>;

struct Frozen {
  const RayBatch* batch = nullptr;
  const TrainConfig* cfg = nullptr;
  std::vector<SampleSet> coarse, fine;
  Matrix<double> target, weight_coarse, weight_fine;
};

Matrix<double> tonemap_weight(const Matrix<double>& pred, double eps) {
  Matrix<double> w(pred.rows(), pred.cols());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = pred.data()[i] + eps;
    w.data()[i] = 1.0 / (d * d);
  }
  return w;
}

double frozen_loss(const Frozen& f, const ParamsD& params, ParamsD* grads) {
  Tape<double> tape;
  FieldGraph<double> graph(tape, params, grads);
  const RayBatch& b = *f.batch;
  const auto r = record_render<double>(graph, b.rays, b.lights, render_config(*f.cfg), 0, &f.coarse, &f.fine);
  const auto cc = tape.tonemapped_l2(r.coarse_rgb, f.target, f.weight_coarse);
  const auto cf = tape.tonemapped_l2(r.fine_rgb, f.target, f.weight_fine);
  auto rows = [&](const std::vector<int>& offsets) {
    std::vector<int> out;
    for (std::size_t i = 0; i < b.rays.size(); ++i)
      if (b.regions[i] == Region::Background || b.regions[i] == Region::Padded)
        for (int k = offsets[i]; k < offsets[i + 1]; ++k) out.push_back(k);
    return out;
  };
  const auto mc = tape.mean_square_rows(r.coarse_sigma, rows(r.coarse_offsets));
  const auto mf = tape.mean_square_rows(r.fine_sigma, rows(r.fine_offsets));
  const auto total = tape.add(tape.add(cc, cf), tape.scale(tape.add(mc, mf), f.cfg->lambda_mask));
  if (grads != nullptr) tape.backward(total);
  return tape.value(total)(0, 0);
}

}  // namespace

GradCheckResult gradient_check(const OlatDataset& ds, const TrainConfig& cfg, const GradCheckOptions& opt) {
  validate(cfg);
  if (opt.rays < 8 || opt.rays % 8 != 0) throw InvalidInput("gradient_check: rays must be a positive multiple of 8");
  if (opt.probes < 1 || !(opt.step > 0.0)) throw InvalidInput("gradient_check: bad probe settings");

  const RaySampler sampler(ds);
  Rng rng = make_stream(opt.seed, 0);
  const RayBatch batch = sampler.sample(opt.rays, rng);
  ParamsD params = cast_params<float, double>(init_params<float>(opt.seed, cfg.arch));
  const double cutoff = ds.manifest.hdr_cutoff;

  GradCheckResult res;
  Frozen f;
  f.batch = &batch;
  f.cfg = &cfg;
  ParamsD graph_grads = zero_params<double>(cfg.arch);
  {
    Tape<double> tape;
    FieldGraph<double> graph(tape, params, &graph_grads);
    const auto g = record_loss<double>(graph, batch, cfg, cutoff, splitmix64(opt.seed + 1));
    tape.backward(g.total);
    res.loss = tape.value(g.total)(0, 0);
    f.coarse = g.render.coarse_samples;
    f.fine = g.render.fine_samples;
    f.weight_coarse = tonemap_weight(tape.value(g.render.coarse_rgb), cfg.eps_tonemap);
    f.weight_fine = tonemap_weight(tape.value(g.render.fine_rgb), cfg.eps_tonemap);
  }
  const int n = static_cast<int>(batch.rays.size());
  f.target = Matrix<double>(n, 3);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < 3; ++c) f.target(r, c) = std::min(batch.targets[static_cast<std::size_t>(r)][c], cutoff);

  ParamsD grads = zero_params<double>(cfg.arch);
  res.frozen_loss = frozen_loss(f, params, &grads);
  const auto ga = tensor_list(std::as_const(grads));
  const auto gb = tensor_list(std::as_const(graph_grads));
  for (std::size_t t = 0; t < ga.size(); ++t)
    for (std::size_t i = 0; i < ga[t]->size(); ++i) {
      const double a = ga[t]->data()[i], b = gb[t]->data()[i];
      res.graph_mismatch = std::max(res.graph_mismatch, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}));
    }

  auto tensors = tensor_list(params);
  std::size_t total = 0;
  for (auto* m : tensors) total += m->size();
  Rng pick = make_stream(opt.seed, 1);
  for (int k = 0; k < opt.probes; ++k) {
    std::size_t flat = uniform_index(pick, total);
    std::size_t t = 0;
    while (flat >= tensors[t]->size()) flat -= tensors[t++]->size();
    double& w = tensors[t]->data()[flat];
    const double w0 = w;
    w = w0 + opt.step;
    const double fp = frozen_loss(f, params, nullptr);
    w = w0 - opt.step;
    const double fm = frozen_loss(f, params, nullptr);
    w = w0;
    GradProbe p;
    p.tensor = static_cast<int>(t);
    p.index = flat;
    p.analytic = ga[t]->data()[flat];
    p.numeric = (fp - fm) / (2 * opt.step);
    p.rel_error = std::abs(p.numeric - p.analytic) / std::max({std::abs(p.numeric), std::abs(p.analytic), opt.floor});
    if (p.rel_error < opt.tolerance) ++res.agreeing;
    res.probes.push_back(p);
  }
  return res;
}

}  // namespace prtg
