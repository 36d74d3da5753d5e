// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include <vector>

#include "prtg/kernels.hpp"
#include "prtg/rng.hpp"

using prtg::Matrix;

namespace {

Matrix<float> random_matrix(int rows, int cols, std::uint64_t seed) {
  Matrix<float> m(rows, cols);
  prtg::Rng rng(seed);
  for (float& v : m.flat()) v = static_cast<float>(prtg::uniform01(rng) - 0.5);
  return m;
}

// Shapes of one training step: forward x*W, backward dY*W^T and X^T*dY.
void gemm_args(benchmark::internal::Benchmark* b) {
  b->Args({24576, 64, 64})->Args({24576, 115, 64})->Args({24576, 64, 51})->Args({51, 24576, 64});
}

void BM_GemmParallel(benchmark::State& state) {
  const auto a = random_matrix(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), 1);
  const auto b = random_matrix(static_cast<int>(state.range(1)), static_cast<int>(state.range(2)), 2);
  Matrix<float> c(a.rows(), b.cols());
  for (auto _ : state) {
    prtg::kernels::gemm(a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * a.rows() * a.cols() * b.cols(),
                                                benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_GemmParallel)->Apply(gemm_args)->Unit(benchmark::kMillisecond);

void BM_GemmReference(benchmark::State& state) {
  const auto a = random_matrix(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)), 1);
  const auto b = random_matrix(static_cast<int>(state.range(1)), static_cast<int>(state.range(2)), 2);
  Matrix<float> c(a.rows(), b.cols());
  for (auto _ : state) {
    prtg::kernels::reference::gemm(a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * a.rows() * a.cols() * b.cols(),
                                                benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_GemmReference)->Apply(gemm_args)->Unit(benchmark::kMillisecond);

// Weight gradient X^T * dY without materializing the transpose.
void BM_GemmTransposedA(benchmark::State& state) {
  const auto x = random_matrix(24576, static_cast<int>(state.range(0)), 1);
  const auto dy = random_matrix(24576, 64, 2);
  Matrix<float> dw(x.cols(), 64);
  for (auto _ : state) {
    prtg::kernels::gemm_tn_accumulate(x, dy, dw);
    benchmark::DoNotOptimize(dw.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * x.rows() * x.cols() * 64,
                                                benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_GemmTransposedA)->Arg(51)->Arg(64)->Arg(115)->Unit(benchmark::kMillisecond);

struct CompositeInput {
  std::vector<float> sigma, delta;
  Matrix<float> h;
  std::vector<int> offsets;
};

CompositeInput composite_input(int rays, int samples) {
  CompositeInput in;
  prtg::Rng rng(3);
  const std::size_t n = static_cast<std::size_t>(rays) * samples;
  in.sigma.resize(n);
  in.h = Matrix<float>(static_cast<int>(n), 3);
  in.delta.resize(n);
  for (auto& v : in.sigma) v = static_cast<float>(5.0 * prtg::uniform01(rng));
  for (auto& v : in.h.flat()) v = static_cast<float>(prtg::uniform01(rng));
  for (auto& v : in.delta) v = static_cast<float>(0.05 * prtg::uniform01(rng));
  for (int r = 0; r <= rays; ++r) in.offsets.push_back(r * samples);
  return in;
}

void BM_CompositeBackwardParallel(benchmark::State& state) {
  const int rays = 256;
  const int samples = static_cast<int>(state.range(0));
  const auto in = composite_input(rays, samples);
  std::vector<float> weights(in.sigma.size()), dsigma(in.sigma.size());
  Matrix<float> out(rays, 3), dout(rays, 3, 1.0f), dh(in.h.rows(), 3);
  prtg::kernels::composite_forward<float>(in.sigma, in.h, in.delta, in.offsets, weights, out);
  for (auto _ : state) {
    prtg::kernels::composite_backward<float>(in.sigma, in.h, in.delta, in.offsets, weights, dout, dsigma, &dh);
    benchmark::DoNotOptimize(dsigma.data());
  }
}
BENCHMARK(BM_CompositeBackwardParallel)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_CompositeBackwardReference(benchmark::State& state) {
  const int rays = 256;
  const int samples = static_cast<int>(state.range(0));
  const auto in = composite_input(rays, samples);
  std::vector<float> weights(in.sigma.size()), dsigma(in.sigma.size());
  Matrix<float> out(rays, 3), dout(rays, 3, 1.0f), dh(in.h.rows(), 3);
  prtg::kernels::composite_forward<float>(in.sigma, in.h, in.delta, in.offsets, weights, out);
  for (auto _ : state) {
    prtg::kernels::reference::composite_backward<float>(in.sigma, in.h, in.delta, in.offsets, weights, dout, dsigma, &dh);
    benchmark::DoNotOptimize(dsigma.data());
  }
}
BENCHMARK(BM_CompositeBackwardReference)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
