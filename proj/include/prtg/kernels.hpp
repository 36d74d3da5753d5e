#pragma once

// Data-parallel inner loops shared by the autodiff tape and the renderer.
//
// Every kernel in `prtg::kernels` has a serial counterpart in
// `prtg::kernels::reference` with the plainest possible loop structure. The
// parallel versions split work over output rows/columns only, and each output
// element is reduced in a fixed order, so results do not depend on the number
// of OpenMP threads.

#include <algorithm>
#include <omp.h>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "prtg/matrix.hpp"

namespace prtg::kernels {

namespace detail {
inline constexpr std::size_t kParallelWork = 1u << 15;
}

/// C = A * B (or C += A * B). A is M x K, B is K x N, C is M x N.
template <typename T>
void gemm(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false) {
  const int m = a.rows();
  const int k_dim = a.cols();
  const int n = b.cols();
  if (b.rows() != k_dim || c.rows() != m || c.cols() != n)
    throw InvalidInput("gemm: shape mismatch");
  constexpr int kMr = 4;
  constexpr int kNr = 32;
  // B is copied into zero-padded columns so every column tile takes the vector path.
  const int n_pad = (n + kNr - 1) / kNr * kNr;
  std::vector<T> padded;
  const T* pb = b.data();
  if (n_pad != n) {
    padded.assign(static_cast<std::size_t>(k_dim) * n_pad, T(0));
    for (int k = 0; k < k_dim; ++k)
      std::copy_n(pb + static_cast<std::size_t>(k) * n, n, padded.data() + static_cast<std::size_t>(k) * n_pad);
    pb = padded.data();
  }
  const T* pa = a.data();
  T* pc = c.data();
  const int row_blocks = (m + kMr - 1) / kMr;
  const std::size_t work = static_cast<std::size_t>(m) * n * k_dim;
#pragma omp parallel for schedule(static) if (work > detail::kParallelWork)
  for (int blk = 0; blk < row_blocks; ++blk) {
    const int i0 = blk * kMr;
    const int mr = std::min(kMr, m - i0);
    for (int j0 = 0; j0 < n; j0 += kNr) {
      const int nr = std::min(kNr, n - j0);
      T acc[kMr][kNr];
      for (int r = 0; r < kMr; ++r)
        for (int j = 0; j < kNr; ++j)
          acc[r][j] = accumulate && r < mr && j < nr ? pc[static_cast<std::size_t>(i0 + r) * n + j0 + j] : T(0);
      if (mr == kMr) {
        for (int k = 0; k < k_dim; ++k) {
          const T* brow = pb + static_cast<std::size_t>(k) * n_pad + j0;
          for (int r = 0; r < kMr; ++r) {
            const T av = pa[static_cast<std::size_t>(i0 + r) * k_dim + k];
            for (int j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
          }
        }
      } else {
        for (int k = 0; k < k_dim; ++k) {
          const T* brow = pb + static_cast<std::size_t>(k) * n_pad + j0;
          for (int r = 0; r < mr; ++r) {
            const T av = pa[static_cast<std::size_t>(i0 + r) * k_dim + k];
            for (int j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
          }
        }
      }
      for (int r = 0; r < mr; ++r)
        for (int j = 0; j < nr; ++j) pc[static_cast<std::size_t>(i0 + r) * n + j0 + j] = acc[r][j];
    }
  }
}

/// C += A^T * B. A is K x M, B is K x N, C is M x N. Each entry of C sums over k in
/// increasing order, matching gemm(transpose(A), B, C, true).
template <typename T>
void gemm_tn_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const int k_dim = a.rows();
  const int m = a.cols();
  const int n = b.cols();
  if (b.rows() != k_dim || c.rows() != m || c.cols() != n)
    throw InvalidInput("gemm_tn: shape mismatch");
  constexpr int kMr = 8;
  constexpr int kNr = 32;
  constexpr int kChunk = 256;
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  const int row_blocks = (m + kMr - 1) / kMr;
  const std::size_t work = static_cast<std::size_t>(m) * n * k_dim;
  // Row blocks of C are split between threads. K is walked in chunks so the chunk of B
  // stays in cache while every row block of the thread is updated.
#pragma omp parallel if (work > detail::kParallelWork)
  {
    const int threads = omp_get_num_threads();
    const int tid = omp_get_thread_num();
    const int blk0 = static_cast<int>(static_cast<long long>(row_blocks) * tid / threads);
    const int blk1 = static_cast<int>(static_cast<long long>(row_blocks) * (tid + 1) / threads);
    for (int k0 = 0; k0 < k_dim; k0 += kChunk) {
      const int k1 = std::min(k_dim, k0 + kChunk);
      for (int blk = blk0; blk < blk1; ++blk) {
        const int i0 = blk * kMr;
        const int mr = std::min(kMr, m - i0);
        for (int j0 = 0; j0 < n; j0 += kNr) {
          const int nr = std::min(kNr, n - j0);
          T acc[kMr][kNr];
          for (int r = 0; r < kMr; ++r)
            for (int j = 0; j < kNr; ++j)
              acc[r][j] = r < mr && j < nr ? pc[static_cast<std::size_t>(i0 + r) * n + j0 + j] : T(0);
          if (mr == kMr && nr == kNr) {
            for (int k = k0; k < k1; ++k) {
              const T* arow = pa + static_cast<std::size_t>(k) * m + i0;
              const T* brow = pb + static_cast<std::size_t>(k) * n + j0;
              for (int r = 0; r < kMr; ++r) {
                const T av = arow[r];
                for (int j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
              }
            }
          } else if (nr == kNr) {
            for (int k = k0; k < k1; ++k) {
              const T* arow = pa + static_cast<std::size_t>(k) * m + i0;
              const T* brow = pb + static_cast<std::size_t>(k) * n + j0;
              for (int r = 0; r < mr; ++r) {
                const T av = arow[r];
                for (int j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
              }
            }
          } else {
            for (int k = k0; k < k1; ++k) {
              const T* arow = pa + static_cast<std::size_t>(k) * m + i0;
              const T* brow = pb + static_cast<std::size_t>(k) * n + j0;
              for (int r = 0; r < mr; ++r) {
                const T av = arow[r];
                for (int j = 0; j < nr; ++j) acc[r][j] += av * brow[j];
              }
            }
          }
          for (int r = 0; r < mr; ++r)
            for (int j = 0; j < nr; ++j) pc[static_cast<std::size_t>(i0 + r) * n + j0 + j] = acc[r][j];
        }
      }
    }
  }
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  const int rows = a.rows();
  const int cols = a.cols();
  constexpr int kTile = 32;
#pragma omp parallel for schedule(static) if (a.size() > detail::kParallelWork)
  for (int r0 = 0; r0 < rows; r0 += kTile) {
    for (int c0 = 0; c0 < cols; c0 += kTile) {
      const int r1 = std::min(rows, r0 + kTile);
      const int c1 = std::min(cols, c0 + kTile);
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) out(c, r) = a(r, c);
    }
  }
  return out;
}

/// out[c] (+)= sum_r a(r, c), rows summed in increasing order.
template <typename T>
void column_sums(const Matrix<T>& a, std::span<T> out, bool accumulate = false) {
  if (out.size() != static_cast<std::size_t>(a.cols())) throw InvalidInput("column_sums: size");
  const int cols = a.cols();
  if (!accumulate) std::fill(out.begin(), out.end(), T(0));
  // Row-outer order keeps the reduction order identical to the reference.
  for (int r = 0; r < a.rows(); ++r) {
    const T* row = a.data() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(c)] += row[c];
  }
}

/// Adds a row vector to every row.
template <typename T>
void add_row_broadcast(Matrix<T>& a, std::span<const T> bias) {
  const int cols = a.cols();
#pragma omp parallel for schedule(static) if (a.size() > detail::kParallelWork)
  for (int r = 0; r < a.rows(); ++r) {
    T* row = a.data() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] += bias[static_cast<std::size_t>(c)];
  }
}

/// out[i] = f(in[i]) elementwise.
template <typename T, typename F>
void map(std::span<const T> in, std::span<T> out, F f) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(in.size());
#pragma omp parallel for schedule(static) if (in.size() > detail::kParallelWork)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(in[static_cast<std::size_t>(i)]);
}

/// out[i] += f(a[i], b[i]) elementwise.
template <typename T, typename F>
void map2_accumulate(std::span<const T> a, std::span<const T> b, std::span<T> out, F f) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.size());
#pragma omp parallel for schedule(static) if (a.size() > detail::kParallelWork)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out[k] += f(a[k], b[k]);
  }
}

/// Volume compositing over ragged per-ray sample lists.
///
/// Samples of ray r occupy [offsets[r], offsets[r+1]). Writes per-sample
/// weights w_i = T_i (1 - exp(-sigma_i delta_i)) with T_i the transmittance
/// accumulated before sample i, and per-ray colors out(r, :) = sum_i w_i h(i, :).
template <typename T>
void composite_forward(std::span<const T> sigma, const Matrix<T>& h, std::span<const T> delta,
                       std::span<const int> offsets, std::span<T> weights, Matrix<T>& out) {
  const int rays = static_cast<int>(offsets.size()) - 1;
  const int channels = h.cols();
#pragma omp parallel for schedule(static) if (sigma.size() > 4096)
  for (int r = 0; r < rays; ++r) {
    T optical = T(0);
    for (int c = 0; c < channels; ++c) out(r, c) = T(0);
    for (int i = offsets[static_cast<std::size_t>(r)]; i < offsets[static_cast<std::size_t>(r) + 1]; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const T a = sigma[k] * delta[k];
      const T w = std::exp(-optical) * -std::expm1(-a);
      weights[k] = w;
      optical += a;
      for (int c = 0; c < channels; ++c) out(r, c) += w * h(i, c);
    }
  }
}

/// Adjoint of composite_forward given dL/d(out). Accumulates into dsigma and dh.
template <typename T>
void composite_backward(std::span<const T> sigma, const Matrix<T>& h, std::span<const T> delta,
                        std::span<const int> offsets, std::span<const T> weights,
                        const Matrix<T>& dout, std::span<T> dsigma, Matrix<T>* dh) {
  const int rays = static_cast<int>(offsets.size()) - 1;
  const int channels = h.cols();
#pragma omp parallel for schedule(static) if (sigma.size() > 4096)
  for (int r = 0; r < rays; ++r) {
    const int begin = offsets[static_cast<std::size_t>(r)];
    const int end = offsets[static_cast<std::size_t>(r) + 1];
    // suffix = sum_{k > i} w_k c_k where c_k = <h_k, dout_r>
    T suffix = T(0);
    T optical_after = T(0);
    for (int i = begin; i < end; ++i) optical_after += sigma[static_cast<std::size_t>(i)] * delta[static_cast<std::size_t>(i)];
    for (int i = end - 1; i >= begin; --i) {
      const auto k = static_cast<std::size_t>(i);
      T ci = T(0);
      for (int c = 0; c < channels; ++c) ci += h(i, c) * dout(r, c);
      // T_{i+1} = exp(-sum_{j<=i} sigma_j delta_j)
      const T trans_next = std::exp(-optical_after);
      dsigma[k] += delta[k] * (trans_next * ci - suffix);
      if (dh != nullptr)
        for (int c = 0; c < channels; ++c) (*dh)(i, c) += weights[k] * dout(r, c);
      suffix += weights[k] * ci;
      optical_after -= sigma[k] * delta[k];
    }
  }
}

namespace reference {

template <typename T>
void gemm(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false) {
  if (b.rows() != a.cols() || c.rows() != a.rows() || c.cols() != b.cols())
    throw InvalidInput("gemm: shape mismatch");
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      T s = accumulate ? c(i, j) : T(0);
      for (int k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

template <typename T>
void composite_forward(std::span<const T> sigma, const Matrix<T>& h, std::span<const T> delta,
                       std::span<const int> offsets, std::span<T> weights, Matrix<T>& out) {
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    for (int c = 0; c < h.cols(); ++c) out(static_cast<int>(r), c) = T(0);
    for (int i = offsets[r]; i < offsets[r + 1]; ++i) {
      T optical = T(0);
      for (int j = offsets[r]; j < i; ++j)
        optical += sigma[static_cast<std::size_t>(j)] * delta[static_cast<std::size_t>(j)];
      const auto k = static_cast<std::size_t>(i);
      weights[k] = std::exp(-optical) * (T(1) - std::exp(-sigma[k] * delta[k]));
      for (int c = 0; c < h.cols(); ++c) out(static_cast<int>(r), c) += weights[k] * h(i, c);
    }
  }
}

/// Quadratic-time adjoint straight from the chain rule:
/// d w_k / d sigma_i = delta_i T_{i+1} for k = i and -delta_i w_k for k > i.
template <typename T>
void composite_backward(std::span<const T> sigma, const Matrix<T>& h, std::span<const T> delta,
                        std::span<const int> offsets, std::span<const T> weights,
                        const Matrix<T>& dout, std::span<T> dsigma, Matrix<T>* dh) {
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    const int ri = static_cast<int>(r);
    for (int i = offsets[r]; i < offsets[r + 1]; ++i) {
      const auto ki = static_cast<std::size_t>(i);
      T optical = T(0);
      for (int j = offsets[r]; j <= i; ++j)
        optical += sigma[static_cast<std::size_t>(j)] * delta[static_cast<std::size_t>(j)];
      T grad = T(0);
      for (int k = i; k < offsets[r + 1]; ++k) {
        T ck = T(0);
        for (int c = 0; c < h.cols(); ++c) ck += h(k, c) * dout(ri, c);
        const T dw = (k == i) ? delta[ki] * std::exp(-optical)
                              : -delta[ki] * weights[static_cast<std::size_t>(k)];
        grad += dw * ck;
      }
      dsigma[ki] += grad;
      if (dh != nullptr)
        for (int c = 0; c < h.cols(); ++c) (*dh)(i, c) += weights[ki] * dout(ri, c);
    }
  }
}

}  // namespace reference
}  // namespace prtg::kernels
