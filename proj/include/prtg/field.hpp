#pragma once

// The relightable neural field: a density network sigma(x) and a transfer
// network h(x; view, light) for each of the coarse and fine levels.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "prtg/autodiff.hpp"
#include "prtg/common.hpp"
#include "prtg/matrix.hpp"

namespace prtg {

struct FieldArch {
  int pos_freqs = 10;
  int dir_freqs = 4;
  int width = 256;
  int depth = 8;
  /// Trunk layer (0-based) whose input is [hidden | encoded position].
  int skip_layer = 4;
  int head_width = 128;

  friend bool operator==(const FieldArch&, const FieldArch&) = default;
};

/// Throws InvalidInput for non-positive sizes or an out-of-range skip layer.
void validate(const FieldArch& arch);

constexpr int encoded_dim(int frequencies) { return 3 + 6 * frequencies; }

enum class Level : std::uint8_t { Coarse, Fine };

template <typename T>
struct Dense {
  Matrix<T> weight;  // in x out
  Matrix<T> bias;    // 1 x out
};

template <typename T>
struct DensityNet {
  std::vector<Dense<T>> trunk;
  Dense<T> output;
};

template <typename T>
struct TransferNet {
  std::vector<Dense<T>> trunk;
  Dense<T> head;
  Dense<T> output;
};

template <typename T>
struct LevelNets {
  DensityNet<T> density;
  TransferNet<T> transfer;
};

template <typename T>
struct BasicFieldParams {
  FieldArch arch;
  LevelNets<T> coarse;
  LevelNets<T> fine;

  LevelNets<T>& level(Level l) { return l == Level::Coarse ? coarse : fine; }
  const LevelNets<T>& level(Level l) const { return l == Level::Coarse ? coarse : fine; }
};

using FieldParams = BasicFieldParams<float>;

/// Zero-filled parameters with the architecture's shapes.
template <typename T>
BasicFieldParams<T> zero_params(const FieldArch& arch);

/// Visits every tensor in declaration order with a dotted name.
template <typename T>
void for_each_tensor(BasicFieldParams<T>& params,
                     const std::function<void(const std::string&, Matrix<T>&)>& fn);
template <typename T>
void for_each_tensor(const BasicFieldParams<T>& params,
                     const std::function<void(const std::string&, const Matrix<T>&)>& fn);

template <typename T>
std::vector<Matrix<T>*> tensor_list(BasicFieldParams<T>& params);
template <typename T>
std::vector<const Matrix<T>*> tensor_list(const BasicFieldParams<T>& params);

template <typename T, typename U>
BasicFieldParams<U> cast_params(const BasicFieldParams<T>& params) {
  BasicFieldParams<U> out = zero_params<U>(params.arch);
  auto src = tensor_list(params);
  auto dst = tensor_list(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
  return out;
}

/// Fan-in scaled uniform weights, zero biases except the transfer output
/// bias, which is ln(0.05) so the initial transfer gradient is ~0.05.
template <typename T>
BasicFieldParams<T> init_params(std::uint64_t seed, const FieldArch& arch);

/// Returns true if every parameter is finite.
template <typename T>
bool all_finite(const BasicFieldParams<T>& params);

/// [v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)].
std::vector<double> positional_encode(Vec3 v, int frequencies);

struct FieldQuery {
  Vec3 position;
  Vec3 view;   // unit ray direction
  Vec3 light;  // unit direction toward the light
};

/// Single-point evaluation. Throws NumericalError on non-finite output.
double eval_density(const FieldParams& params, Level level, Vec3 x);
Vec3 eval_transfer_gradient(const FieldParams& params, Level level, const FieldQuery& q);

// Batched forward passes without gradient recording. Rows of `encoded_pos`
// are encoded positions, rows of `encoded_dirs` are [enc(view) | enc(light)].
template <typename T>
Matrix<T> forward_density(const DensityNet<T>& net, const FieldArch& arch,
                          const Matrix<T>& encoded_pos);
template <typename T>
Matrix<T> forward_transfer_features(const TransferNet<T>& net, const FieldArch& arch,
                                    const Matrix<T>& encoded_pos);
template <typename T>
Matrix<T> forward_transfer_head(const TransferNet<T>& net, const Matrix<T>& features,
                                const Matrix<T>& encoded_dirs);

/// Positional encoding of every row of an n x 3 matrix.
template <typename T>
Matrix<T> encode_rows(const Matrix<T>& xyz, int frequencies);

/// Records field evaluations on a tape. Parameter leaves are created once
/// per tape; gradients go to `grads` when it is non-null.
template <typename T>
class FieldGraph {
 public:
  using Id = typename Tape<T>::Id;

  FieldGraph(Tape<T>& tape, const BasicFieldParams<T>& params, BasicFieldParams<T>* grads);

  Tape<T>& tape() { return tape_; }
  const FieldArch& arch() const { return params_.arch; }

  /// sigma = softplus(density net), n x 1.
  Id density(Level level, Id encoded_pos);
  /// h = exp(transfer net), n x 3.
  Id transfer(Level level, Id encoded_pos, Id encoded_dirs);

 private:
  struct DenseIds {
    Id weight;
    Id bias;
  };
  struct LevelIds {
    bool bound = false;
    std::vector<DenseIds> density_trunk;
    DenseIds density_out;
    std::vector<DenseIds> transfer_trunk;
    DenseIds transfer_head;
    DenseIds transfer_out;
  };

  LevelIds& bind(Level level);
  Id trunk(const std::vector<DenseIds>& layers, Id encoded_pos);

  Tape<T>& tape_;
  const BasicFieldParams<T>& params_;
  BasicFieldParams<T>* grads_;
  LevelIds coarse_;
  LevelIds fine_;
};

/// Binary checkpoint: "PRTG", u32 version, u32 architecture fields, u32
/// tensor count, then little-endian f32 tensors in declaration order. Also
/// writes `<path>.manifest` listing tensor names and shapes.
void save_checkpoint(const std::filesystem::path& path, const FieldParams& params);
FieldParams load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace prtg
