#pragma once

// Reverse-mode differentiation over batched matrix primitives.
//
// A Tape records a DAG of nodes in creation order. Each node owns its value
// (parameters reference external storage instead) and, after backward(), its
// adjoint. Primitives are coarse-grained on purpose: one node covers a whole
// dense layer or the volume-compositing sum over every ray in a batch.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prtg/matrix.hpp"

namespace prtg {

enum class Op : std::uint8_t {
  Constant,
  Input,
  Parameter,
  Linear,
  Add,
  Scale,
  Mul,
  Concat,
  Relu,
  Softplus,
  Exp,
  Sin,
  Cos,
  Encode,
  Composite,
  TonemappedL2,
  MeanSquareRows,
  SumSquares,
  Sum,
};

std::string_view op_name(Op op);

template <typename T>
class Tape {
 public:
  using Id = int;

  /// Leaf without gradient (targets, fixed depths, encoded directions).
  Id constant(Matrix<T> value);
  /// Leaf that receives a gradient, readable through grad().
  Id input(Matrix<T> value);
  /// Leaf referencing external storage; backward() accumulates into *grad
  /// when grad is non-null. Both must outlive the tape.
  Id parameter(const Matrix<T>& value, Matrix<T>* grad);

  /// x * w (+ b). x: n x in, w: in x out, b: 1 x out (or -1 for none).
  Id linear(Id x, Id w, Id b = -1);
  Id add(Id a, Id b);
  Id scale(Id a, T s);
  Id mul(Id a, Id b);
  /// Column concatenation [a | b].
  Id concat(Id a, Id b);
  Id relu(Id a);
  Id softplus(Id a);
  Id exp(Id a);
  Id sin(Id a);
  Id cos(Id a);
  /// Positional encoding of an n x 3 input: [v, sin(2^0 pi v), cos(2^0 pi v), ...].
  Id encode(Id x, int frequencies);

  /// Volume compositing. sigma: n x 1, h: n x C, delta: n fixed segment
  /// lengths, offsets: rays + 1 prefix offsets. Output: rays x C.
  Id composite(Id sigma, Id h, std::vector<T> delta, std::vector<int> offsets);

  /// mean over rows of sum_c weight (pred - target)^2 with weight recorded as
  /// a constant (stop-gradient).
  Id tonemapped_l2(Id pred, Matrix<T> target, Matrix<T> weight);
  /// Same, with weight = 1 / (pred + eps)^2 taken from the current value.
  Id tonemapped_l2(Id pred, Matrix<T> target, T eps);

  /// mean of x(r, 0)^2 over the listed rows (0 when the list is empty).
  Id mean_square_rows(Id x, std::vector<int> rows);
  Id sum_squares(Id a);
  Id sum(Id a);

  const Matrix<T>& value(Id id) const;
  /// Adjoint after backward(); zero-sized if no gradient reached the node.
  const Matrix<T>& grad(Id id) const;
  /// Per-sample compositing weights recorded by a Composite node.
  std::span<const T> composite_weights(Id id) const;

  Op op(Id id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Propagates adjoints from a 1 x 1 loss node. Throws InvalidInput for a
  /// non-scalar loss and NumericalError naming the op that produced a
  /// non-finite gradient.
  void backward(Id loss);

  /// Recomputes every non-leaf value from the leaves in recording order.
  void replay();

 private:
  struct Node {
    Op op = Op::Constant;
    Id a = -1;
    Id b = -1;
    Id c = -1;
    bool needs_grad = false;
    int int_arg = 0;
    T scalar = T(0);
    Matrix<T> value;
    Matrix<T> grad;
    const Matrix<T>* ext_value = nullptr;
    Matrix<T>* ext_grad = nullptr;
    std::vector<T> aux;
    std::vector<int> index;
    Matrix<T> aux_a;
    Matrix<T> aux_b;
  };

  Id push(Node node);
  void compute(Node& node);
  void propagate(Id id);
  Matrix<T>& ensure_grad(Id id);
  const Node& node(Id id) const;

  std::vector<Node> nodes_;
};

/// Adam with bias correction over a list of tensors.
template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix<T>> first_moment;
  std::vector<Matrix<T>> second_moment;

  /// Zero moments shaped like the given tensors.
  static AdamState zeros_like(std::span<const Matrix<T>* const> params);
};

/// One update: increments the step and moves every param by
/// -lr * m_hat / (sqrt(v_hat) + eps). Throws InvalidInput on shape mismatch.
template <typename T>
void adam_step(AdamState<T>& state, std::span<Matrix<T>* const> params,
               std::span<const Matrix<T>* const> grads, double lr);

/// Exponential learning-rate decay from lr0 at step 0 to lr1 at total_steps.
double decayed_learning_rate(double lr0, double lr1, std::int64_t step, std::int64_t total_steps);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace prtg
