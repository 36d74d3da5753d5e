#include "prtg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "prtg/kernels.hpp"

namespace prtg {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::Linear: return "linear";
    case Op::Add: return "add";
    case Op::Scale: return "scale";
    case Op::Mul: return "mul";
    case Op::Concat: return "concat";
    case Op::Relu: return "relu";
    case Op::Softplus: return "softplus";
    case Op::Exp: return "exp";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Encode: return "encode";
    case Op::Composite: return "composite";
    case Op::TonemappedL2: return "tonemapped_l2";
    case Op::MeanSquareRows: return "mean_square_rows";
    case Op::SumSquares: return "sum_squares";
    case Op::Sum: return "sum";
  }
  return "unknown";
}

namespace {

template <typename T>
T softplus_value(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void require(bool ok, const char* what) {
  if (!ok) throw InvalidInput(std::string("tape: ") + what);
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  // inf * 0 and nan * 0 are nan, so the sum is zero exactly when every entry is finite.
  const T* p = m.data();
  const std::size_t n = m.flat().size();
  T probe = T(0);
#pragma omp simd reduction(+ : probe)
  for (std::size_t i = 0; i < n; ++i) probe += p[i] * T(0);
  return probe == T(0);
}

}  // namespace

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Id id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw InvalidInput("tape: invalid node id " + std::to_string(id));
  return nodes_[static_cast<std::size_t>(id)];
}

template <typename T>
const Matrix<T>& Tape<T>::value(Id id) const {
  const Node& n = node(id);
  return n.ext_value != nullptr ? *n.ext_value : n.value;
}

template <typename T>
const Matrix<T>& Tape<T>::grad(Id id) const {
  return node(id).grad;
}

template <typename T>
std::span<const T> Tape<T>::composite_weights(Id id) const {
  const Node& n = node(id);
  require<T>(n.op == Op::Composite, "composite_weights on a non-composite node");
  return n.aux_a.flat();
}

template <typename T>
typename Tape<T>::Id Tape<T>::push(Node n) {
  if (n.op != Op::Constant && n.op != Op::Input && n.op != Op::Parameter) {
    for (Id in : {n.a, n.b, n.c})
      if (in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad) n.needs_grad = true;
    compute(n);
  }
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

template <typename T>
typename Tape<T>::Id Tape<T>::constant(Matrix<T> v) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(v);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::input(Matrix<T> v) {
  Node n;
  n.op = Op::Input;
  n.value = std::move(v);
  n.needs_grad = true;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::parameter(const Matrix<T>& v, Matrix<T>* g) {
  if (g != nullptr && !g->same_shape(v)) throw InvalidInput("tape: parameter/grad shape mismatch");
  Node n;
  n.op = Op::Parameter;
  n.ext_value = &v;
  n.ext_grad = g;
  n.needs_grad = g != nullptr;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::linear(Id x, Id w, Id b) {
  require<T>(value(x).cols() == value(w).rows(), "linear: inner dimension mismatch");
  if (b >= 0)
    require<T>(value(b).rows() == 1 && value(b).cols() == value(w).cols(), "linear: bias shape");
  Node n;
  n.op = Op::Linear;
  n.a = x;
  n.b = w;
  n.c = b;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::add(Id a, Id b) {
  require<T>(value(a).same_shape(value(b)), "add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::scale(Id a, T s) {
  Node n;
  n.op = Op::Scale;
  n.a = a;
  n.scalar = s;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::mul(Id a, Id b) {
  require<T>(value(a).same_shape(value(b)), "mul: shape mismatch");
  Node n;
  n.op = Op::Mul;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::concat(Id a, Id b) {
  require<T>(value(a).rows() == value(b).rows(), "concat: row mismatch");
  Node n;
  n.op = Op::Concat;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

#define PRTG_UNARY(name, opcode)                \
  template <typename T>                         \
  typename Tape<T>::Id Tape<T>::name(Id a) {    \
    Node n;                                     \
    n.op = Op::opcode;                          \
    n.a = a;                                    \
    return push(std::move(n));                  \
  }
PRTG_UNARY(relu, Relu)
PRTG_UNARY(softplus, Softplus)
PRTG_UNARY(exp, Exp)
PRTG_UNARY(sin, Sin)
PRTG_UNARY(cos, Cos)
PRTG_UNARY(sum_squares, SumSquares)
PRTG_UNARY(sum, Sum)
#undef PRTG_UNARY

template <typename T>
typename Tape<T>::Id Tape<T>::encode(Id x, int frequencies) {
  require<T>(value(x).cols() == 3, "encode: input must be n x 3");
  require<T>(frequencies >= 0, "encode: negative frequency count");
  Node n;
  n.op = Op::Encode;
  n.a = x;
  n.int_arg = frequencies;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::composite(Id sigma, Id h, std::vector<T> delta,
                                        std::vector<int> offsets) {
  const auto& s = value(sigma);
  require<T>(s.cols() == 1, "composite: sigma must be n x 1");
  require<T>(value(h).rows() == s.rows(), "composite: sigma/h length mismatch");
  require<T>(delta.size() == static_cast<std::size_t>(s.rows()), "composite: delta length");
  require<T>(!offsets.empty() && offsets.front() == 0 && offsets.back() == s.rows(),
             "composite: offsets must span all samples");
  require<T>(std::is_sorted(offsets.begin(), offsets.end()), "composite: offsets not sorted");
  for (T d : delta) require<T>(d >= T(0), "composite: negative segment length");
  Node n;
  n.op = Op::Composite;
  n.a = sigma;
  n.b = h;
  n.aux = std::move(delta);
  n.index = std::move(offsets);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::tonemapped_l2(Id pred, Matrix<T> target, Matrix<T> weight) {
  require<T>(value(pred).same_shape(target) && target.same_shape(weight),
             "tonemapped_l2: shape mismatch");
  Node n;
  n.op = Op::TonemappedL2;
  n.a = pred;
  n.aux_a = std::move(target);
  n.aux_b = std::move(weight);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::tonemapped_l2(Id pred, Matrix<T> target, T eps) {
  const Matrix<T>& p = value(pred);
  Matrix<T> weight(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p.data()[i] + eps;
    weight.data()[i] = T(1) / (d * d);
  }
  return tonemapped_l2(pred, std::move(target), std::move(weight));
}

template <typename T>
typename Tape<T>::Id Tape<T>::mean_square_rows(Id x, std::vector<int> rows) {
  require<T>(value(x).cols() == 1, "mean_square_rows: input must be n x 1");
  for (int r : rows) require<T>(r >= 0 && r < value(x).rows(), "mean_square_rows: row out of range");
  Node n;
  n.op = Op::MeanSquareRows;
  n.a = x;
  n.index = std::move(rows);
  return push(std::move(n));
}

template <typename T>
void Tape<T>::compute(Node& n) {
  auto in = [&](Id id) -> const Matrix<T>& { return value(id); };
  switch (n.op) {
    case Op::Constant:
    case Op::Input:
    case Op::Parameter:
      return;
    case Op::Linear: {
      const auto& x = in(n.a);
      const auto& w = in(n.b);
      n.value = Matrix<T>(x.rows(), w.cols());
      kernels::gemm(x, w, n.value);
      if (n.c >= 0) kernels::add_row_broadcast<T>(n.value, in(n.c).flat());
      return;
    }
    case Op::Add: {
      n.value = in(n.a);
      kernels::map2_accumulate<T>(in(n.b).flat(), in(n.b).flat(), n.value.flat(),
                                  [](T v, T) { return v; });
      return;
    }
    case Op::Scale: {
      const auto& a = in(n.a);
      n.value = Matrix<T>(a.rows(), a.cols());
      const T s = n.scalar;
      kernels::map<T>(a.flat(), n.value.flat(), [s](T v) { return s * v; });
      return;
    }
    case Op::Mul: {
      const auto& a = in(n.a);
      const auto& b = in(n.b);
      n.value = Matrix<T>(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.size(); ++i) n.value.data()[i] = a.data()[i] * b.data()[i];
      return;
    }
    case Op::Concat: {
      const auto& a = in(n.a);
      const auto& b = in(n.b);
      n.value = Matrix<T>(a.rows(), a.cols() + b.cols());
      for (int r = 0; r < a.rows(); ++r) {
        auto dst = n.value.row(r);
        std::copy(a.row(r).begin(), a.row(r).end(), dst.begin());
        std::copy(b.row(r).begin(), b.row(r).end(), dst.begin() + a.cols());
      }
      return;
    }
    case Op::Relu:
    case Op::Softplus:
    case Op::Exp:
    case Op::Sin:
    case Op::Cos: {
      const auto& a = in(n.a);
      n.value = Matrix<T>(a.rows(), a.cols());
      auto src = a.flat();
      auto dst = n.value.flat();
      switch (n.op) {
        case Op::Relu: kernels::map<T>(src, dst, [](T v) { return v > T(0) ? v : T(0); }); break;
        case Op::Softplus: kernels::map<T>(src, dst, [](T v) { return softplus_value(v); }); break;
        case Op::Exp: kernels::map<T>(src, dst, [](T v) { return std::exp(v); }); break;
        case Op::Sin: kernels::map<T>(src, dst, [](T v) { return std::sin(v); }); break;
        default: kernels::map<T>(src, dst, [](T v) { return std::cos(v); }); break;
      }
      return;
    }
    case Op::Encode: {
      const auto& x = in(n.a);
      const int freqs = n.int_arg;
      n.value = Matrix<T>(x.rows(), 3 + 6 * freqs);
      const int rows = x.rows();
#pragma omp parallel for schedule(static) if (rows > 2048)
      for (int r = 0; r < rows; ++r) {
        T* dst = n.value.data() + static_cast<std::size_t>(r) * n.value.cols();
        for (int c = 0; c < 3; ++c) dst[c] = x(r, c);
        T scale = static_cast<T>(kPi);
        for (int l = 0; l < freqs; ++l) {
          for (int c = 0; c < 3; ++c) {
            dst[3 + 6 * l + c] = std::sin(scale * x(r, c));
            dst[6 + 6 * l + c] = std::cos(scale * x(r, c));
          }
          scale *= T(2);
        }
      }
      return;
    }
    case Op::Composite: {
      const auto& sigma = in(n.a);
      const auto& h = in(n.b);
      for (T s : sigma.flat())
        if (!(s >= T(0))) throw InvalidInput("composite: negative or NaN density");
      const int rays = static_cast<int>(n.index.size()) - 1;
      n.value = Matrix<T>(rays, h.cols());
      n.aux_a = Matrix<T>(1, sigma.rows());
      kernels::composite_forward<T>(sigma.flat(), h, n.aux, n.index, n.aux_a.flat(), n.value);
      return;
    }
    case Op::TonemappedL2: {
      const auto& p = in(n.a);
      T total = T(0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p.data()[i] - n.aux_a.data()[i];
        total += n.aux_b.data()[i] * d * d;
      }
      n.value = Matrix<T>(1, 1, p.rows() > 0 ? total / static_cast<T>(p.rows()) : T(0));
      return;
    }
    case Op::MeanSquareRows: {
      const auto& x = in(n.a);
      T total = T(0);
      for (int r : n.index) total += x(r, 0) * x(r, 0);
      n.value = Matrix<T>(1, 1, n.index.empty() ? T(0) : total / static_cast<T>(n.index.size()));
      return;
    }
    case Op::SumSquares: {
      T total = T(0);
      for (T v : in(n.a).flat()) total += v * v;
      n.value = Matrix<T>(1, 1, total);
      return;
    }
    case Op::Sum: {
      T total = T(0);
      for (T v : in(n.a).flat()) total += v;
      n.value = Matrix<T>(1, 1, total);
      return;
    }
  }
}

template <typename T>
Matrix<T>& Tape<T>::ensure_grad(Id id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) {
    const auto& v = value(id);
    n.grad = Matrix<T>(v.rows(), v.cols());
  }
  return n.grad;
}

template <typename T>
void Tape<T>::propagate(Id id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  const Matrix<T>& g = n.grad;
  auto wants = [&](Id in) { return in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad; };
  switch (n.op) {
    case Op::Constant:
    case Op::Input:
      return;
    case Op::Parameter: {
      if (n.ext_grad != nullptr)
        kernels::map2_accumulate<T>(g.flat(), g.flat(), n.ext_grad->flat(),
                                    [](T v, T) { return v; });
      return;
    }
    case Op::Linear: {
      const auto& x = value(n.a);
      const auto& w = value(n.b);
      if (wants(n.a)) kernels::gemm(g, kernels::transpose(w), ensure_grad(n.a), true);
      if (wants(n.b)) kernels::gemm_tn_accumulate(x, g, ensure_grad(n.b));
      if (wants(n.c)) kernels::column_sums<T>(g, ensure_grad(n.c).flat(), true);
      return;
    }
    case Op::Add: {
      for (Id in : {n.a, n.b})
        if (wants(in))
          kernels::map2_accumulate<T>(g.flat(), g.flat(), ensure_grad(in).flat(),
                                      [](T v, T) { return v; });
      return;
    }
    case Op::Scale: {
      if (wants(n.a)) {
        const T s = n.scalar;
        kernels::map2_accumulate<T>(g.flat(), g.flat(), ensure_grad(n.a).flat(),
                                    [s](T v, T) { return s * v; });
      }
      return;
    }
    case Op::Mul: {
      if (wants(n.a))
        kernels::map2_accumulate<T>(g.flat(), value(n.b).flat(), ensure_grad(n.a).flat(),
                                    [](T gv, T bv) { return gv * bv; });
      if (wants(n.b))
        kernels::map2_accumulate<T>(g.flat(), value(n.a).flat(), ensure_grad(n.b).flat(),
                                    [](T gv, T av) { return gv * av; });
      return;
    }
    case Op::Concat: {
      const int ca = value(n.a).cols();
      const int cb = value(n.b).cols();
      if (wants(n.a)) {
        auto& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < ca; ++c) ga(r, c) += g(r, c);
      }
      if (wants(n.b)) {
        auto& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
      }
      return;
    }
    case Op::Relu:
    case Op::Softplus:
    case Op::Exp:
    case Op::Sin:
    case Op::Cos: {
      if (!wants(n.a)) return;
      auto& ga = ensure_grad(n.a);
      const auto& x = value(n.a);
      switch (n.op) {
        case Op::Relu:
          kernels::map2_accumulate<T>(g.flat(), x.flat(), ga.flat(),
                                      [](T gv, T xv) { return xv > T(0) ? gv : T(0); });
          break;
        case Op::Softplus:
          kernels::map2_accumulate<T>(g.flat(), x.flat(), ga.flat(),
                                      [](T gv, T xv) { return gv * sigmoid(xv); });
          break;
        case Op::Exp:
          kernels::map2_accumulate<T>(g.flat(), n.value.flat(), ga.flat(),
                                      [](T gv, T yv) { return gv * yv; });
          break;
        case Op::Sin:
          kernels::map2_accumulate<T>(g.flat(), x.flat(), ga.flat(),
                                      [](T gv, T xv) { return gv * std::cos(xv); });
          break;
        default:
          kernels::map2_accumulate<T>(g.flat(), x.flat(), ga.flat(),
                                      [](T gv, T xv) { return -gv * std::sin(xv); });
          break;
      }
      return;
    }
    case Op::Encode: {
      if (!wants(n.a)) return;
      auto& ga = ensure_grad(n.a);
      const auto& x = value(n.a);
      for (int r = 0; r < x.rows(); ++r) {
        for (int c = 0; c < 3; ++c) {
          T acc = g(r, c);
          T scale = static_cast<T>(kPi);
          for (int l = 0; l < n.int_arg; ++l) {
            acc += g(r, 3 + 6 * l + c) * scale * std::cos(scale * x(r, c));
            acc -= g(r, 6 + 6 * l + c) * scale * std::sin(scale * x(r, c));
            scale *= T(2);
          }
          ga(r, c) += acc;
        }
      }
      return;
    }
    case Op::Composite: {
      const auto& sigma = value(n.a);
      const auto& h = value(n.b);
      std::vector<T> dsigma(sigma.size(), T(0));
      Matrix<T>* dh = wants(n.b) ? &ensure_grad(n.b) : nullptr;
      kernels::composite_backward<T>(sigma.flat(), h, n.aux, n.index, n.aux_a.flat(), g,
                                     dsigma, dh);
      if (wants(n.a)) {
        auto& gs = ensure_grad(n.a);
        for (std::size_t i = 0; i < dsigma.size(); ++i) gs.data()[i] += dsigma[i];
      }
      return;
    }
    case Op::TonemappedL2: {
      if (!wants(n.a)) return;
      auto& gp = ensure_grad(n.a);
      const auto& p = value(n.a);
      const T s = g(0, 0) * T(2) / static_cast<T>(std::max(1, p.rows()));
      for (std::size_t i = 0; i < p.size(); ++i)
        gp.data()[i] += s * n.aux_b.data()[i] * (p.data()[i] - n.aux_a.data()[i]);
      return;
    }
    case Op::MeanSquareRows: {
      if (!wants(n.a) || n.index.empty()) return;
      auto& gx = ensure_grad(n.a);
      const auto& x = value(n.a);
      const T s = g(0, 0) * T(2) / static_cast<T>(n.index.size());
      for (int r : n.index) gx(r, 0) += s * x(r, 0);
      return;
    }
    case Op::SumSquares: {
      if (!wants(n.a)) return;
      const T s = T(2) * g(0, 0);
      kernels::map2_accumulate<T>(value(n.a).flat(), value(n.a).flat(), ensure_grad(n.a).flat(),
                                  [s](T v, T) { return s * v; });
      return;
    }
    case Op::Sum: {
      if (!wants(n.a)) return;
      const T s = g(0, 0);
      auto& ga = ensure_grad(n.a);
      for (T& v : ga.flat()) v += s;
      return;
    }
  }
}

template <typename T>
void Tape<T>::backward(Id loss) {
  const Matrix<T>& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1)
    throw InvalidInput("backward: loss node is " + std::to_string(lv.rows()) + "x" +
                       std::to_string(lv.cols()) + ", expected a scalar");
  for (auto& n : nodes_) n.grad = Matrix<T>();
  ensure_grad(loss)(0, 0) = T(1);
  for (Id id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    propagate(id);
    for (Id in : {n.a, n.b, n.c}) {
      if (in < 0) continue;
      const auto& gin = nodes_[static_cast<std::size_t>(in)].grad;
      if (!gin.empty() && !all_finite(gin))
        throw NumericalError("non-finite gradient produced by op '" + std::string(op_name(n.op)) +
                             "' (node " + std::to_string(id) + ")");
    }
    if (n.op == Op::Parameter && n.ext_grad != nullptr && !all_finite(*n.ext_grad))
      throw NumericalError("non-finite parameter gradient (node " + std::to_string(id) + ")");
  }
}

template <typename T>
void Tape<T>::replay() {
  for (auto& n : nodes_) compute(n);
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(std::span<const Matrix<T>* const> params) {
  AdamState<T> s;
  for (const Matrix<T>* p : params) {
    s.first_moment.emplace_back(p->rows(), p->cols());
    s.second_moment.emplace_back(p->rows(), p->cols());
  }
  return s;
}

template <typename T>
void adam_step(AdamState<T>& state, std::span<Matrix<T>* const> params,
               std::span<const Matrix<T>* const> grads, double lr) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size())
    throw InvalidInput("adam_step: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.first_moment[i]) ||
        !params[i]->same_shape(state.second_moment[i]))
      throw InvalidInput("adam_step: shape mismatch in tensor " + std::to_string(i));

  ++state.step;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->data();
    const T* g = grads[i]->data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(params[i]->size());
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::ptrdiff_t k = 0; k < n; ++k) {
      m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * g[k]);
      v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * g[k] * g[k]);
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] = static_cast<T>(p[k] - lr * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

double decayed_learning_rate(double lr0, double lr1, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return lr0;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr0 * std::pow(lr1 / lr0, frac);
}

template class Tape<float>;
template class Tape<double>;
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(AdamState<float>&, std::span<Matrix<float>* const>,
                               std::span<const Matrix<float>* const>, double);
template void adam_step<double>(AdamState<double>&, std::span<Matrix<double>* const>,
                                std::span<const Matrix<double>* const>, double);

}  // namespace prtg
