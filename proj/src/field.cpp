#include "prtg/field.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "prtg/kernels.hpp"
#include "prtg/rng.hpp"

namespace prtg {

void validate(const FieldArch& arch) {
  if (arch.pos_freqs < 0 || arch.dir_freqs < 0) throw InvalidInput("arch: negative frequency count");
  if (arch.width < 1 || arch.depth < 1 || arch.head_width < 1)
    throw InvalidInput("arch: width, depth and head_width must be positive");
  if (arch.skip_layer < 0 || arch.skip_layer >= arch.depth)
    throw InvalidInput("arch: skip_layer must lie in [0, depth)");
}

namespace {

template <typename T>
Dense<T> make_dense(int in, int out) {
  return {Matrix<T>(in, out), Matrix<T>(1, out)};
}

template <typename T>
std::vector<Dense<T>> make_trunk(const FieldArch& arch) {
  const int enc = encoded_dim(arch.pos_freqs);
  std::vector<Dense<T>> layers;
  for (int i = 0; i < arch.depth; ++i) {
    int in = i == 0 ? enc : arch.width;
    if (i == arch.skip_layer && i > 0) in += enc;
    layers.push_back(make_dense<T>(in, arch.width));
  }
  return layers;
}

template <typename T>
LevelNets<T> make_level(const FieldArch& arch) {
  LevelNets<T> nets;
  nets.density.trunk = make_trunk<T>(arch);
  nets.density.output = make_dense<T>(arch.width, 1);
  nets.transfer.trunk = make_trunk<T>(arch);
  nets.transfer.head = make_dense<T>(arch.width + 2 * encoded_dim(arch.dir_freqs), arch.head_width);
  nets.transfer.output = make_dense<T>(arch.head_width, 3);
  return nets;
}

template <typename P, typename F>
void visit_level(P& nets, const std::string& prefix, F& fn) {
  for (std::size_t i = 0; i < nets.density.trunk.size(); ++i) {
    fn(prefix + ".density.trunk." + std::to_string(i) + ".weight", nets.density.trunk[i].weight);
    fn(prefix + ".density.trunk." + std::to_string(i) + ".bias", nets.density.trunk[i].bias);
  }
  fn(prefix + ".density.output.weight", nets.density.output.weight);
  fn(prefix + ".density.output.bias", nets.density.output.bias);
  for (std::size_t i = 0; i < nets.transfer.trunk.size(); ++i) {
    fn(prefix + ".transfer.trunk." + std::to_string(i) + ".weight", nets.transfer.trunk[i].weight);
    fn(prefix + ".transfer.trunk." + std::to_string(i) + ".bias", nets.transfer.trunk[i].bias);
  }
  fn(prefix + ".transfer.head.weight", nets.transfer.head.weight);
  fn(prefix + ".transfer.head.bias", nets.transfer.head.bias);
  fn(prefix + ".transfer.output.weight", nets.transfer.output.weight);
  fn(prefix + ".transfer.output.bias", nets.transfer.output.bias);
}

template <typename T>
void fill_uniform(Matrix<T>& m, double bound, Rng& rng) {
  for (T& v : m.flat()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
}

template <typename T>
Matrix<T> dense_forward(const Dense<T>& layer, const Matrix<T>& x) {
  Matrix<T> y(x.rows(), layer.weight.cols());
  kernels::gemm(x, layer.weight, y);
  kernels::add_row_broadcast<T>(y, layer.bias.flat());
  return y;
}

template <typename T>
void relu_inplace(Matrix<T>& m) {
  kernels::map<T>(m.flat(), m.flat(), [](T v) { return v > T(0) ? v : T(0); });
}

template <typename T>
Matrix<T> hconcat(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  for (int r = 0; r < a.rows(); ++r) {
    std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
    std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + a.cols());
  }
  return out;
}

template <typename T>
Matrix<T> trunk_forward(const std::vector<Dense<T>>& layers, const FieldArch& arch,
                        const Matrix<T>& enc) {
  Matrix<T> h = enc;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (static_cast<int>(i) == arch.skip_layer && i > 0) h = hconcat(h, enc);
    h = dense_forward(layers[i], h);
    relu_inplace(h);
  }
  return h;
}

template <typename T>
T softplus_scalar(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
BasicFieldParams<T> zero_params(const FieldArch& arch) {
  validate(arch);
  BasicFieldParams<T> p;
  p.arch = arch;
  p.coarse = make_level<T>(arch);
  p.fine = make_level<T>(arch);
  return p;
}

template <typename T>
void for_each_tensor(BasicFieldParams<T>& params,
                     const std::function<void(const std::string&, Matrix<T>&)>& fn) {
  visit_level(params.coarse, "coarse", fn);
  visit_level(params.fine, "fine", fn);
}

template <typename T>
void for_each_tensor(const BasicFieldParams<T>& params,
                     const std::function<void(const std::string&, const Matrix<T>&)>& fn) {
  visit_level(params.coarse, "coarse", fn);
  visit_level(params.fine, "fine", fn);
}

template <typename T>
std::vector<Matrix<T>*> tensor_list(BasicFieldParams<T>& params) {
  std::vector<Matrix<T>*> out;
  for_each_tensor<T>(params, [&](const std::string&, Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> tensor_list(const BasicFieldParams<T>& params) {
  std::vector<const Matrix<T>*> out;
  for_each_tensor<T>(params, [&](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
BasicFieldParams<T> init_params(std::uint64_t seed, const FieldArch& arch) {
  BasicFieldParams<T> p = zero_params<T>(arch);
  Rng rng(splitmix64(seed));
  for (LevelNets<T>* nets : {&p.coarse, &p.fine}) {
    auto init_dense = [&](Dense<T>& d) {
      fill_uniform(d.weight, std::sqrt(6.0 / d.weight.rows()), rng);
    };
    for (auto& d : nets->density.trunk) init_dense(d);
    fill_uniform(nets->density.output.weight, std::sqrt(1.0 / arch.width), rng);
    for (auto& d : nets->transfer.trunk) init_dense(d);
    init_dense(nets->transfer.head);
    fill_uniform(nets->transfer.output.weight, std::sqrt(1.0 / arch.head_width), rng);
    nets->transfer.output.bias.fill(static_cast<T>(std::log(0.05)));
  }
  return p;
}

template <typename T>
bool all_finite(const BasicFieldParams<T>& params) {
  for (const Matrix<T>* m : tensor_list(params))
    for (T v : m->flat())
      if (!std::isfinite(v)) return false;
  return true;
}

std::vector<double> positional_encode(Vec3 v, int frequencies) {
  if (frequencies < 0) throw InvalidInput("positional_encode: negative frequency count");
  std::vector<double> out(static_cast<std::size_t>(encoded_dim(frequencies)));
  for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(c)] = v[c];
  double scale = kPi;
  for (int l = 0; l < frequencies; ++l) {
    for (int c = 0; c < 3; ++c) {
      out[static_cast<std::size_t>(3 + 6 * l + c)] = std::sin(scale * v[c]);
      out[static_cast<std::size_t>(6 + 6 * l + c)] = std::cos(scale * v[c]);
    }
    scale *= 2.0;
  }
  return out;
}

template <typename T>
Matrix<T> encode_rows(const Matrix<T>& xyz, int frequencies) {
  if (xyz.cols() != 3) throw InvalidInput("encode_rows: expected n x 3");
  Matrix<T> out(xyz.rows(), encoded_dim(frequencies));
  const int rows = xyz.rows();
#pragma omp parallel for schedule(static) if (rows > 2048)
  for (int r = 0; r < rows; ++r) {
    T* dst = out.data() + static_cast<std::size_t>(r) * out.cols();
    for (int c = 0; c < 3; ++c) dst[c] = xyz(r, c);
    T scale = static_cast<T>(kPi);
    for (int l = 0; l < frequencies; ++l) {
      for (int c = 0; c < 3; ++c) {
        dst[3 + 6 * l + c] = std::sin(scale * xyz(r, c));
        dst[6 + 6 * l + c] = std::cos(scale * xyz(r, c));
      }
      scale *= T(2);
    }
  }
  return out;
}

template <typename T>
Matrix<T> forward_density(const DensityNet<T>& net, const FieldArch& arch,
                          const Matrix<T>& encoded_pos) {
  Matrix<T> z = dense_forward(net.output, trunk_forward(net.trunk, arch, encoded_pos));
  kernels::map<T>(z.flat(), z.flat(), [](T v) { return softplus_scalar(v); });
  return z;
}

template <typename T>
Matrix<T> forward_transfer_features(const TransferNet<T>& net, const FieldArch& arch,
                                    const Matrix<T>& encoded_pos) {
  return trunk_forward(net.trunk, arch, encoded_pos);
}

template <typename T>
Matrix<T> forward_transfer_head(const TransferNet<T>& net, const Matrix<T>& features,
                                const Matrix<T>& encoded_dirs) {
  Matrix<T> hidden = dense_forward(net.head, hconcat(features, encoded_dirs));
  relu_inplace(hidden);
  Matrix<T> out = dense_forward(net.output, hidden);
  kernels::map<T>(out.flat(), out.flat(), [](T v) { return std::exp(v); });
  return out;
}

namespace {

Matrix<float> single_row(Vec3 v) {
  Matrix<float> m(1, 3);
  for (int c = 0; c < 3; ++c) m(0, c) = static_cast<float>(v[c]);
  return m;
}

}  // namespace

double eval_density(const FieldParams& params, Level level, Vec3 x) {
  const auto enc = encode_rows(single_row(x), params.arch.pos_freqs);
  const double sigma = forward_density(params.level(level).density, params.arch, enc)(0, 0);
  if (!std::isfinite(sigma)) throw NumericalError("eval_density: non-finite density");
  return sigma;
}

Vec3 eval_transfer_gradient(const FieldParams& params, Level level, const FieldQuery& q) {
  if (!is_unit(q.view) || !is_unit(q.light))
    throw InvalidInput("eval_transfer_gradient: view and light must be unit vectors");
  const auto& net = params.level(level).transfer;
  const auto enc = encode_rows(single_row(q.position), params.arch.pos_freqs);
  const auto dirs = hconcat(encode_rows(single_row(q.view), params.arch.dir_freqs),
                            encode_rows(single_row(q.light), params.arch.dir_freqs));
  const auto h = forward_transfer_head(net, forward_transfer_features(net, params.arch, enc), dirs);
  const Vec3 out{h(0, 0), h(0, 1), h(0, 2)};
  if (!is_finite(out)) throw NumericalError("eval_transfer_gradient: non-finite output");
  return out;
}

template <typename T>
FieldGraph<T>::FieldGraph(Tape<T>& tape, const BasicFieldParams<T>& params,
                          BasicFieldParams<T>* grads)
    : tape_(tape), params_(params), grads_(grads) {
  if (grads != nullptr && !(grads->arch == params.arch))
    throw InvalidInput("FieldGraph: gradient buffer architecture differs from params");
}

template <typename T>
typename FieldGraph<T>::LevelIds& FieldGraph<T>::bind(Level level) {
  LevelIds& ids = level == Level::Coarse ? coarse_ : fine_;
  if (ids.bound) return ids;
  const LevelNets<T>& nets = params_.level(level);
  LevelNets<T>* g = grads_ != nullptr ? &grads_->level(level) : nullptr;
  auto leaf = [&](const Dense<T>& d, Dense<T>* gd) {
    return DenseIds{tape_.parameter(d.weight, gd ? &gd->weight : nullptr),
                    tape_.parameter(d.bias, gd ? &gd->bias : nullptr)};
  };
  for (std::size_t i = 0; i < nets.density.trunk.size(); ++i)
    ids.density_trunk.push_back(leaf(nets.density.trunk[i], g ? &g->density.trunk[i] : nullptr));
  ids.density_out = leaf(nets.density.output, g ? &g->density.output : nullptr);
  for (std::size_t i = 0; i < nets.transfer.trunk.size(); ++i)
    ids.transfer_trunk.push_back(leaf(nets.transfer.trunk[i], g ? &g->transfer.trunk[i] : nullptr));
  ids.transfer_head = leaf(nets.transfer.head, g ? &g->transfer.head : nullptr);
  ids.transfer_out = leaf(nets.transfer.output, g ? &g->transfer.output : nullptr);
  ids.bound = true;
  return ids;
}

template <typename T>
typename FieldGraph<T>::Id FieldGraph<T>::trunk(const std::vector<DenseIds>& layers, Id enc) {
  Id h = enc;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (static_cast<int>(i) == params_.arch.skip_layer && i > 0) h = tape_.concat(h, enc);
    h = tape_.relu(tape_.linear(h, layers[i].weight, layers[i].bias));
  }
  return h;
}

template <typename T>
typename FieldGraph<T>::Id FieldGraph<T>::density(Level level, Id encoded_pos) {
  LevelIds& ids = bind(level);
  const Id features = trunk(ids.density_trunk, encoded_pos);
  return tape_.softplus(tape_.linear(features, ids.density_out.weight, ids.density_out.bias));
}

template <typename T>
typename FieldGraph<T>::Id FieldGraph<T>::transfer(Level level, Id encoded_pos, Id encoded_dirs) {
  LevelIds& ids = bind(level);
  const Id features = trunk(ids.transfer_trunk, encoded_pos);
  const Id hidden = tape_.relu(tape_.linear(tape_.concat(features, encoded_dirs),
                                            ids.transfer_head.weight, ids.transfer_head.bias));
  return tape_.exp(tape_.linear(hidden, ids.transfer_out.weight, ids.transfer_out.bias));
}

namespace {

constexpr char kMagic[4] = {'P', 'R', 'T', 'G'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw InvalidInput("checkpoint: truncated header");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FieldParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot write checkpoint " + path.string());
  const FieldArch& a = params.arch;
  os.write(kMagic, 4);
  write_u32(os, kCheckpointVersion);
  for (int v : {a.pos_freqs, a.dir_freqs, a.width, a.depth, a.skip_layer, a.head_width})
    write_u32(os, static_cast<std::uint32_t>(v));
  const auto tensors = tensor_list(params);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const Matrix<float>* m : tensors)
    for (float v : m->flat()) write_f32(os, v);
  if (!os) throw InvalidInput("failed writing checkpoint " + path.string());

  std::ofstream manifest(path.string() + ".manifest");
  manifest << "# prtg checkpoint v" << kCheckpointVersion << ": name rows cols\n";
  for_each_tensor<float>(params, [&](const std::string& name, const Matrix<float>& m) {
    manifest << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  });
}

FieldParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw InvalidInput("checkpoint: bad magic in " + path.string());
  const std::uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw InvalidInput("checkpoint: unsupported version " + std::to_string(version));
  FieldArch a;
  for (int* f : {&a.pos_freqs, &a.dir_freqs, &a.width, &a.depth, &a.skip_layer, &a.head_width})
    *f = static_cast<int>(read_u32(is));
  FieldParams params = zero_params<float>(a);
  auto tensors = tensor_list(params);
  if (read_u32(is) != tensors.size()) throw InvalidInput("checkpoint: tensor count mismatch");
  for (Matrix<float>* m : tensors)
    for (float& v : m->flat()) v = std::bit_cast<float>(read_u32(is));
  if (is.peek() != std::char_traits<char>::eof()) throw InvalidInput("checkpoint: trailing bytes");
  if (!all_finite(params)) throw NumericalError("checkpoint: non-finite parameters");
  return params;
}

#define PRTG_INSTANTIATE(T)                                                                       \
  template BasicFieldParams<T> zero_params<T>(const FieldArch&);                                  \
  template void for_each_tensor<T>(BasicFieldParams<T>&,                                         \
                                   const std::function<void(const std::string&, Matrix<T>&)>&);   \
  template void for_each_tensor<T>(                                                               \
      const BasicFieldParams<T>&, const std::function<void(const std::string&, const Matrix<T>&)>&); \
  template std::vector<Matrix<T>*> tensor_list<T>(BasicFieldParams<T>&);                          \
  template std::vector<const Matrix<T>*> tensor_list<T>(const BasicFieldParams<T>&);              \
  template BasicFieldParams<T> init_params<T>(std::uint64_t, const FieldArch&);                   \
  template bool all_finite<T>(const BasicFieldParams<T>&);                                        \
  template Matrix<T> encode_rows<T>(const Matrix<T>&, int);                                       \
  template Matrix<T> forward_density<T>(const DensityNet<T>&, const FieldArch&, const Matrix<T>&); \
  template Matrix<T> forward_transfer_features<T>(const TransferNet<T>&, const FieldArch&,        \
                                                  const Matrix<T>&);                              \
  template Matrix<T> forward_transfer_head<T>(const TransferNet<T>&, const Matrix<T>&,            \
                                              const Matrix<T>&);                                  \
  template class FieldGraph<T>;

PRTG_INSTANTIATE(float)
PRTG_INSTANTIATE(double)
#undef PRTG_INSTANTIATE

}  // namespace prtg
