#include "fuselm/tinynn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "fuselm/detail/binary_io.hpp"
#include "fuselm/error.hpp"

namespace fuselm::nn {
namespace {

constexpr std::string_view kMagic = "CNN1";

enum class Tag : std::uint8_t { Linear = 1, BatchNorm = 2, ReLU = 3, Sigmoid = 4 };

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

double sigmoid(double z) {
  // Split by sign so exp never overflows.
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> to_vector(const double* data, Eigen::Index n) { return std::vector<double>(data, data + n); }

}  // namespace

BatchNorm::BatchNorm(std::size_t dim)
    : gamma(Vector::Ones(static_cast<Eigen::Index>(dim))),
      beta(Vector::Zero(static_cast<Eigen::Index>(dim))),
      running_mean(Vector::Zero(static_cast<Eigen::Index>(dim))),
      running_var(Vector::Ones(static_cast<Eigen::Index>(dim))) {}

Network::Network(std::vector<Layer> layers) : layers_(std::move(layers)) {
  std::size_t dim = 0;
  bool known = false;
  for (const Layer& layer : layers_) {
    if (const auto* lin = std::get_if<Linear>(&layer)) {
      if (lin->bias.size() != lin->weight.rows()) throw Error(ErrorCode::ShapeError, "linear bias size mismatch");
      if (known && lin->in_dim() != dim) throw Error(ErrorCode::ShapeError, "linear input dim does not chain");
      dim = lin->out_dim();
      known = true;
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
      if (known && bn->dim() != dim) throw Error(ErrorCode::ShapeError, "batchnorm dim does not chain");
      if ((bn->running_var.array() < 0).any()) throw Error(ErrorCode::InvalidArgument, "negative running variance");
      dim = bn->dim();
      known = true;
    }
  }
}

Network Network::mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto linear = [&](std::size_t in, std::size_t out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Linear l;
    l.weight.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = dist(rng);
    l.bias = Vector::Zero(static_cast<Eigen::Index>(out));
    return l;
  };

  std::vector<Layer> layers;
  layers.emplace_back(BatchNorm(in_dim));
  std::size_t prev = in_dim;
  for (std::size_t width : hidden) {
    layers.emplace_back(linear(prev, width));
    layers.emplace_back(ReLU{});
    prev = width;
  }
  layers.emplace_back(linear(prev, out_dim));
  layers.emplace_back(Sigmoid{});
  return Network(std::move(layers));
}

std::size_t Network::input_dim() const {
  for (const Layer& layer : layers_) {
    if (const auto* lin = std::get_if<Linear>(&layer)) return lin->in_dim();
    if (const auto* bn = std::get_if<BatchNorm>(&layer)) return bn->dim();
  }
  return 0;
}

std::size_t Network::output_dim() const {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    if (const auto* lin = std::get_if<Linear>(&*it)) return lin->out_dim();
    if (const auto* bn = std::get_if<BatchNorm>(&*it)) return bn->dim();
  }
  return 0;
}

void Network::check_input(const Matrix& x) const {
  const std::size_t want = input_dim();
  if (want != 0 && static_cast<std::size_t>(x.cols()) != want)
    throw Error(ErrorCode::ShapeError, "input has " + std::to_string(x.cols()) + " columns, network expects " +
                                           std::to_string(want));
}

Matrix Network::forward(const Matrix& x, Mode mode, ForwardCache* cache) {
  if (mode == Mode::Eval) {
    Matrix y = forward_eval(x);
    if (cache) *cache = ForwardCache{};
    return y;
  }
  check_input(x);
  const Eigen::Index batch = x.rows();
  const bool has_bn = std::any_of(layers_.begin(), layers_.end(),
                                  [](const Layer& l) { return std::holds_alternative<BatchNorm>(l); });
  if (has_bn && batch < 2) throw Error(ErrorCode::BatchTooSmall, "train-mode batchnorm needs at least 2 rows");

  ++generation_;
  if (cache) {
    cache->inputs.clear();
    cache->normalized.clear();
    cache->inv_std.clear();
    cache->owner = this;
    cache->generation = generation_;
  }

  Matrix h = x;
  for (Layer& layer : layers_) {
    Matrix normalized;
    Vector inv_std;
    Matrix out = std::visit(
        Overloaded{
            [&](Linear& l) -> Matrix {
              Matrix y = h * l.weight.transpose();
              y.rowwise() += l.bias.transpose();
              return y;
            },
            [&](BatchNorm& bn) -> Matrix {
              const Vector mean = h.colwise().mean().transpose();
              Matrix centered = h.rowwise() - mean.transpose();
              const Vector var = centered.array().square().colwise().mean().transpose();  // biased
              inv_std = (var.array() + bn.eps).rsqrt().matrix();
              normalized = centered.array().rowwise() * inv_std.transpose().array();
              const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
              bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mean;
              bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * unbias * var;
              Matrix y = normalized.array().rowwise() * bn.gamma.transpose().array();
              y.rowwise() += bn.beta.transpose();
              return y;
            },
            [&](ReLU&) -> Matrix { return h.cwiseMax(0.0); },
            [&](Sigmoid&) -> Matrix { return h.unaryExpr([](double z) { return sigmoid(z); }); },
        },
        layer);
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->normalized.push_back(std::move(normalized));
      cache->inv_std.push_back(std::move(inv_std));
    }
    h = std::move(out);
  }
  if (cache) cache->output = h;
  return h;
}

Matrix Network::forward_eval(const Matrix& x) const {
  check_input(x);
  Matrix h = x;
  for (const Layer& layer : layers_) {
    h = std::visit(Overloaded{
                       [&](const Linear& l) -> Matrix {
                         Matrix y = h * l.weight.transpose();
                         y.rowwise() += l.bias.transpose();
                         return y;
                       },
                       [&](const BatchNorm& bn) -> Matrix {
                         const Vector scale =
                             (bn.gamma.array() * (bn.running_var.array() + bn.eps).rsqrt()).matrix();
                         const Vector shift = bn.beta.array() - bn.running_mean.array() * scale.array();
                         Matrix y = h.array().rowwise() * scale.transpose().array();
                         y.rowwise() += shift.transpose();
                         return y;
                       },
                       [&](const ReLU&) -> Matrix { return h.cwiseMax(0.0); },
                       [&](const Sigmoid&) -> Matrix { return h.unaryExpr([](double z) { return sigmoid(z); }); },
                   },
                   layer);
  }
  return h;
}

Gradients Network::backward(const ForwardCache& cache, const Matrix& grad_output, Matrix* grad_input) const {
  if (cache.owner != this || cache.generation != generation_ || cache.inputs.size() != layers_.size())
    throw Error(ErrorCode::CacheMismatch, "forward cache does not belong to the current network state");
  if (grad_output.rows() != cache.output.rows() || grad_output.cols() != cache.output.cols())
    throw Error(ErrorCode::ShapeError, "gradient shape does not match network output");

  // Collected in reverse, flipped at the end.
  std::vector<std::vector<double>> reversed;
  Matrix g = grad_output;
  const double batch = static_cast<double>(grad_output.rows());
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const Matrix& in = cache.inputs[i];
    std::visit(Overloaded{
                   [&](const Linear& l) {
                     Matrix dw = g.transpose() * in;
                     Vector db = g.colwise().sum().transpose();
                     reversed.push_back(to_vector(db.data(), db.size()));
                     reversed.push_back(to_vector(dw.data(), dw.size()));
                     g = g * l.weight;
                   },
                   [&](const BatchNorm& bn) {
                     const Matrix& xhat = cache.normalized[i];
                     const Vector& inv_std = cache.inv_std[i];
                     Vector dgamma = (g.array() * xhat.array()).colwise().sum().transpose();
                     Vector dbeta = g.colwise().sum().transpose();
                     reversed.push_back(to_vector(dbeta.data(), dbeta.size()));
                     reversed.push_back(to_vector(dgamma.data(), dgamma.size()));
                     const Matrix dxhat = g.array().rowwise() * bn.gamma.transpose().array();
                     const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
                     const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum();
                     Matrix dx = (batch * dxhat).rowwise() - sum_dxhat;
                     dx -= (xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
                     g = (dx.array().rowwise() * (inv_std.transpose().array() / batch)).matrix();
                   },
                   [&](const ReLU&) { g = (in.array() > 0.0).select(g, 0.0); },
                   [&](const Sigmoid&) {
                     const Matrix s = in.unaryExpr([](double z) { return sigmoid(z); });
                     g = (g.array() * s.array() * (1.0 - s.array())).matrix();
                   },
               },
               layers_[i]);
  }
  if (grad_input) *grad_input = std::move(g);
  return Gradients(std::make_move_iterator(reversed.rbegin()), std::make_move_iterator(reversed.rend()));
}

std::vector<std::span<double>> Network::parameters() {
  ++generation_;
  std::vector<std::span<double>> out;
  for (Layer& layer : layers_) {
    if (auto* l = std::get_if<Linear>(&layer)) {
      out.emplace_back(l->weight.data(), static_cast<std::size_t>(l->weight.size()));
      out.emplace_back(l->bias.data(), static_cast<std::size_t>(l->bias.size()));
    } else if (auto* bn = std::get_if<BatchNorm>(&layer)) {
      out.emplace_back(bn->gamma.data(), static_cast<std::size_t>(bn->gamma.size()));
      out.emplace_back(bn->beta.data(), static_cast<std::size_t>(bn->beta.size()));
    }
  }
  return out;
}

std::vector<std::span<const double>> Network::parameters() const {
  std::vector<std::span<const double>> out;
  for (const Layer& layer : layers_) {
    if (const auto* l = std::get_if<Linear>(&layer)) {
      out.emplace_back(l->weight.data(), static_cast<std::size_t>(l->weight.size()));
      out.emplace_back(l->bias.data(), static_cast<std::size_t>(l->bias.size()));
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
      out.emplace_back(bn->gamma.data(), static_cast<std::size_t>(bn->gamma.size()));
      out.emplace_back(bn->beta.data(), static_cast<std::size_t>(bn->beta.size()));
    }
  }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.size();
  return n;
}

void Network::write(detail::BinaryWriter& w) const {
  auto floats = [&](const double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) w.f32(static_cast<float>(data[i]));
  };
  w.magic(kMagic);
  w.u32(static_cast<std::uint32_t>(layers_.size()));
  for (const Layer& layer : layers_) {
    std::visit(Overloaded{
                   [&](const Linear& l) {
                     w.u8(static_cast<std::uint8_t>(Tag::Linear));
                     w.u32(static_cast<std::uint32_t>(l.in_dim()));
                     w.u32(static_cast<std::uint32_t>(l.out_dim()));
                     floats(l.weight.data(), l.weight.size());
                     floats(l.bias.data(), l.bias.size());
                   },
                   [&](const BatchNorm& bn) {
                     w.u8(static_cast<std::uint8_t>(Tag::BatchNorm));
                     w.u32(static_cast<std::uint32_t>(bn.dim()));
                     w.f32(static_cast<float>(bn.momentum));
                     w.f32(static_cast<float>(bn.eps));
                     floats(bn.gamma.data(), bn.gamma.size());
                     floats(bn.beta.data(), bn.beta.size());
                     floats(bn.running_mean.data(), bn.running_mean.size());
                     floats(bn.running_var.data(), bn.running_var.size());
                   },
                   [&](const ReLU&) { w.u8(static_cast<std::uint8_t>(Tag::ReLU)); },
                   [&](const Sigmoid&) { w.u8(static_cast<std::uint8_t>(Tag::Sigmoid)); },
               },
               layer);
  }
}

Network Network::read(detail::BinaryReader& r) {
  r.expect_magic(kMagic);
  constexpr std::uint32_t kMaxDim = 1u << 24;
  auto floats = [&](double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) data[i] = static_cast<double>(r.f32());
  };
  const std::uint32_t n_layers = r.u32();
  if (n_layers > 1024) throw Error(ErrorCode::FormatError, r.context() + ": implausible layer count");
  std::vector<Layer> layers;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    switch (static_cast<Tag>(r.u8())) {
      case Tag::Linear: {
        const std::uint32_t in = r.u32(), out = r.u32();
        if (in == 0 || out == 0 || in > kMaxDim || out > kMaxDim)
          throw Error(ErrorCode::FormatError, r.context() + ": bad linear dims");
        Linear l;
        l.weight.resize(out, in);
        l.bias.resize(out);
        floats(l.weight.data(), l.weight.size());
        floats(l.bias.data(), l.bias.size());
        layers.emplace_back(std::move(l));
        break;
      }
      case Tag::BatchNorm: {
        const std::uint32_t dim = r.u32();
        if (dim == 0 || dim > kMaxDim) throw Error(ErrorCode::FormatError, r.context() + ": bad batchnorm dim");
        BatchNorm bn(dim);
        bn.momentum = r.f32();
        bn.eps = r.f32();
        floats(bn.gamma.data(), bn.gamma.size());
        floats(bn.beta.data(), bn.beta.size());
        floats(bn.running_mean.data(), bn.running_mean.size());
        floats(bn.running_var.data(), bn.running_var.size());
        layers.emplace_back(std::move(bn));
        break;
      }
      case Tag::ReLU: layers.emplace_back(ReLU{}); break;
      case Tag::Sigmoid: layers.emplace_back(Sigmoid{}); break;
      default: throw Error(ErrorCode::FormatError, r.context() + ": unknown layer tag");
    }
  }
  return Network(std::move(layers));
}

void Network::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  detail::BinaryWriter w(out);
  write(w);
  if (!w.ok()) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

Network Network::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open network " + path.string());
  detail::BinaryReader r(in, path.string());
  return read(r);
}

}  // namespace fuselm::nn
