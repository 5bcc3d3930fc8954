#pragma once

// Fixed-layer feedforward engine: linear, 1D BatchNorm, ReLU and sigmoid with exact
// reverse-mode gradients. Rows of every matrix are batch elements.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

namespace fuselm::detail {
class BinaryWriter;
class BinaryReader;
}  // namespace fuselm::detail

namespace fuselm::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Mode { Train, Eval };

struct Linear {
  Matrix weight;  // out x in
  Vector bias;    // out

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
};

struct BatchNorm {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNorm(std::size_t dim = 0);
  std::size_t dim() const { return static_cast<std::size_t>(gamma.size()); }
};

struct ReLU {};
struct Sigmoid {};

using Layer = std::variant<Linear, BatchNorm, ReLU, Sigmoid>;

/// Per-parameter gradient buffers, aligned with `Network::parameters()`.
using Gradients = std::vector<std::vector<double>>;

/// Activations recorded by a train-mode forward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;      // input of each layer
  std::vector<Matrix> normalized;  // batchnorm x-hat (empty for other layers)
  std::vector<Vector> inv_std;     // batchnorm 1/sqrt(var+eps)
  Matrix output;
  const void* owner = nullptr;
  std::uint64_t generation = 0;
};

class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers);

  /// BatchNorm(in) -> [Linear -> ReLU] per hidden width -> Linear(out) -> Sigmoid, Xavier-uniform init.
  static Network mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden, std::size_t out_dim,
                     std::uint64_t seed);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  const std::vector<Layer>& layers() const { return layers_; }
  bool empty() const { return layers_.empty(); }

  /// Train mode uses batch statistics (needs B >= 2) and updates running stats; when `cache`
  /// is given it is filled for `backward`.
  Matrix forward(const Matrix& x, Mode mode, ForwardCache* cache = nullptr);
  /// Eval-mode forward; uses running statistics and never mutates the network.
  Matrix forward_eval(const Matrix& x) const;

  /// Returns parameter gradients; writes dLoss/dInput to `grad_input` when non-null.
  Gradients backward(const ForwardCache& cache, const Matrix& grad_output, Matrix* grad_input = nullptr) const;

  /// Learnable tensors in layer order (linear: weight, bias; batchnorm: gamma, beta).
  /// Mutable access invalidates outstanding forward caches.
  std::vector<std::span<double>> parameters();
  std::vector<std::span<const double>> parameters() const;
  std::size_t parameter_count() const;

  void write(detail::BinaryWriter& w) const;
  static Network read(detail::BinaryReader& r);
  void save(const std::filesystem::path& path) const;
  static Network load(const std::filesystem::path& path);

 private:
  void check_input(const Matrix& x) const;

  std::vector<Layer> layers_;
  std::uint64_t generation_ = 0;
};

}  // namespace fuselm::nn
