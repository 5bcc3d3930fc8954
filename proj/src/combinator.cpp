#include "fuselm/combinator.hpp"

#include <cmath>
#include <fstream>

#include "fuselm/detail/binary_io.hpp"
#include "fuselm/error.hpp"

namespace fuselm {
namespace {

constexpr std::string_view kMagic = "CMB1";
constexpr double kMinNormalizer = 1e-12;

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_inputs(const CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large) {
  if (p_small.rows() != p_large.rows() || p_small.cols() != p_large.cols())
    throw Error(ErrorCode::VocabMismatch, "small and large distributions have different shapes");
  if (static_cast<std::size_t>(p_small.cols()) != params.vocab_size)
    throw Error(ErrorCode::VocabMismatch, "distributions have " + std::to_string(p_small.cols()) +
                                              " entries, combination expects " + std::to_string(params.vocab_size));
}

nn::Matrix eval_lambda(const CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large) {
  const Eigen::Index batch = p_small.rows();
  switch (params.kind) {
    case CombinationKind::Mean: return nn::Matrix::Constant(batch, 1, 0.5);
    case CombinationKind::ConstantScalar: return nn::Matrix::Constant(batch, 1, sigmoid(params.raw_lambda.at(0)));
    case CombinationKind::ConstantVector: {
      nn::Matrix lambda(batch, static_cast<Eigen::Index>(params.vocab_size));
      for (Eigen::Index v = 0; v < lambda.cols(); ++v)
        lambda.col(v).setConstant(sigmoid(params.raw_lambda[static_cast<std::size_t>(v)]));
      return lambda;
    }
    default: return params.net.forward_eval(combination_features(params.kind, p_small, p_large));
  }
}

// Train-mode lambda: network kinds use batch statistics and fill `net_cache`.
nn::Matrix train_lambda(CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large,
                        nn::ForwardCache* net_cache) {
  if (!uses_network(params.kind)) return eval_lambda(params, p_small, p_large);
  return params.net.forward(combination_features(params.kind, p_small, p_large), nn::Mode::Train, net_cache);
}

nn::Matrix mix(CombinationKind kind, const nn::Matrix& lambda, const nn::Matrix& p_small, const nn::Matrix& p_large,
               nn::Vector* z_out) {
  if (!is_vector_kind(kind)) {
    const auto l = lambda.col(0).array();
    nn::Matrix out = p_small.array().colwise() * l;
    out.array() += p_large.array().colwise() * (1.0 - l);
    return out;
  }
  nn::Matrix out = lambda.array() * p_small.array() + (1.0 - lambda.array()) * p_large.array();
  const nn::Vector z = out.rowwise().sum();
  for (Eigen::Index i = 0; i < z.size(); ++i)
    if (!(z[i] >= kMinNormalizer))
      throw Error(ErrorCode::DegenerateRenormalization, "token-wise mixture has no mass in row " + std::to_string(i));
  out.array().colwise() /= z.array();
  if (z_out) *z_out = z;
  return out;
}

nn::Matrix row_matrix(const Distribution& d) {
  return Eigen::Map<const nn::Matrix>(d.probs.data(), 1, static_cast<Eigen::Index>(d.probs.size()));
}

}  // namespace

CombinationKind parse_kind(std::string_view name) {
  for (CombinationKind k : kAllKinds)
    if (to_string(k) == name) return k;
  throw Error(ErrorCode::InvalidArgument, "unknown combination kind '" + std::string(name) + "'");
}

std::string_view to_string(CombinationKind kind) {
  switch (kind) {
    case CombinationKind::Mean: return "mean";
    case CombinationKind::ConstantScalar: return "constant-scalar";
    case CombinationKind::ConstantVector: return "constant-vector";
    case CombinationKind::EntropyScalar: return "entropy-scalar";
    case CombinationKind::EntropyVector: return "entropy-vector";
    case CombinationKind::FullScalar: return "full-scalar";
    case CombinationKind::FullVector: return "full-vector";
  }
  return "unknown";
}

bool is_scalar_kind(CombinationKind kind) {
  return kind == CombinationKind::ConstantScalar || kind == CombinationKind::EntropyScalar ||
         kind == CombinationKind::FullScalar;
}

bool is_vector_kind(CombinationKind kind) {
  return kind == CombinationKind::ConstantVector || kind == CombinationKind::EntropyVector ||
         kind == CombinationKind::FullVector;
}

bool uses_network(CombinationKind kind) {
  return kind == CombinationKind::EntropyScalar || kind == CombinationKind::EntropyVector ||
         kind == CombinationKind::FullScalar || kind == CombinationKind::FullVector;
}

CombinationParams CombinationParams::make(CombinationKind kind, std::size_t vocab_size, std::uint64_t seed,
                                          const std::vector<std::size_t>& hidden) {
  if (vocab_size == 0) throw Error(ErrorCode::InvalidArgument, "vocab_size must be positive");
  CombinationParams p;
  p.kind = kind;
  p.vocab_size = vocab_size;
  const std::size_t out_dim = is_vector_kind(kind) ? vocab_size : 1;
  switch (kind) {
    case CombinationKind::Mean: break;
    case CombinationKind::ConstantScalar: p.raw_lambda.assign(1, 0.0); break;
    case CombinationKind::ConstantVector: p.raw_lambda.assign(vocab_size, 0.0); break;
    case CombinationKind::EntropyScalar:
    case CombinationKind::EntropyVector: p.net = nn::Network::mlp(2, hidden, out_dim, seed); break;
    case CombinationKind::FullScalar:
    case CombinationKind::FullVector: p.net = nn::Network::mlp(2 * vocab_size, hidden, out_dim, seed); break;
  }
  return p;
}

std::vector<std::span<double>> CombinationParams::parameters() {
  if (uses_network(kind)) return net.parameters();
  if (raw_lambda.empty()) return {};
  return {std::span<double>(raw_lambda)};
}

std::size_t CombinationParams::parameter_count() const {
  return uses_network(kind) ? net.parameter_count() : raw_lambda.size();
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

nn::Matrix combination_features(CombinationKind kind, const nn::Matrix& p_small, const nn::Matrix& p_large) {
  const Eigen::Index batch = p_small.rows();
  const Eigen::Index vocab = p_small.cols();
  if (kind == CombinationKind::EntropyScalar || kind == CombinationKind::EntropyVector) {
    nn::Matrix f(batch, 2);
    for (Eigen::Index i = 0; i < batch; ++i) {
      f(i, 0) = entropy(std::span<const double>(p_small.row(i).data(), static_cast<std::size_t>(vocab)));
      f(i, 1) = entropy(std::span<const double>(p_large.row(i).data(), static_cast<std::size_t>(vocab)));
    }
    return f;
  }
  if (kind == CombinationKind::FullScalar || kind == CombinationKind::FullVector) {
    nn::Matrix f(batch, 2 * vocab);
    f.leftCols(vocab) = p_small;
    f.rightCols(vocab) = p_large;
    return f;
  }
  throw Error(ErrorCode::InvalidArgument, "kind " + std::string(to_string(kind)) + " takes no network features");
}

nn::Matrix combine(CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large, nn::Mode mode,
                   CombineCache* cache) {
  check_inputs(params, p_small, p_large);
  if (params.kind == CombinationKind::Mean) {
    nn::Matrix out = 0.5 * (p_small + p_large);
    if (cache) cache->output = out;
    return out;
  }
  nn::Matrix lambda = mode == nn::Mode::Train
                          ? train_lambda(params, p_small, p_large, cache ? &cache->net_cache : nullptr)
                          : eval_lambda(params, p_small, p_large);
  nn::Vector z;
  nn::Matrix out = mix(params.kind, lambda, p_small, p_large, &z);
  if (cache) {
    cache->lambda = std::move(lambda);
    cache->z = std::move(z);
    cache->output = out;
  }
  return out;
}

nn::Matrix combine_eval(const CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large) {
  check_inputs(params, p_small, p_large);
  if (params.kind == CombinationKind::Mean) return 0.5 * (p_small + p_large);
  const nn::Matrix lambda = lambda_of(params, p_small, p_large);
  return mix(params.kind, lambda, p_small, p_large, nullptr);
}

Distribution combine(const CombinationParams& params, const Distribution& p_small, const Distribution& p_large) {
  const nn::Matrix out = combine_eval(params, row_matrix(p_small), row_matrix(p_large));
  Distribution d;
  d.probs.assign(out.data(), out.data() + out.size());
  return d;
}

nn::Gradients combine_backward(CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large,
                               const CombineCache& cache, const nn::Matrix& grad_output) {
  if (params.kind == CombinationKind::Mean) return {};
  if (grad_output.rows() != cache.output.rows() || grad_output.cols() != cache.output.cols() ||
      cache.lambda.rows() != p_small.rows())
    throw Error(ErrorCode::CacheMismatch, "combine cache does not match gradient shape");

  const nn::Matrix diff = p_small - p_large;
  nn::Matrix grad_lambda;
  if (is_vector_kind(params.kind)) {
    // P_C = u / Z with u = lambda*P_S + (1-lambda)*P_L, Z = sum(u).
    const nn::Vector dot = (grad_output.array() * cache.output.array()).rowwise().sum();
    nn::Matrix grad_u = grad_output.colwise() - dot;
    grad_u.array().colwise() /= cache.z.array();
    grad_lambda = grad_u.cwiseProduct(diff);
  } else {
    grad_lambda = (grad_output.array() * diff.array()).rowwise().sum();
  }

  if (uses_network(params.kind)) return params.net.backward(cache.net_cache, grad_lambda);

  // Constant kinds: lambda = sigmoid(raw), shared by every row.
  const nn::Matrix slope = cache.lambda.array() * (1.0 - cache.lambda.array());
  const nn::Vector grad_raw = (grad_lambda.array() * slope.array()).colwise().sum().transpose();
  return {std::vector<double>(grad_raw.data(), grad_raw.data() + grad_raw.size())};
}

nn::Matrix lambda_of(const CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large) {
  if (params.kind == CombinationKind::Mean) throw Error(ErrorCode::NoLambda, "mean combination has no lambda");
  check_inputs(params, p_small, p_large);
  return eval_lambda(params, p_small, p_large);
}

std::vector<double> lambda_of(const CombinationParams& params, const Distribution& p_small,
                              const Distribution& p_large) {
  const nn::Matrix l = lambda_of(params, row_matrix(p_small), row_matrix(p_large));
  return std::vector<double>(l.data(), l.data() + l.size());
}

void CombinationParams::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  detail::BinaryWriter w(out);
  w.magic(kMagic);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u32(static_cast<std::uint32_t>(vocab_size));
  if (uses_network(kind)) {
    net.write(w);
  } else {
    w.u32(static_cast<std::uint32_t>(raw_lambda.size()));
    for (double x : raw_lambda) w.f64(x);
  }
  if (!w.ok()) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

CombinationParams CombinationParams::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open combination parameters " + path.string());
  detail::BinaryReader r(in, path.string());
  r.expect_magic(kMagic);
  CombinationParams p;
  const std::uint8_t tag = r.u8();
  if (tag > static_cast<std::uint8_t>(CombinationKind::FullVector))
    throw Error(ErrorCode::FormatError, path.string() + ": unknown combination kind tag");
  p.kind = static_cast<CombinationKind>(tag);
  p.vocab_size = r.u32();
  if (uses_network(p.kind)) {
    p.net = nn::Network::read(r);
    const std::size_t want_in = (p.kind == CombinationKind::EntropyScalar || p.kind == CombinationKind::EntropyVector)
                                    ? 2
                                    : 2 * p.vocab_size;
    const std::size_t want_out = is_vector_kind(p.kind) ? p.vocab_size : 1;
    if (p.net.input_dim() != want_in || p.net.output_dim() != want_out)
      throw Error(ErrorCode::FormatError, path.string() + ": network shape does not match kind");
  } else {
    const std::uint32_t n = r.u32();
    const std::size_t want = p.kind == CombinationKind::Mean ? 0 : (p.kind == CombinationKind::ConstantScalar ? 1 : p.vocab_size);
    if (n != want) throw Error(ErrorCode::FormatError, path.string() + ": raw lambda has wrong length");
    p.raw_lambda.resize(n);
    for (double& x : p.raw_lambda) x = r.f64();
  }
  return p;
}

}  // namespace fuselm
