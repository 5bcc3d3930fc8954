#pragma once

// The seven ways of fusing the small expert's distribution P_S with the large model's P_L.
// Throughout, lambda is the weight on the SMALL model: P_C = lambda * P_S + (1 - lambda) * P_L
// (vector kinds renormalize the token-wise mixture).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fuselm/language_model.hpp"
#include "fuselm/tinynn.hpp"

namespace fuselm {

enum class CombinationKind : std::uint8_t {
  Mean = 0,
  ConstantScalar = 1,
  ConstantVector = 2,
  EntropyScalar = 3,
  EntropyVector = 4,
  FullScalar = 5,
  FullVector = 6,
};

inline constexpr CombinationKind kAllKinds[] = {
    CombinationKind::Mean,          CombinationKind::ConstantScalar, CombinationKind::ConstantVector,
    CombinationKind::EntropyScalar, CombinationKind::EntropyVector,  CombinationKind::FullScalar,
    CombinationKind::FullVector,
};

CombinationKind parse_kind(std::string_view name);
std::string_view to_string(CombinationKind kind);

/// True for kinds whose lambda is one number per position (mean excluded).
bool is_scalar_kind(CombinationKind kind);
bool is_vector_kind(CombinationKind kind);
bool uses_network(CombinationKind kind);

struct CombinationParams {
  CombinationKind kind = CombinationKind::Mean;
  std::size_t vocab_size = 0;
  std::vector<double> raw_lambda;  // pre-sigmoid; constant kinds only
  nn::Network net;                 // entropy/full kinds only

  /// Fresh parameters: raw lambda 0 (lambda = 0.5) for constant kinds, a seeded
  /// BatchNorm -> hidden ReLU layers -> sigmoid network for entropy/full kinds.
  static CombinationParams make(CombinationKind kind, std::size_t vocab_size, std::uint64_t seed,
                                const std::vector<std::size_t>& hidden = {512, 512});

  std::vector<std::span<double>> parameters();
  std::size_t parameter_count() const;

  void save(const std::filesystem::path& path) const;
  static CombinationParams load(const std::filesystem::path& path);
};

/// Shannon entropy in nats, with 0 ln 0 = 0.
double entropy(std::span<const double> probs);

/// Network input for a batch of (P_S, P_L) rows: the two entropies or the 2|V| concatenation.
nn::Matrix combination_features(CombinationKind kind, const nn::Matrix& p_small, const nn::Matrix& p_large);

struct CombineCache {
  nn::ForwardCache net_cache;
  nn::Matrix lambda;  // B x 1 or B x |V|
  nn::Vector z;       // vector kinds: normalizer per row
  nn::Matrix output;  // P_C
};

/// Batched combination. Rows of `p_small` and `p_large` are distributions. Train mode is only
/// meaningful for network kinds (batch statistics, running-stat updates); fill `cache` to
/// call `combine_backward` afterwards.
nn::Matrix combine(CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large, nn::Mode mode,
                   CombineCache* cache = nullptr);
/// Eval-mode combination; does not mutate `params`.
nn::Matrix combine_eval(const CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large);
Distribution combine(const CombinationParams& params, const Distribution& p_small, const Distribution& p_large);

/// Gradients of the loss w.r.t. `params.parameters()` given dLoss/dP_C.
nn::Gradients combine_backward(CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large,
                               const CombineCache& cache, const nn::Matrix& grad_output);

/// Eval-mode weight on the small model, B x 1 or B x |V|. Mean has none (NoLambda).
nn::Matrix lambda_of(const CombinationParams& params, const nn::Matrix& p_small, const nn::Matrix& p_large);
std::vector<double> lambda_of(const CombinationParams& params, const Distribution& p_small,
                              const Distribution& p_large);

}  // namespace fuselm
