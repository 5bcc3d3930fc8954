#pragma once

// Fits combination parameters on cached distributions by minimizing the token-level negative
// log-likelihood of P_C at the observed next token. The language models are never touched.

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "fuselm/combinator.hpp"
#include "fuselm/dist_cache.hpp"

namespace fuselm {

/// 2e-3 for every kind except constant-vector, which uses 1e-2.
double default_learning_rate(CombinationKind kind);

struct FitConfig {
  CombinationKind kind = CombinationKind::EntropyScalar;
  std::optional<double> lr;  // unset: default_learning_rate(kind)
  std::size_t batch_size = 1024;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden = {512, 512};

  double learning_rate() const { return lr.value_or(default_learning_rate(kind)); }
  void validate() const;

  /// Flat object; absent keys keep their defaults.
  static FitConfig from_json(const nlohmann::json& j);
  static FitConfig from_json(const nlohmann::json& j, FitConfig base);
  nlohmann::json to_json() const;
};

struct FitReport {
  CombinationParams params;
  std::vector<double> loss_trace;  // one entry per optimizer step
  std::size_t positions_seen = 0;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
  FitConfig config;

  nlohmann::json to_json() const;
  void write_json(const std::filesystem::path& path) const;
};

struct NllResult {
  double loss = 0.0;
  nn::Matrix grad;  // dLoss/dP_C, nonzero only at target entries
};

/// loss = -(1/B) sum_i ln max(P_C[i, target_i], 1e-12).
NllResult nll_loss(const nn::Matrix& p_combined, std::span<const TokenId> targets);

/// Minibatch Adam over `cache` (and `mixin` positions, concatenated first and shuffled jointly)
/// for exactly `config.epochs` passes. A trailing batch with fewer than 2 positions is skipped.
FitReport fit(const DistCache& cache, const FitConfig& config, const DistCache* mixin = nullptr);

/// Gathers cache rows into dense probability matrices.
void gather_rows(const DistCache& cache, std::span<const std::size_t> rows, nn::Matrix& p_small, nn::Matrix& p_large);

}  // namespace fuselm
