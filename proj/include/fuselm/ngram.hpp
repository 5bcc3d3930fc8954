#pragma once

// Interpolated add-alpha n-gram model. Serves as the desk-scale stand-in for both the
// small domain expert and the large generalist.

#include <cstdint>
#include <filesystem>
#include <unordered_map>
#include <vector>

#include "fuselm/language_model.hpp"

namespace fuselm {

struct NGramConfig {
  std::size_t order = 3;
  double alpha = 0.01;
  /// Weight per order, lowest order first. Empty selects `default_interp(order)`.
  std::vector<double> interp;
};

/// Weights proportional to the order index (1, 2, ..., n), normalized.
std::vector<double> default_interp(std::size_t order);

class NGramLM final : public LanguageModel {
 public:
  /// `bos_id` pads contexts at sequence starts. It may lie outside [0, vocab_size) when the
  /// caller's toy vocabulary has no reserved ids.
  static NGramLM train(const std::vector<TokenSequence>& corpus, std::size_t vocab_size, TokenId bos_id,
                       NGramConfig config);

  std::size_t vocab_size() const override { return vocab_size_; }
  std::string describe() const override;
  std::vector<Distribution> next_dists(std::span<const ContextView> contexts) const override;

  /// Writes the interpolated distribution for `context` into `out` (size vocab_size).
  void next_dist_into(ContextView context, std::span<double> out) const;

  std::size_t order() const { return config_.order; }
  double alpha() const { return config_.alpha; }
  const std::vector<double>& interp() const { return config_.interp; }
  TokenId bos_id() const { return bos_id_; }

  /// Raw count of `token` after `context`, at order context.size() + 1.
  std::uint64_t count(ContextView context, TokenId token) const;
  std::uint64_t context_total(ContextView context) const;

  /// Same counts, different interpolation weights.
  NGramLM with_interp(std::vector<double> interp) const;

  void save(const std::filesystem::path& path) const;
  static NGramLM load(const std::filesystem::path& path);

 private:
  struct ContextEntry {
    std::uint64_t total = 0;
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
  };

  struct OrderTable {
    std::unordered_map<std::uint64_t, ContextEntry> contexts;
    std::vector<TokenId> tokens;
    std::vector<std::uint32_t> counts;
  };

  NGramLM() = default;
  static void validate(const NGramConfig& config);
  std::uint64_t context_key(ContextView context, std::size_t length) const;
  const ContextEntry* find(std::size_t order_index, ContextView context) const;

  NGramConfig config_;
  std::size_t vocab_size_ = 0;
  TokenId bos_id_ = 0;
  unsigned key_bits_ = 1;
  std::vector<OrderTable> tables_;  // tables_[k] holds contexts of length k
};

}  // namespace fuselm
