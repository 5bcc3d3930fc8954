#pragma once

// Per-position (P_S, P_L, target) triples. Fitting and cached evaluation touch the language
// models only through this file.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fuselm/language_model.hpp"

namespace fuselm {

/// Which side of a cache row to read.
enum class ModelSide { Small, Large };

class DistCache {
 public:
  DistCache() = default;
  explicit DistCache(std::size_t vocab_size) : vocab_size_(vocab_size) {}

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t positions() const { return targets_.size(); }
  bool empty() const { return targets_.empty(); }

  /// Stores natural-log probabilities rounded to f32. Rows must sum to 1 within 1e-5.
  void append(std::span<const double> p_small, std::span<const double> p_large, TokenId target);
  /// Appends pre-rounded log rows as they are (used by the reader and by cache slicing).
  void append_log(std::span<const float> log_small, std::span<const float> log_large, TokenId target);

  TokenId target(std::size_t t) const { return targets_[t]; }
  const std::vector<TokenId>& targets() const { return targets_; }
  std::span<const float> log_row(ModelSide side, std::size_t t) const;

  /// exp of the stored log row, in double.
  void probs(ModelSide side, std::size_t t, std::span<double> out) const;
  double prob_of_target(ModelSide side, std::size_t t) const;

  const std::string& provenance() const { return provenance_; }
  void set_provenance(std::string text) { provenance_ = std::move(text); }

  void reserve(std::size_t positions);

  void save(const std::filesystem::path& path) const;
  static DistCache load(const std::filesystem::path& path);

  /// Bitwise equality of all stored tensors and metadata.
  friend bool operator==(const DistCache& a, const DistCache& b);

 private:
  std::size_t vocab_size_ = 0;
  std::vector<float> log_small_;
  std::vector<float> log_large_;
  std::vector<TokenId> targets_;
  std::string provenance_;
};

/// Rows [first, first + count) of `cache` as a new cache.
DistCache slice(const DistCache& cache, std::size_t first, std::size_t count);

struct DumpOptions {
  /// Contexts per `next_dists` call (one HTTP request for remote models).
  std::size_t batch_size = 256;
  std::string provenance;
};

/// For every sequence and every position t >= 1, scores the prefix x[0..t) with both models.
/// Writes the cache to `path` unless it is empty.
DistCache dump_cache(const LanguageModel& small, const LanguageModel& large,
                     const std::vector<TokenSequence>& sequences, const std::filesystem::path& path,
                     const DumpOptions& options = {});

}  // namespace fuselm
