#pragma once

// Perplexity, the max-prob oracle, and the lambda-vs-log-prob-difference analysis.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fuselm/combinator.hpp"
#include "fuselm/dist_cache.hpp"

namespace fuselm {

struct EvalResult {
  double perplexity = 0.0;
  std::size_t token_count = 0;
  double total_nll = 0.0;               // natural log
  std::vector<double> token_log_probs;  // filled when retention is requested
};

struct EvalOptions {
  bool keep_token_log_probs = false;
  /// 0 selects std::thread::hardware_concurrency().
  std::size_t threads = 0;
  std::size_t batch_size = 1024;
};

/// Combined model scored from a cache (eval-mode networks).
EvalResult perplexity(const DistCache& cache, const CombinationParams& params, const EvalOptions& options = {});
/// One of the two cached models on its own.
EvalResult perplexity(const DistCache& cache, ModelSide side, const EvalOptions& options = {});
/// Streams a model over raw sequences (position 0 of each sequence is not scored).
EvalResult perplexity(const LanguageModel& lm, const std::vector<TokenSequence>& sequences);
/// Streams both models and combines on the fly.
EvalResult perplexity(const LanguageModel& small, const LanguageModel& large, const CombinationParams& params,
                      const std::vector<TokenSequence>& sequences);

/// Scores every position with max(P_S(target), P_L(target)); ties resolve to the large model.
EvalResult oracle_perplexity(const DistCache& cache, const EvalOptions& options = {});

/// Average ranks, ties sharing the mean of their positions (1-based).
std::vector<double> average_ranks(std::span<const double> values);
/// Pearson correlation of average ranks.
double spearman(std::span<const double> a, std::span<const double> b);

struct TokenAnalysis {
  std::vector<TokenId> targets;
  std::vector<double> log_p_small;
  std::vector<double> log_p_large;
  std::vector<double> lambda;
  std::vector<double> diff;  // ln P_S - ln P_L at the target
  double rho = 0.0;
};

/// Only for kinds producing one input-dependent lambda per position (entropy-scalar, full-scalar).
TokenAnalysis analyze(const DistCache& cache, const CombinationParams& params);

/// Self-contained HTML with two aligned token rows: one colored by `diffs` (green: small model
/// better), one by `lambdas` - 0.5 (green: more weight on the small model).
std::string heatmap_html(std::span<const std::string> tokens, std::span<const double> diffs,
                         std::span<const double> lambdas, const std::string& title = "Token heatmap");
void write_heatmap(std::span<const std::string> tokens, std::span<const double> diffs,
                   std::span<const double> lambdas, const std::filesystem::path& out);

/// Color class used by the heatmap: "z" for zero, otherwise "g1".."g5" / "r1".."r5".
std::string heat_class(double value, std::span<const double> thresholds);

}  // namespace fuselm
