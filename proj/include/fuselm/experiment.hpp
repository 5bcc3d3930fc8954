#pragma once

// Spec-driven sweeps: the main comparison, fit-set size, expert vs. small generalist, mixin
// fitting, expert-quality and the lambda/log-prob-difference correlation.

#include <filesystem>
#include <iosfwd>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "fuselm/core.hpp"
#include "fuselm/fitting.hpp"
#include "fuselm/ngram.hpp"

namespace fuselm {

struct NGramSpec {
  NGramConfig config;
  /// Leading fraction of the train split used for counting.
  double train_fraction = 1.0;
};

struct ExperimentSpec {
  std::filesystem::path domain_corpus;
  std::filesystem::path general_corpus;
  VocabMode vocab_mode = VocabMode::Byte;
  std::size_t vocab_max_size = 50000;
  std::size_t seq_len = 1024;
  std::size_t n_fit = 1000;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;

  NGramSpec expert{{3, 0.01, {}}, 1.0};
  NGramSpec generalist{{5, 0.01, {}}, 1.0};
  NGramSpec small_generalist{{5, 0.01, {}}, 0.1};  // generalist recipe on a tenth of the data

  std::vector<CombinationKind> kinds{std::begin(kAllKinds), std::end(kAllKinds)};
  FitConfig fit;  // kind is overwritten per row
  std::vector<std::string> experiments{"main"};
  std::vector<std::size_t> fit_sizes{100, 500, 1000};
  std::vector<double> expert_fractions{0.01, 0.1, 1.0};
  std::size_t threads = 0;

  /// Relative corpus paths resolve against `base_dir`. Errors name the offending key.
  static ExperimentSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static ExperimentSpec load(const std::filesystem::path& path);
};

inline constexpr const char* kExperimentNames[] = {"main",   "fit_size",       "expert_vs_generalist",
                                                   "mixin",  "expert_quality", "spearman"};

struct ResultRecord {
  std::string table;
  std::string row;
  std::string condition;
  std::optional<double> domain_ppl;
  std::optional<double> general_ppl;
  std::optional<double> rho_domain;
  std::optional<double> rho_general;
};

struct ExperimentResults {
  std::vector<ResultRecord> records;
  std::vector<std::string> tables;  // aligned plain-text renderings
  double wall_seconds = 0.0;

  const ResultRecord* find(const std::string& table, const std::string& row, const std::string& condition) const;
  nlohmann::json to_json() const;
  std::string text() const;
  /// Writes results.json and results.txt under `out_dir`.
  void write(const std::filesystem::path& out_dir) const;
};

ExperimentResults run_experiment(const ExperimentSpec& spec, std::ostream* log = nullptr);

}  // namespace fuselm
