#include "fuselm/fitting.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "fuselm/adam.hpp"
#include "fuselm/error.hpp"

namespace fuselm {
namespace {

constexpr double kProbFloor = 1e-12;

struct PositionRef {
  const DistCache* cache;
  std::size_t row;
};

}  // namespace

double default_learning_rate(CombinationKind kind) {
  return kind == CombinationKind::ConstantVector ? 1e-2 : 2e-3;
}

void FitConfig::validate() const {
  if (!(learning_rate() > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
  if (batch_size < 2) throw Error(ErrorCode::InvalidArgument, "batch_size must be at least 2");
  if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be at least 1");
  for (std::size_t h : hidden)
    if (h == 0) throw Error(ErrorCode::InvalidArgument, "hidden widths must be positive");
}

FitConfig FitConfig::from_json(const nlohmann::json& j) { return from_json(j, FitConfig{}); }

FitConfig FitConfig::from_json(const nlohmann::json& j, FitConfig base) {
  if (!j.is_object()) throw Error(ErrorCode::FormatError, "fit config must be a JSON object");
  try {
    if (j.contains("kind")) base.kind = parse_kind(j.at("kind").get<std::string>());
    if (j.contains("lr") && !j.at("lr").is_null()) base.lr = j.at("lr").get<double>();
    if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("epochs")) base.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("hidden")) base.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("fit config: ") + e.what());
  }
  base.validate();
  return base;
}

nlohmann::json FitConfig::to_json() const {
  return {{"kind", std::string(to_string(kind))}, {"lr", learning_rate()}, {"batch_size", batch_size},
          {"epochs", epochs},                     {"seed", seed},          {"hidden", hidden}};
}

nlohmann::json FitReport::to_json() const {
  nlohmann::json j;
  j["config"] = config.to_json();
  j["kind"] = std::string(to_string(params.kind));
  j["parameter_count"] = params.parameter_count();
  j["steps"] = steps;
  j["positions_seen"] = positions_seen;
  j["loss_trace"] = loss_trace;
  j["final_loss"] = loss_trace.empty() ? nlohmann::json(nullptr) : nlohmann::json(loss_trace.back());
  j["wall_seconds"] = wall_seconds;
  return j;
}

void FitReport::write_json(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << to_json().dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

NllResult nll_loss(const nn::Matrix& p_combined, std::span<const TokenId> targets) {
  const auto batch = static_cast<std::size_t>(p_combined.rows());
  if (targets.size() != batch) throw Error(ErrorCode::ShapeError, "one target per row required");
  if (batch == 0) throw Error(ErrorCode::ShapeError, "empty batch");
  NllResult r;
  r.grad = nn::Matrix::Zero(p_combined.rows(), p_combined.cols());
  const double inv_b = 1.0 / static_cast<double>(batch);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    if (targets[i] >= static_cast<std::size_t>(p_combined.cols()))
      throw Error(ErrorCode::VocabMismatch, "target id out of range");
    const auto row = static_cast<Eigen::Index>(i);
    const double p = p_combined(row, targets[i]);
    if (p > kProbFloor) {
      total -= std::log(p);
      r.grad(row, targets[i]) = -inv_b / p;
    } else {
      total -= std::log(kProbFloor);
    }
  }
  r.loss = total * inv_b;
  return r;
}

void gather_rows(const DistCache& cache, std::span<const std::size_t> rows, nn::Matrix& p_small, nn::Matrix& p_large) {
  const auto vocab = static_cast<Eigen::Index>(cache.vocab_size());
  p_small.resize(static_cast<Eigen::Index>(rows.size()), vocab);
  p_large.resize(static_cast<Eigen::Index>(rows.size()), vocab);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    cache.probs(ModelSide::Small, rows[i], std::span<double>(p_small.row(r).data(), cache.vocab_size()));
    cache.probs(ModelSide::Large, rows[i], std::span<double>(p_large.row(r).data(), cache.vocab_size()));
  }
}

FitReport fit(const DistCache& cache, const FitConfig& config, const DistCache* mixin) {
  config.validate();
  if (cache.empty()) throw Error(ErrorCode::EmptyCache, "cannot fit on an empty cache");
  if (mixin && mixin->vocab_size() != cache.vocab_size())
    throw Error(ErrorCode::VocabMismatch, "mixin cache vocabulary differs from the domain cache");

  const auto start = std::chrono::steady_clock::now();
  FitReport report;
  report.config = config;
  report.params = CombinationParams::make(config.kind, cache.vocab_size(), config.seed, config.hidden);
  if (config.kind == CombinationKind::Mean) return report;

  std::vector<PositionRef> positions;
  positions.reserve(cache.positions() + (mixin ? mixin->positions() : 0));
  if (mixin)
    for (std::size_t t = 0; t < mixin->positions(); ++t) positions.push_back({mixin, t});
  for (std::size_t t = 0; t < cache.positions(); ++t) positions.push_back({&cache, t});

  nn::AdamState adam;
  adam.config.lr = config.learning_rate();
  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  const auto vocab = static_cast<Eigen::Index>(cache.vocab_size());
  nn::Matrix p_small, p_large;
  std::vector<TokenId> targets;
  CombineCache combine_cache;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(positions.begin(), positions.end(), rng);
    for (std::size_t first = 0; first < positions.size(); first += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, positions.size() - first);
      if (count < 2) break;
      p_small.resize(static_cast<Eigen::Index>(count), vocab);
      p_large.resize(static_cast<Eigen::Index>(count), vocab);
      targets.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const PositionRef& pos = positions[first + i];
        const auto r = static_cast<Eigen::Index>(i);
        pos.cache->probs(ModelSide::Small, pos.row, std::span<double>(p_small.row(r).data(), cache.vocab_size()));
        pos.cache->probs(ModelSide::Large, pos.row, std::span<double>(p_large.row(r).data(), cache.vocab_size()));
        targets[i] = pos.cache->target(pos.row);
      }
      const nn::Matrix p_combined = combine(report.params, p_small, p_large, nn::Mode::Train, &combine_cache);
      const NllResult nll = nll_loss(p_combined, targets);
      const nn::Gradients grads = combine_backward(report.params, p_small, p_large, combine_cache, nll.grad);
      const auto params = report.params.parameters();
      nn::adam_step(params, grads, adam);
      report.loss_trace.push_back(nll.loss);
      report.positions_seen += count;
      ++report.steps;
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace fuselm
