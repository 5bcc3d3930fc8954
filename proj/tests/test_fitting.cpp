#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fuselm/eval.hpp"
#include "fuselm/fitting.hpp"
#include "support/combine_check.hpp"
#include "support/test_util.hpp"

using namespace fuselm;
using nn::Matrix;

namespace {

// Targets drawn from P_S on a `small_share` of positions and from P_L otherwise.
DistCache mixed_cache(std::size_t positions, std::size_t vocab, double small_share, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Matrix ps = fuselm::testing::random_distributions(rng, positions, vocab, 2.0);
  const Matrix pl = fuselm::testing::random_distributions(rng, positions, vocab, 2.0);
  DistCache cache(vocab);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t t = 0; t < positions; ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    const Matrix& src = unit(rng) < small_share ? ps : pl;
    std::discrete_distribution<TokenId> pick(src.row(r).data(), src.row(r).data() + vocab);
    cache.append(std::span<const double>(ps.row(r).data(), vocab), std::span<const double>(pl.row(r).data(), vocab),
                 pick(rng));
  }
  return cache;
}

double mean_nll(const DistCache& cache, const CombinationParams& p) {
  return std::log(perplexity(cache, p, {.threads = 1}).perplexity);
}

}  // namespace

TEST(NllLoss, HandValues) {
  Matrix p(2, 2);
  p << std::exp(-1.0), 1 - std::exp(-1.0), 0.5, 0.5;
  const TokenId first[] = {0, 0};
  EXPECT_NEAR(nll_loss(p.topRows(1), std::span<const TokenId>(first, 1)).loss, 1.0, 1e-12);

  Matrix one(1, 3);
  one << 0.0, 1.0, 0.0;
  const TokenId mid[] = {1};
  EXPECT_EQ(nll_loss(one, mid).loss, 0.0);

  Matrix two(2, 2);
  two << std::exp(-1.0), 0.0, 0.0, std::exp(-3.0);
  const TokenId diag[] = {0, 1};
  const auto r = nll_loss(two, diag);
  EXPECT_NEAR(r.loss, 2.0, 1e-12);
  EXPECT_NEAR(r.grad(1, 1), -0.5 / std::exp(-3.0), 1e-9);
  EXPECT_EQ(r.grad(0, 1), 0.0);
}

TEST(NllLoss, ZeroProbabilityIsFloored) {
  Matrix p(1, 2);
  p << 1.0, 0.0;
  const TokenId t[] = {1};
  EXPECT_NEAR(nll_loss(p, t).loss, -std::log(1e-12), 1e-9);
}

TEST(FitConfig, Defaults) {
  const FitConfig c;
  EXPECT_EQ(c.learning_rate(), 2e-3);
  EXPECT_EQ(c.batch_size, 1024u);
  EXPECT_EQ(c.epochs, 1u);
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{512, 512}));
  EXPECT_EQ(default_learning_rate(CombinationKind::ConstantVector), 1e-2);
  for (CombinationKind k : kAllKinds)
    if (k != CombinationKind::ConstantVector) {
      EXPECT_EQ(default_learning_rate(k), 2e-3);
    }
}

TEST(FitConfig, JsonRoundTripAndErrors) {
  const auto c = FitConfig::from_json({{"kind", "full-vector"}, {"lr", 0.5}, {"epochs", 3}, {"hidden", {4, 4}}});
  EXPECT_EQ(c.kind, CombinationKind::FullVector);
  EXPECT_EQ(c.learning_rate(), 0.5);
  EXPECT_EQ(c.batch_size, 1024u);
  const auto back = FitConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());

  FitConfig base;
  base.seed = 9;
  EXPECT_EQ(FitConfig::from_json(nlohmann::json::object(), base).seed, 9u);
  EXPECT_FUSELM_ERROR(FitConfig::from_json({{"batch_size", 1}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(FitConfig::from_json({{"lr", -1.0}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(FitConfig::from_json({{"kind", "bogus"}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(FitConfig::from_json({{"epochs", "two"}}), ErrorCode::FormatError);
  EXPECT_FUSELM_ERROR(FitConfig::from_json(nlohmann::json::array()), ErrorCode::FormatError);
}

TEST(Fit, MeanTakesNoSteps) {
  const auto cache = mixed_cache(50, 4, 0.5, 1);
  const auto r = fit(cache, {.kind = CombinationKind::Mean});
  EXPECT_EQ(r.steps, 0u);
  EXPECT_TRUE(r.loss_trace.empty());
  EXPECT_EQ(r.params.kind, CombinationKind::Mean);
}

TEST(Fit, LearnsToTrustTheBetterModel) {
  DistCache cache(2);
  for (int t = 0; t < 400; ++t) cache.append(std::vector<double>{0.9, 0.1}, std::vector<double>{0.1, 0.9}, 0);
  FitConfig c{.kind = CombinationKind::ConstantScalar, .lr = 0.05, .batch_size = 200, .epochs = 100};
  const auto r = fit(cache, c);
  EXPECT_EQ(r.steps, 200u);
  EXPECT_GT(lambda_of(r.params, Distribution{{0.9, 0.1}}, Distribution{{0.1, 0.9}})[0], 0.9);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
}

TEST(Fit, TrailingSingletonBatchIsSkipped) {
  const auto cache = mixed_cache(5, 3, 0.5, 2);
  const auto r = fit(cache, {.kind = CombinationKind::ConstantScalar, .batch_size = 2});
  EXPECT_EQ(r.steps, 2u);
  EXPECT_EQ(r.positions_seen, 4u);
  const auto whole = fit(cache, {.kind = CombinationKind::ConstantScalar, .batch_size = 5, .epochs = 3});
  EXPECT_EQ(whole.steps, 3u);
  EXPECT_EQ(whole.positions_seen, 15u);
}

TEST(Fit, DeterministicPerSeed) {
  const auto cache = mixed_cache(300, 6, 0.5, 3);
  FitConfig c{.kind = CombinationKind::EntropyVector, .batch_size = 64, .seed = 5, .hidden = {8}};
  const auto a = fit(cache, c);
  const auto b = fit(cache, c);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  const auto pa = a.params.net.parameters(), pb = b.params.net.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].begin(), pa[i].end(), pb[i].begin()));
  c.seed = 6;
  EXPECT_NE(fit(cache, c).loss_trace, a.loss_trace);
}

TEST(Fit, DoesNotMutateTheCache) {
  const auto cache = mixed_cache(100, 4, 0.5, 4);
  const DistCache copy = cache;
  fit(cache, {.kind = CombinationKind::FullVector, .batch_size = 32, .hidden = {4}});
  EXPECT_TRUE(cache == copy);
}

TEST(Fit, ConstantScalarIsNoWorseThanMean) {
  for (std::uint64_t seed : {10, 11, 12}) {
    const auto cache = mixed_cache(4000, 8, 0.8, seed);
    const auto fitted = fit(cache, {.kind = CombinationKind::ConstantScalar, .lr = 0.05, .batch_size = 400, .epochs = 5});
    const auto mean = CombinationParams::make(CombinationKind::Mean, 8, 0);
    EXPECT_LE(mean_nll(cache, fitted.params), mean_nll(cache, mean) + 1e-3);
  }
}

TEST(Fit, FullBatchLossIsNonIncreasing) {
  const auto cache = mixed_cache(2000, 8, 0.7, 13);
  for (CombinationKind k : {CombinationKind::ConstantScalar, CombinationKind::ConstantVector}) {
    const auto r = fit(cache, {.kind = k, .lr = 1e-3, .batch_size = 2000, .epochs = 60});
    ASSERT_EQ(r.loss_trace.size(), 60u);
    for (std::size_t i = 11; i < r.loss_trace.size(); ++i)
      EXPECT_LE(r.loss_trace[i], r.loss_trace[i - 1] + 1e-12) << to_string(k) << " step " << i;
  }
}

TEST(Fit, MixinPositionsAreUsed) {
  const auto domain = mixed_cache(100, 4, 0.9, 14);
  const auto general = mixed_cache(60, 4, 0.1, 15);
  const auto r = fit(domain, {.kind = CombinationKind::ConstantScalar, .batch_size = 40}, &general);
  EXPECT_EQ(r.positions_seen, 160u);
  EXPECT_EQ(r.steps, 4u);
  const auto wide = mixed_cache(10, 5, 0.5, 1);
  EXPECT_FUSELM_ERROR(fit(domain, {.kind = CombinationKind::ConstantScalar}, &wide), ErrorCode::VocabMismatch);
}

TEST(Fit, EmptyCacheIsRejected) {
  EXPECT_FUSELM_ERROR(fit(DistCache(4), {.kind = CombinationKind::ConstantScalar}), ErrorCode::EmptyCache);
}

TEST(Fit, ReportJson) {
  const auto cache = mixed_cache(50, 4, 0.5, 16);
  const auto r = fit(cache, {.kind = CombinationKind::ConstantScalar, .batch_size = 25});
  const auto j = r.to_json();
  EXPECT_EQ(j.at("kind"), "constant-scalar");
  EXPECT_EQ(j.at("steps"), 2);
  EXPECT_EQ(j.at("loss_trace").size(), 2u);
  EXPECT_EQ(j.at("config").at("lr"), 2e-3);
}
