#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "fuselm/dist_cache.hpp"
#include "fuselm/ngram.hpp"
#include "fuselm/remote.hpp"
#include "support/loopback.hpp"
#include "support/test_util.hpp"

using namespace fuselm;
using fuselm::testing::TempDir;
using nlohmann::json;

namespace {

constexpr TokenId kA = 0, kB = 1, kToyBos = 2;

NGramLM toy_bigram() {
  return NGramLM::train({{kA, kB, kA, kB}}, 2, kToyBos, {2, 1.0, {0.0, 1.0}});
}

// Independent n-gram oracle: counts every k-gram with bos padding in std::map and evaluates
// the interpolated add-alpha formula directly.
struct NaiveNGram {
  std::size_t order, vocab;
  TokenId bos;
  double alpha;
  std::vector<double> interp;
  std::map<std::vector<TokenId>, std::map<TokenId, double>> counts;

  NaiveNGram(const std::vector<TokenSequence>& corpus, std::size_t n, std::size_t v, TokenId b, double a,
             std::vector<double> w)
      : order(n), vocab(v), bos(b), alpha(a), interp(std::move(w)) {
    for (const auto& seq : corpus) {
      std::vector<TokenId> padded(n - 1, bos);
      padded.insert(padded.end(), seq.begin(), seq.end());
      for (std::size_t i = n - 1; i < padded.size(); ++i)
        for (std::size_t k = 0; k < n; ++k)
          counts[std::vector<TokenId>(padded.begin() + static_cast<long>(i - k), padded.begin() + static_cast<long>(i))]
                [padded[i]] += 1.0;
    }
  }

  std::vector<double> dist(const TokenSequence& context) const {
    std::vector<TokenId> padded(order - 1, bos);
    padded.insert(padded.end(), context.begin(), context.end());
    std::vector<double> p(vocab, 0.0);
    for (std::size_t k = 0; k < order; ++k) {
      const std::vector<TokenId> ctx(padded.end() - static_cast<long>(k), padded.end());
      double total = 0.0;
      const std::map<TokenId, double>* row = nullptr;
      if (auto it = counts.find(ctx); it != counts.end()) {
        row = &it->second;
        for (const auto& [tok, c] : *row) total += c;
      }
      for (std::size_t v = 0; v < vocab; ++v) {
        double c = 0.0;
        if (row)
          if (auto jt = row->find(static_cast<TokenId>(v)); jt != row->end()) c = jt->second;
        p[v] += interp[k] * (c + alpha) / (total + alpha * static_cast<double>(vocab));
      }
    }
    return p;
  }
};

std::vector<TokenSequence> random_corpus(std::mt19937_64& rng, std::size_t n_seqs, std::size_t len, std::size_t vocab) {
  std::vector<TokenSequence> out(n_seqs);
  for (auto& s : out) {
    s.resize(len);
    // Skewed toward low ids so some contexts repeat.
    for (auto& t : s) t = static_cast<TokenId>(std::min<std::uint64_t>(rng() % vocab, rng() % vocab));
  }
  return out;
}

}  // namespace

TEST(NGram, ToyBigramCounts) {
  const auto lm = toy_bigram();
  const TokenSequence a{kA};
  EXPECT_EQ(lm.count(a, kB), 2u);
  EXPECT_EQ(lm.count(a, kA), 0u);
  EXPECT_EQ(lm.context_total(a), 2u);
}

TEST(NGram, ToyBigramDistribution) {
  const auto d = toy_bigram().next_dist(TokenSequence{kA});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_DOUBLE_EQ(d[kA], 0.25);
  EXPECT_DOUBLE_EQ(d[kB], 0.75);
}

TEST(NGram, UnigramIgnoresContext) {
  std::mt19937_64 rng(1);
  const auto corpus = random_corpus(rng, 5, 30, 6);
  const auto lm = NGramLM::train(corpus, 6, 6, {1, 0.5, {}});
  const auto base = lm.next_dist(TokenSequence{});
  for (const TokenSequence& ctx : {TokenSequence{1}, TokenSequence{3, 2, 5}, TokenSequence{0, 0}})
    EXPECT_EQ(lm.next_dist(ctx).probs, base.probs);
}

TEST(NGram, LargeAlphaApproachesUniform) {
  const auto lm = NGramLM::train({{kA, kB, kA, kB}}, 2, kToyBos, {2, 1e9, {}});
  const auto d = lm.next_dist(TokenSequence{kA});
  EXPECT_NEAR(d[kA], 0.5, 1e-8);
  EXPECT_NEAR(d[kB], 0.5, 1e-8);
}

TEST(NGram, UnseenContextSingleOrderIsUniform) {
  const auto lm = NGramLM::train({{1, 2, 3, 1, 2}}, 5, 0, {2, 0.1, {0.0, 1.0}});
  const auto d = lm.next_dist(TokenSequence{4});
  for (double p : d.probs) EXPECT_DOUBLE_EQ(p, 0.2);
}

TEST(NGram, PureAndRepeatable) {
  std::mt19937_64 rng(2);
  const auto lm = NGramLM::train(random_corpus(rng, 10, 40, 7), 7, 7, {3, 0.01, {}});
  const TokenSequence ctx{1, 2};
  EXPECT_EQ(lm.next_dist(ctx).probs, lm.next_dist(ctx).probs);
}

TEST(NGram, MatchesNaiveOracleOnRandomCorpora) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t vocab = 3 + rng() % 6;
    const std::size_t order = 1 + rng() % 4;
    const double alpha = 0.01 + static_cast<double>(rng() % 100) / 50.0;
    std::vector<double> w(order);
    double sum = 0;
    for (auto& x : w) sum += (x = 0.1 + static_cast<double>(rng() % 10));
    for (auto& x : w) x /= sum;
    const auto corpus = random_corpus(rng, 1 + rng() % 5, 1 + rng() % 30, vocab);
    const auto bos = static_cast<TokenId>(vocab);  // outside the toy vocabulary
    const auto lm = NGramLM::train(corpus, vocab, bos, {order, alpha, w});
    const NaiveNGram oracle(corpus, order, vocab, bos, alpha, w);
    for (int q = 0; q < 20; ++q) {
      TokenSequence ctx(rng() % 6);
      for (auto& t : ctx) t = static_cast<TokenId>(rng() % vocab);
      const auto got = lm.next_dist(ctx);
      const auto want = oracle.dist(ctx);
      double total = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) {
        EXPECT_NEAR(got[v], want[v], 1e-12);
        EXPECT_GT(got[v], 0.0);
        total += got[v];
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(NGram, OneHotInterpEqualsPureOrderModel) {
  std::mt19937_64 rng(4);
  const auto corpus = random_corpus(rng, 4, 50, 5);
  const auto mixed = NGramLM::train(corpus, 5, 5, {3, 0.2, {}});
  const auto pure2 = mixed.with_interp({0.0, 1.0, 0.0});
  const auto bigram = NGramLM::train(corpus, 5, 5, {2, 0.2, {0.0, 1.0}});
  for (const TokenSequence& ctx : {TokenSequence{}, TokenSequence{1}, TokenSequence{2, 3}, TokenSequence{4, 4, 0}})
    EXPECT_EQ(pure2.next_dist(ctx).probs, bigram.next_dist(ctx).probs);
}

TEST(NGram, Errors) {
  EXPECT_FUSELM_ERROR(NGramLM::train({}, 4, 0, {2, 0.1, {}}), ErrorCode::EmptyCorpus);
  EXPECT_FUSELM_ERROR(NGramLM::train({{}, {}}, 4, 0, {2, 0.1, {}}), ErrorCode::EmptyCorpus);
  EXPECT_FUSELM_ERROR(NGramLM::train({{1}}, 4, 0, {0, 0.1, {}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(NGramLM::train({{1}}, 4, 0, {2, 0.0, {}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(NGramLM::train({{1}}, 4, 0, {2, 0.1, {0.5, 0.6}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(NGramLM::train({{1}}, 4, 0, {2, 0.1, {1.0}}), ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(NGramLM::train({{7}}, 4, 0, {2, 0.1, {}}), ErrorCode::VocabMismatch);
}

TEST(NGram, SaveLoadRoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(5);
  const auto lm = NGramLM::train(random_corpus(rng, 6, 40, 9), 9, 9, {3, 0.05, {0.2, 0.3, 0.5}});
  lm.save(dir / "m.ngm");
  const auto back = NGramLM::load(dir / "m.ngm");
  EXPECT_EQ(back.order(), 3u);
  EXPECT_EQ(back.interp(), lm.interp());
  for (const TokenSequence& ctx : {TokenSequence{}, TokenSequence{1, 2}, TokenSequence{8, 8, 8}})
    EXPECT_EQ(back.next_dist(ctx).probs, lm.next_dist(ctx).probs);
  std::ofstream(dir / "junk.ngm") << "not a model";
  EXPECT_FUSELM_ERROR(NGramLM::load(dir / "junk.ngm"), ErrorCode::FormatError);
}

TEST(DistCache, PositionZeroExcluded) {
  const auto lm = toy_bigram();
  const auto c = dump_cache(lm, lm, {{kA, kB, kA}}, {});
  ASSERT_EQ(c.positions(), 2u);
  EXPECT_EQ(c.target(0), kB);
  EXPECT_EQ(c.target(1), kA);
  EXPECT_NEAR(c.prob_of_target(ModelSide::Small, 0), 0.75, 1e-7);
}

TEST(DistCache, FileRoundTripIsBitExact) {
  TempDir dir;
  std::mt19937_64 rng(6);
  const auto corpus = random_corpus(rng, 8, 20, 11);
  const auto small = NGramLM::train(corpus, 11, 11, {2, 0.1, {}});
  const auto large = NGramLM::train(corpus, 11, 11, {4, 0.01, {}});
  DumpOptions opts;
  opts.batch_size = 7;
  opts.provenance = "unit test";
  const auto written = dump_cache(small, large, corpus, dir / "c.pdc", opts);
  const auto read = DistCache::load(dir / "c.pdc");
  EXPECT_TRUE(read == written);
  EXPECT_EQ(read.provenance(), "unit test");
  EXPECT_EQ(read.positions(), 8u * 19u);
  std::vector<double> row(11);
  read.probs(ModelSide::Large, 5, row);
  double s = 0;
  for (double p : row) s += p;
  EXPECT_NEAR(s, 1.0, 1e-5);
}

TEST(DistCache, HeaderLayout) {
  TempDir dir;
  DistCache c(2);
  c.append(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}, 1);
  c.save(dir / "c.pdc");
  std::ifstream in(dir / "c.pdc", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "PDC1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
  // header 16 + record (4 + 2*2*4) + provenance length 8
  EXPECT_EQ(bytes.size(), 16u + 20u + 8u);
}

TEST(DistCache, RejectsBadRowsAndFiles) {
  TempDir dir;
  DistCache c(2);
  EXPECT_FUSELM_ERROR(c.append(std::vector<double>{0.5, 0.6}, std::vector<double>{0.5, 0.5}, 0),
                      ErrorCode::InvalidArgument);
  EXPECT_FUSELM_ERROR(c.append(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}, 0), ErrorCode::VocabMismatch);
  EXPECT_FUSELM_ERROR(c.append(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, 2),
                      ErrorCode::VocabMismatch);
  c.append(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, 0);
  c.save(dir / "ok.pdc");
  std::string bytes;
  {
    std::ifstream in(dir / "ok.pdc", std::ios::binary);
    bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  std::ofstream(dir / "trunc.pdc", std::ios::binary) << bytes.substr(0, bytes.size() - 12);
  EXPECT_FUSELM_ERROR(DistCache::load(dir / "trunc.pdc"), ErrorCode::FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.pdc", std::ios::binary) << bad;
  EXPECT_FUSELM_ERROR(DistCache::load(dir / "magic.pdc"), ErrorCode::FormatError);
  EXPECT_FUSELM_ERROR(DistCache::load(dir / "absent.pdc"), ErrorCode::IoError);
}

TEST(DistCache, VocabMismatchBetweenModels) {
  const auto a = NGramLM::train({{0, 1, 2}}, 3, 0, {1, 0.1, {}});
  const auto b = NGramLM::train({{0, 1, 2}}, 4, 0, {1, 0.1, {}});
  EXPECT_FUSELM_ERROR(dump_cache(a, b, {{0, 1, 2}}, {}), ErrorCode::VocabMismatch);
}

TEST(DistCache, Slice) {
  const auto lm = toy_bigram();
  const auto c = dump_cache(lm, lm, {{kA, kB, kA, kB, kA}}, {});
  const auto s = slice(c, 1, 2);
  ASSERT_EQ(s.positions(), 2u);
  EXPECT_EQ(s.target(0), c.target(1));
  EXPECT_EQ(s.log_row(ModelSide::Small, 1)[0], c.log_row(ModelSide::Small, 2)[0]);
  EXPECT_FUSELM_ERROR(slice(c, 3, 5), ErrorCode::ShapeError);
}

// ---- wire protocol client -------------------------------------------------------------

TEST(Remote, LocalAndLoopbackCachesAgree) {
  std::mt19937_64 rng(7);
  const auto corpus = random_corpus(rng, 6, 25, 13);
  const auto small = NGramLM::train(corpus, 13, 13, {2, 0.05, {}});
  const auto large = NGramLM::train(corpus, 13, 13, {4, 0.01, {}});
  const auto server = fuselm::testing::serve_model(large);
  const RemoteLM remote(server->url());
  EXPECT_EQ(remote.vocab_size(), 13u);
  DumpOptions opts;
  opts.batch_size = 16;
  const auto local = dump_cache(small, large, corpus, {}, opts);
  const auto via_wire = dump_cache(small, remote, corpus, {}, opts);
  ASSERT_EQ(local.positions(), via_wire.positions());
  std::vector<double> a(13), b(13);
  for (std::size_t t = 0; t < local.positions(); ++t) {
    local.probs(ModelSide::Large, t, a);
    via_wire.probs(ModelSide::Large, t, b);
    for (std::size_t v = 0; v < 13; ++v) ASSERT_NEAR(a[v], b[v], 1e-6);
  }
}

TEST(Remote, BatchPreservesOrder) {
  std::mt19937_64 rng(8);
  const auto lm = NGramLM::train(random_corpus(rng, 4, 30, 6), 6, 6, {3, 0.1, {}});
  const auto server = fuselm::testing::serve_model(lm);
  const std::vector<TokenSequence> ctxs{{1}, {2, 3}, {5, 5, 0}};
  const std::vector<ContextView> views(ctxs.begin(), ctxs.end());
  const auto got = remote_next_dist(server->url(), views, 6);
  ASSERT_EQ(got.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto want = lm.next_dist(ctxs[i]);
    for (std::size_t v = 0; v < 6; ++v) EXPECT_NEAR(got[i][v], want[v], 1e-12);
  }
  EXPECT_EQ(server->requests(), 1u);
}

TEST(Remote, UniformStub) {
  const double lp = -std::log(5.0);
  const auto server = fuselm::testing::serve_fixed_row(5, json::array({lp, lp, lp, lp, lp}));
  const RemoteLM remote(server->url());
  const auto d = remote.next_dist(TokenSequence{1, 2});
  for (double p : d.probs) EXPECT_NEAR(p, 0.2, 1e-12);
}

TEST(Remote, OneHotLogprobsAreRenormalized) {
  const auto server = fuselm::testing::serve_fixed_row(4, json::array({-1e-9, -40.0, nullptr, -45.0}));
  const auto d = RemoteLM(server->url()).next_dist(TokenSequence{});
  double total = 0;
  for (double p : d.probs) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(d[0], 1.0, 1e-15 + 2 * std::exp(-40.0));
  EXPECT_EQ(d[2], 0.0);
  EXPECT_NEAR(d[1] / d[3], std::exp(5.0), 1e-6);
}

TEST(Remote, WrongRowLengthIsVocabMismatch) {
  const auto server = fuselm::testing::serve_fixed_row(4, json::array({-1.0, -1.0, -1.0}));
  const RemoteLM remote(server->url());
  EXPECT_FUSELM_ERROR(remote.next_dist(TokenSequence{}), ErrorCode::VocabMismatch);
}

TEST(Remote, ResponseVocabDiffersFromMeta) {
  const auto server = fuselm::testing::serve_raw(
      4, 200, json{{"vocab_size", 3}, {"logprobs", json::array({json::array({-1.0, -1.0, -1.0})})}}.dump());
  EXPECT_FUSELM_ERROR(RemoteLM(server->url()).next_dist(TokenSequence{}), ErrorCode::VocabMismatch);
}

TEST(Remote, MalformedPayloadIsProtocolError) {
  const auto server = fuselm::testing::serve_raw(3, 200, "{not json");
  EXPECT_FUSELM_ERROR(RemoteLM(server->url()).next_dist(TokenSequence{}), ErrorCode::ProtocolError);
  const auto no_rows = fuselm::testing::serve_raw(3, 200, R"({"vocab_size":3})");
  EXPECT_FUSELM_ERROR(RemoteLM(no_rows->url()).next_dist(TokenSequence{}), ErrorCode::ProtocolError);
  const auto strings = fuselm::testing::serve_raw(3, 200, R"({"vocab_size":3,"logprobs":[["a","b","c"]]})");
  EXPECT_FUSELM_ERROR(RemoteLM(strings->url()).next_dist(TokenSequence{}), ErrorCode::ProtocolError);
  const auto server_error = fuselm::testing::serve_raw(3, 500, R"({"error":"context_overflow"})");
  EXPECT_FUSELM_ERROR(RemoteLM(server_error->url()).next_dist(TokenSequence{}), ErrorCode::ProtocolError);
}

TEST(Remote, UnavailableServer) {
  RemoteOptions opts;
  opts.connect_timeout = std::chrono::milliseconds(500);
  const std::string url = "http://127.0.0.1:" + std::to_string(fuselm::testing::unused_port());
  EXPECT_FUSELM_ERROR(RemoteLM(url, opts), ErrorCode::RemoteUnavailable);
  const auto busy = fuselm::testing::serve_raw(3, 503, "overloaded");
  EXPECT_FUSELM_ERROR(RemoteLM(busy->url()).next_dist(TokenSequence{}), ErrorCode::RemoteUnavailable);
}

TEST(Remote, BadEndpoint) {
  EXPECT_FUSELM_ERROR(RemoteLM("localhost:80"), ErrorCode::InvalidArgument);
}

TEST(Remote, NormalizeLogprobs) {
  const auto d = normalize_logprobs(std::vector<double>{std::log(2.0), std::log(6.0)});
  EXPECT_NEAR(d[0], 0.25, 1e-15);
  EXPECT_NEAR(d[1], 0.75, 1e-15);
  EXPECT_FUSELM_ERROR(normalize_logprobs(std::vector<double>{-INFINITY, -INFINITY}), ErrorCode::ProtocolError);
  EXPECT_FUSELM_ERROR(normalize_logprobs(std::vector<double>{NAN, 0.0}), ErrorCode::ProtocolError);
}
