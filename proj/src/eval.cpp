#include "fuselm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>
#include <thread>

#include "fuselm/error.hpp"
#include "fuselm/fitting.hpp"

namespace fuselm {
namespace {

constexpr double kDiffThresholds[] = {0.25, 0.5, 1.0, 2.0};     // nats
constexpr double kLambdaThresholds[] = {0.05, 0.1, 0.2, 0.3};   // |lambda - 0.5|

// Scores positions [0, n) with `score(first, count, out)`, writing ln-probabilities of the targets.
// Chunks are contiguous and reduced in order, so the result does not depend on scheduling.
template <typename ScoreFn>
EvalResult reduce_positions(std::size_t n, const EvalOptions& options, ScoreFn&& score) {
  if (n == 0) throw Error(ErrorCode::EmptyEval, "nothing to evaluate");
  std::vector<double> logp(n);
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const std::size_t n_batches = (n + batch - 1) / batch;
  std::size_t threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n_batches);

  auto work = [&](std::size_t worker) {
    for (std::size_t b = worker; b < n_batches; b += threads) {
      const std::size_t first = b * batch;
      score(first, std::min(batch, n - first), std::span<double>(logp).subspan(first));
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < threads; ++w) jobs.push_back(std::async(std::launch::async, work, w));
    for (auto& j : jobs) j.get();
  }

  EvalResult r;
  r.token_count = n;
  r.total_nll = -std::accumulate(logp.begin(), logp.end(), 0.0);
  r.perplexity = std::exp(r.total_nll / static_cast<double>(n));
  if (options.keep_token_log_probs) r.token_log_probs = std::move(logp);
  return r;
}

EvalResult from_log_probs(std::vector<double> logp) {
  if (logp.empty()) throw Error(ErrorCode::EmptyEval, "nothing to evaluate");
  EvalResult r;
  r.token_count = logp.size();
  r.total_nll = -std::accumulate(logp.begin(), logp.end(), 0.0);
  r.perplexity = std::exp(r.total_nll / static_cast<double>(r.token_count));
  r.token_log_probs = std::move(logp);
  return r;
}

std::vector<std::size_t> iota_rows(std::size_t first, std::size_t count) {
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), first);
  return rows;
}

std::string html_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      case ' ': out += "&#160;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

EvalResult perplexity(const DistCache& cache, const CombinationParams& params, const EvalOptions& options) {
  if (params.vocab_size != cache.vocab_size())
    throw Error(ErrorCode::VocabMismatch, "combination vocabulary differs from the cache");
  return reduce_positions(cache.positions(), options, [&](std::size_t first, std::size_t count, std::span<double> out) {
    nn::Matrix ps, pl;
    const auto rows = iota_rows(first, count);
    gather_rows(cache, rows, ps, pl);
    const nn::Matrix pc = combine_eval(params, ps, pl);
    for (std::size_t i = 0; i < count; ++i)
      out[i] = std::log(pc(static_cast<Eigen::Index>(i), cache.target(first + i)));
  });
}

EvalResult perplexity(const DistCache& cache, ModelSide side, const EvalOptions& options) {
  return reduce_positions(cache.positions(), options, [&](std::size_t first, std::size_t count, std::span<double> out) {
    for (std::size_t i = 0; i < count; ++i)
      out[i] = static_cast<double>(cache.log_row(side, first + i)[cache.target(first + i)]);
  });
}

EvalResult perplexity(const LanguageModel& lm, const std::vector<TokenSequence>& sequences) {
  std::vector<double> logp;
  std::vector<double> dist(lm.vocab_size());
  for (const auto& seq : sequences) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      const Distribution d = lm.next_dist(ContextView(seq.data(), t));
      logp.push_back(std::log(d[seq[t]]));
    }
  }
  return from_log_probs(std::move(logp));
}

EvalResult perplexity(const LanguageModel& small, const LanguageModel& large, const CombinationParams& params,
                      const std::vector<TokenSequence>& sequences) {
  if (small.vocab_size() != large.vocab_size() || small.vocab_size() != params.vocab_size)
    throw Error(ErrorCode::VocabMismatch, "models and combination disagree on vocabulary size");
  std::vector<double> logp;
  for (const auto& seq : sequences) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      const ContextView ctx(seq.data(), t);
      const Distribution pc = combine(params, small.next_dist(ctx), large.next_dist(ctx));
      logp.push_back(std::log(pc[seq[t]]));
    }
  }
  return from_log_probs(std::move(logp));
}

EvalResult oracle_perplexity(const DistCache& cache, const EvalOptions& options) {
  if (cache.empty()) throw Error(ErrorCode::EmptyCache, "oracle needs a nonempty cache");
  return reduce_positions(cache.positions(), options, [&](std::size_t first, std::size_t count, std::span<double> out) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t t = first + i;
      const float ls = cache.log_row(ModelSide::Small, t)[cache.target(t)];
      const float ll = cache.log_row(ModelSide::Large, t)[cache.target(t)];
      out[i] = static_cast<double>(ls > ll ? ls : ll);
    }
  });
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeError, "spearman inputs differ in length");
  if (a.size() < 2) throw Error(ErrorCode::InvalidArgument, "spearman needs at least two observations");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;  // ranks always average to this
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) throw Error(ErrorCode::UndefinedCorrelation, "one input has no rank variance");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

TokenAnalysis analyze(const DistCache& cache, const CombinationParams& params) {
  if (params.kind != CombinationKind::EntropyScalar && params.kind != CombinationKind::FullScalar)
    throw Error(ErrorCode::NoLambda, "analysis needs an input-dependent scalar lambda (entropy-scalar or full-scalar)");
  if (params.vocab_size != cache.vocab_size())
    throw Error(ErrorCode::VocabMismatch, "combination vocabulary differs from the cache");
  if (cache.empty()) throw Error(ErrorCode::EmptyCache, "nothing to analyze");

  TokenAnalysis a;
  const std::size_t n = cache.positions();
  a.targets = cache.targets();
  a.log_p_small.resize(n);
  a.log_p_large.resize(n);
  a.diff.resize(n);
  a.lambda.resize(n);
  constexpr std::size_t kBatch = 1024;
  nn::Matrix ps, pl;
  for (std::size_t first = 0; first < n; first += kBatch) {
    const std::size_t count = std::min(kBatch, n - first);
    gather_rows(cache, iota_rows(first, count), ps, pl);
    const nn::Matrix lambda = lambda_of(params, ps, pl);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t t = first + i;
      a.log_p_small[t] = cache.log_row(ModelSide::Small, t)[cache.target(t)];
      a.log_p_large[t] = cache.log_row(ModelSide::Large, t)[cache.target(t)];
      a.diff[t] = a.log_p_small[t] - a.log_p_large[t];
      a.lambda[t] = lambda(static_cast<Eigen::Index>(i), 0);
    }
  }
  a.rho = spearman(a.lambda, a.diff);
  return a;
}

std::string heat_class(double value, std::span<const double> thresholds) {
  if (value == 0.0 || std::isnan(value)) return "z";
  const double mag = std::abs(value);
  std::size_t bin = 1;
  for (double t : thresholds)
    if (mag >= t) ++bin;
  return (value > 0 ? "g" : "r") + std::to_string(bin);
}

std::string heatmap_html(std::span<const std::string> tokens, std::span<const double> diffs,
                         std::span<const double> lambdas, const std::string& title) {
  if (tokens.size() != diffs.size() || tokens.size() != lambdas.size())
    throw Error(ErrorCode::ShapeError, "heatmap inputs differ in length");

  std::ostringstream html;
  html.precision(4);
  html << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n<title>" << html_escape(title)
       << "</title>\n<style>\n"
       << "body { font-family: monospace; }\n"
       << ".row { line-height: 1.8em; margin-bottom: 1.5em; }\n"
       << ".row span { padding: 1px 0; white-space: pre; }\n"
       << ".z { background: #ffffff; }\n";
  const char* greens[] = {"#e5f5e0", "#c7e9c0", "#a1d99b", "#74c476", "#31a354"};
  const char* reds[] = {"#fee0d2", "#fcbba1", "#fc9272", "#fb6a4a", "#de2d26"};
  for (int i = 0; i < 5; ++i) html << ".g" << i + 1 << " { background: " << greens[i] << "; }\n";
  for (int i = 0; i < 5; ++i) html << ".r" << i + 1 << " { background: " << reds[i] << "; }\n";
  html << "</style>\n</head>\n<body>\n<h1>" << html_escape(title) << "</h1>\n";

  auto row = [&](const char* heading, const char* id, std::span<const double> values, double offset,
                 std::span<const double> thresholds) {
    html << "<h2>" << heading << "</h2>\n<div class=\"row\" id=\"" << id << "\">";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      html << "<span class=\"" << heat_class(values[i] - offset, thresholds) << "\" title=\"" << values[i] << "\">"
           << html_escape(tokens[i]) << "</span>";
    }
    html << "</div>\n";
  };
  row("Log-probability difference (small minus large)", "diff", diffs, 0.0, kDiffThresholds);
  row("Weight on the small model", "lambda", lambdas, 0.5, kLambdaThresholds);
  html << "</body>\n</html>\n";
  return html.str();
}

void write_heatmap(std::span<const std::string> tokens, std::span<const double> diffs,
                   std::span<const double> lambdas, const std::filesystem::path& out) {
  const std::string doc = heatmap_html(tokens, diffs, lambdas);
  std::ofstream f(out, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + out.string() + " for writing");
  f << doc;
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + out.string());
}

}  // namespace fuselm
