#pragma once

// Client for the black-box distribution protocol:
//   GET  /v1/meta          -> {"vocab_size": N, "model": "..."}
//   POST /v1/distribution  {"contexts": [[id, ...], ...]}
//                          -> {"vocab_size": N, "logprobs": [[...], ...]}
// Log-probabilities are natural logs; the client renormalizes every row.

#include <chrono>
#include <string>
#include <vector>

#include "fuselm/language_model.hpp"

namespace fuselm {

struct RemoteOptions {
  std::chrono::milliseconds connect_timeout{2000};
  std::chrono::milliseconds read_timeout{60000};
};

struct RemoteMeta {
  std::size_t vocab_size = 0;
  std::string model;
};

RemoteMeta fetch_remote_meta(const std::string& endpoint, const RemoteOptions& options = {});

/// Single request. `expected_vocab` of 0 accepts whatever the server reports.
std::vector<Distribution> remote_next_dist(const std::string& endpoint, std::span<const ContextView> contexts,
                                           std::size_t expected_vocab = 0, const RemoteOptions& options = {});

/// Turns one response row of log-probabilities (null entries mean -inf) into a normalized
/// distribution. Exposed for protocol tests.
Distribution normalize_logprobs(std::span<const double> logprobs);

class RemoteLM final : public LanguageModel {
 public:
  /// Queries /v1/meta once to learn the vocabulary size.
  explicit RemoteLM(std::string endpoint, RemoteOptions options = {});

  std::size_t vocab_size() const override { return meta_.vocab_size; }
  std::string describe() const override;
  std::vector<Distribution> next_dists(std::span<const ContextView> contexts) const override;

  const std::string& endpoint() const { return endpoint_; }

 private:
  std::string endpoint_;
  RemoteOptions options_;
  RemoteMeta meta_;
};

}  // namespace fuselm
