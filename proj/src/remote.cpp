#include "fuselm/remote.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "fuselm/error.hpp"

namespace fuselm {
namespace {

using nlohmann::json;

struct ParsedEndpoint {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // optional path prefix without trailing slash
};

ParsedEndpoint parse_endpoint(const std::string& endpoint) {
  const auto scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos || endpoint.compare(0, scheme_end, "http") != 0)
    throw Error(ErrorCode::InvalidArgument, "endpoint must look like http://host:port, got '" + endpoint + "'");
  const auto path_start = endpoint.find('/', scheme_end + 3);
  ParsedEndpoint p;
  p.origin = endpoint.substr(0, path_start);
  if (path_start != std::string::npos) {
    p.prefix = endpoint.substr(path_start);
    while (!p.prefix.empty() && p.prefix.back() == '/') p.prefix.pop_back();
  }
  return p;
}

httplib::Client make_client(const ParsedEndpoint& ep, const RemoteOptions& options) {
  httplib::Client client(ep.origin);
  client.set_connection_timeout(options.connect_timeout);
  client.set_read_timeout(options.read_timeout);
  client.set_write_timeout(options.read_timeout);
  return client;
}

json parse_body(const httplib::Result& res, const std::string& what) {
  if (!res) throw Error(ErrorCode::RemoteUnavailable, what + ": " + httplib::to_string(res.error()));
  if (res->status == 503 || res->status == 502)
    throw Error(ErrorCode::RemoteUnavailable, what + ": HTTP " + std::to_string(res->status));
  if (res->status != 200) {
    std::string detail = res->body.substr(0, 200);
    throw Error(ErrorCode::ProtocolError, what + ": HTTP " + std::to_string(res->status) + " " + detail);
  }
  try {
    return json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ProtocolError, what + ": malformed JSON: " + e.what());
  }
}

std::size_t read_vocab_size(const json& body, const std::string& what) {
  if (!body.is_object() || !body.contains("vocab_size") || !body["vocab_size"].is_number_unsigned())
    throw Error(ErrorCode::ProtocolError, what + ": missing or invalid vocab_size");
  return body["vocab_size"].get<std::size_t>();
}

}  // namespace

Distribution normalize_logprobs(std::span<const double> logprobs) {
  double max_lp = -std::numeric_limits<double>::infinity();
  for (double lp : logprobs) {
    if (std::isnan(lp) || lp == std::numeric_limits<double>::infinity())
      throw Error(ErrorCode::ProtocolError, "log-probability is NaN or +inf");
    max_lp = std::max(max_lp, lp);
  }
  if (!std::isfinite(max_lp)) throw Error(ErrorCode::ProtocolError, "distribution has no mass");
  Distribution d;
  d.probs.resize(logprobs.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    d.probs[i] = std::exp(logprobs[i] - max_lp);
    sum += d.probs[i];
  }
  for (double& p : d.probs) p /= sum;
  return d;
}

RemoteMeta fetch_remote_meta(const std::string& endpoint, const RemoteOptions& options) {
  const auto ep = parse_endpoint(endpoint);
  auto client = make_client(ep, options);
  const json body = parse_body(client.Get(ep.prefix + "/v1/meta"), "GET " + endpoint + "/v1/meta");
  RemoteMeta meta;
  meta.vocab_size = read_vocab_size(body, "meta");
  if (meta.vocab_size == 0) throw Error(ErrorCode::ProtocolError, "meta: vocab_size is zero");
  if (body.contains("model") && body["model"].is_string()) meta.model = body["model"].get<std::string>();
  return meta;
}

std::vector<Distribution> remote_next_dist(const std::string& endpoint, std::span<const ContextView> contexts,
                                           std::size_t expected_vocab, const RemoteOptions& options) {
  if (contexts.empty()) return {};
  json request;
  auto& arr = request["contexts"] = json::array();
  for (const auto& ctx : contexts) arr.push_back(std::vector<TokenId>(ctx.begin(), ctx.end()));

  const auto ep = parse_endpoint(endpoint);
  auto client = make_client(ep, options);
  const std::string what = "POST " + endpoint + "/v1/distribution";
  const json body = parse_body(client.Post(ep.prefix + "/v1/distribution", request.dump(), "application/json"), what);

  const std::size_t vocab = read_vocab_size(body, what);
  if (expected_vocab != 0 && vocab != expected_vocab)
    throw Error(ErrorCode::VocabMismatch, what + ": server reports " + std::to_string(vocab) + " tokens, expected " +
                                              std::to_string(expected_vocab));
  if (!body.contains("logprobs") || !body["logprobs"].is_array())
    throw Error(ErrorCode::ProtocolError, what + ": missing logprobs array");
  const json& rows = body["logprobs"];
  if (rows.size() != contexts.size())
    throw Error(ErrorCode::ProtocolError, what + ": got " + std::to_string(rows.size()) + " rows for " +
                                              std::to_string(contexts.size()) + " contexts");

  std::vector<Distribution> out;
  out.reserve(rows.size());
  std::vector<double> lp;
  for (const json& row : rows) {
    if (!row.is_array()) throw Error(ErrorCode::ProtocolError, what + ": logprob row is not an array");
    if (row.size() != vocab)
      throw Error(ErrorCode::VocabMismatch, what + ": row of length " + std::to_string(row.size()) +
                                                " but vocab_size is " + std::to_string(vocab));
    lp.resize(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i].is_null())
        lp[i] = -std::numeric_limits<double>::infinity();
      else if (row[i].is_number())
        lp[i] = row[i].get<double>();
      else
        throw Error(ErrorCode::ProtocolError, what + ": non-numeric log-probability");
    }
    out.push_back(normalize_logprobs(lp));
  }
  return out;
}

RemoteLM::RemoteLM(std::string endpoint, RemoteOptions options)
    : endpoint_(std::move(endpoint)), options_(options), meta_(fetch_remote_meta(endpoint_, options_)) {}

std::string RemoteLM::describe() const {
  return "remote(" + endpoint_ + (meta_.model.empty() ? "" : ", model=" + meta_.model) + ")";
}

std::vector<Distribution> RemoteLM::next_dists(std::span<const ContextView> contexts) const {
  return remote_next_dist(endpoint_, contexts, meta_.vocab_size, options_);
}

}  // namespace fuselm
