#pragma once
// In-process HTTP servers speaking the distribution protocol, for client tests.
#include <functional>
#include <memory>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "fuselm/language_model.hpp"

namespace httplib {
class Server;
}

namespace fuselm::testing {

class LoopbackServer {
 public:
  /// Maps a parsed request body to (status, response body).
  using Handler = std::function<std::pair<int, std::string>(const nlohmann::json& request)>;

  LoopbackServer(std::size_t meta_vocab, Handler distribution, std::string model = "loopback");
  ~LoopbackServer();
  LoopbackServer(const LoopbackServer&) = delete;
  LoopbackServer& operator=(const LoopbackServer&) = delete;

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int port() const { return port_; }
  std::size_t requests() const { return requests_; }

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::size_t requests_ = 0;
};

/// Serves `lm` faithfully: natural-log probabilities at full double precision.
std::unique_ptr<LoopbackServer> serve_model(const LanguageModel& lm);

/// Every context gets the same row of log-probabilities (JSON null allowed for -inf).
std::unique_ptr<LoopbackServer> serve_fixed_row(std::size_t vocab, nlohmann::json row);

/// Replies 200 with the given raw body to every distribution request.
std::unique_ptr<LoopbackServer> serve_raw(std::size_t vocab, int status, std::string body);

/// A port on which nothing is listening.
int unused_port();

}  // namespace fuselm::testing
