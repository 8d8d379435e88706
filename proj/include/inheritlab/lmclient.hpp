#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "inheritlab/behave.hpp"

namespace ilab {

struct ScoreRequest {
  std::string prompt;
  std::vector<std::string> continuations;
};

struct ScoreResponse {
  std::vector<double> logprobs;  // one per continuation, all <= 0
  std::string model;
  double latency_ms = 0.0;
};

struct RetryPolicy {
  std::size_t max_retries = 3;      // attempts after the first
  double backoff_base_ms = 100.0;   // delay before retry i is base * 2^i
  double timeout_s = 30.0;          // connect / read / write timeout
};

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string bearer_token;  // sent as "Authorization: Bearer <token>" when set
};

// Parses "http://host:port" (path ignored). Only plain HTTP is supported.
Endpoint parse_endpoint(const std::string& url);
// Reads the bearer token from the named environment variable, if set.
void load_token_from_env(Endpoint& ep, const char* variable = "INHERITLAB_API_TOKEN");

std::string encode_request(const ScoreRequest& r);
// Validates shape and sign; throws kProtocol on any violation.
ScoreResponse decode_response(const std::string& body, std::size_t expected);

// POST /v1/score with retries on timeouts, connection failures, 429 and 5xx.
// Other 4xx answers and malformed bodies fail immediately with kProtocol.
ScoreResponse score(const Endpoint& ep, const ScoreRequest& req, const RetryPolicy& policy,
                    std::size_t* attempts = nullptr);

// Scorer that sends every prompt with the yes and no label variants as
// continuations. Up to `concurrency` requests are in flight; results are
// stored by prompt index so retries cannot double count.
class RemoteScorer : public Scorer {
 public:
  RemoteScorer(Endpoint ep, RetryPolicy policy, std::size_t concurrency = 4)
      : ep_(std::move(ep)), policy_(policy), concurrency_(concurrency) {}
  std::string model_id() const override;
  std::vector<LabelProbs> label_probs(const std::vector<std::string>& prompts,
                                      const LabelSet& labels) override;
  std::size_t requests_sent() const { return requests_; }

 private:
  Endpoint ep_;
  RetryPolicy policy_;
  std::size_t concurrency_;
  mutable std::mutex mu_;
  std::string model_;
  std::size_t requests_ = 0;
};

// In-process HTTP server speaking the scoring protocol on 127.0.0.1. By
// default it serves a toy model; a handler can script any response.
class MockServer {
 public:
  using Handler = std::function<ScoreResponse(const ScoreRequest&)>;

  struct Faults {
    std::size_t fail_first = 0;        // answer the first n requests with 503
    int fail_status = 503;
    double delay_ms = 0.0;             // sleep before answering every request
    std::string required_token;        // reject requests without this bearer token (401)
    std::string raw_body;              // when set, sent verbatim with status 200
  };

  MockServer(const TransformerModel& model, std::string model_id);
  explicit MockServer(Handler handler);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  // Binds an ephemeral port and starts serving in a background thread.
  void start(int port = 0);
  void stop();
  int port() const { return port_; }
  Endpoint endpoint() const;
  void set_faults(const Faults& f);
  std::size_t requests_seen() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace ilab
