#include "inheritlab/lmclient.hpp"

#include <httplib.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <json.hpp>
#include <regex>
#include <thread>

#include "inheritlab/error.hpp"

namespace ilab {

using nlohmann::json;

Endpoint parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re))
    fail(ErrorCode::kConfig, "endpoint must look like http://host:port, got '" + url + "'");
  Endpoint ep;
  ep.host = m[1];
  ep.port = m[2].matched ? std::stoi(m[2]) : 80;
  if (ep.port <= 0 || ep.port > 65535) fail(ErrorCode::kConfig, "endpoint port out of range: " + url);
  return ep;
}

void load_token_from_env(Endpoint& ep, const char* variable) {
  if (const char* v = std::getenv(variable); v && *v) ep.bearer_token = v;
}

std::string encode_request(const ScoreRequest& r) {
  json j;
  j["prompt"] = r.prompt;
  j["continuations"] = r.continuations;
  return j.dump();
}

ScoreResponse decode_response(const std::string& body, std::size_t expected) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    fail(ErrorCode::kProtocol, std::string("score response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("logprobs") || !j["logprobs"].is_array())
    fail(ErrorCode::kProtocol, "score response lacks a logprobs array");
  ScoreResponse r;
  if (j.contains("model")) {
    if (!j["model"].is_string()) fail(ErrorCode::kProtocol, "score response model is not a string");
    r.model = j["model"].get<std::string>();
  }
  for (const auto& v : j["logprobs"]) {
    if (!v.is_number()) fail(ErrorCode::kProtocol, "score response holds a non-numeric logprob");
    const double x = v.get<double>();
    if (!(x <= 0.0)) fail(ErrorCode::kProtocol, "score response holds logprob " + v.dump() + " > 0");
    r.logprobs.push_back(x);
  }
  if (r.logprobs.size() != expected)
    fail(ErrorCode::kProtocol, "score response has " + std::to_string(r.logprobs.size()) +
                                   " logprobs for " + std::to_string(expected) + " continuations");
  return r;
}

namespace {

bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

ScoreResponse score(const Endpoint& ep, const ScoreRequest& req, const RetryPolicy& policy,
                    std::size_t* attempts) {
  httplib::Client cli(ep.host, ep.port);
  const auto to = std::chrono::duration<double>(policy.timeout_s);
  const auto secs = std::chrono::duration_cast<std::chrono::microseconds>(to);
  cli.set_connection_timeout(secs);
  cli.set_read_timeout(secs);
  cli.set_write_timeout(secs);
  httplib::Headers headers;
  if (!ep.bearer_token.empty()) headers.emplace("Authorization", "Bearer " + ep.bearer_token);
  const std::string body = encode_request(req);

  std::string last;
  for (std::size_t attempt = 0; attempt <= policy.max_retries; ++attempt) {
    if (attempt > 0) {
      const double ms = policy.backoff_base_ms * std::ldexp(1.0, static_cast<int>(attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
    }
    if (attempts) *attempts = attempt + 1;
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = cli.Post("/v1/score", headers, body, "application/json");
    if (!res) {
      last = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (transient_status(res->status)) {
      last = "server answered HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      fail(ErrorCode::kProtocol, "server answered HTTP " + std::to_string(res->status) + ": " + res->body);
    ScoreResponse r = decode_response(res->body, req.continuations.size());
    r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }
  fail(ErrorCode::kTransient, "giving up after " + std::to_string(policy.max_retries + 1) +
                                  " attempts to " + ep.host + ":" + std::to_string(ep.port) + ": " + last);
}

std::string RemoteScorer::model_id() const {
  std::lock_guard<std::mutex> lock(mu_);
  return model_.empty() ? "remote:" + ep_.host + ":" + std::to_string(ep_.port) : model_;
}

std::vector<LabelProbs> RemoteScorer::label_probs(const std::vector<std::string>& prompts,
                                                  const LabelSet& labels) {
  std::vector<std::string> conts = labels.yes;
  conts.insert(conts.end(), labels.no.begin(), labels.no.end());
  std::vector<LabelProbs> out(prompts.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < prompts.size() && !failed; i = next++) {
      try {
        const ScoreResponse r = score(ep_, {prompts[i], conts}, policy_);
        LabelProbs p;
        for (std::size_t j = 0; j < r.logprobs.size(); ++j)
          (j < labels.yes.size() ? p.yes : p.no).push_back(std::exp(r.logprobs[j]));
        out[i] = std::move(p);
        std::lock_guard<std::mutex> lock(mu_);
        ++requests_;
        if (model_.empty()) model_ = r.model;
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu_);
        if (!failed.exchange(true)) error = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(concurrency_, prompts.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return out;
}

// ---------------------------------------------------------------------------

struct MockServer::Impl {
  Handler handler;
  httplib::Server server;
  std::thread thread;
  mutable std::mutex mu;
  Faults faults;
  std::size_t seen = 0;
};

MockServer::MockServer(const TransformerModel& model, std::string model_id)
    : MockServer(Handler([&model, id = std::move(model_id)](const ScoreRequest& r) {
        ScoreResponse out;
        out.logprobs = continuation_logprobs(model, r.prompt, r.continuations);
        out.model = id;
        return out;
      })) {}

MockServer::MockServer(Handler handler) : impl_(std::make_unique<Impl>()) {
  impl_->handler = std::move(handler);
  impl_->server.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
    Faults f;
    std::size_t n;
    {
      std::lock_guard<std::mutex> lock(impl_->mu);
      f = impl_->faults;
      n = impl_->seen++;
    }
    if (f.delay_ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(f.delay_ms));
    if (n < f.fail_first) {
      res.status = f.fail_status;
      res.set_content("{\"error\":\"injected\"}", "application/json");
      return;
    }
    if (!f.required_token.empty() && req.get_header_value("Authorization") != "Bearer " + f.required_token) {
      res.status = 401;
      res.set_content("{\"error\":\"unauthorized\"}", "application/json");
      return;
    }
    if (!f.raw_body.empty()) {
      res.set_content(f.raw_body, "application/json");
      return;
    }
    ScoreRequest sr;
    try {
      const json j = json::parse(req.body);
      sr.prompt = j.at("prompt").get<std::string>();
      sr.continuations = j.at("continuations").get<std::vector<std::string>>();
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    try {
      const ScoreResponse out = impl_->handler(sr);
      res.set_content(json{{"logprobs", out.logprobs}, {"model", out.model}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 422;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  });
}

MockServer::~MockServer() { stop(); }

void MockServer::start(int port) {
  if (impl_->thread.joinable()) fail(ErrorCode::kInvalidArgument, "mock server already running");
  port_ = port == 0 ? impl_->server.bind_to_any_port("127.0.0.1") : port;
  if (port != 0 && !impl_->server.bind_to_port("127.0.0.1", port))
    fail(ErrorCode::kIo, "mock server cannot bind port " + std::to_string(port));
  if (port_ < 0) fail(ErrorCode::kIo, "mock server cannot bind an ephemeral port");
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void MockServer::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

Endpoint MockServer::endpoint() const {
  Endpoint ep;
  ep.port = port_;
  return ep;
}

void MockServer::set_faults(const Faults& f) {
  std::lock_guard<std::mutex> lock(impl_->mu);
  impl_->faults = f;
  impl_->seen = 0;
}

std::size_t MockServer::requests_seen() const {
  std::lock_guard<std::mutex> lock(impl_->mu);
  return impl_->seen;
}

}  // namespace ilab
