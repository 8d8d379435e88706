#include "inheritlab/inheritlab.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>

#include "inheritlab/behave.hpp"
#include "inheritlab/error.hpp"
#include "inheritlab/lmclient.hpp"
#include "inheritlab/pipeline.hpp"

struct ilab_config {
  std::string json;
  std::vector<std::string> overrides;
  ilab::RunConfig cfg;
};

struct ilab_result {
  ilab::RunResult r;
};

struct ilab_model {
  ilab::TransformerModel m;
};

struct ilab_server {
  std::unique_ptr<ilab::MockServer> server;
};

namespace {

thread_local std::string g_last_error;

ilab_status record(ilab_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs `fn`, translating exceptions into status codes.
template <typename F>
ilab_status guard(F&& fn) {
  try {
    fn();
    return ILAB_OK;
  } catch (const ilab::Error& e) {
    return record(static_cast<ilab_status>(static_cast<int>(e.code())), e.what());
  } catch (const std::bad_alloc&) {
    return record(ILAB_E_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return record(ILAB_E_INTERNAL, e.what());
  } catch (...) {
    return record(ILAB_E_INTERNAL, "unknown exception");
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p) std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

std::vector<std::string> collect(const char* const* overrides, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!overrides[i]) ilab::fail(ilab::ErrorCode::kInvalidArgument, "null override");
    out.emplace_back(overrides[i]);
  }
  return out;
}

#define ILAB_REQUIRE(cond, what) \
  if (!(cond)) return record(ILAB_E_INVALID_ARGUMENT, what)

}  // namespace

extern "C" {

const char* ilab_version(void) { return "0.1.0"; }

const char* ilab_last_error(void) { return g_last_error.c_str(); }

const char* ilab_status_name(ilab_status status) {
  if (status == ILAB_OK) return "ok";
  if (status < ILAB_OK || status > ILAB_E_INTERNAL) return "unknown";
  return ilab::error_code_name(static_cast<ilab::ErrorCode>(static_cast<int>(status)));
}

int ilab_exit_code(ilab_status status) {
  if (status == ILAB_OK) return 0;
  return ilab::exit_status_for(static_cast<ilab::ErrorCode>(static_cast<int>(status)));
}

void ilab_string_free(char* s) { std::free(s); }

size_t ilab_command_count(void) { return ilab::known_commands().size(); }

const char* ilab_command_name(size_t i) {
  static const std::vector<std::string> names = ilab::known_commands();
  return i < names.size() ? names[i].c_str() : nullptr;
}

char* ilab_default_config_json(void) { return dup(ilab::default_config_json()); }

ilab_status ilab_config_parse(const char* json, const char* const* overrides, size_t n_overrides,
                              ilab_config** out) {
  ILAB_REQUIRE(out, "out is null");
  ILAB_REQUIRE(overrides || n_overrides == 0, "overrides is null");
  *out = nullptr;
  return guard([&] {
    auto c = std::make_unique<ilab_config>();
    c->json = json ? json : "";
    c->overrides = collect(overrides, n_overrides);
    c->cfg = ilab::parse_config(c->json, c->overrides);
    *out = c.release();
  });
}

ilab_status ilab_config_load(const char* path, const char* const* overrides, size_t n_overrides,
                             ilab_config** out) {
  ILAB_REQUIRE(path && out, "path or out is null");
  ILAB_REQUIRE(overrides || n_overrides == 0, "overrides is null");
  *out = nullptr;
  return guard([&] {
    auto c = std::make_unique<ilab_config>();
    c->overrides = collect(overrides, n_overrides);
    c->cfg = ilab::load_config(path, c->overrides);
    c->json = ilab::config_json(c->cfg);
    c->overrides.clear();  // already folded into json
    *out = c.release();
  });
}

ilab_status ilab_config_set(ilab_config* cfg, const char* override_kv) {
  ILAB_REQUIRE(cfg && override_kv, "config or override is null");
  return guard([&] {
    std::vector<std::string> ov = cfg->overrides;
    ov.emplace_back(override_kv);
    cfg->cfg = ilab::parse_config(cfg->json, ov);
    cfg->overrides = std::move(ov);
  });
}

ilab_status ilab_config_validate(const ilab_config* cfg) {
  ILAB_REQUIRE(cfg, "config is null");
  return guard([&] { ilab::validate_config(cfg->cfg); });
}

char* ilab_config_json(const ilab_config* cfg) { return cfg ? dup(ilab::config_json(cfg->cfg)) : nullptr; }

void ilab_config_free(ilab_config* cfg) { delete cfg; }

ilab_status ilab_run(const ilab_config* cfg, const char* command, ilab_log_fn log, void* user, ilab_result** out) {
  ILAB_REQUIRE(cfg && command && out, "config, command or out is null");
  *out = nullptr;
  return guard([&] {
    ilab::LogFn fn;
    if (log) fn = [log, user](const std::string& line) { log(line.c_str(), user); };
    auto r = std::make_unique<ilab_result>();
    r->r = ilab::run_command(cfg->cfg, command, fn);
    *out = r.release();
  });
}

int ilab_result_status(const ilab_result* r) { return r ? r->r.status : -1; }

size_t ilab_result_artifact_count(const ilab_result* r) { return r ? r->r.artifacts.size() : 0; }

const char* ilab_result_artifact(const ilab_result* r, size_t i) {
  return r && i < r->r.artifacts.size() ? r->r.artifacts[i].c_str() : nullptr;
}

size_t ilab_result_failure_count(const ilab_result* r) { return r ? r->r.failures.size() : 0; }

const char* ilab_result_failure(const ilab_result* r, size_t i) {
  return r && i < r->r.failures.size() ? r->r.failures[i].c_str() : nullptr;
}

const char* ilab_result_summary(const ilab_result* r) { return r ? r->r.summary.c_str() : nullptr; }

void ilab_result_free(ilab_result* r) { delete r; }

ilab_status ilab_model_load(const char* path, ilab_model** out) {
  ILAB_REQUIRE(path && out, "path or out is null");
  *out = nullptr;
  return guard([&] {
    auto m = std::make_unique<ilab_model>();
    m->m = ilab::load_model(path);
    *out = m.release();
  });
}

ilab_status ilab_model_score(const ilab_model* m, const char* prompt, const char* const* continuations, size_t n,
                             double* logprobs) {
  ILAB_REQUIRE(m && prompt && logprobs && (continuations || n == 0), "null argument");
  return guard([&] {
    std::vector<std::string> conts;
    for (size_t i = 0; i < n; ++i) {
      if (!continuations[i]) ilab::fail(ilab::ErrorCode::kInvalidArgument, "null continuation");
      conts.emplace_back(continuations[i]);
    }
    const std::vector<double> lp = ilab::continuation_logprobs(m->m, prompt, conts);
    std::copy(lp.begin(), lp.end(), logprobs);
  });
}

void ilab_model_free(ilab_model* m) { delete m; }

ilab_status ilab_server_start(const ilab_model* m, const char* model_id, int port, ilab_server** out) {
  ILAB_REQUIRE(m && model_id && out, "model, id or out is null");
  ILAB_REQUIRE(port >= 0 && port < 65536, "port out of range");
  *out = nullptr;
  return guard([&] {
    auto s = std::make_unique<ilab_server>();
    s->server = std::make_unique<ilab::MockServer>(m->m, model_id);
    s->server->start(port);
    *out = s.release();
  });
}

int ilab_server_port(const ilab_server* s) { return s ? s->server->port() : -1; }

size_t ilab_server_requests(const ilab_server* s) { return s ? s->server->requests_seen() : 0; }

void ilab_server_free(ilab_server* s) {
  if (!s) return;
  s->server->stop();
  delete s;
}

}  // extern "C"
