// Command-line front end. Talks to the library only through the C interface.
#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "inheritlab/inheritlab.h"

namespace {

struct Options {
  std::string config;
  std::string out;
  long long seed = -1;
  long long threads = -1;
  std::string endpoint;
  std::vector<std::string> sets;
  bool quiet = false;
};

std::atomic<bool> g_stop{false};

void log_line(const char* line, void* user) {
  if (!*static_cast<bool*>(user)) std::fprintf(stderr, "%s\n", line);
}

int report_error(ilab_status s) {
  std::fprintf(stderr, "error (%s): %s\n", ilab_status_name(s), ilab_last_error());
  return ilab_exit_code(s);
}

// Builds the config: file first, then --set overrides, then dedicated flags.
ilab_status make_config(const Options& o, ilab_config** cfg) {
  std::vector<std::string> ov = o.sets;
  if (!o.out.empty()) ov.push_back("output_dir=" + o.out);
  if (o.seed >= 0) ov.push_back("seed=" + std::to_string(o.seed));
  if (o.threads >= 0) ov.push_back("threads=" + std::to_string(o.threads));
  if (!o.endpoint.empty()) ov.push_back("behave.endpoint=" + o.endpoint);
  std::vector<const char*> ptrs;
  for (const auto& s : ov) ptrs.push_back(s.c_str());
  if (o.config.empty()) return ilab_config_parse(nullptr, ptrs.data(), ptrs.size(), cfg);
  return ilab_config_load(o.config.c_str(), ptrs.data(), ptrs.size(), cfg);
}

int run(const Options& o, const std::string& command) {
  ilab_config* cfg = nullptr;
  ilab_status s = make_config(o, &cfg);
  if (s != ILAB_OK) return report_error(s);
  bool quiet = o.quiet;
  ilab_result* res = nullptr;
  s = ilab_run(cfg, command.c_str(), log_line, &quiet, &res);
  ilab_config_free(cfg);
  if (s != ILAB_OK) return report_error(s);
  for (size_t i = 0; i < ilab_result_artifact_count(res); ++i) std::printf("%s\n", ilab_result_artifact(res, i));
  const size_t nf = ilab_result_failure_count(res);
  if (nf) {
    std::fprintf(stderr, "%zu sweep cell(s) failed:\n", nf);
    for (size_t i = 0; i < nf; ++i) std::fprintf(stderr, "  %s\n", ilab_result_failure(res, i));
  }
  const int status = ilab_result_status(res);
  ilab_result_free(res);
  return status;
}

int show_config(const Options& o, bool defaults) {
  if (defaults) {
    char* text = ilab_default_config_json();
    std::fputs(text, stdout);
    ilab_string_free(text);
    return 0;
  }
  ilab_config* cfg = nullptr;
  const ilab_status s = make_config(o, &cfg);
  if (s != ILAB_OK) return report_error(s);
  char* text = ilab_config_json(cfg);
  std::printf("%s\n", text);
  ilab_string_free(text);
  ilab_config_free(cfg);
  return 0;
}

int serve(const std::string& model_path, const std::string& id, int port) {
  ilab_model* m = nullptr;
  ilab_status s = ilab_model_load(model_path.c_str(), &m);
  if (s != ILAB_OK) return report_error(s);
  ilab_server* srv = nullptr;
  s = ilab_server_start(m, id.c_str(), port, &srv);
  if (s != ILAB_OK) {
    ilab_model_free(m);
    return report_error(s);
  }
  std::printf("serving %s on http://127.0.0.1:%d\n", id.c_str(), ilab_server_port(srv));
  std::fflush(stdout);
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  std::fprintf(stderr, "served %zu request(s)\n", ilab_server_requests(srv));
  ilab_server_free(srv);
  ilab_model_free(m);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Property-inheritance experiments on toy language models"};
  app.set_version_flag("--version", std::string(ilab_version()));
  app.require_subcommand(1);
  app.fallthrough();

  Options o;
  app.add_option("-c,--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("-o,--out", o.out, "output directory (config: output_dir)");
  app.add_option("--seed", o.seed, "global seed (config: seed)")->check(CLI::NonNegativeNumber);
  app.add_option("-j,--threads", o.threads, "worker threads, 0 = all cores (config: threads)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--endpoint", o.endpoint, "score through a remote server (config: behave.endpoint)");
  app.add_option("-s,--set", o.sets, "override a config value, e.g. das.epochs=3")->take_all();
  app.add_flag("-q,--quiet", o.quiet, "suppress progress lines");

  std::string command;
  auto group = [&](const std::string& name, const std::string& help,
                   const std::vector<std::pair<std::string, std::string>>& actions) {
    CLI::App* g = app.add_subcommand(name, help);
    g->require_subcommand(1);
    g->fallthrough();
    for (const auto& [action, ahelp] : actions) {
      CLI::App* a = g->add_subcommand(action, ahelp);
      a->fallthrough();
      a->callback([&command, name, action] { command = name + " " + action; });
    }
  };
  group("world", "build the concept world",
        {{"gen", "generate a synthetic world"}, {"load", "load concept, taxonomy and embedding files"}});
  group("lm", "toy language model", {{"train", "train on the emitted corpus"}, {"eval", "label accuracy"}});
  group("stimuli", "test stimuli", {{"gen", "write the stimulus sets"}});
  group("behave", "behavioural metrics", {{"run", "score all stimuli"}});
  group("das", "distributed alignment search",
        {{"train", "train one intervention"},
         {"sweep", "sweep layers and token roles"},
         {"sdi", "order-sensitivity of an intervention"}});
  group("report", "figures and summaries", {{"render", "heatmaps and summary.json"}});

  CLI::App* cfg_cmd = app.add_subcommand("config", "print configuration");
  cfg_cmd->fallthrough();
  bool defaults = false;
  cfg_cmd->add_flag("--defaults", defaults, "print the built-in defaults instead of the resolved config");

  CLI::App* serve_cmd = app.add_subcommand("serve", "serve a trained model over HTTP");
  std::string model_path, model_id = "toy";
  int port = 8088;
  serve_cmd->add_option("model", model_path, "model file written by 'lm train'")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--id", model_id, "model name reported to clients");
  serve_cmd->add_option("--port", port, "port, 0 = any free port")->check(CLI::Range(0, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  if (cfg_cmd->parsed()) return show_config(o, defaults);
  if (serve_cmd->parsed()) return serve(model_path, model_id, port);
  return run(o, command);
}
