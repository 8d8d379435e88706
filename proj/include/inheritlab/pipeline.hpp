#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "inheritlab/das.hpp"
#include "inheritlab/error.hpp"
#include "inheritlab/lmclient.hpp"
#include "inheritlab/world.hpp"

namespace ilab {

// Fully resolved run configuration. Every field has a default; a JSON
// config file overrides any subset, and "a.b=value" overrides apply on top.
struct RunConfig {
  std::uint64_t seed = 7;
  std::string output_dir = "out";
  std::size_t threads = 0;  // 0 = available cores
  int template_id = 2;
  std::string space;        // similarity space name; empty = first space

  std::string world_source = "generate";  // generate | load
  WorldSpec world;
  LoadPaths world_paths;
  CorpusConfig corpus = CorpusConfig::defaults();

  std::string model_kind = "trained";  // trained | planted
  bool planted_order_sensitive = true;
  ModelConfig model;
  TrainConfig train;

  StimuliConfig stimuli;

  std::string endpoint;  // empty = score in-process
  std::string token_env = "INHERITLAB_API_TOKEN";
  RetryPolicy retry;
  std::size_t concurrency = 4;

  std::vector<Setting> settings{Setting::kBalanced, Setting::kControl, Setting::kAmbiguous,
                                Setting::kUnambiguous};
  std::vector<std::size_t> layers;
  std::vector<TokenRole> roles;
  Stream stream = Stream::kResidual;
  DasHparams das;
  DatasetConfig dataset;
  std::optional<std::size_t> das_layer;  // das train / sdi site; default last layer
  TokenRole das_role = TokenRole::kFinal;
  Setting das_setting = Setting::kBalanced;

  std::size_t worker_threads() const;
};

// Built-in defaults as JSON.
std::string default_config_json();
// Parses `json_text` over the defaults; unknown keys are rejected with their path.
RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
// Canonical JSON of the resolved config (recorded in manifests).
std::string config_json(const RunConfig& cfg);
// Checks referenced paths and value ranges; throws kConfig naming the key.
void validate_config(const RunConfig& cfg);

// Sub-seed for a named stage, derived from the global seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage);

struct RunResult {
  int status = 0;  // 0 success, 3 partial sweep failure
  std::vector<std::string> artifacts;  // paths relative to the output directory
  std::vector<std::string> failures;   // one line per failed sweep cell
  std::string summary;                 // JSON
};

using LogFn = std::function<void(const std::string&)>;

// Commands: "world gen", "world load", "lm train", "lm eval", "stimuli gen",
// "behave run", "das train", "das sweep", "das sdi", "report render".
std::vector<std::string> known_commands();
RunResult run_command(const RunConfig& cfg, const std::string& command, const LogFn& log = {});

// Exit status for an error: 1 for validation problems, 2 otherwise.
int exit_status_for(ErrorCode code);

std::string sha256_file(const std::string& path);

}  // namespace ilab
