#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "inheritlab/inheritlab.h"

namespace fs = std::filesystem;

namespace {

std::vector<std::string> lines;

void collect(const char* line, void*) { lines.emplace_back(line); }

}  // namespace

TEST_CASE("status names and exit codes") {
  CHECK(std::string(ilab_status_name(ILAB_OK)) == "ok");
  CHECK(std::string(ilab_status_name(ILAB_E_CONFIG)) != "unknown");
  CHECK(std::string(ilab_status_name(static_cast<ilab_status>(99))) == "unknown");
  CHECK(ilab_exit_code(ILAB_OK) == 0);
  CHECK(ilab_exit_code(ILAB_E_CONFIG) == 1);
  CHECK(ilab_exit_code(ILAB_E_TRANSIENT) == 2);
  CHECK(ilab_command_count() == 10);
  CHECK(std::string(ilab_command_name(0)) == "world gen");
  CHECK(ilab_command_name(99) == nullptr);
}

TEST_CASE("config handles") {
  ilab_config* cfg = nullptr;
  const char* ov[] = {"das.epochs=3"};
  REQUIRE(ilab_config_parse(R"({"seed": 5})", ov, 1, &cfg) == ILAB_OK);
  char* text = ilab_config_json(cfg);
  const std::string json = text;
  ilab_string_free(text);
  CHECK(json.find("\"seed\": 5") != std::string::npos);
  CHECK(json.find("\"epochs\": 3") != std::string::npos);

  CHECK(ilab_config_set(cfg, "threads=2") == ILAB_OK);
  CHECK(ilab_config_set(cfg, "bogus.key=1") == ILAB_E_CONFIG);
  CHECK(std::string(ilab_last_error()).find("bogus") != std::string::npos);
  // A failed set leaves the previous state intact.
  text = ilab_config_json(cfg);
  CHECK(std::string(text).find("\"threads\": 2") != std::string::npos);
  ilab_string_free(text);
  CHECK(ilab_config_validate(cfg) == ILAB_OK);
  ilab_config_free(cfg);

  ilab_config* bad = reinterpret_cast<ilab_config*>(1);
  CHECK(ilab_config_parse("{\"nope\": 1}", nullptr, 0, &bad) == ILAB_E_CONFIG);
  CHECK(bad == nullptr);
  CHECK(ilab_config_parse("{}", nullptr, 0, nullptr) == ILAB_E_INVALID_ARGUMENT);
  CHECK(ilab_config_load("/nonexistent/config.json", nullptr, 0, &bad) == ILAB_E_CONFIG);

  char* defaults = ilab_default_config_json();
  ilab_config* d = nullptr;
  CHECK(ilab_config_parse(defaults, nullptr, 0, &d) == ILAB_OK);
  ilab_string_free(defaults);
  ilab_config_free(d);
}

TEST_CASE("running commands, scoring and serving through the C interface") {
  const fs::path out = fs::temp_directory_path() / "ilab_capi_run";
  fs::remove_all(out);
  const std::string out_kv = "output_dir=" + out.string();
  const char* ov[] = {out_kv.c_str(), "model.kind=planted", "world.spec.hyphenated_fraction=0",
                      "model.d_model=64", "model.n_heads=2"};
  ilab_config* cfg = nullptr;
  REQUIRE(ilab_config_parse(nullptr, ov, 5, &cfg) == ILAB_OK);

  ilab_result* res = nullptr;
  lines.clear();
  REQUIRE(ilab_run(cfg, "world gen", collect, nullptr, &res) == ILAB_OK);
  CHECK(ilab_result_status(res) == 0);
  CHECK(ilab_result_artifact_count(res) >= 3);
  CHECK(ilab_result_failure_count(res) == 0);
  CHECK(std::string(ilab_result_summary(res)).find("taxonomic_pairs") != std::string::npos);
  CHECK_FALSE(lines.empty());
  ilab_result_free(res);

  REQUIRE(ilab_run(cfg, "lm train", nullptr, nullptr, &res) == ILAB_OK);
  ilab_result_free(res);
  REQUIRE(ilab_run(cfg, "stimuli gen", nullptr, nullptr, &res) == ILAB_OK);
  ilab_result_free(res);
  CHECK(ilab_run(cfg, "lm fly", nullptr, nullptr, &res) == ILAB_E_CONFIG);
  CHECK(res == nullptr);
  ilab_config_free(cfg);

  ilab_model* m = nullptr;
  CHECK(ilab_model_load("/nonexistent.bin", &m) != ILAB_OK);
  REQUIRE(ilab_model_load((out / "lm/model.bin").string().c_str(), &m) == ILAB_OK);
  const char* conts[] = {"Yes", "No"};
  double lp[2] = {1.0, 1.0};
  const char* prompt = "Answer the question. Given that x are daxable, is it true that y are daxable? "
                       "Answer with Yes/No. The answer is:";
  // Unknown words are reported, not scored.
  CHECK(ilab_model_score(m, prompt, conts, 2, lp) == ILAB_E_INGEST);
  std::ifstream is(out / "stimuli/base.jsonl");
  std::string first;
  std::getline(is, first);
  const std::string text = nlohmann::json::parse(first)["text"];
  REQUIRE(ilab_model_score(m, text.c_str(), conts, 2, lp) == ILAB_OK);
  CHECK(lp[0] <= 0.0);
  CHECK(lp[1] <= 0.0);
  CHECK(std::exp(lp[0]) + std::exp(lp[1]) <= 1.0);

  ilab_server* srv = nullptr;
  REQUIRE(ilab_server_start(m, "planted", 0, &srv) == ILAB_OK);
  CHECK(ilab_server_port(srv) > 0);
  CHECK(ilab_server_requests(srv) == 0);
  ilab_server_free(srv);
  ilab_model_free(m);
  fs::remove_all(out);
}
