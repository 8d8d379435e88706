#include "inheritlab/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>
#include <thread>

#include "inheritlab/behave.hpp"
#include "inheritlab/error.hpp"
#include "inheritlab/report.hpp"

namespace ilab {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  fail(ErrorCode::kConfig, "config " + key + ": " + why);
}

ordered_json defaults_json() {
  const RunConfig d;
  const CorpusConfig cc = CorpusConfig::defaults();
  ordered_json j;
  j["seed"] = d.seed;
  j["output_dir"] = d.output_dir;
  j["threads"] = d.threads;
  j["template_id"] = d.template_id;
  j["space"] = d.space;
  j["world"] = {
      {"source", "generate"},
      {"spec",
       {{"n_superordinates", 8},
        {"k", d.world.k},
        {"dim", d.world.dim},
        {"noise", d.world.noise},
        {"sibling_overlap", d.world.sibling_overlap},
        {"atypical_similarity", d.world.atypical_similarity},
        {"hyphenated_fraction", d.world.hyphenated_fraction},
        {"mass_fraction", d.world.mass_fraction},
        {"label_rule", d.world.label_rule.describe()},
        {"label_space", d.world.label_rule.space}}},
      {"paths", {{"concepts", ""}, {"taxonomy", ""}, {"embeddings", ordered_json::array()}}}};
  j["corpus"] = {{"copular_properties", cc.copular_properties},
                 {"possessive_properties", cc.possessive_properties},
                 {"qa_per_pair", cc.qa_per_pair},
                 {"mismatch_fraction", 0.0},  // unseen property tokens generalise only when properties never decide a label
                 {"reversed_fraction", cc.reversed_fraction},
                 {"distractor_pairs", cc.distractor_pairs}};
  j["model"] = {{"kind", "trained"},
                {"order_sensitive", true},
                {"n_layers", 4},
                {"d_model", 48},
                {"n_heads", 4},
                {"d_ff", 0},
                {"max_context", 48}};
  j["train"] = {{"steps", 2500},         {"batch", 16},          {"lr", 3e-3},
                {"warmup", 50},          {"min_lr_fraction", 0.1}, {"clip_norm", 1.0},
                {"weight_decay", 0.0},   {"loss_threshold", 0.0}};
  j["stimuli"] = {{"reversed_is_no", true}};
  j["behave"] = {{"endpoint", ""},       {"token_env", d.token_env},
                 {"concurrency", 4},     {"timeout_s", d.retry.timeout_s},
                 {"max_retries", d.retry.max_retries}, {"backoff_ms", d.retry.backoff_base_ms}};
  ordered_json settings = ordered_json::array();
  for (Setting s : d.settings) settings.push_back(setting_name(s));
  j["das"] = {{"settings", settings},
              {"layers", ordered_json::array()},
              {"roles", ordered_json::array()},
              {"stream", "residual"},
              {"epochs", 8},  // 2 epochs over ~100 pairs is too few steps at this scale
              {"batch", d.das.batch},
              {"lr", d.das.lr},
              {"boundary_lr", d.das.boundary_lr},
              {"grad_accum", d.das.grad_accum},
              {"tau_start", d.das.tau_start},
              {"tau_end", d.das.tau_end},
              {"init_scale", d.das.init_scale},
              {"train_fraction", d.dataset.train_fraction},
              {"train_size", 0},
              {"test_size", 0},
              {"stratify", false},
              {"layer", -1},
              {"role", "final"},
              {"setting", "balanced"}};
  return j;
}

bool same_kind(const ordered_json& a, const ordered_json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge(ordered_json& base, const ordered_json& over, const std::string& path) {
  if (!over.is_object()) bad_key(path.empty() ? "<root>" : path, "expected an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) bad_key(key, "unknown key");
    ordered_json& slot = base[it.key()];
    if (slot.is_object() && !slot.empty()) {
      merge(slot, it.value(), key);
    } else {
      if (!same_kind(slot, it.value()))
        bad_key(key, std::string("expected ") + slot.type_name() + ", got " + it.value().type_name());
      slot = it.value();
    }
  }
}

void apply_override(ordered_json& j, const std::string& ov) {
  const std::size_t eq = ov.find('=');
  if (eq == std::string::npos || eq == 0) bad_key(ov, "override must look like key.path=value");
  const std::string key = ov.substr(0, eq);
  const std::string text = ov.substr(eq + 1);
  ordered_json value;
  try {
    value = ordered_json::parse(text);
  } catch (const ordered_json::exception&) {
    value = text;
  }
  ordered_json* slot = &j;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!slot->is_object() || !slot->contains(part)) bad_key(key, "unknown key");
    slot = &(*slot)[part];
  }
  if (slot->is_object()) bad_key(key, "cannot override a whole section");
  if (!same_kind(*slot, value)) {
    if (slot->is_string()) value = text;
    else bad_key(key, std::string("expected ") + slot->type_name());
  }
  *slot = value;
}

template <typename T>
T get(const ordered_json& j, const std::string& key) {
  const ordered_json* p = &j;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) p = &p->at(part);
  try {
    if constexpr (std::is_unsigned_v<T> && std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!p->is_number_integer() || p->get<long long>() < 0) bad_key(key, "expected a non-negative integer");
    }
    return p->get<T>();
  } catch (const ordered_json::exception& e) {
    bad_key(key, e.what());
  }
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j = defaults_json();
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  j["template_id"] = c.template_id;
  j["space"] = c.space;
  auto& w = j["world"];
  w["source"] = c.world_source;
  w["spec"] = {{"n_superordinates", c.world.n_superordinates},
               {"k", c.world.k},
               {"dim", c.world.dim},
               {"noise", c.world.noise},
               {"sibling_overlap", c.world.sibling_overlap},
               {"atypical_similarity", c.world.atypical_similarity},
               {"hyphenated_fraction", c.world.hyphenated_fraction},
               {"mass_fraction", c.world.mass_fraction},
               {"label_rule", c.world.label_rule.describe()},
               {"label_space", c.world.label_rule.space}};
  w["paths"]["concepts"] = c.world_paths.concepts;
  w["paths"]["taxonomy"] = c.world_paths.taxonomy;
  w["paths"]["embeddings"] = ordered_json::array();
  for (const auto& [file, tag] : c.world_paths.embeddings)
    w["paths"]["embeddings"].push_back({{"file", file}, {"tag", tag}});
  j["corpus"] = {{"copular_properties", c.corpus.copular_properties},
                 {"possessive_properties", c.corpus.possessive_properties},
                 {"qa_per_pair", c.corpus.qa_per_pair},
                 {"mismatch_fraction", c.corpus.mismatch_fraction},
                 {"reversed_fraction", c.corpus.reversed_fraction},
                 {"distractor_pairs", c.corpus.distractor_pairs}};
  j["model"] = {{"kind", c.model_kind},
                {"order_sensitive", c.planted_order_sensitive},
                {"n_layers", c.model.n_layers},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"d_ff", c.model.d_ff},
                {"max_context", c.model.max_context}};
  j["train"] = {{"steps", c.train.steps},
                {"batch", c.train.batch},
                {"lr", c.train.lr},
                {"warmup", c.train.warmup},
                {"min_lr_fraction", c.train.min_lr_fraction},
                {"clip_norm", c.train.clip_norm},
                {"weight_decay", c.train.weight_decay},
                {"loss_threshold", c.train.loss_threshold}};
  j["stimuli"] = {{"reversed_is_no", c.stimuli.reversed_is_no}};
  j["behave"] = {{"endpoint", c.endpoint},
                 {"token_env", c.token_env},
                 {"concurrency", c.concurrency},
                 {"timeout_s", c.retry.timeout_s},
                 {"max_retries", c.retry.max_retries},
                 {"backoff_ms", c.retry.backoff_base_ms}};
  ordered_json settings = ordered_json::array(), roles = ordered_json::array();
  for (Setting s : c.settings) settings.push_back(setting_name(s));
  for (TokenRole r : c.roles) roles.push_back(role_name(r));
  j["das"] = {{"settings", settings},
              {"layers", c.layers},
              {"roles", roles},
              {"stream", stream_name(c.stream)},
              {"epochs", c.das.epochs},
              {"batch", c.das.batch},
              {"lr", c.das.lr},
              {"boundary_lr", c.das.boundary_lr},
              {"grad_accum", c.das.grad_accum},
              {"tau_start", c.das.tau_start},
              {"tau_end", c.das.tau_end},
              {"init_scale", c.das.init_scale},
              {"train_fraction", c.dataset.train_fraction},
              {"train_size", c.dataset.train_size},
              {"test_size", c.dataset.test_size},
              {"stratify", c.dataset.stratify},
              {"layer", c.das_layer ? static_cast<long long>(*c.das_layer) : -1LL},
              {"role", role_name(c.das_role)},
              {"setting", setting_name(c.das_setting)}};
  return j;
}

RunConfig from_json(const ordered_json& j) {
  RunConfig c;
  c.seed = get<std::uint64_t>(j, "seed");
  c.output_dir = get<std::string>(j, "output_dir");
  c.threads = get<std::size_t>(j, "threads");
  c.template_id = get<int>(j, "template_id");
  c.space = get<std::string>(j, "space");

  c.world_source = get<std::string>(j, "world.source");
  if (c.world_source != "generate" && c.world_source != "load")
    bad_key("world.source", "expected 'generate' or 'load'");
  c.world.n_superordinates = get<std::size_t>(j, "world.spec.n_superordinates");
  c.world.k = get<std::size_t>(j, "world.spec.k");
  c.world.dim = get<std::size_t>(j, "world.spec.dim");
  c.world.noise = get<double>(j, "world.spec.noise");
  c.world.sibling_overlap = get<double>(j, "world.spec.sibling_overlap");
  c.world.atypical_similarity = get<double>(j, "world.spec.atypical_similarity");
  c.world.hyphenated_fraction = get<double>(j, "world.spec.hyphenated_fraction");
  c.world.mass_fraction = get<double>(j, "world.spec.mass_fraction");
  try {
    c.world.label_rule = parse_label_rule(get<std::string>(j, "world.spec.label_rule"));
  } catch (const Error& e) {
    bad_key("world.spec.label_rule", e.what());
  }
  c.world.label_rule.space = get<std::size_t>(j, "world.spec.label_space");
  c.world_paths.concepts = get<std::string>(j, "world.paths.concepts");
  c.world_paths.taxonomy = get<std::string>(j, "world.paths.taxonomy");
  const auto& emb = j.at("world").at("paths").at("embeddings");
  if (!emb.is_array()) bad_key("world.paths.embeddings", "expected an array");
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const std::string key = "world.paths.embeddings[" + std::to_string(i) + "]";
    if (!emb[i].is_object() || !emb[i].contains("file") || !emb[i].contains("tag") ||
        !emb[i]["file"].is_string() || !emb[i]["tag"].is_string())
      bad_key(key, "expected {\"file\": path, \"tag\": word-sense|spose|synthetic}");
    c.world_paths.embeddings.emplace_back(emb[i]["file"].get<std::string>(), emb[i]["tag"].get<std::string>());
  }

  c.corpus.copular_properties = get<std::vector<std::string>>(j, "corpus.copular_properties");
  c.corpus.possessive_properties = get<std::vector<std::string>>(j, "corpus.possessive_properties");
  c.corpus.qa_per_pair = get<std::size_t>(j, "corpus.qa_per_pair");
  c.corpus.mismatch_fraction = get<double>(j, "corpus.mismatch_fraction");
  c.corpus.reversed_fraction = get<double>(j, "corpus.reversed_fraction");
  c.corpus.distractor_pairs = get<std::size_t>(j, "corpus.distractor_pairs");

  c.model_kind = get<std::string>(j, "model.kind");
  if (c.model_kind != "trained" && c.model_kind != "planted")
    bad_key("model.kind", "expected 'trained' or 'planted'");
  c.planted_order_sensitive = get<bool>(j, "model.order_sensitive");
  c.model.n_layers = get<std::size_t>(j, "model.n_layers");
  c.model.d_model = get<std::size_t>(j, "model.d_model");
  c.model.n_heads = get<std::size_t>(j, "model.n_heads");
  c.model.d_ff = get<std::size_t>(j, "model.d_ff");
  c.model.max_context = get<std::size_t>(j, "model.max_context");

  c.train.steps = get<std::size_t>(j, "train.steps");
  c.train.batch = get<std::size_t>(j, "train.batch");
  c.train.lr = get<double>(j, "train.lr");
  c.train.warmup = get<std::size_t>(j, "train.warmup");
  c.train.min_lr_fraction = get<double>(j, "train.min_lr_fraction");
  c.train.clip_norm = get<double>(j, "train.clip_norm");
  c.train.weight_decay = get<double>(j, "train.weight_decay");
  c.train.loss_threshold = get<double>(j, "train.loss_threshold");

  c.stimuli.reversed_is_no = get<bool>(j, "stimuli.reversed_is_no");
  c.stimuli.template_id = c.template_id;
  c.corpus.template_id = c.template_id;

  c.endpoint = get<std::string>(j, "behave.endpoint");
  c.token_env = get<std::string>(j, "behave.token_env");
  c.concurrency = get<std::size_t>(j, "behave.concurrency");
  c.retry.timeout_s = get<double>(j, "behave.timeout_s");
  c.retry.max_retries = get<std::size_t>(j, "behave.max_retries");
  c.retry.backoff_base_ms = get<double>(j, "behave.backoff_ms");

  auto parse_or = [](const std::string& key, auto fn) {
    try {
      return fn();
    } catch (const Error& e) {
      bad_key(key, e.what());
    }
  };
  c.settings.clear();
  for (const auto& s : get<std::vector<std::string>>(j, "das.settings"))
    c.settings.push_back(parse_or("das.settings", [&] { return parse_setting(s); }));
  c.layers = get<std::vector<std::size_t>>(j, "das.layers");
  for (const auto& r : get<std::vector<std::string>>(j, "das.roles"))
    c.roles.push_back(parse_or("das.roles", [&] { return parse_role(r); }));
  c.stream = parse_or("das.stream", [&] { return parse_stream(get<std::string>(j, "das.stream")); });
  c.das.epochs = get<std::size_t>(j, "das.epochs");
  c.das.batch = get<std::size_t>(j, "das.batch");
  c.das.lr = get<double>(j, "das.lr");
  c.das.boundary_lr = get<double>(j, "das.boundary_lr");
  c.das.grad_accum = get<std::size_t>(j, "das.grad_accum");
  c.das.tau_start = get<double>(j, "das.tau_start");
  c.das.tau_end = get<double>(j, "das.tau_end");
  c.das.init_scale = get<double>(j, "das.init_scale");
  c.dataset.train_fraction = get<double>(j, "das.train_fraction");
  c.dataset.train_size = get<std::size_t>(j, "das.train_size");
  c.dataset.test_size = get<std::size_t>(j, "das.test_size");
  c.dataset.stratify = get<bool>(j, "das.stratify");
  c.dataset.reversed_is_no = c.stimuli.reversed_is_no;
  const long long layer = get<long long>(j, "das.layer");
  if (layer >= 0) c.das_layer = static_cast<std::size_t>(layer);
  c.das_role = parse_or("das.role", [&] { return parse_role(get<std::string>(j, "das.role")); });
  c.das_setting = parse_or("das.setting", [&] { return parse_setting(get<std::string>(j, "das.setting")); });

  // Every stage seed comes from the global seed.
  c.world.seed = derive_seed(c.seed, "world");
  c.corpus.seed = derive_seed(c.seed, "corpus");
  c.model.seed = derive_seed(c.seed, "model-init");
  c.train.seed = derive_seed(c.seed, "lm-train");
  c.stimuli.seed = derive_seed(c.seed, "stimuli");
  c.das.seed = derive_seed(c.seed, "das");
  return c;
}

}  // namespace

std::size_t RunConfig::worker_threads() const {
  if (threads) return threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : stage) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return (z ^ (z >> 31)) & 0x7fffffffffffffffULL;
}

std::string default_config_json() { return defaults_json().dump(2) + "\n"; }

RunConfig parse_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  ordered_json j = defaults_json();
  if (!json_text.empty()) {
    ordered_json user;
    try {
      user = ordered_json::parse(json_text);
    } catch (const ordered_json::exception& e) {
      fail(ErrorCode::kConfig, std::string("config is not valid JSON: ") + e.what());
    }
    merge(j, user, "");
  }
  for (const std::string& ov : overrides) apply_override(j, ov);
  return from_json(j);
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kConfig, "cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config(ss.str(), overrides);
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

std::string config_json(const RunConfig& cfg) { return to_json(cfg).dump(2); }

void validate_config(const RunConfig& c) {
  auto need_file = [](const std::string& key, const std::string& p) {
    if (p.empty()) bad_key(key, "path is required when world.source is 'load'");
    if (!fs::is_regular_file(p)) bad_key(key, "file does not exist: " + p);
  };
  if (c.world_source == "load") {
    need_file("world.paths.concepts", c.world_paths.concepts);
    need_file("world.paths.taxonomy", c.world_paths.taxonomy);
    if (c.world_paths.embeddings.empty()) bad_key("world.paths.embeddings", "at least one embeddings file is required");
    for (std::size_t i = 0; i < c.world_paths.embeddings.size(); ++i) {
      const std::string key = "world.paths.embeddings[" + std::to_string(i) + "]";
      need_file(key + ".file", c.world_paths.embeddings[i].first);
      try {
        parse_space_tag(c.world_paths.embeddings[i].second);
      } catch (const Error& e) {
        bad_key(key + ".tag", e.what());
      }
    }
  } else {
    try {
      c.world.validate();
    } catch (const Error& e) {
      bad_key("world.spec", e.what());
    }
  }
  if (c.template_id < 1 || c.template_id > 4) bad_key("template_id", "must be 1-4");
  if (c.output_dir.empty()) bad_key("output_dir", "must not be empty");
  try {
    c.corpus.validate();
  } catch (const Error& e) {
    bad_key("corpus", e.what());
  }
  ModelConfig mc = c.model;
  mc.vocab_size = 1;
  try {
    mc.validate();
  } catch (const Error& e) {
    bad_key("model", e.what());
  }
  if (c.train.steps == 0 || c.train.batch == 0 || !(c.train.lr > 0.0)) bad_key("train", "steps, batch and lr must be positive");
  if (c.das.epochs == 0 || c.das.batch == 0 || c.das.grad_accum == 0) bad_key("das", "epochs, batch and grad_accum must be positive");
  if (!(c.das.lr > 0.0) || !(c.das.boundary_lr > 0.0)) bad_key("das", "learning rates must be positive");
  if (!(c.das.tau_start > 0.0) || !(c.das.tau_end > 0.0)) bad_key("das", "temperatures must be positive");
  if (!(c.dataset.train_fraction > 0.0 && c.dataset.train_fraction < 1.0)) bad_key("das.train_fraction", "must lie in (0, 1)");
  for (std::size_t l : c.layers)
    if (l >= c.model.n_layers) bad_key("das.layers", "layer " + std::to_string(l) + " >= model.n_layers");
  if (c.das_layer && *c.das_layer >= c.model.n_layers) bad_key("das.layer", "must be below model.n_layers");
  if (c.settings.empty()) bad_key("das.settings", "must name at least one setting");
  if (!c.endpoint.empty()) {
    try {
      parse_endpoint(c.endpoint);
    } catch (const Error& e) {
      bad_key("behave.endpoint", e.what());
    }
  }
  if (c.concurrency == 0) bad_key("behave.concurrency", "must be positive");
}

int exit_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidArgument:
      return 1;
    default:
      return 2;
  }
}

std::string sha256_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    fail(ErrorCode::kInternal, "sha256 init failed");
  }
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::vector<std::string> known_commands() {
  return {"world gen", "world load", "lm train", "lm eval", "stimuli gen", "behave run",
          "das train", "das sweep", "das sdi", "report render"};
}

// ---------------------------------------------------------------------------

namespace {

class Runner {
 public:
  Runner(const RunConfig& cfg, std::string command, const LogFn& log)
      : cfg_(cfg), command_(std::move(command)), log_(log), out_(cfg.output_dir) {}

  RunResult run() {
    if (command_ == "world gen") world_gen(false);
    else if (command_ == "world load") world_gen(true);
    else if (command_ == "lm train") lm_train();
    else if (command_ == "lm eval") lm_eval();
    else if (command_ == "stimuli gen") stimuli_gen();
    else if (command_ == "behave run") behave_run();
    else if (command_ == "das train") das_train();
    else if (command_ == "das sweep") das_sweep();
    else if (command_ == "das sdi") das_sdi();
    else if (command_ == "report render") report_render();
    else fail(ErrorCode::kConfig, "unknown command '" + command_ + "'");
    write_manifest();
    return std::move(result_);
  }

 private:
  void say(const std::string& s) const {
    if (log_) log_(s);
  }

  std::string path(const std::string& rel) const { return (out_ / rel).string(); }

  std::string output(const std::string& rel) {
    fs::create_directories((out_ / rel).parent_path());
    result_.artifacts.push_back(rel);
    return path(rel);
  }

  void input(const std::string& p) { inputs_.push_back(p); }

  const World& world() {
    if (!world_) {
      if (cfg_.world_source == "load") {
        for (const std::string& p : {cfg_.world_paths.concepts, cfg_.world_paths.taxonomy}) input(p);
        for (const auto& e : cfg_.world_paths.embeddings) input(e.first);
        world_ = load_world(cfg_.world_paths);
      } else {
        world_ = generate_world(cfg_.world);
      }
      space_ = cfg_.space.empty() ? 0 : world_->space_index(cfg_.space);
    }
    return *world_;
  }

  const StimulusSets& stimuli() {
    if (!sets_) sets_ = build_stimuli(world(), space_index(), cfg_.stimuli);
    return *sets_;
  }

  std::size_t space_index() {
    world();
    return space_;
  }

  const TransformerModel& model() {
    if (!model_) {
      if (cfg_.model_kind == "planted") {
        model_ = build_planted_world(world(), planted_config(), cfg_.planted_order_sensitive, cfg_.template_id).model;
      } else {
        const std::string p = path("lm/model.bin");
        if (!fs::is_regular_file(p))
          fail(ErrorCode::kConfig, "no trained model at " + p + "; run 'lm train' first");
        input(p);
        model_ = load_model(p);
      }
    }
    return *model_;
  }

  ModelConfig planted_config() const {
    ModelConfig mc = cfg_.model;
    mc.n_heads = 2;
    mc.d_model = std::max<std::size_t>(mc.d_model, 64);
    return mc;
  }

  std::string model_name() const {
    return cfg_.model_kind == "planted"
               ? std::string(cfg_.planted_order_sensitive ? "planted" : "planted-order-insensitive")
               : "toy";
  }

  std::vector<Stimulus> das_items() {
    std::vector<Stimulus> items = stimuli().base;
    items.insert(items.end(), stimuli().swap.begin(), stimuli().swap.end());
    return items;
  }

  CounterfactualDataset dataset(Setting s) {
    return build_counterfactual_dataset(das_items(), s, derive_seed(cfg_.seed, "dataset"), cfg_.dataset);
  }

  std::size_t das_layer() { return cfg_.das_layer.value_or(model().config.n_layers - 1); }

  // -------------------------------------------------------------------------

  void world_gen(bool load) {
    if (load && cfg_.world_source != "load")
      fail(ErrorCode::kConfig, "config world.source: 'world load' needs world.source = load");
    if (!load && cfg_.world_source != "generate")
      fail(ErrorCode::kConfig, "config world.source: 'world gen' needs world.source = generate");
    const World& w = world();
    fs::create_directories(out_ / "world");
    save_world(w, path("world"));
    for (const auto& e : fs::directory_iterator(out_ / "world"))
      if (e.path().filename() != "summary.json") result_.artifacts.push_back("world/" + e.path().filename().string());
    std::sort(result_.artifacts.begin(), result_.artifacts.end());
    const WorldCounts c = count(w);
    ordered_json j = {{"superordinates", c.superordinates},
                      {"subordinates", c.subordinates},
                      {"taxonomic_pairs", c.taxonomic_pairs},
                      {"spaces", c.spaces},
                      {"label_rule", w.label_rule.describe()},
                      {"warnings", w.warnings}};
    ordered_json spaces = ordered_json::array();
    for (const auto& s : w.spaces) {
      const std::size_t n = sample_pairs(w, static_cast<std::size_t>(&s - w.spaces.data())).size();
      spaces.push_back({{"name", s.name}, {"dim", s.dim}, {"sampled_pairs", n}});
    }
    j["space_detail"] = spaces;
    write_text(j.dump(2) + "\n", output("world/summary.json"));
    result_.summary = j.dump();
    say("world: " + std::to_string(c.superordinates) + " categories, " + std::to_string(c.taxonomic_pairs) +
        " taxonomic pairs");
  }

  void lm_train() {
    const World& w = world();
    TransformerModel m;
    TrainReport rep;
    if (cfg_.model_kind == "planted") {
      m = build_planted_world(w, planted_config(), cfg_.planted_order_sensitive, cfg_.template_id).model;
    } else {
      const Corpus corpus = emit_corpus(w, cfg_.corpus);
      Tokenizer tok;
      for (const CorpusItem& it : corpus.items) tok.add_text(it.text);
      const StimulusSets& s = stimuli();
      for (const auto* v : {&s.base, &s.swap, &s.mismatch, &s.reversed})
        for (const Stimulus& x : *v) tok.add_text(x.text);
      ModelConfig mc = cfg_.model;
      mc.vocab_size = tok.size();
      m = init_model(mc, std::move(tok));
      std::vector<Sequence> seqs;
      for (const CorpusItem& it : corpus.items) {
        std::vector<int> ids = encode_prompt(m, it.text);
        const std::size_t from = it.qa ? ids.size() - 1 : 0;  // QA items score only the answer
        seqs.push_back({std::move(ids), from});
      }
      TrainConfig tc = cfg_.train;
      tc.log_every = std::max<std::size_t>(1, tc.steps / 20);
      tc.on_log = [this](std::size_t step, double loss) {
        say("lm train: step " + std::to_string(step) + " loss " + format_double(loss));
      };
      say("lm train: " + std::to_string(seqs.size()) + " sequences, vocabulary " + std::to_string(m.tokenizer.size()));
      rep = train_lm(m, seqs, tc);
      std::ostringstream log;
      log << "step,loss\n";
      for (std::size_t i = 0; i < rep.losses.size(); ++i) log << i << ',' << format_double(rep.losses[i]) << '\n';
      write_text(log.str(), output("lm/train_log.csv"));
    }
    save_model(m, output("lm/model.bin"));
    ordered_json j = {{"kind", cfg_.model_kind},
                      {"parameters", m.parameter_count()},
                      {"vocabulary", m.tokenizer.size()},
                      {"final_loss", rep.final_loss}};
    write_text(j.dump(2) + "\n", output("lm/summary.json"));
    result_.summary = j.dump();
  }

  static bool says_yes(const TransformerModel& m, const std::string& prompt) {
    const std::vector<double> lp = continuation_logprobs(m, prompt, {"Yes", "No"});
    return lp[0] > lp[1];
  }

  void lm_eval() {
    const TransformerModel& m = model();
    ordered_json j;
    if (cfg_.model_kind == "trained") {
      const Corpus corpus = emit_corpus(world(), cfg_.corpus);
      std::size_t n = 0, ok = 0;
      for (const CorpusItem& it : corpus.items)
        if (it.qa) {
          ++n;
          ok += says_yes(m, it.prompt) == (it.answer == "Yes");
        }
      j["corpus_qa_items"] = n;
      j["corpus_qa_accuracy"] = n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
    }
    const StimulusSets& s = stimuli();
    std::size_t total = 0, total_ok = 0;
    ordered_json sets = ordered_json::object();
    for (const auto& [name, v] : std::vector<std::pair<std::string, const std::vector<Stimulus>*>>{
             {"base", &s.base}, {"swap", &s.swap}, {"mismatch", &s.mismatch}, {"reversed", &s.reversed}}) {
      std::size_t ok = 0;
      for (const Stimulus& x : *v) ok += says_yes(m, x.text) == (x.expected_label == "Yes");
      sets[name] = v->empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(v->size());
      if (name == "base" || name == "swap") {  // same pairs as the corpus QA, unseen properties
        total += v->size();
        total_ok += ok;
      }
    }
    j["heldout_qa_accuracy"] = total ? static_cast<double>(total_ok) / static_cast<double>(total) : 0.0;
    j["accuracy_by_set"] = sets;
    write_text(j.dump(2) + "\n", output("lm/eval.json"));
    result_.summary = j.dump();
    say("lm eval: held-out QA label accuracy " + format_double(j["heldout_qa_accuracy"].get<double>()));
  }

  void stimuli_gen() {
    const StimulusSets& s = stimuli();
    write_stimuli_jsonl(s.base, output("stimuli/base.jsonl"));
    write_stimuli_jsonl(s.swap, output("stimuli/swap.jsonl"));
    write_stimuli_jsonl(s.mismatch, output("stimuli/mismatch.jsonl"));
    write_stimuli_jsonl(s.reversed, output("stimuli/reversed.jsonl"));
    std::size_t tax = 0;
    for (const Stimulus& x : s.base) tax += x.taxonomic;
    result_.summary = ordered_json{{"space", s.space},
                                   {"base", s.base.size()},
                                   {"taxonomic", tax},
                                   {"swap", s.swap.size()},
                                   {"mismatch", s.mismatch.size()},
                                   {"reversed", s.reversed.size()}}
                          .dump();
  }

  void behave_run() {
    std::unique_ptr<Scorer> scorer;
    if (!cfg_.endpoint.empty()) {
      Endpoint ep = parse_endpoint(cfg_.endpoint);
      load_token_from_env(ep, cfg_.token_env.c_str());
      scorer = std::make_unique<RemoteScorer>(ep, cfg_.retry, cfg_.concurrency);
    } else {
      scorer = std::make_unique<ModelScorer>(model(), model_name(), cfg_.worker_threads());
    }
    const BehaviorRun run = run_behavior(*scorer, stimuli(), cfg_.template_id);
    write_results_csv(run, output("behave/results.csv"));
    write_metrics_json({run.metrics}, output("behave/metrics.json"));
    result_.summary = metrics_json(run.metrics);
    say("behave: TS " + format_double(run.metrics.ts));
  }

  ordered_json cell_json(const SweepCell& c) {
    ordered_json j = {{"layer", c.layer}, {"role", role_name(c.role)}, {"setting", setting_name(c.setting)}};
    if (!c.error.empty()) {
      j["error"] = c.error;
      return j;
    }
    j["iia"] = c.iia;
    if (c.iia_gen) j["iia_gen"] = *c.iia_gen;
    j["mask_width"] = c.mask_width;
    j["final_loss"] = c.final_loss;
    return j;
  }

  void das_train() {
    const TransformerModel& m = model();
    const CounterfactualDataset ds = dataset(cfg_.das_setting);
    const InterventionSite site{das_layer(), cfg_.das_role, cfg_.stream};
    DasHparams hp = cfg_.das;
    hp.seed = cell_seed(cfg_.das.seed, site.layer, site.role);
    TraceCache cache(m);
    DasReport rep;
    const RotationIntervention iv = train_das(m, ds.train, site, hp, &rep, &cache);
    save_intervention(iv, output("das/train/intervention.json"));
    ordered_json j = {{"setting", setting_name(ds.setting)},
                      {"layer", site.layer},
                      {"role", role_name(site.role)},
                      {"stream", stream_name(site.stream)},
                      {"train_pairs", ds.train.size()},
                      {"test_pairs", ds.test.size()},
                      {"iia", evaluate_iia(m, iv, ds.test, ds.labels, &cache)}};
    if (!ds.gen.empty()) j["iia_gen"] = evaluate_iia(m, iv, ds.gen, ds.labels, &cache);
    j["mask_width"] = iv.mask_width();
    j["final_loss"] = rep.final_loss;
    j["steps"] = rep.steps;
    j["losses"] = rep.losses;
    double worst = 0.0;
    for (double o : rep.orthogonality) worst = std::max(worst, o);
    j["max_orthogonality_error"] = worst;
    write_text(j.dump(2) + "\n", output("das/train/report.json"));
    j.erase("losses");
    result_.summary = j.dump();
    say("das train: IIA " + format_double(j["iia"].get<double>()));
  }

  void das_sweep() {
    const TransformerModel& m = model();
    SweepConfig sc;
    sc.layers = cfg_.layers;
    sc.roles = cfg_.roles;
    sc.stream = cfg_.stream;
    sc.hparams = cfg_.das;
    sc.threads = cfg_.worker_threads();
    ordered_json summary = ordered_json::object();
    for (Setting s : cfg_.settings) {
      const CounterfactualDataset ds = dataset(s);
      sc.on_cell = [this, s](const SweepCell& c) {
        say(std::string("das sweep ") + setting_name(s) + ": L" + std::to_string(c.layer) + " " +
            role_name(c.role) + (c.error.empty() ? " IIA " + format_double(c.iia) : " FAILED: " + c.error));
      };
      const std::vector<SweepCell> cells = sweep(m, ds, sc);
      const std::string dir = std::string("das/") + setting_name(s) + "/";
      write_sweep_csv(cells, output(dir + "sweep.csv"));
      write_grid_csv(cells, output(dir + "grid.csv"));
      for (const SweepCell& c : cells)
        if (!c.error.empty())
          result_.failures.push_back(std::string(setting_name(s)) + " L" + std::to_string(c.layer) + " " +
                                     role_name(c.role) + ": " + c.error);
      ordered_json js = {{"train_pairs", ds.train.size()}, {"test_pairs", ds.test.size()}, {"gen_pairs", ds.gen.size()}};
      const auto best = unique_argmax(cells);
      if (best) js["best"] = cell_json(cells[*best]);
      ordered_json all = ordered_json::array();
      for (const SweepCell& c : cells) all.push_back(cell_json(c));
      js["cells"] = all;
      summary[setting_name(s)] = js;
    }
    write_text(summary.dump(2) + "\n", output("das/summary.json"));
    result_.summary = summary.dump();
    if (!result_.failures.empty()) result_.status = 3;
  }

  void das_sdi() {
    const TransformerModel& m = model();
    const CounterfactualDataset ds = dataset(cfg_.das_setting);
    const InterventionSite site{das_layer(), cfg_.das_role, cfg_.stream};
    DasHparams hp = cfg_.das;
    hp.seed = cell_seed(cfg_.das.seed, site.layer, site.role);
    TraceCache cache(m);
    const RotationIntervention iv = train_das(m, ds.train, site, hp, nullptr, &cache);

    std::vector<Stimulus> neg, pos;
    for (const Stimulus& s : stimuli().base) (s.taxonomic ? pos : neg).push_back(s);
    std::mt19937_64 rng(derive_seed(cfg_.seed, "sdi"));
    std::shuffle(neg.begin(), neg.end(), rng);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::vector<CounterfactualPair> pairs;
    for (std::size_t i = 0; i < std::min(neg.size(), pos.size()); ++i) pairs.push_back({neg[i], pos[i], "Yes"});
    const SdiResult r = sdi_evaluate(world(), m, iv, pairs, &cache);
    ordered_json j = {{"layer", site.layer},           {"role", role_name(site.role)},
                      {"setting", setting_name(cfg_.das_setting)},
                      {"sdi", r.sdi},                  {"input_pairs", r.input},
                      {"after_behavior", r.after_behavior}, {"after_flip", r.after_flip},
                      {"successes", r.successes}};
    write_text(j.dump(2) + "\n", output("das/sdi.json"));
    result_.summary = j.dump();
    say("das sdi: SDI " + format_double(r.sdi));
  }

  void report_render() {
    ordered_json summary = ordered_json::object();
    std::size_t grids = 0;
    for (Setting s : cfg_.settings) {
      const std::string grid = path(std::string("das/") + setting_name(s) + "/sweep.csv");
      if (!fs::is_regular_file(grid)) continue;
      input(grid);
      const std::vector<SweepCell> cells = read_sweep_csv(grid);
      ++grids;
      const std::string title = std::string("IIA, ") + setting_name(s) + " (" + model_name() + ")";
      write_text(heatmap_svg(cells, title), output(std::string("report/iia_") + setting_name(s) + ".svg"));
      write_grid_csv(cells, output(std::string("report/iia_") + setting_name(s) + ".csv"));
      ordered_json js;
      const auto best = unique_argmax(cells);
      js["best"] = best ? cell_json(cells[*best]) : ordered_json(nullptr);
      summary["das"][setting_name(s)] = js;
    }
    if (grids == 0) fail(ErrorCode::kConfig, "report render: no sweep results under " + path("das") + "; run 'das sweep' first");
    for (const auto& [key, rel] : std::vector<std::pair<std::string, std::string>>{
             {"behavior", "behave/metrics.json"}, {"sdi", "das/sdi.json"}, {"lm_eval", "lm/eval.json"}}) {
      const std::string p = path(rel);
      if (!fs::is_regular_file(p)) continue;
      input(p);
      std::ifstream is(p);
      summary[key] = ordered_json::parse(is);
    }
    write_text(summary.dump(2) + "\n", output("report/summary.json"));
    result_.summary = summary.dump();
  }

  void write_manifest() {
    ordered_json j;
    j["tool"] = "inheritlab";
    j["version"] = kVersion;
    j["command"] = command_;
    j["config"] = ordered_json::parse(config_json(cfg_));
    j["seeds"] = {{"global", cfg_.seed},          {"world", cfg_.world.seed},   {"corpus", cfg_.corpus.seed},
                  {"model_init", cfg_.model.seed}, {"lm_train", cfg_.train.seed}, {"stimuli", cfg_.stimuli.seed},
                  {"das", cfg_.das.seed},          {"dataset", derive_seed(cfg_.seed, "dataset")},
                  {"sdi", derive_seed(cfg_.seed, "sdi")}};
    ordered_json ins = ordered_json::array(), outs = ordered_json::array();
    for (const std::string& p : inputs_) ins.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    for (const std::string& rel : result_.artifacts) outs.push_back({{"path", rel}, {"sha256", sha256_file(path(rel))}});
    j["inputs"] = ins;
    j["outputs"] = outs;
    j["status"] = result_.status;
    j["failures"] = result_.failures;
    std::string name = command_;
    std::replace(name.begin(), name.end(), ' ', '-');
    const std::string rel = "manifests/" + name + ".json";
    fs::create_directories(out_ / "manifests");
    write_text(j.dump(2) + "\n", path(rel));
    result_.artifacts.push_back(rel);
  }

  const RunConfig& cfg_;
  std::string command_;
  LogFn log_;
  fs::path out_;
  RunResult result_;
  std::vector<std::string> inputs_;
  std::optional<World> world_;
  std::size_t space_ = 0;
  std::optional<StimulusSets> sets_;
  std::optional<TransformerModel> model_;
};

}  // namespace

RunResult run_command(const RunConfig& cfg, const std::string& command, const LogFn& log) {
  validate_config(cfg);
  const auto known = known_commands();
  if (std::find(known.begin(), known.end(), command) == known.end())
    fail(ErrorCode::kConfig, "unknown command '" + command + "'");
  Runner r(cfg, command, log);
  return r.run();
}

}  // namespace ilab
