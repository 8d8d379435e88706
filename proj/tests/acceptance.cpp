// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include "inheritlab/behave.hpp"
#include "inheritlab/das.hpp"
#include "inheritlab/error.hpp"
#include "inheritlab/gradcheck.hpp"
#include "inheritlab/lmclient.hpp"
#include "inheritlab/pipeline.hpp"
#include "inheritlab/report.hpp"

using namespace ilab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "[acceptance] %s\n", s.c_str());
  std::fflush(stderr);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Autodiff

Outcome autodiff() {
  const auto t0 = Clock::now();
  const auto checks = check_all_primitives(20240, 100);
  double worst = 0.0;
  std::string worst_op;
  bool all_cases = !checks.empty();
  for (const auto& c : checks) {
    all_cases = all_cases && c.cases == 100;
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_op = c.op;
    }
  }
  const double secs = seconds_since(t0);
  return {all_cases && worst < 1e-4 && secs < 60.0,
          std::to_string(checks.size()) + " primitives x 100 cases, max rel error " + num(worst) + " (" + worst_op +
              "), " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Orthogonality

double orth_error(const Tensor& r) {
  Tensor e = kernels::matmul_tn(r, r);
  for (std::size_t i = 0; i < e.rows(); ++i) e.at(i, i) -= 1.0;
  return frobenius_norm(e);
}

Outcome orthogonality(const std::vector<double>& das_steps) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dims(2, 64);
  double worst = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t d = dims(rng);
    const double s = std::exp(n(rng));  // parameter scales across several decades
    Tensor u = Tensor::matrix(d, d);
    for (double& v : u.values()) v = s * n(rng);
    worst = std::max(worst, orth_error(kernels::cayley(u)));
  }
  double worst_step = 0.0;
  for (double v : das_steps) worst_step = std::max(worst_step, v);
  return {worst < 1e-10 && !das_steps.empty() && worst_step < 1e-10,
          "1000 draws max " + num(worst) + "; " + std::to_string(das_steps.size()) + " DAS steps max " +
              num(worst_step)};
}

// ---------------------------------------------------------------------------
// 3. Planted model

Outcome planted(std::vector<double>* orth_steps) {
  const auto t0 = Clock::now();
  WorldSpec ws;
  ws.n_superordinates = 8;
  ws.hyphenated_fraction = 0.0;
  ws.seed = 5;
  const World w = generate_world(ws);
  ModelConfig mc;
  mc.n_layers = 4;
  mc.d_model = 64;
  mc.n_heads = 2;
  mc.max_context = 32;
  const PlantedWorld pw = build_planted_world(w, mc, true);
  const StimulusSets sets = build_stimuli(w, 0, StimuliConfig{});
  std::vector<Stimulus> items = sets.base;
  items.insert(items.end(), sets.swap.begin(), sets.swap.end());
  const CounterfactualDataset ds = build_counterfactual_dataset(items, Setting::kBalanced, 17);

  DasHparams hp;
  hp.seed = 3;
  const InterventionSite site{pw.site.layer, TokenRole::kFinal, Stream::kResidual};
  TraceCache cache(pw.model);
  DasReport rep;
  const RotationIntervention iv = train_das(pw.model, ds.train, site, hp, &rep, &cache);
  *orth_steps = rep.orthogonality;
  const double iia = evaluate_iia(pw.model, iv, ds.test, ds.labels, &cache);

  SweepConfig sc;
  sc.hparams = hp;
  const std::vector<SweepCell> cells = sweep(pw.model, ds, sc);
  const auto best = unique_argmax(cells);
  const bool at_planted = best && cells[*best].layer == pw.site.layer && cells[*best].role == TokenRole::kFinal;
  const double secs = seconds_since(t0);
  std::string where = "none (tie)";
  if (best) where = "L" + std::to_string(cells[*best].layer) + " " + role_name(cells[*best].role);
  return {iia == 1.0 && at_planted && secs < 600.0,
          "IIA at planted site " + num(iia) + "; sweep argmax " + where + " (planted L" +
              std::to_string(pw.site.layer) + " final); " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 6. Behavioural metric oracles

// Deterministic responder: quantised probabilities so that ties occur.
class ScriptedScorer : public Scorer {
 public:
  std::string model_id() const override { return "scripted"; }
  std::vector<LabelProbs> label_probs(const std::vector<std::string>& prompts, const LabelSet&) override {
    std::vector<LabelProbs> out;
    for (const std::string& p : prompts) {
      std::uint64_t h = 1469598103934665603ULL;
      for (unsigned char c : p) h = (h ^ c) * 1099511628211ULL;
      const double y1 = static_cast<double>(h % 5 + 1) / 10.0;
      const double y2 = static_cast<double>((h >> 8) % 3) / 10.0;
      const double n1 = static_cast<double>((h >> 16) % 5 + 1) / 10.0;
      out.push_back({{y1, y2}, {n1, 0.05}});
    }
    return out;
  }
};

double oracle_prel(const LabelProbs& lp) {
  const double y = std::max(lp.yes[0], lp.yes[1]);
  const double n = std::max(lp.no[0], lp.no[1]);
  return y / (y + n);
}

double rank_formula_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [&](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        less += v[j] < v[i];
        equal += v[j] == v[i];
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  auto tie_term = [](const std::vector<double>& v) {
    std::map<double, double> counts;
    for (double a : v) counts[a] += 1;
    double t = 0;
    for (const auto& [val, c] : counts) t += (c * c * c - c) / 12.0;
    return t;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double nn = static_cast<double>(n);
  const double base = (nn * nn * nn - nn) / 12.0;
  const double sx = base - tie_term(x), sy = base - tie_term(y);
  double d2 = 0;
  for (std::size_t i = 0; i < n; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  return (sx + sy - d2) / (2.0 * std::sqrt(sx * sy));
}

Outcome metric_oracles() {
  WorldSpec ws;
  ws.n_superordinates = 8;
  const World w = generate_world(ws);
  const StimulusSets sets = build_stimuli(w, 0, StimuliConfig{});
  ScriptedScorer scorer;
  const BehaviorRun run = run_behavior(scorer, sets, 2);

  auto probs = [&](const std::vector<Stimulus>& v) {
    std::vector<std::string> prompts;
    for (const Stimulus& s : v) prompts.push_back(s.text);
    std::vector<double> out;
    for (const LabelProbs& lp : scorer.label_probs(prompts, LabelSet{})) out.push_back(oracle_prel(lp));
    return out;
  };
  auto correct_rate = [](const std::vector<Stimulus>& v, const std::vector<double>& p) {
    double ok = 0;
    for (std::size_t i = 0; i < v.size(); ++i) ok += v[i].taxonomic ? p[i] > 0.5 : p[i] < 0.5;
    return ok / static_cast<double>(v.size());
  };
  const auto pb = probs(sets.base), ps = probs(sets.swap), pm = probs(sets.mismatch), pr = probs(sets.reversed);
  const double ts = correct_rate(sets.base, pb);
  const double psens = correct_rate(sets.swap, ps);
  double ms = 0;
  for (double p : pm) ms += p < 0.5;
  ms /= static_cast<double>(pm.size());
  double ds_ok = 0, ds_n = 0;
  std::vector<double> fwd, rev;
  for (std::size_t i = 0; i < sets.base.size(); ++i) {
    if (!sets.base[i].taxonomic) continue;
    for (std::size_t j = 0; j < sets.reversed.size(); ++j)
      if (sets.reversed[j].pair_index == sets.base[i].pair_index) {
        ds_n += 1;
        ds_ok += pb[i] > 0.5 && pr[j] < 0.5;
        fwd.push_back(pb[i]);
        rev.push_back(pr[j]);
      }
  }
  const double ds = ds_ok / ds_n;
  const double rho = rank_formula_spearman(fwd, rev);
  const MetricsReport& m = run.metrics;
  const bool exact = m.ts == ts && m.ps && *m.ps == psens && m.ms && *m.ms == ms && m.ds && *m.ds == ds;
  const bool rho_ok = m.rho_ds && std::abs(*m.rho_ds - rho) < 1e-12;

  // Spearman with heavy ties against the rank formula.
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> coarse(0, 5);
  double worst = 0;
  std::size_t trials = 0;
  for (int t = 0; t < 500; ++t) {
    std::vector<double> u(4 + t % 60), v(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] = coarse(rng);
      v[i] = coarse(rng) - 0.3 * u[i];
    }
    try {
      worst = std::max(worst, std::abs(spearman(u, v) - rank_formula_spearman(u, v)));
      ++trials;
    } catch (const Error&) {
    }
  }
  return {exact && rho_ok && worst < 1e-12 && trials > 400,
          "TS/PS/MS/DS exact=" + std::string(exact ? "yes" : "no") + ", rho diff " +
              num(m.rho_ds ? std::abs(*m.rho_ds - rho) : -1) + "; spearman tie oracle max diff " + num(worst) + " over " +
              std::to_string(trials) + " tables"};
}

// ---------------------------------------------------------------------------
// 7. Sampling contracts

Outcome sampling(const fs::path& work) {
  std::vector<std::string> problems;
  for (std::uint64_t seed : {1, 2, 3}) {
    WorldSpec ws;
    ws.seed = seed;
    const World w = generate_world(ws);
    for (std::size_t sp = 0; sp < w.spaces.size(); ++sp) {
      const StimulusSets sets = build_stimuli(w, sp, StimuliConfig{});
      std::size_t tax = 0;
      std::map<std::string, std::pair<int, int>> bins;
      for (const Stimulus& s : sets.base) {
        tax += s.taxonomic;
        auto& b = bins[s.premise];
        (s.bin == Bin::kHigh ? b.first : b.second) += 1;
      }
      if (2 * tax != sets.base.size()) problems.push_back("unbalanced tax");
      for (const auto& [p, b] : bins)
        if (std::abs(b.first - b.second) > 1) problems.push_back("bins for " + p);
      std::vector<Stimulus> items = sets.base;
      items.insert(items.end(), sets.swap.begin(), sets.swap.end());
      const auto pairs = pair_without_replacement(items, seed, false, CausalModel{}, LabelPair{});
      std::multiset<std::string> bases, sources;
      bool fixed_point = false;
      for (const auto& p : pairs) {
        bases.insert(p.base.id);
        sources.insert(p.source.id);
        fixed_point = fixed_point || p.base.id == p.source.id;
      }
      std::multiset<std::string> all;
      for (const Stimulus& s : items) all.insert(s.id);
      if (bases != all || sources != all || fixed_point) problems.push_back("source assignment not a permutation");
    }
  }
  const fs::path dir = work / "things_fixture";
  fs::remove_all(dir);
  const LoadPaths paths = write_things_format_fixture(dir.string(), 3);
  const World tw = load_world(paths);
  const WorldCounts c = count(tw);
  bool things_ok = c.taxonomic_pairs == 2016;
  std::string per_space;
  for (std::size_t s = 0; s < tw.spaces.size(); ++s) {
    const std::size_t n = sample_pairs(tw, s).size();
    things_ok = things_ok && n == 4032;
    per_space += (s ? "/" : "") + std::to_string(n);
  }
  std::string detail = "3 worlds x all spaces: " + (problems.empty() ? std::string("balanced, bins within 1, permutation")
                                                                       : problems.front());
  detail += "; THINGS-format fixture: " + std::to_string(c.taxonomic_pairs) + " taxonomic, " + per_space + " total";
  return {problems.empty() && things_ok, detail};
}

// ---------------------------------------------------------------------------
// 8. Loopback equivalence

Outcome loopback(const TransformerModel& model, const StimulusSets& sets) {
  ModelScorer local(model, "toy");
  const BehaviorRun a = run_behavior(local, sets, 2);
  MockServer server(model, "toy");
  server.start();
  RemoteScorer remote(server.endpoint(), RetryPolicy{}, 4);
  const BehaviorRun b = run_behavior(remote, sets, 2);
  server.stop();
  bool same = metrics_json(a.metrics) == metrics_json(b.metrics);
  std::size_t n = 0;
  const std::vector<std::pair<const std::vector<Scored>*, const std::vector<Scored>*>> groups{
      {&a.base, &b.base}, {&a.swap, &b.swap}, {&a.mismatch, &b.mismatch}, {&a.reversed, &b.reversed}};
  for (const auto& [x, y] : groups) {
    same = same && x->size() == y->size();
    for (std::size_t i = 0; same && i < x->size(); ++i) {
      same = (*x)[i].p_rel_yes == (*y)[i].p_rel_yes;
      ++n;
    }
  }
  return {same, std::to_string(n) + " P_rel values and metrics JSON compared, " +
                    std::to_string(remote.requests_sent()) + " HTTP requests"};
}

// ---------------------------------------------------------------------------
// 9 / 4 / 5. Trained toy models via the CLI and the pipeline

int run_cli(const std::string& cli, const std::string& args) {
  const std::string cmd = "\"" + cli + "\" " + args + " > /dev/null";  // artifact listings
  progress("$ " + cmd);
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : 2;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

struct PipelineRun {
  bool ok = false;
  double seconds = 0.0;
  std::string failure;
};

PipelineRun toy_pipeline(const std::string& cli, const fs::path& config, const fs::path& out) {
  PipelineRun r;
  fs::remove_all(out);
  const auto t0 = Clock::now();
  for (const char* cmd : {"world gen", "stimuli gen", "lm train", "lm eval", "behave run", "das sweep", "report render"}) {
    const int rc = run_cli(cli, "-q -c \"" + config.string() + "\" -o \"" + out.string() + "\" " + cmd);
    if (rc != 0) {
      r.failure = std::string(cmd) + " exited " + std::to_string(rc);
      return r;
    }
  }
  r.seconds = seconds_since(t0);
  r.ok = true;
  return r;
}

Outcome reproducibility(const std::string& cli, const fs::path& work, fs::path* kept) {
  const fs::path config = work / "toy.json";
  std::ofstream(config) << R"({
  "seed": 7,
  "das": {"settings": ["balanced"]}
}
)";
  const fs::path out = work / "toy_out";
  const PipelineRun a = toy_pipeline(cli, config, out);
  if (!a.ok) return {false, "first run: " + a.failure};
  const auto snap_a = snapshot(out);
  const fs::path first = work / "toy_run1";
  fs::remove_all(first);
  fs::rename(out, first);
  const PipelineRun b = toy_pipeline(cli, config, out);
  if (!b.ok) return {false, "second run: " + b.failure};
  const auto snap_b = snapshot(out);
  std::size_t csv_json = 0;
  std::vector<std::string> diffs;
  for (const auto& [rel, bytes] : snap_a) {
    const auto it = snap_b.find(rel);
    if (it == snap_b.end() || it->second != bytes) diffs.push_back(rel);
    const std::string ext = fs::path(rel).extension().string();
    csv_json += ext == ".csv" || ext == ".json" || ext == ".jsonl";
  }
  if (snap_a.size() != snap_b.size()) diffs.push_back("file sets differ");
  std::size_t cells = 0;
  for (const SweepCell& c : read_sweep_csv((first / "das/balanced/sweep.csv").string())) cells += c.error.empty();
  *kept = first;
  const double slowest = std::max(a.seconds, b.seconds);
  return {diffs.empty() && cells == 20 && slowest < 3600.0,
          std::to_string(snap_a.size()) + " files (" + std::to_string(csv_json) + " CSV/JSON), " +
              (diffs.empty() ? std::string("all byte-identical")
                             : std::to_string(diffs.size()) + " differ, e.g. " + diffs[0]) +
              "; " + std::to_string(cells) + "/20 sweep cells; run times " + num(a.seconds, 4) + " s and " +
              num(b.seconds, 4) + " s"};
}

RunConfig pipeline_config(const fs::path& out, const std::vector<std::string>& extra) {
  std::vector<std::string> ov{"output_dir=" + out.string(), "seed=7"};
  ov.insert(ov.end(), extra.begin(), extra.end());
  return parse_config("", ov);
}

std::vector<SweepCell> sweep_setting(const fs::path& out, Setting s, const std::vector<std::string>& extra) {
  const RunConfig cfg = pipeline_config(out, [&] {
    std::vector<std::string> ov = extra;
    ov.push_back(std::string("das.settings=[\"") + setting_name(s) + "\"]");
    return ov;
  }());
  run_command(cfg, "das sweep", [](const std::string& l) { progress(l); });
  return read_sweep_csv((out / "das" / setting_name(s) / "sweep.csv").string());
}

Outcome control_ordering(const fs::path& tax_out) {
  const auto balanced = read_sweep_csv((tax_out / "das/balanced/sweep.csv").string());
  const auto control = sweep_setting(tax_out, Setting::kControl, {});
  std::size_t ok = 0, total = 0;
  double worst_gap = 1e9;
  std::string worst_cell;
  for (const SweepCell& b : balanced)
    for (const SweepCell& c : control)
      if (b.layer == c.layer && b.role == c.role) {
        ++total;
        const double gap = b.iia - c.iia;
        ok += b.error.empty() && c.error.empty() && gap >= 0.1;
        if (gap < worst_gap) {
          worst_gap = gap;
          worst_cell = "L" + std::to_string(b.layer) + " " + role_name(b.role) + " (balanced " + num(b.iia, 3) +
                       ", control " + num(c.iia, 3) + ")";
        }
      }
  return {total == 20 && ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                                          " sites with gap >= 0.1; smallest gap " + num(worst_gap, 3) + " at " +
                                          worst_cell};
}

// Best site by Ambiguous-Test IIA; ties go to the first cell in sweep order.
std::optional<SweepCell> best_site(const std::vector<SweepCell>& cells) {
  std::optional<SweepCell> best;
  for (const SweepCell& c : cells)
    if (c.error.empty() && c.iia_gen && (!best || c.iia > best->iia)) best = c;
  return best;
}

Outcome ambiguity(const fs::path& work, const fs::path& tax_out) {
  const fs::path sim_out = work / "sim_out";
  fs::remove_all(sim_out);
  const std::vector<std::string> sim_rule{"world.spec.label_rule=similarity(0.55)"};
  run_command(pipeline_config(sim_out, sim_rule), "lm train", [](const std::string& l) { progress(l); });
  const auto sim = best_site(sweep_setting(sim_out, Setting::kAmbiguous, sim_rule));
  const auto tax = best_site(sweep_setting(tax_out, Setting::kAmbiguous, {}));
  if (!sim || !tax) return {false, "no successful Ambiguous cell"};
  const double sim_drop = sim->iia - *sim->iia_gen;
  const double tax_drop = tax->iia - *tax->iia_gen;
  auto where = [](const SweepCell& c) { return "L" + std::to_string(c.layer) + " " + role_name(c.role); };
  return {sim_drop >= 0.15 && tax_drop < 0.05,
          "similarity world best " + where(*sim) + ": test " + num(sim->iia, 3) + ", gen " + num(*sim->iia_gen, 3) +
              " (drop " + num(sim_drop, 3) + "); taxonomy world best " + where(*tax) + ": test " + num(tax->iia, 3) +
              ", gen " + num(*tax->iia_gen, 3) + " (drop " + num(tax_drop, 3) + ")"};
}

Outcome guarded(const std::function<Outcome()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string cli, work = "acceptance_work";
  app.add_option("--cli", cli, "path to the ilab executable")->required();
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  const fs::path wd = fs::absolute(work);
  fs::create_directories(wd);

  std::map<int, Outcome> results;
  std::vector<double> orth_steps;
  progress("criterion 1");
  results[1] = guarded(autodiff);
  progress("criterion 3");
  results[3] = guarded([&] { return planted(&orth_steps); });
  progress("criterion 2");
  results[2] = guarded([&] { return orthogonality(orth_steps); });
  progress("criterion 6");
  results[6] = guarded(metric_oracles);
  progress("criterion 7");
  results[7] = guarded([&] { return sampling(wd); });

  progress("criterion 9");
  fs::path tax_out;
  results[9] = guarded([&] { return reproducibility(cli, wd, &tax_out); });
  if (tax_out.empty()) {
    for (int c : {4, 5, 8}) results[c] = {false, "no trained toy model (criterion 9 failed before training)"};
  } else {
    progress("criterion 8");
    results[8] = guarded([&] {
      const RunConfig cfg = pipeline_config(tax_out, {});
      const TransformerModel m = load_model((tax_out / "lm/model.bin").string());
      const World w = generate_world(cfg.world);
      return loopback(m, build_stimuli(w, 0, cfg.stimuli));
    });
    progress("criterion 4");
    results[4] = guarded([&] { return control_ordering(tax_out); });
    progress("criterion 5");
    results[5] = guarded([&] { return ambiguity(wd, tax_out); });
  }

  const char* names[] = {"",
                         "autodiff gradients match central differences",
                         "Cayley rotations stay orthogonal",
                         "planted-model oracle",
                         "control ordering on the taxonomy-trained model",
                         "ambiguity diagnosis",
                         "behavioural metric oracles",
                         "sampling contracts",
                         "loopback client equivalence",
                         "end-to-end reproducibility and runtime"};
  int failed = 0;
  for (int c = 1; c <= 9; ++c) {
    const Outcome& o = results[c];
    std::printf("%s criterion %d: %s -- %s\n", o.pass ? "PASS" : "FAIL", c, names[c], o.detail.c_str());
    failed += !o.pass;
  }
  std::printf("%d of 9 criteria passed\n", 9 - failed);
  return failed ? 1 : 0;
}
