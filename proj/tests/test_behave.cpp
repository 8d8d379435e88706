#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "inheritlab/behave.hpp"
#include "inheritlab/das.hpp"
#include "inheritlab/error.hpp"
#include "inheritlab/world.hpp"

using namespace ilab;

namespace {

// Responds with a fixed P_rel per prompt, chosen by a callback on the stimulus.
class ScriptedScorer : public Scorer {
 public:
  explicit ScriptedScorer(std::map<std::string, double> table) : table_(std::move(table)) {}
  std::string model_id() const override { return "scripted"; }
  std::vector<LabelProbs> label_probs(const std::vector<std::string>& prompts, const LabelSet&) override {
    std::vector<LabelProbs> out;
    for (const std::string& p : prompts) {
      const double y = table_.at(p);
      out.push_back({{y, y / 2}, {1.0 - y, 0.0}});
    }
    return out;
  }

 private:
  std::map<std::string, double> table_;
};

std::map<std::string, double> script(const StimulusSets& sets,
                                     const std::function<double(const Stimulus&)>& f) {
  std::map<std::string, double> t;
  for (const auto* v : {&sets.base, &sets.swap, &sets.mismatch, &sets.reversed})
    for (const Stimulus& s : *v) t[s.text] = f(s);
  return t;
}

// Closed-form tie-corrected Spearman, with ranks found by brute-force counting.
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [&](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        less += v[j] < v[i];
        equal += v[j] == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  auto tie_term = [&](const std::vector<double>& v) {
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

}  // namespace

TEST_CASE("p_rel examples") {
  CHECK(p_rel_yes(std::vector<double>{0.3}, std::vector<double>{0.3}) == 0.5);
  CHECK(p_rel_yes(std::vector<double>{0.20, 0.25}, std::vector<double>{0.10, 0.05}) ==
        doctest::Approx(0.25 / 0.35).epsilon(1e-15));
  CHECK(p_rel_yes(std::vector<double>{0.2}, std::vector<double>{0.0}) == 1.0);
  try {
    p_rel_yes(std::vector<double>{0.0}, std::vector<double>{0.0});
    FAIL("expected undefined score");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUndefined);
  }
  const std::vector<double> dist{0.1, 0.2, 0.3, 0.4};
  CHECK(p_rel_yes(dist, std::vector<int>{1, 3}, std::vector<int>{0}) == doctest::Approx(0.8));
  CHECK_THROWS_AS(p_rel_yes(dist, std::vector<int>{1}, std::vector<int>{1}), Error);
  ScoreRecord r{"x", 0.2, 0.1, p_rel_yes(std::vector<double>{0.2}, std::vector<double>{0.1})};
  CHECK(r.p_rel_yes + r.p_rel_no() == 1.0);
}

TEST_CASE("Spearman: exact cases and tie oracle") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10}, c{5, 4, 3, 2, 1};
  CHECK(spearman(a, b) == 1.0);
  CHECK(spearman(a, c) == -1.0);
  const std::vector<double> x{1, 2, 2, 3}, y{10, 20, 30, 40};
  CHECK(std::abs(spearman(x, y) - spearman_oracle(x, y)) < 1e-12);
  CHECK(std::abs(spearman(x, y) - 9.0 / (2.0 * std::sqrt(22.5))) < 1e-12);

  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coarse(0, 6);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> u(3 + t % 40), v(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] = coarse(rng);
      v[i] = coarse(rng) + 0.5 * u[i];
    }
    double s = 0;
    try {
      s = spearman(u, v);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kUndefined);
      continue;
    }
    CHECK(std::abs(s - spearman_oracle(u, v)) < 1e-12);
  }
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), Error);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);
}

TEST_CASE("TS on a scripted 8-record table matches a hand count") {
  std::vector<Stimulus> st(8);
  const bool tax[8] = {true, true, true, true, false, false, false, false};
  const double p[8] = {0.9, 0.5, 0.51, 0.2, 0.1, 0.5, 0.7, 0.49};
  std::vector<Scored> rec;
  for (int i = 0; i < 8; ++i) {
    st[i].taxonomic = tax[i];
    rec.push_back({&st[i], p[i]});
  }
  // Correct: 0.9, 0.51 (tax) and 0.1, 0.49 (non-tax).
  CHECK(taxonomic_sensitivity(rec) == 0.5);
  CHECK(mismatch_sensitivity(rec) == 3.0 / 8.0);
  for (auto& r : rec) r.p_rel_yes = 0.5;
  CHECK(taxonomic_sensitivity(rec) == 0.0);
  CHECK_THROWS_AS(taxonomic_sensitivity(std::vector<Scored>{}), Error);
}

TEST_CASE("scripted responders over generated stimulus sets") {
  const World w = generate_world(WorldSpec{});
  const StimulusSets sets = build_stimuli(w, 0, {});

  SUBCASE("perfect responder") {
    ScriptedScorer s(script(sets, [](const Stimulus& x) { return x.expected_label == "Yes" ? 0.9 : 0.1; }));
    const BehaviorRun run = run_behavior(s, sets, 2);
    CHECK(run.metrics.ts == 1.0);
    CHECK(*run.metrics.ps == 1.0);
    CHECK(*run.metrics.ms == 1.0);
    CHECK(*run.metrics.ds == 1.0);
  }
  SUBCASE("always No") {
    ScriptedScorer s(script(sets, [](const Stimulus&) { return 0.2; }));
    const BehaviorRun run = run_behavior(s, sets, 2);
    CHECK(*run.metrics.ms == 1.0);
    CHECK(run.metrics.ts <= 0.5);
  }
  SUBCASE("order-blind Yes on taxonomic pairs") {
    ScriptedScorer s(script(sets, [](const Stimulus& x) { return x.taxonomic ? 0.8 : 0.3; }));
    const BehaviorRun run = run_behavior(s, sets, 2);
    CHECK(*run.metrics.ds == 0.0);
  }
  SUBCASE("brute-force metrics, invariances and slice partition") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::map<std::string, double> table = script(sets, [&](const Stimulus&) { return u(rng); });
    // The scorer reports y and 1 - y, so the expected P_rel is y / (y + (1 - y)).
    for (auto& [k, v] : table) v = v / (v + (1.0 - v));
    ScriptedScorer s(table);
    const BehaviorRun run = run_behavior(s, sets, 2);

    // Oracle recount straight from the table.
    auto count = [&](const std::vector<Stimulus>& v, const std::function<bool(const Stimulus&, double)>& ok) {
      double n = 0;
      for (const Stimulus& x : v) n += ok(x, table.at(x.text));
      return n / static_cast<double>(v.size());
    };
    auto ts_rule = [](const Stimulus& x, double p) { return x.taxonomic ? p > 0.5 : p < 0.5; };
    CHECK(run.metrics.ts == count(sets.base, ts_rule));
    CHECK(*run.metrics.ps == count(sets.swap, ts_rule));
    CHECK(*run.metrics.ms == count(sets.mismatch, [](const Stimulus&, double p) { return p < 0.5; }));
    double ds_ok = 0, ds_n = 0;
    std::vector<double> fw, rv, pr, sim;
    for (std::size_t i = 0; i < sets.base.size(); ++i) {
      pr.push_back(table.at(sets.base[i].text));
      sim.push_back(sets.base[i].similarity);
      if (!sets.base[i].taxonomic) continue;
      const double f = table.at(sets.base[i].text), r = table.at(sets.reversed[i].text);
      ds_n += 1;
      ds_ok += f > 0.5 && r < 0.5;
      fw.push_back(f);
      rv.push_back(r);
    }
    CHECK(*run.metrics.ds == ds_ok / ds_n);
    CHECK(std::abs(*run.metrics.rho - spearman_oracle(pr, sim)) < 1e-12);
    CHECK(std::abs(*run.metrics.rho_ds - spearman_oracle(fw, rv)) < 1e-12);

    // Chance calibration for a uniform random responder.
    const double sigma = std::sqrt(0.25 / static_cast<double>(sets.base.size()));
    CHECK(std::abs(run.metrics.ts - 0.5) < 3 * sigma);
    CHECK(std::abs(*run.metrics.ps - 0.5) < 3 * sigma);
    CHECK(std::abs(*run.metrics.ms - 0.5) < 3 * sigma);

    // Slice means recombine to the global mean.
    double total = 0, weighted = 0;
    std::size_t n = 0;
    for (const Scored& r : run.base) total += r.p_rel_yes;
    for (const SliceMean& sl : run.metrics.slices) {
      weighted += sl.mean * static_cast<double>(sl.count);
      n += sl.count;
    }
    CHECK(n == run.base.size());
    CHECK(std::abs(weighted / n - total / n) < 1e-12);

    // Affine maps fixing 0.5 keep the sensitivities; monotone maps keep rho.
    for (double a : {0.3, 1.0}) {
      std::map<std::string, double> t2;
      for (const auto& [k, v] : table) t2[k] = 0.5 + a * (v - 0.5);
      ScriptedScorer s2(t2);
      const BehaviorRun r2 = run_behavior(s2, sets, 2);
      CHECK(r2.metrics.ts == run.metrics.ts);
      CHECK(*r2.metrics.ps == *run.metrics.ps);
      CHECK(*r2.metrics.ms == *run.metrics.ms);
      CHECK(*r2.metrics.ds == *run.metrics.ds);
    }
    std::map<std::string, double> t3;
    for (const auto& [k, v] : table) t3[k] = v * v * v;
    ScriptedScorer s3(t3);
    CHECK(*run_behavior(s3, sets, 2).metrics.rho == *run.metrics.rho);
  }
}

TEST_CASE("undefined scores are excluded and counted") {
  const World w = generate_world(WorldSpec{});
  StimulusSets sets = build_stimuli(w, 0, {});
  class ZeroFirst : public Scorer {
   public:
    std::string model_id() const override { return "z"; }
    std::vector<LabelProbs> label_probs(const std::vector<std::string>& prompts, const LabelSet&) override {
      std::vector<LabelProbs> out(prompts.size(), LabelProbs{{0.7}, {0.3}});
      out[0] = {{0.0}, {0.0}};
      return out;
    }
  } z;
  sets.swap.clear();
  sets.mismatch.clear();
  sets.reversed.clear();
  const BehaviorRun run = run_behavior(z, sets, 2);
  CHECK(run.metrics.excluded == 1);
  CHECK(run.metrics.n_base == sets.base.size() - 1);
  CHECK_FALSE(run.metrics.ds.has_value());
}

TEST_CASE("directional sensitivity needs paired items") {
  const World w = generate_world(WorldSpec{});
  const StimulusSets sets = build_stimuli(w, 0, {});
  std::vector<Scored> f, r;
  for (const Stimulus& s : sets.base) f.push_back({&s, 0.9});
  for (std::size_t i = 1; i < sets.reversed.size(); ++i) r.push_back({&sets.reversed[i], 0.1});
  CHECK_THROWS_AS(directional_sensitivity(f, r), Error);
}

TEST_CASE("planted models: directional sensitivity 1 when order matters, 0 when it does not") {
  WorldSpec spec;
  spec.n_superordinates = 8;
  spec.hyphenated_fraction = 0.0;
  spec.seed = 21;
  const World w = generate_world(spec);
  ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 64;
  mc.n_heads = 2;
  mc.max_context = 32;
  const StimulusSets sets = build_stimuli(w, 0, StimuliConfig{});
  for (bool sensitive : {true, false}) {
    const PlantedWorld pw = build_planted_world(w, mc, sensitive);
    ModelScorer scorer(pw.model, "planted");
    const BehaviorRun run = run_behavior(scorer, sets, 2);
    REQUIRE(run.metrics.ds.has_value());
    CHECK(*run.metrics.ds == (sensitive ? 1.0 : 0.0));
    CHECK(run.metrics.ts == 1.0);
    CHECK(run.metrics.excluded == 0);
  }
}
