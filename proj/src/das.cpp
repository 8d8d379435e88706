#include "inheritlab/das.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <tuple>
#include <json.hpp>
#include <numeric>
#include <random>
#include <thread>

#include "inheritlab/behave.hpp"
#include "inheritlab/error.hpp"
#include "inheritlab/optim.hpp"
#include "inheritlab/tape.hpp"

namespace ilab {

namespace k = kernels;

const char* role_name(TokenRole r) {
  switch (r) {
    case TokenRole::kPremiseFirst: return "premise-first";
    case TokenRole::kPremiseLast: return "premise-last";
    case TokenRole::kConclusionFirst: return "conclusion-first";
    case TokenRole::kConclusionLast: return "conclusion-last";
    case TokenRole::kFinal: return "final";
  }
  return "?";
}

TokenRole parse_role(const std::string& s) {
  for (TokenRole r : all_roles())
    if (s == role_name(r)) return r;
  fail(ErrorCode::kConfig, "unknown token role '" + s + "'");
}

std::vector<TokenRole> all_roles() {
  return {TokenRole::kPremiseFirst, TokenRole::kPremiseLast, TokenRole::kConclusionFirst,
          TokenRole::kConclusionLast, TokenRole::kFinal};
}

const char* setting_name(Setting s) {
  switch (s) {
    case Setting::kBalanced: return "balanced";
    case Setting::kControl: return "control";
    case Setting::kAmbiguous: return "ambiguous";
    case Setting::kUnambiguous: return "unambiguous";
  }
  return "?";
}

Setting parse_setting(const std::string& s) {
  for (Setting v : {Setting::kBalanced, Setting::kControl, Setting::kAmbiguous, Setting::kUnambiguous})
    if (s == setting_name(v)) return v;
  fail(ErrorCode::kConfig, "unknown setting '" + s + "'");
}

std::size_t resolve_position(const Tokenizer&, const std::string& text, TokenRole role) {
  const std::vector<std::string> tok = Tokenizer::split(text);
  if (role == TokenRole::kFinal) return tok.size();  // <bos> shifts every index by one
  std::vector<std::size_t> that;
  for (std::size_t i = 0; i < tok.size(); ++i)
    if (tok[i] == "that") that.push_back(i);
  if (that.size() < 2) fail(ErrorCode::kInvalidArgument, "cannot resolve token roles in: " + text);
  const bool premise = role == TokenRole::kPremiseFirst || role == TokenRole::kPremiseLast;
  const std::size_t start = that[premise ? 0 : 1] + 1;
  std::size_t end = start;
  while (end < tok.size() && tok[end] != "is" && tok[end] != "are" && tok[end] != "has" && tok[end] != "have")
    ++end;
  if (end == start || end == tok.size())
    fail(ErrorCode::kInvalidArgument, std::string("cannot resolve role ") + role_name(role) + " in: " + text);
  const bool first = role == TokenRole::kPremiseFirst || role == TokenRole::kConclusionFirst;
  return 1 + (first ? start : end - 1);
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<CounterfactualPair> pair_without_replacement(const std::vector<Stimulus>& items,
                                                         std::uint64_t seed, bool stratify,
                                                         const CausalModel& cm, const LabelPair& lp) {
  // Base and source must share template, direction and properties.
  std::map<std::tuple<int, Direction, std::string, std::string>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Stimulus& s = items[i];
    groups[{s.template_id, s.direction, s.property_premise, s.property_conclusion}].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<CounterfactualPair> out;
  for (auto& [key, idx] : groups) {
    if (idx.size() < 2)
      fail(ErrorCode::kInvalidArgument, "counterfactual pairing: a template/property group has a single stimulus");
    std::vector<std::size_t> order = idx;
    std::shuffle(order.begin(), order.end(), rng);
    if (stratify) {
      // Round-robin over the four (±Tax, ±Sim) slices.
      std::vector<std::vector<std::size_t>> slices(4);
      for (std::size_t i : order)
        slices[(items[i].taxonomic ? 2 : 0) + (items[i].bin == Bin::kHigh ? 1 : 0)].push_back(i);
      order.clear();
      for (std::size_t r = 0; order.size() < idx.size(); ++r)
        for (auto& sl : slices)
          if (r < sl.size()) order.push_back(sl[r]);
    }
    // Each element takes the next one as its source: a single cycle, so
    // every stimulus is a source exactly once and never its own.
    for (std::size_t i = 0; i < order.size(); ++i) {
      const Stimulus& b = items[order[i]];
      const Stimulus& s = items[order[(i + 1) % order.size()]];
      out.push_back({b, s, cm.counterfactual(b, s) ? lp.first : lp.second});
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

namespace {

bool ambiguous_slice(const Stimulus& s) {
  return s.taxonomic == (s.bin == Bin::kHigh);
}

void split(std::vector<CounterfactualPair>&& pairs, const DatasetConfig& cfg, const char* what,
           std::vector<CounterfactualPair>& train, std::vector<CounterfactualPair>& test) {
  std::size_t n_train, n_test;
  if (cfg.train_size || cfg.test_size) {
    n_train = cfg.train_size;
    n_test = cfg.test_size;
    if (n_train + n_test > pairs.size())
      fail(ErrorCode::kConfig, std::string(what) + ": requested " + std::to_string(n_train) + " train + " +
                                   std::to_string(n_test) + " test pairs but only " +
                                   std::to_string(pairs.size()) + " are available");
  } else {
    n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(pairs.size())));
    n_train = std::min(n_train, pairs.size());
    n_test = pairs.size() - n_train;
  }
  if (n_train == 0) fail(ErrorCode::kConfig, std::string(what) + ": training split is empty");
  if (n_test == 0) fail(ErrorCode::kConfig, std::string(what) + ": test split is empty");
  train.assign(pairs.begin(), pairs.begin() + static_cast<long>(n_train));
  test.assign(pairs.begin() + static_cast<long>(n_train), pairs.begin() + static_cast<long>(n_train + n_test));
}

}  // namespace

CounterfactualDataset build_counterfactual_dataset(const std::vector<Stimulus>& stimuli, Setting setting,
                                                   std::uint64_t seed, const DatasetConfig& cfg) {
  CounterfactualDataset ds;
  ds.setting = setting;
  if (setting == Setting::kControl) ds.labels = {"chart", "view"};
  const CausalModel cm{cfg.reversed_is_no};
  std::vector<Stimulus> amb, gen;
  for (const Stimulus& s : stimuli) (ambiguous_slice(s) ? amb : gen).push_back(s);
  auto need = [](const std::vector<Stimulus>& v, const char* slice) {
    if (v.size() < 2)
      fail(ErrorCode::kConfig, std::string("counterfactual dataset: slice ") + slice + " has " +
                                   std::to_string(v.size()) + " stimuli");
  };
  switch (setting) {
    case Setting::kBalanced:
    case Setting::kControl:
    case Setting::kUnambiguous: {
      need(stimuli, "all");
      split(pair_without_replacement(stimuli, seed, cfg.stratify, cm, ds.labels), cfg, setting_name(setting),
            ds.train, ds.test);
      if (setting == Setting::kUnambiguous) {
        need(gen, "{+Tax,-Sim} u {-Tax,+Sim}");
        ds.gen = pair_without_replacement(gen, seed + 1, cfg.stratify, cm, ds.labels);
      }
      break;
    }
    case Setting::kAmbiguous: {
      need(amb, "{+Tax,+Sim} u {-Tax,-Sim}");
      need(gen, "{+Tax,-Sim} u {-Tax,+Sim}");
      split(pair_without_replacement(amb, seed, cfg.stratify, cm, ds.labels), cfg, "ambiguous", ds.train, ds.test);
      ds.gen = pair_without_replacement(gen, seed + 1, cfg.stratify, cm, ds.labels);
      break;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Interventions

Tensor RotationIntervention::rotation() const { return k::cayley(skew); }

std::vector<double> RotationIntervention::soft_gate(double t) const {
  const WindowBounds b = bounds();
  std::vector<double> g(dim);
  for (std::size_t i = 0; i < dim; ++i) g[i] = window_gate_value(b, i, dim, t);
  return g;
}

std::vector<bool> RotationIntervention::mask_at(double t) const {
  const std::vector<double> g = soft_gate(t);
  std::vector<bool> m(dim);
  for (std::size_t i = 0; i < dim; ++i) m[i] = g[i] > 0.5;
  return m;
}

std::size_t RotationIntervention::mask_width() const {
  return static_cast<std::size_t>(std::count(hard_mask.begin(), hard_mask.end(), true));
}

RotationIntervention identity_intervention(std::size_t dim, InterventionSite site) {
  RotationIntervention iv;
  iv.dim = dim;
  iv.skew = Tensor::matrix(dim, dim);
  iv.hard_mask.assign(dim, false);
  iv.site = site;
  return iv;
}

RotationIntervention random_intervention(std::size_t dim, InterventionSite site, std::uint64_t seed,
                                         double init_scale) {
  RotationIntervention iv = identity_intervention(dim, site);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, init_scale);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = i + 1; j < dim; ++j) iv.skew.at(i, j) = n(rng);
  iv.hard_mask = iv.mask_at(iv.tau);
  return iv;
}

std::vector<double> intervene(const std::vector<double>& base, const std::vector<double>& source,
                              const Tensor& r, const std::vector<double>& gate) {
  const std::size_t d = base.size();
  require(source.size() == d && r.rows() == d && r.cols() == d && gate.size() == d,
          "intervene: dimension mismatch");
  std::vector<double> rb(d, 0.0), rs(d, 0.0), out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      rb[i] += r.at(i, j) * base[j];
      rs[i] += r.at(i, j) * source[j];
    }
  for (std::size_t i = 0; i < d; ++i) rb[i] += gate[i] * (rs[i] - rb[i]);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += r.at(i, j) * rb[i];
  return out;
}

std::vector<double> intervene(const std::vector<double>& base, const std::vector<double>& source,
                              const RotationIntervention& iv) {
  require(iv.hard_mask.size() == iv.dim, "intervene: intervention has no hard mask");
  if (iv.mask_width() == 0) return base;
  std::vector<double> g(iv.dim);
  for (std::size_t i = 0; i < iv.dim; ++i) g[i] = iv.hard_mask[i] ? 1.0 : 0.0;
  return intervene(base, source, iv.rotation(), g);
}

const TraceBundle& TraceCache::get(const std::string& text) {
  auto it = traces_.find(text);
  if (it != traces_.end()) return it->second;
  return traces_.emplace(text, forward_with_trace(model_, encode_prompt(model_, text))).first->second;
}

namespace {

struct Resolved {
  const TraceBundle* base = nullptr;
  const TraceBundle* source = nullptr;
  std::size_t base_pos = 0, source_pos = 0;
  int target = 0;
};

Resolved resolve(TraceCache& cache, const CounterfactualPair& p, const InterventionSite& site) {
  const TransformerModel& m = cache.model();
  require(site.layer < m.config.n_layers, "intervention site layer out of range");
  Resolved r;
  r.base = &cache.get(p.base.text);
  r.source = &cache.get(p.source.text);
  r.base_pos = resolve_position(m.tokenizer, p.base.text, site.role);
  r.source_pos = resolve_position(m.tokenizer, p.source.text, site.role);
  if (r.base_pos >= r.base->length() || r.source_pos >= r.source->length())
    fail(ErrorCode::kInvalidArgument, "intervention site beyond prompt length");
  r.target = m.tokenizer.id(p.label);
  return r;
}

Tensor row_tensor(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

double orthogonality_error(const Tensor& r) {
  const Tensor rtr = k::matmul_tn(r, r);
  return frobenius_norm(k::sub(rtr, Tensor::identity(r.rows())));
}

double label_p_rel(const Tensor& logits_row, const TransformerModel& m, const LabelPair& labels) {
  const Tensor lp = k::log_softmax_rows(logits_row);
  const double a = std::exp(lp[static_cast<std::size_t>(m.tokenizer.id(labels.first))]);
  const double b = std::exp(lp[static_cast<std::size_t>(m.tokenizer.id(labels.second))]);
  return p_rel_yes(std::vector<double>{a}, std::vector<double>{b});
}

}  // namespace

RotationIntervention train_das(const TransformerModel& model, const std::vector<CounterfactualPair>& pairs,
                               const InterventionSite& site, const DasHparams& hp, DasReport* report,
                               TraceCache* cache) {
  if (pairs.empty()) fail(ErrorCode::kInvalidArgument, "train_das: no training pairs");
  require(hp.batch > 0 && hp.grad_accum > 0 && hp.lr > 0.0 && hp.boundary_lr > 0.0 &&
              hp.tau_start > 0.0 && hp.tau_end > 0.0,
          "train_das: hyperparameters must be positive");
  TraceCache local(model);
  TraceCache& tc = cache ? *cache : local;
  const std::size_t d = model.config.d_model;
  RotationIntervention iv = random_intervention(d, site, hp.seed, hp.init_scale);

  std::vector<Resolved> res;
  res.reserve(pairs.size());
  for (const CounterfactualPair& p : pairs) res.push_back(resolve(tc, p, site));

  const std::size_t per_epoch = (pairs.size() + hp.batch - 1) / hp.batch;
  const std::size_t micro_total = hp.epochs * per_epoch;
  const std::size_t steps = (micro_total + hp.grad_accum - 1) / hp.grad_accum;
  Adam opt(AdamConfig{hp.lr, 0.9, 0.999, 1e-8, 0.0});
  Tensor raw({2}, {iv.raw_lo, iv.raw_hi});
  const std::vector<double> lr_scale{1.0, hp.boundary_lr / hp.lr};
  DasReport rep;
  std::mt19937_64 rng(hp.seed ^ 0xda5ULL);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0, micro_in_step = 0;
  double step_loss = 0.0;
  std::vector<Tensor> acc{Tensor::zeros_like(iv.skew), Tensor::zeros_like(raw)};
  auto tau_at = [&](std::size_t s) {
    if (steps <= 1) return hp.tau_end;
    const double f = static_cast<double>(s) / static_cast<double>(steps - 1);
    return hp.tau_start + (hp.tau_end - hp.tau_start) * f;
  };

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += hp.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + hp.batch);
      const double tau = tau_at(step);
      Tape t;
      const Var u = t.leaf(iv.skew, true);
      const Var rb = t.leaf(raw, true);
      const Var r = t.cayley(u);
      const Var g = t.window_gate(rb, d, tau);
      Var total;
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const Resolved& rs = res[order[bi]];
        const Var vb = t.leaf(row_tensor(rs.base->site(site.layer, rs.base_pos, site.stream)), false);
        const Var vs = t.leaf(row_tensor(rs.source->site(site.layer, rs.source_pos, site.stream)), false);
        const Var rot_b = t.matmul_nt(vb, r);
        const Var rot_s = t.matmul_nt(vs, r);
        const Var mix = t.add(rot_b, t.mul_rowvec(t.sub(rot_s, rot_b), g));
        const Var v = t.matmul(mix, r);
        const Var logits = suffix_logits(t, model, *rs.base, site.layer, rs.base_pos, v, site.stream);
        const Var l = t.cross_entropy(logits, {rs.target});
        total = total.valid() ? t.add(total, l) : l;
      }
      const Var loss = t.scale(total, 1.0 / static_cast<double>(b1 - b0));
      const double lv = t.value(loss).item();
      if (!std::isfinite(lv))
        fail(ErrorCode::kTraining, "train_das: non-finite loss at step " + std::to_string(step));
      const std::vector<Var> params{u, rb};
      const GradResult gr = t.grad(loss, params);
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += gr.grads[i][j];
      step_loss += lv;
      ++micro_in_step;
      const bool last = epoch + 1 == hp.epochs && b1 == order.size();
      if (micro_in_step == hp.grad_accum || last) {
        for (Tensor& a : acc)
          for (std::size_t j = 0; j < a.size(); ++j) a[j] /= static_cast<double>(micro_in_step);
        Tensor* ps[2] = {&iv.skew, &raw};
        opt.step(ps, acc, lr_scale);
        rep.losses.push_back(step_loss / static_cast<double>(micro_in_step));
        iv.raw_lo = raw[0];
        iv.raw_hi = raw[1];
        rep.orthogonality.push_back(orthogonality_error(iv.rotation()));
        const std::vector<double> sg = iv.soft_gate(tau);
        rep.soft_width.push_back(std::accumulate(sg.begin(), sg.end(), 0.0));
        for (Tensor& a : acc) a = Tensor::zeros_like(a);
        step_loss = 0.0;
        micro_in_step = 0;
        ++step;
      }
    }
  }
  iv.raw_lo = raw[0];
  iv.raw_hi = raw[1];
  iv.tau = hp.tau_end;
  iv.hard_mask = iv.mask_at(hp.tau_end);
  rep.steps = step;
  const std::size_t tail = std::min<std::size_t>(rep.losses.size(), 5);
  rep.final_loss = tail ? std::accumulate(rep.losses.end() - static_cast<long>(tail), rep.losses.end(), 0.0) /
                              static_cast<double>(tail)
                        : 0.0;
  if (report) *report = std::move(rep);
  return iv;
}

double patched_p_rel(const TransformerModel& model, const RotationIntervention& iv,
                     const CounterfactualPair& pair, const LabelPair& labels, TraceCache* cache) {
  TraceCache local(model);
  TraceCache& tc = cache ? *cache : local;
  const Resolved rs = resolve(tc, {pair.base, pair.source, labels.first}, iv.site);
  const std::vector<double> v =
      intervene(rs.base->site(iv.site.layer, rs.base_pos, iv.site.stream),
                rs.source->site(iv.site.layer, rs.source_pos, iv.site.stream), iv);
  Tape t;
  const Var val = t.leaf(row_tensor(v), false);
  const Var logits = suffix_logits(t, model, *rs.base, iv.site.layer, rs.base_pos, val, iv.site.stream);
  return label_p_rel(t.value(logits), model, labels);
}

double unpatched_p_rel(const TransformerModel& model, const Stimulus& s, const LabelPair& labels,
                       TraceCache* cache) {
  TraceCache local(model);
  TraceCache& tc = cache ? *cache : local;
  const TraceBundle& tb = tc.get(s.text);
  return label_p_rel(k::slice_rows(tb.logits, tb.length() - 1, 1), model, labels);
}

double evaluate_iia(const TransformerModel& model, const RotationIntervention& iv,
                    const std::vector<CounterfactualPair>& pairs, const LabelPair& labels, TraceCache* cache) {
  if (pairs.empty()) fail(ErrorCode::kInvalidArgument, "evaluate_iia: empty pair set");
  TraceCache local(model);
  TraceCache& tc = cache ? *cache : local;
  std::size_t ok = 0;
  for (const CounterfactualPair& p : pairs) {
    const double pr = patched_p_rel(model, iv, p, labels, &tc);
    ok += (pr > 0.5) == (p.label == labels.first) && (pr != 0.5);
  }
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

SdiResult sdi_evaluate(const World& w, const TransformerModel& model, const RotationIntervention& iv,
                       const std::vector<CounterfactualPair>& pairs, TraceCache* cache) {
  TraceCache local(model);
  TraceCache& tc = cache ? *cache : local;
  const CausalModel cm;
  const LabelPair yn;
  SdiResult r;
  r.input = pairs.size();
  auto reversed = [&](const Stimulus& s) {
    const CategoryPair cp{s.premise, s.conclusion, s.taxonomic, s.similarity, s.bin};
    Stimulus out = render(w, cp, s.property_premise, s.property_conclusion, Direction::kReversed, s.template_id);
    out.id = s.id + "-rev";
    out.pair_index = s.pair_index;
    return out;
  };
  for (const CounterfactualPair& p : pairs) {
    if (cm.taxonomic_node(p.base) || !cm.taxonomic_node(p.source) || p.base.direction != Direction::kForward)
      fail(ErrorCode::kInvalidArgument, "sdi_evaluate: needs forward pairs with a non-taxonomic base and a "
                                        "taxonomic source");
    if (!(unpatched_p_rel(model, p.base, yn, &tc) < 0.5 && unpatched_p_rel(model, p.source, yn, &tc) > 0.5))
      continue;
    ++r.after_behavior;
    if (!(patched_p_rel(model, iv, p, yn, &tc) > 0.5)) continue;
    ++r.after_flip;
    const CounterfactualPair rp{reversed(p.base), reversed(p.source), "Yes"};
    r.successes += patched_p_rel(model, iv, rp, yn, &tc) > 0.5;
  }
  if (r.after_flip == 0)
    fail(ErrorCode::kUndefined, "sdi_evaluate: no pairs left after filtering (input " + std::to_string(r.input) +
                                    ", behaviourally correct " + std::to_string(r.after_behavior) +
                                    ", flipped by the intervention 0)");
  r.sdi = static_cast<double>(r.successes) / static_cast<double>(r.after_flip);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

std::uint64_t cell_seed(std::uint64_t base, std::size_t layer, TokenRole role) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (1 + layer * 8 + static_cast<std::uint64_t>(role));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SweepCell run_cell(const TransformerModel& model, const CounterfactualDataset& ds, std::size_t layer,
                   TokenRole role, const SweepConfig& cfg) {
  SweepCell c;
  c.layer = layer;
  c.role = role;
  c.setting = ds.setting;
  try {
    DasHparams hp = cfg.hparams;
    hp.seed = cell_seed(cfg.hparams.seed, layer, role);
    TraceCache cache(model);
    DasReport rep;
    const RotationIntervention iv = train_das(model, ds.train, {layer, role, cfg.stream}, hp, &rep, &cache);
    c.iia = evaluate_iia(model, iv, ds.test, ds.labels, &cache);
    if (!ds.gen.empty()) c.iia_gen = evaluate_iia(model, iv, ds.gen, ds.labels, &cache);
    c.mask_width = iv.mask_width();
    c.final_loss = rep.final_loss;
    if (cfg.keep_interventions) c.intervention = iv;
  } catch (const std::exception& e) {
    c.error = e.what();
  }
  return c;
}

std::vector<SweepCell> sweep(const TransformerModel& model, const CounterfactualDataset& ds,
                             const SweepConfig& cfg) {
  std::vector<std::size_t> layers = cfg.layers;
  if (layers.empty())
    for (std::size_t l = 0; l < model.config.n_layers; ++l) layers.push_back(l);
  for (std::size_t l : layers)
    if (l >= model.config.n_layers)
      fail(ErrorCode::kConfig, "sweep: layer " + std::to_string(l) + " out of range");
  const std::vector<TokenRole> roles = cfg.roles.empty() ? all_roles() : cfg.roles;
  std::vector<std::pair<std::size_t, TokenRole>> jobs;
  for (std::size_t l : layers)
    for (TokenRole r : roles) jobs.emplace_back(l, r);
  std::vector<SweepCell> cells(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      cells[i] = run_cell(model, ds, jobs[i].first, jobs[i].second, cfg);
      if (cfg.on_cell) {
        std::lock_guard<std::mutex> lock(report_mu);
        cfg.on_cell(cells[i]);
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(cfg.threads, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return cells;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path);
  os << "layer,role,setting,iia,iia_gen,mask_width,final_loss,error\n";
  for (const SweepCell& c : cells) {
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << c.layer << ',' << role_name(c.role) << ',' << setting_name(c.setting) << ','
       << (c.error.empty() ? format_double(c.iia) : "") << ',' << (c.iia_gen ? format_double(*c.iia_gen) : "")
       << ',' << c.mask_width << ',' << (c.error.empty() ? format_double(c.final_loss) : "") << ',' << err
       << '\n';
  }
}

void save_intervention(const RotationIntervention& iv, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = "inheritlab-intervention";
  j["version"] = 1;
  j["dim"] = iv.dim;
  j["layer"] = iv.site.layer;
  j["role"] = role_name(iv.site.role);
  j["stream"] = stream_name(iv.site.stream);
  j["raw_lo"] = iv.raw_lo;
  j["raw_hi"] = iv.raw_hi;
  j["tau"] = iv.tau;
  j["skew"] = std::vector<double>(iv.skew.values().begin(), iv.skew.values().end());
  std::vector<int> mask;
  for (bool b : iv.hard_mask) mask.push_back(b ? 1 : 0);
  j["hard_mask"] = mask;
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path);
  os << j.dump() << '\n';
}

RotationIntervention load_intervention(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot open " + path);
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.at("format") != "inheritlab-intervention" || j.at("version") != 1)
      fail(ErrorCode::kIngest, path + ": not an intervention file of version 1");
    RotationIntervention iv;
    iv.dim = j.at("dim").get<std::size_t>();
    iv.site = {j.at("layer").get<std::size_t>(), parse_role(j.at("role").get<std::string>()),
               parse_stream(j.at("stream").get<std::string>())};
    iv.raw_lo = j.at("raw_lo").get<double>();
    iv.raw_hi = j.at("raw_hi").get<double>();
    iv.tau = j.at("tau").get<double>();
    const auto skew = j.at("skew").get<std::vector<double>>();
    const auto mask = j.at("hard_mask").get<std::vector<int>>();
    if (skew.size() != iv.dim * iv.dim || mask.size() != iv.dim)
      fail(ErrorCode::kIngest, path + ": array sizes do not match dim");
    iv.skew = Tensor({iv.dim, iv.dim}, skew);
    for (int m : mask) iv.hard_mask.push_back(m != 0);
    return iv;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIngest, path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

PlantedWorld build_planted_world(const World& w, ModelConfig config, bool order_sensitive, int template_id) {
  if (w.superordinates.empty()) fail(ErrorCode::kConfig, "planted world: no categories");
  Tokenizer tok;
  PlantedSpec spec;
  spec.order_sensitive = order_sensitive;
  auto single = [&](const std::string& lemma) {
    const std::string sf = surface_form(w.find_concept(lemma));
    if (Tokenizer::split(sf).size() != 1)
      fail(ErrorCode::kConfig, "planted world: '" + sf + "' is not a single token");
    return tok.add_word(sf);
  };
  std::map<std::string, int> member_of;
  for (std::size_t c = 0; c < w.superordinates.size(); ++c) {
    const std::string& cat = w.superordinates[c];
    spec.category_tokens.emplace_back(single(cat), static_cast<int>(c));
    for (const std::string& m : w.taxonomy.at(cat)) {
      if (member_of.count(m)) fail(ErrorCode::kConfig, "planted world: '" + m + "' belongs to two categories");
      member_of[m] = static_cast<int>(c);
      spec.member_tokens.emplace_back(single(m), static_cast<int>(c));
    }
  }
  const std::string noun = surface_form(w.find_concept(w.superordinates.front()));
  const std::string sample = render_prompt(template_id, noun, "is daxable", noun, "has feps");
  tok.add_text(sample);
  tok.add_text("are have");
  spec.premise_position = resolve_position(tok, sample, TokenRole::kPremiseFirst);
  spec.conclusion_position = resolve_position(tok, sample, TokenRole::kConclusionFirst);
  spec.final_position = resolve_position(tok, sample, TokenRole::kFinal);
  config.vocab_size = tok.size();
  PlantedWorld pw{build_planted_model(config, tok, spec), spec, {}};
  pw.site = planted_site(pw.model, pw.spec);
  return pw;
}

}  // namespace ilab
