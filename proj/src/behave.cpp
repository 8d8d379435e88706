#include "inheritlab/behave.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <thread>

#include "inheritlab/error.hpp"

namespace ilab {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double p_rel_yes(std::span<const double> yes_probs, std::span<const double> no_probs) {
  if (yes_probs.empty() || no_probs.empty())
    fail(ErrorCode::kInvalidArgument, "p_rel_yes: variant sets must be non-empty");
  const double y = *std::max_element(yes_probs.begin(), yes_probs.end());
  const double n = *std::max_element(no_probs.begin(), no_probs.end());
  if (!(y >= 0.0) || !(n >= 0.0)) fail(ErrorCode::kInvalidArgument, "p_rel_yes: negative probability");
  if (y + n == 0.0) fail(ErrorCode::kUndefined, "p_rel_yes: both label probabilities are zero");
  return y / (y + n);
}

double p_rel_yes(std::span<const double> dist, std::span<const int> yes_ids,
                 std::span<const int> no_ids) {
  for (int y : yes_ids)
    if (std::find(no_ids.begin(), no_ids.end(), y) != no_ids.end())
      fail(ErrorCode::kInvalidArgument, "p_rel_yes: Yes and No variant sets overlap");
  auto gather = [&](std::span<const int> ids) {
    std::vector<double> out;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= dist.size())
        fail(ErrorCode::kInvalidArgument, "p_rel_yes: token id out of range");
      out.push_back(dist[static_cast<std::size_t>(id)]);
    }
    return out;
  };
  const auto y = gather(yes_ids), n = gather(no_ids);
  return p_rel_yes(y, n);
}

std::vector<double> continuation_logprobs(const TransformerModel& m, const std::string& prompt,
                                          const std::vector<std::string>& continuations) {
  const std::vector<int> base = encode_prompt(m, prompt);
  std::vector<double> out;
  std::vector<double> base_row;  // log-softmax after the prompt, computed once
  for (const std::string& c : continuations) {
    const std::vector<int> ids = m.tokenizer.encode(c);
    if (ids.empty()) fail(ErrorCode::kInvalidArgument, "continuation '" + c + "' has no tokens");
    if (base_row.empty()) {
      const Tensor logits = forward_logits(m, base);
      const Tensor last = kernels::slice_rows(logits, logits.rows() - 1, 1);
      const Tensor lp = kernels::log_softmax_rows(last);
      base_row.assign(lp.values().begin(), lp.values().end());
    }
    double total = base_row[static_cast<std::size_t>(ids[0])];
    if (ids.size() > 1) {
      std::vector<int> seq = base;
      seq.insert(seq.end(), ids.begin(), ids.end() - 1);
      const Tensor lp = kernels::log_softmax_rows(forward_logits(m, seq));
      for (std::size_t i = 1; i < ids.size(); ++i)
        total += lp.at(base.size() - 1 + i, static_cast<std::size_t>(ids[i]));
    }
    out.push_back(total);
  }
  return out;
}

std::vector<LabelProbs> ModelScorer::label_probs(const std::vector<std::string>& prompts,
                                                 const LabelSet& labels) {
  std::vector<std::string> conts = labels.yes;
  conts.insert(conts.end(), labels.no.begin(), labels.no.end());
  std::vector<LabelProbs> out(prompts.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::vector<double> lp = continuation_logprobs(model_, prompts[i], conts);
      for (std::size_t j = 0; j < lp.size(); ++j)
        (j < labels.yes.size() ? out[i].yes : out[i].no).push_back(std::exp(lp[j]));
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads_, prompts.size()));
  if (n_threads == 1) {
    work(0, prompts.size());
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(n_threads);
  const std::size_t chunk = (prompts.size() + n_threads - 1) / n_threads;
  for (std::size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        work(t * chunk, std::min(prompts.size(), (t + 1) * chunk));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

ScoreBatch score_stimuli(Scorer& scorer, const std::vector<Stimulus>& items, const LabelSet& labels) {
  std::vector<std::string> prompts;
  prompts.reserve(items.size());
  for (const Stimulus& s : items) prompts.push_back(s.text);
  const std::vector<LabelProbs> probs = scorer.label_probs(prompts, labels);
  if (probs.size() != items.size())
    fail(ErrorCode::kProtocol, "scorer returned " + std::to_string(probs.size()) + " results for " +
                                   std::to_string(items.size()) + " prompts");
  ScoreBatch b;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const LabelProbs& p = probs[i];
    try {
      ScoreRecord r;
      r.stimulus_id = items[i].id;
      r.p_rel_yes = p_rel_yes(p.yes, p.no);
      r.p_yes = *std::max_element(p.yes.begin(), p.yes.end());
      r.p_no = *std::max_element(p.no.begin(), p.no.end());
      b.records.push_back(std::move(r));
      b.kept.push_back(i);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kUndefined) throw;
      ++b.excluded;
    }
  }
  return b;
}

std::vector<Scored> pair_up(const std::vector<Stimulus>& items, const ScoreBatch& batch) {
  std::vector<Scored> out;
  out.reserve(batch.kept.size());
  for (std::size_t j = 0; j < batch.kept.size(); ++j) {
    const Stimulus& s = items.at(batch.kept[j]);
    if (s.id != batch.records[j].stimulus_id) fail(ErrorCode::kInternal, "score records out of order");
    out.push_back({&s, batch.records[j].p_rel_yes});
  }
  return out;
}

namespace {

void require_nonempty(std::span<const Scored> r, const char* what) {
  if (r.empty()) fail(ErrorCode::kInvalidArgument, std::string(what) + ": empty input");
}

}  // namespace

double taxonomic_sensitivity(std::span<const Scored> records) {
  require_nonempty(records, "taxonomic_sensitivity");
  std::size_t ok = 0;
  for (const Scored& r : records)
    ok += r.stimulus->taxonomic ? r.p_rel_yes > 0.5 : r.p_rel_yes < 0.5;
  return static_cast<double>(ok) / static_cast<double>(records.size());
}

double property_sensitivity(std::span<const Scored> swap_records) {
  require_nonempty(swap_records, "property_sensitivity");
  return taxonomic_sensitivity(swap_records);
}

double mismatch_sensitivity(std::span<const Scored> records) {
  require_nonempty(records, "mismatch_sensitivity");
  std::size_t ok = 0;
  for (const Scored& r : records) ok += r.p_rel_yes < 0.5;
  return static_cast<double>(ok) / static_cast<double>(records.size());
}

namespace {

// Taxonomic (forward, reversed) P_rel pairs matched by pair index.
std::vector<std::pair<double, double>> direction_pairs(std::span<const Scored> forward,
                                                       std::span<const Scored> reversed) {
  std::map<std::size_t, double> rev;
  for (const Scored& r : reversed) {
    if (r.stimulus->direction != Direction::kReversed)
      fail(ErrorCode::kInvalidArgument, "directional metrics: reversed set holds a forward item");
    if (r.stimulus->taxonomic) rev[r.stimulus->pair_index] = r.p_rel_yes;
  }
  std::vector<std::pair<double, double>> out;
  for (const Scored& f : forward) {
    if (!f.stimulus->taxonomic) continue;
    if (f.stimulus->direction != Direction::kForward)
      fail(ErrorCode::kInvalidArgument, "directional metrics: forward set holds a reversed item");
    auto it = rev.find(f.stimulus->pair_index);
    if (it == rev.end())
      fail(ErrorCode::kInvalidArgument, "directional metrics: no reversed partner for " + f.stimulus->id);
    out.emplace_back(f.p_rel_yes, it->second);
    rev.erase(it);
  }
  if (!rev.empty())
    fail(ErrorCode::kInvalidArgument, "directional metrics: " + std::to_string(rev.size()) +
                                          " reversed items have no forward partner");
  if (out.empty()) fail(ErrorCode::kInvalidArgument, "directional metrics: no taxonomic pairs");
  return out;
}

}  // namespace

double directional_sensitivity(std::span<const Scored> forward, std::span<const Scored> reversed) {
  const auto pairs = direction_pairs(forward, reversed);
  std::size_t ok = 0;
  for (const auto& [f, r] : pairs) ok += f > 0.5 && r < 0.5;
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

double directional_rho(std::span<const Scored> forward, std::span<const Scored> reversed) {
  const auto pairs = direction_pairs(forward, reversed);
  std::vector<double> a, b;
  for (const auto& [f, r] : pairs) {
    a.push_back(f);
    b.push_back(r);
  }
  return spearman(a, b);
}

std::vector<double> average_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) fail(ErrorCode::kInvalidArgument, "spearman: length mismatch");
  if (xs.size() < 3) fail(ErrorCode::kInvalidArgument, "spearman: need at least 3 observations");
  for (double v : xs)
    if (!std::isfinite(v)) fail(ErrorCode::kInvalidArgument, "spearman: non-finite value");
  for (double v : ys)
    if (!std::isfinite(v)) fail(ErrorCode::kInvalidArgument, "spearman: non-finite value");
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorCode::kUndefined, "spearman: zero rank variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<SliceMean> slice_means(std::span<const Scored> records) {
  std::vector<SliceMean> all;
  for (bool tax : {false, true})
    for (bool high : {false, true}) {
      SliceMean s{tax, high, 0, 0.0};
      double sum = 0.0;
      for (const Scored& r : records)
        if (r.stimulus->taxonomic == tax && (r.stimulus->bin == Bin::kHigh) == high) {
          sum += r.p_rel_yes;
          ++s.count;
        }
      if (s.count == 0) continue;
      s.mean = sum / static_cast<double>(s.count);
      all.push_back(s);
    }
  return all;
}

BehaviorRun run_behavior(Scorer& scorer, const StimulusSets& sets, int template_id,
                         const LabelSet& labels) {
  BehaviorRun run;
  MetricsReport& m = run.metrics;
  m.space = sets.space;
  m.template_id = template_id;
  auto score = [&](const std::vector<Stimulus>& items, std::vector<Scored>& dest) {
    if (items.empty()) return;
    const ScoreBatch b = score_stimuli(scorer, items, labels);
    m.excluded += b.excluded;
    dest = pair_up(items, b);
  };
  score(sets.base, run.base);
  score(sets.swap, run.swap);
  score(sets.mismatch, run.mismatch);
  score(sets.reversed, run.reversed);
  m.model = scorer.model_id();  // remote scorers learn their id from the first response
  m.n_base = run.base.size();
  m.ts = taxonomic_sensitivity(run.base);
  if (!run.swap.empty()) m.ps = property_sensitivity(run.swap);
  if (!run.mismatch.empty()) m.ms = mismatch_sensitivity(run.mismatch);
  if (!run.reversed.empty()) {
    m.ds = directional_sensitivity(run.base, run.reversed);
    try {
      m.rho_ds = directional_rho(run.base, run.reversed);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kUndefined) throw;
    }
  }
  std::vector<double> p, sim;
  for (const Scored& r : run.base) {
    p.push_back(r.p_rel_yes);
    sim.push_back(r.stimulus->similarity);
  }
  try {
    m.rho = spearman(p, sim);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kUndefined) throw;
  }
  m.slices = slice_means(run.base);
  return run;
}

namespace {

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["space"] = r.space;
  j["template"] = r.template_id;
  j["n_base"] = r.n_base;
  j["excluded"] = r.excluded;
  j["ts"] = r.ts;
  auto opt = [&](const char* key, const std::optional<double>& v) {
    j[key] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  opt("ps", r.ps);
  opt("ms", r.ms);
  opt("ds", r.ds);
  opt("rho", r.rho);
  opt("rho_ds", r.rho_ds);
  nlohmann::ordered_json slices = nlohmann::ordered_json::array();
  for (const SliceMean& s : r.slices)
    slices.push_back({{"taxonomic", s.taxonomic}, {"high_similarity", s.high_similarity},
                      {"count", s.count}, {"mean_p_rel_yes", s.mean}});
  j["slices"] = slices;
  return j;
}

}  // namespace

std::string metrics_json(const MetricsReport& r) { return to_json(r).dump(2); }

void write_metrics_json(const std::vector<MetricsReport>& reports, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path);
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const MetricsReport& r : reports) arr.push_back(to_json(r));
  os << arr.dump(2) << '\n';
}

void write_results_csv(const BehaviorRun& run, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path);
  os << "stimulus_id,taxonomic,similarity,bin,direction,property_premise,property_conclusion,p_rel_yes\n";
  for (const auto* set : {&run.base, &run.swap, &run.mismatch, &run.reversed})
    for (const Scored& r : *set) {
      const Stimulus& s = *r.stimulus;
      os << s.id << ',' << (s.taxonomic ? 1 : 0) << ',' << format_double(s.similarity) << ','
         << bin_name(s.bin) << ',' << direction_name(s.direction) << ',' << s.property_premise << ','
         << s.property_conclusion << ',' << format_double(r.p_rel_yes) << '\n';
    }
}

}  // namespace ilab
