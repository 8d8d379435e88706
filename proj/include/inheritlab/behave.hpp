#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "inheritlab/nanolm.hpp"
#include "inheritlab/stimuli.hpp"

namespace ilab {

// Answer strings whose probabilities are maximised per label.
struct LabelSet {
  std::vector<std::string> yes{"Yes", " Yes"};
  std::vector<std::string> no{"No", " No"};
  static LabelSet control() { return {{"chart", " chart"}, {"view", " view"}}; }
};

struct LabelProbs {
  std::vector<double> yes, no;  // one probability per variant
};

struct ScoreRecord {
  std::string stimulus_id;
  double p_yes = 0.0;  // max over Yes variants
  double p_no = 0.0;   // max over No variants
  double p_rel_yes = 0.0;
  double p_rel_no() const { return 1.0 - p_rel_yes; }
};

// yes / (yes + no) after taking the maximum over each variant family.
// Throws kUndefined when both maxima are zero.
double p_rel_yes(std::span<const double> yes_probs, std::span<const double> no_probs);
// Same, reading the variant probabilities out of a full next-token distribution.
double p_rel_yes(std::span<const double> distribution, std::span<const int> yes_ids,
                 std::span<const int> no_ids);

// Anything that can report label-variant probabilities for prompts.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string model_id() const = 0;
  virtual std::vector<LabelProbs> label_probs(const std::vector<std::string>& prompts,
                                              const LabelSet& labels) = 0;
};

// Scores prompts with an in-process toy model. Probabilities are
// exp(log_softmax(logits)) at the final position.
class ModelScorer : public Scorer {
 public:
  ModelScorer(const TransformerModel& model, std::string id, std::size_t threads = 1)
      : model_(model), id_(std::move(id)), threads_(threads) {}
  std::string model_id() const override { return id_; }
  std::vector<LabelProbs> label_probs(const std::vector<std::string>& prompts,
                                      const LabelSet& labels) override;

 private:
  const TransformerModel& model_;
  std::string id_;
  std::size_t threads_;
};

// Log-probabilities of each continuation's first token after `prompt`, as
// served over the wire protocol.
std::vector<double> continuation_logprobs(const TransformerModel& m, const std::string& prompt,
                                          const std::vector<std::string>& continuations);

struct ScoreBatch {
  std::vector<ScoreRecord> records;   // aligned with `kept`
  std::vector<std::size_t> kept;      // indices into the scored stimuli
  std::size_t excluded = 0;           // undefined scores
};
ScoreBatch score_stimuli(Scorer& scorer, const std::vector<Stimulus>& items,
                         const LabelSet& labels = {});

// Records paired with their stimuli.
struct Scored {
  const Stimulus* stimulus = nullptr;
  double p_rel_yes = 0.0;
};
std::vector<Scored> pair_up(const std::vector<Stimulus>& items, const ScoreBatch& batch);

double taxonomic_sensitivity(std::span<const Scored> records);
double property_sensitivity(std::span<const Scored> swap_records);
double mismatch_sensitivity(std::span<const Scored> mismatch_records);
// Over taxonomic pairs: forward P_rel > 0.5 and reversed P_rel < 0.5.
// Items are matched by pair index; a taxonomic item without a partner throws.
double directional_sensitivity(std::span<const Scored> forward, std::span<const Scored> reversed);
// Spearman correlation of forward vs reversed P_rel over taxonomic pairs.
double directional_rho(std::span<const Scored> forward, std::span<const Scored> reversed);

// Pearson correlation of average ranks. Throws kUndefined on zero rank variance.
double spearman(std::span<const double> xs, std::span<const double> ys);
std::vector<double> average_ranks(std::span<const double> xs);

struct SliceMean {
  bool taxonomic = false;
  bool high_similarity = false;
  std::size_t count = 0;
  double mean = 0.0;
};
// Mean P_rel(Yes) in each non-empty (±Tax, ±Sim) slice, ordered
// (−Tax,−Sim), (−Tax,+Sim), (+Tax,−Sim), (+Tax,+Sim).
std::vector<SliceMean> slice_means(std::span<const Scored> records);

struct MetricsReport {
  std::string model, space;
  int template_id = 2;
  std::size_t n_base = 0, excluded = 0;
  double ts = 0.0;
  std::optional<double> ps, ms, ds, rho, rho_ds;
  std::vector<SliceMean> slices;
};

struct BehaviorRun {
  MetricsReport metrics;
  std::vector<Scored> base, swap, mismatch, reversed;
};

// Scores every set in `sets` and computes the metric suite.
BehaviorRun run_behavior(Scorer& scorer, const StimulusSets& sets, int template_id,
                         const LabelSet& labels = {});

std::string metrics_json(const MetricsReport& r);
// Columns: stimulus_id, taxonomic, similarity, bin, direction,
// property_premise, property_conclusion, p_rel_yes.
void write_results_csv(const BehaviorRun& run, const std::string& path);
void write_metrics_json(const std::vector<MetricsReport>& reports, const std::string& path);

// Shortest decimal form that round-trips exactly.
std::string format_double(double v);

}  // namespace ilab
