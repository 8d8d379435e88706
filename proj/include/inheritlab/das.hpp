#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "inheritlab/nanolm.hpp"
#include "inheritlab/stimuli.hpp"
#include "inheritlab/world.hpp"

namespace ilab {

// ---------------------------------------------------------------------------
// Causal model: output = property-match AND "B is a kind of A".

struct CausalModel {
  bool reversed_is_no = true;

  bool property_match(const Stimulus& s) const { return s.property_premise == s.property_conclusion; }
  // Value of the taxonomic node for the text as written.
  bool taxonomic_node(const Stimulus& s) const {
    return s.taxonomic && (s.direction == Direction::kForward || !reversed_is_no);
  }
  bool output(bool taxonomic, bool match) const { return taxonomic && match; }
  // Output for `base` after setting its taxonomic node to the source's value.
  bool counterfactual(const Stimulus& base, const Stimulus& source) const {
    return output(taxonomic_node(source), property_match(base));
  }
};

// ---------------------------------------------------------------------------
// Sites

enum class TokenRole { kPremiseFirst, kPremiseLast, kConclusionFirst, kConclusionLast, kFinal };
const char* role_name(TokenRole r);
TokenRole parse_role(const std::string& s);
std::vector<TokenRole> all_roles();

struct InterventionSite {
  std::size_t layer = 0;
  TokenRole role = TokenRole::kFinal;
  Stream stream = Stream::kResidual;
};

// Absolute position (including <bos>) of `role` in the tokenised prompt.
std::size_t resolve_position(const Tokenizer& tok, const std::string& text, TokenRole role);

// ---------------------------------------------------------------------------
// Counterfactual datasets

enum class Setting { kBalanced, kControl, kAmbiguous, kUnambiguous };
const char* setting_name(Setting s);
Setting parse_setting(const std::string& s);

struct LabelPair {
  std::string first = "Yes";  // the label that a Yes from the causal model maps to
  std::string second = "No";
};

struct CounterfactualPair {
  Stimulus base, source;
  std::string label;  // counterfactual label, already mapped into the label pair
};

struct DatasetConfig {
  double train_fraction = 3000.0 / 4018.0;
  std::size_t train_size = 0;  // explicit sizes override the fraction when non-zero
  std::size_t test_size = 0;
  bool stratify = false;       // interleave (±Tax, ±Sim) slices before pairing
  bool reversed_is_no = true;
};

struct CounterfactualDataset {
  Setting setting = Setting::kBalanced;
  LabelPair labels;
  std::vector<CounterfactualPair> train, test, gen;  // gen empty for Balanced/Control
};

// Pairs every stimulus with a source drawn without replacement (a
// fixed-point-free permutation) and splits the pairs.
std::vector<CounterfactualPair> pair_without_replacement(const std::vector<Stimulus>& items,
                                                         std::uint64_t seed, bool stratify,
                                                         const CausalModel& cm, const LabelPair& lp);
CounterfactualDataset build_counterfactual_dataset(const std::vector<Stimulus>& stimuli,
                                                   Setting setting, std::uint64_t seed,
                                                   const DatasetConfig& cfg = {});

// ---------------------------------------------------------------------------
// Rotation interventions

struct RotationIntervention {
  std::size_t dim = 0;
  Tensor skew;                 // d x d, strict upper triangle used
  double raw_lo = -6.0, raw_hi = -0.1;  // squashed into 0 <= lo <= hi <= 1
  double tau = 1.0;
  std::vector<bool> hard_mask;  // fixed after training
  InterventionSite site;

  Tensor rotation() const;
  WindowBounds bounds() const { return squash_bounds(raw_lo, raw_hi); }
  std::vector<double> soft_gate(double t) const;
  // Mask of coordinates whose gate exceeds 0.5 at temperature t.
  std::vector<bool> mask_at(double t) const;
  std::size_t mask_width() const;
};

// R = I with an empty hard mask: leaves every activation unchanged.
RotationIntervention identity_intervention(std::size_t dim, InterventionSite site);
RotationIntervention random_intervention(std::size_t dim, InterventionSite site, std::uint64_t seed,
                                         double init_scale);

// v' = R^T (g * R s + (1 - g) * R b) with the given gate.
std::vector<double> intervene(const std::vector<double>& base, const std::vector<double>& source,
                              const Tensor& rotation, const std::vector<double>& gate);
// Same with the intervention's hard mask; an empty mask returns `base` exactly.
std::vector<double> intervene(const std::vector<double>& base, const std::vector<double>& source,
                              const RotationIntervention& iv);

struct DasHparams {
  std::size_t epochs = 2;
  std::size_t batch = 16;
  double lr = 1e-3;            // rotation parameters
  double boundary_lr = 1e-2;   // boundary scalars
  std::size_t grad_accum = 1;  // micro-batches per optimizer step
  double tau_start = 1.0;
  double tau_end = 0.01;
  double init_scale = 0.1;     // std of the initial skew parameters
  std::uint64_t seed = 0;
};

struct DasReport {
  std::vector<double> losses;         // per optimizer step
  std::vector<double> orthogonality;  // ||R^T R - I||_F after every step
  std::vector<double> soft_width;     // summed soft gate after every step
  double final_loss = 0.0;
  std::size_t steps = 0;
};

// Per-stimulus activations cached for a model, keyed by prompt text.
class TraceCache {
 public:
  explicit TraceCache(const TransformerModel& m) : model_(m) {}
  const TraceBundle& get(const std::string& text);
  const TransformerModel& model() const { return model_; }

 private:
  const TransformerModel& model_;
  std::map<std::string, TraceBundle> traces_;
};

RotationIntervention train_das(const TransformerModel& model, const std::vector<CounterfactualPair>& pairs,
                               const InterventionSite& site, const DasHparams& hp,
                               DasReport* report = nullptr, TraceCache* cache = nullptr);

// Fraction of pairs whose patched P_rel(label.first) > 0.5 exactly when the
// counterfactual label is label.first. Uses the hard mask.
double evaluate_iia(const TransformerModel& model, const RotationIntervention& iv,
                    const std::vector<CounterfactualPair>& pairs, const LabelPair& labels,
                    TraceCache* cache = nullptr);
// P_rel(label.first) of the patched model for one pair.
double patched_p_rel(const TransformerModel& model, const RotationIntervention& iv,
                     const CounterfactualPair& pair, const LabelPair& labels, TraceCache* cache = nullptr);
// P_rel(label.first) of the un-patched model on a stimulus.
double unpatched_p_rel(const TransformerModel& model, const Stimulus& s, const LabelPair& labels,
                       TraceCache* cache = nullptr);

struct SdiResult {
  double sdi = 0.0;
  std::size_t input = 0, after_behavior = 0, after_flip = 0, successes = 0;
};
// Pairs must have a non-taxonomic base and a taxonomic source.
SdiResult sdi_evaluate(const World& w, const TransformerModel& model, const RotationIntervention& iv,
                       const std::vector<CounterfactualPair>& pairs, TraceCache* cache = nullptr);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  std::size_t layer = 0;
  TokenRole role = TokenRole::kFinal;
  Setting setting = Setting::kBalanced;
  double iia = 0.0;                 // test split
  std::optional<double> iia_gen;    // Ambiguous / Unambiguous generalisation split
  std::size_t mask_width = 0;
  double final_loss = 0.0;
  std::string error;                // non-empty when the cell failed
  std::optional<RotationIntervention> intervention;
};

struct SweepConfig {
  std::vector<std::size_t> layers;  // empty means all layers
  std::vector<TokenRole> roles;     // empty means all roles
  Stream stream = Stream::kResidual;
  DasHparams hparams;
  std::size_t threads = 1;
  bool keep_interventions = false;
  std::function<void(const SweepCell&)> on_cell;
};

// Seed used for the cell at (layer, role); cells are reproducible in isolation.
std::uint64_t cell_seed(std::uint64_t base, std::size_t layer, TokenRole role);

SweepCell run_cell(const TransformerModel& model, const CounterfactualDataset& ds, std::size_t layer,
                   TokenRole role, const SweepConfig& cfg);
std::vector<SweepCell> sweep(const TransformerModel& model, const CounterfactualDataset& ds,
                             const SweepConfig& cfg);

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path);

void save_intervention(const RotationIntervention& iv, const std::string& path);
RotationIntervention load_intervention(const std::string& path);

// ---------------------------------------------------------------------------
// Planted oracle built over a world whose nouns are single tokens.

struct PlantedWorld {
  TransformerModel model;
  PlantedSpec spec;
  PlantedSite site;
};
PlantedWorld build_planted_world(const World& w, ModelConfig config, bool order_sensitive,
                                 int template_id = 2);

}  // namespace ilab
