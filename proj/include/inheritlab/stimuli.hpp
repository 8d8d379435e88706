#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "inheritlab/world.hpp"

namespace ilab {

enum class Direction { kForward, kReversed };
enum class Bin { kHigh, kLow };
const char* direction_name(Direction d);
const char* bin_name(Bin b);
Direction parse_direction(const std::string& s);
Bin parse_bin(const std::string& s);

// A nonce property realised either copularly ("is daxable") or
// possessively ("has feps").
struct PropertyPhrase {
  std::string word;
  bool possessive = false;
  std::string predicate(bool singular) const;
};
// The two evaluation properties: daxable (copular) and feps (possessive).
PropertyPhrase held_out_property(const std::string& word);
inline constexpr const char* kDaxable = "daxable";
inline constexpr const char* kFeps = "feps";

// Surface noun phrase: the plural, or the lemma for mass nouns.
std::string surface_form(const Concept& c);
bool is_singular(const Concept& c);

// Instantiates template 1-4 with the premise (A) and conclusion (B) noun
// phrases and predicates.
std::string render_prompt(int template_id, const std::string& a_np, const std::string& a_pred,
                          const std::string& b_np, const std::string& b_pred);

struct ParsedPrompt {
  int template_id = 0;
  std::string premise_np, premise_property;
  std::string conclusion_np, conclusion_property;
};
ParsedPrompt parse_prompt(const std::string& text);

struct CategoryPair {
  std::string premise;     // superordinate category
  std::string conclusion;  // candidate member
  bool taxonomic = false;
  double similarity = 0.0;
  Bin bin = Bin::kLow;
};

// All k members of every category plus the most and least similar
// non-members. Odd k takes ceil(k/2) from the top and floor(k/2) from the
// bottom so that each category still contributes k negatives.
std::vector<CategoryPair> sample_pairs(const World& w, std::size_t space);

// High/Low labels for one premise group: strictly above the median is High,
// strictly below is Low, and values tied with the median are handed out in
// descending order to whichever side is smaller (High first on a tie).
std::vector<Bin> median_bins(std::span<const double> similarities);
void bin_similarity(std::vector<CategoryPair>& pairs);

struct Stimulus {
  std::string id;
  std::size_t pair_index = 0;  // position in the sampled pair list
  std::string premise, conclusion;  // pair order, before applying direction
  bool taxonomic = false;
  double similarity = 0.0;
  Bin bin = Bin::kLow;
  Direction direction = Direction::kForward;
  std::string property_premise, property_conclusion;
  int template_id = 2;
  std::string text;
  std::string expected_label;  // "Yes" / "No"
  std::string space;
  std::string set;  // base | swap | mismatch | reversed

  // Premise and conclusion as they appear in the text.
  const std::string& text_premise() const {
    return direction == Direction::kForward ? premise : conclusion;
  }
  const std::string& text_conclusion() const {
    return direction == Direction::kForward ? conclusion : premise;
  }
};

// Label rule shared by rendering and the causal model.
std::string expected_label(bool taxonomic, Direction d, const std::string& prop_premise,
                           const std::string& prop_conclusion, bool reversed_is_no = true);

Stimulus render(const World& w, const CategoryPair& pair, const std::string& prop_premise,
                const std::string& prop_conclusion, Direction direction, int template_id,
                bool reversed_is_no = true);

struct StimuliConfig {
  int template_id = 2;
  std::uint64_t seed = 13;
  bool reversed_is_no = true;
};

struct StimulusSets {
  std::string space;
  std::vector<CategoryPair> pairs;
  std::vector<Stimulus> base;      // daxable on both sides, forward
  std::vector<Stimulus> swap;      // half switched to feps
  std::vector<Stimulus> mismatch;  // one side switched to feps
  std::vector<Stimulus> reversed;  // base with the nouns swapped
};

StimulusSets build_stimuli(const World& w, std::size_t space, const StimuliConfig& cfg);
std::vector<Stimulus> make_property_swap_set(const World& w, const std::vector<Stimulus>& base,
                                             std::uint64_t seed);
std::vector<Stimulus> make_mismatch_set(const World& w, const std::vector<Stimulus>& base,
                                        std::uint64_t seed);
std::vector<Stimulus> make_reversed_set(const World& w, const std::vector<Stimulus>& base,
                                        bool reversed_is_no = true);

void write_stimuli_jsonl(const std::vector<Stimulus>& items, const std::string& path);
std::vector<Stimulus> read_stimuli_jsonl(const std::string& path);

}  // namespace ilab
