#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ilab {

struct Concept {
  std::string lemma;
  std::string plural;  // empty for mass nouns
  bool mass = false;
  std::string sense_id;
};

enum class SpaceTag { kWordSense, kSpose, kSynthetic };
const char* space_tag_name(SpaceTag t);
SpaceTag parse_space_tag(const std::string& s);

struct EmbeddingSpace {
  std::string name;
  SpaceTag tag = SpaceTag::kSynthetic;
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;  // unit length

  bool has(const std::string& lemma) const { return vectors.count(lemma) != 0; }
  const std::vector<double>& at(const std::string& lemma) const;
};

enum class LabelRuleKind { kTaxonomy, kSimilarity, kMixed };

// Decides whether the toy corpus labels a (category, concept) pair Yes.
// Mixed: Yes iff beta * taxonomic + (1 - beta) * cosine > threshold.
struct LabelRule {
  LabelRuleKind kind = LabelRuleKind::kTaxonomy;
  double threshold = 0.55;
  double beta = 0.5;
  std::size_t space = 0;  // embedding space used by similarity-based rules

  bool label(bool taxonomic, double similarity) const;
  std::string describe() const;
};
LabelRule parse_label_rule(const std::string& s);

struct WorldSpec {
  std::size_t n_superordinates = 16;
  std::size_t k = 8;                 // members per category, even
  std::size_t dim = 48;
  double noise = 0.15;               // isotropic noise on typical members
  double sibling_overlap = 0.85;     // cosine between paired category prototypes
  double atypical_similarity = 0.35; // cosine of atypical members to their prototype
  double hyphenated_fraction = 0.15; // members named by two hyphen-joined words
  double mass_fraction = 0.06;       // members that are mass nouns
  LabelRule label_rule;
  std::uint64_t seed = 7;

  void validate() const;
};

struct World {
  std::vector<Concept> concepts;
  std::unordered_map<std::string, std::size_t> index;  // lemma -> concepts position
  std::vector<std::string> superordinates;              // in declaration order
  std::map<std::string, std::vector<std::string>> taxonomy;
  std::vector<EmbeddingSpace> spaces;
  LabelRule label_rule;
  std::vector<std::string> warnings;

  const Concept& find_concept(const std::string& lemma) const;
  bool is_member(const std::string& category, const std::string& lemma) const;
  // Concepts that are a member of at least one category.
  std::vector<std::string> subordinates() const;
  std::size_t taxonomic_pair_count() const;
  std::size_t space_index(const std::string& name) const;
};

World generate_world(const WorldSpec& spec);

struct LoadPaths {
  std::string concepts;
  std::string taxonomy;
  std::vector<std::pair<std::string, std::string>> embeddings;  // (file, tag)
};
World load_world(const LoadPaths& paths);

struct WorldCounts {
  std::size_t superordinates = 0;
  std::size_t subordinates = 0;
  std::size_t taxonomic_pairs = 0;
  std::size_t spaces = 0;
};
WorldCounts count(const World& w);

double cosine(std::span<const double> a, std::span<const double> b);

// Per-category similarity diagnostics for a space.
struct CategorySimilarity {
  std::string category;
  double median_member = 0.0;
  double min_member = 0.0;
  double max_nonmember = 0.0;
  std::size_t nonmembers_above_median = 0;
};
std::vector<CategorySimilarity> similarity_profile(const World& w, std::size_t space);

// Writes concepts.tsv, taxonomy.tsv and one embeddings file per space.
void save_world(const World& w, const std::string& dir);

// Writes a THINGS-format export whose category names and sizes follow the
// published premise-category table (44 categories, 1,281 subordinates).
LoadPaths write_things_format_fixture(const std::string& dir, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training corpus for the toy model.

struct CorpusConfig {
  std::vector<std::string> copular_properties;    // e.g. "blickable"
  std::vector<std::string> possessive_properties; // e.g. "tomas"
  std::size_t qa_per_pair = 8;        // labelled QA items per (category, concept) pair
  double mismatch_fraction = 0.2;     // QA items with differing properties, labelled No
  double reversed_fraction = 0.25;    // QA items with the nouns swapped
  std::size_t distractor_pairs = 0;   // extra random non-member pairs per category
  int template_id = 2;
  std::uint64_t seed = 11;

  static CorpusConfig defaults();
  void validate() const;
};

struct CorpusItem {
  std::string text;        // full training text, answer included for QA items
  bool qa = false;
  std::string prompt;      // QA prompt without the answer
  std::string answer;      // "Yes" / "No"
  std::string category, member;  // QA nouns in (premise, conclusion) order
};

struct Corpus {
  std::vector<CorpusItem> items;
  std::vector<std::string> heldout_properties;  // {"daxable", "feps"}
};

// Taxonomy statements for every membership plus labelled QA items.
Corpus emit_corpus(const World& w, const CorpusConfig& cfg);

}  // namespace ilab
