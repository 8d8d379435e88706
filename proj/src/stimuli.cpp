#include "inheritlab/stimuli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>
#include <random>
#include <regex>

#include "inheritlab/error.hpp"

namespace ilab {

const char* direction_name(Direction d) { return d == Direction::kForward ? "forward" : "reversed"; }
const char* bin_name(Bin b) { return b == Bin::kHigh ? "high" : "low"; }

Direction parse_direction(const std::string& s) {
  if (s == "forward") return Direction::kForward;
  if (s == "reversed") return Direction::kReversed;
  fail(ErrorCode::kIngest, "unknown direction '" + s + "'");
}

Bin parse_bin(const std::string& s) {
  if (s == "high") return Bin::kHigh;
  if (s == "low") return Bin::kLow;
  fail(ErrorCode::kIngest, "unknown bin '" + s + "'");
}

std::string PropertyPhrase::predicate(bool singular) const {
  if (possessive) return std::string(singular ? "has " : "have ") + word;
  return std::string(singular ? "is " : "are ") + word;
}

PropertyPhrase held_out_property(const std::string& word) {
  if (word == kDaxable) return {word, false};
  if (word == kFeps) return {word, true};
  fail(ErrorCode::kInvalidArgument, "unknown evaluation property '" + word + "'");
}

bool is_singular(const Concept& c) { return c.mass; }

std::string surface_form(const Concept& c) {
  if (c.mass) return c.lemma;
  if (c.plural.empty()) fail(ErrorCode::kIngest, "lexicon: count noun '" + c.lemma + "' has no plural");
  return c.plural;
}

namespace {

const char* template_text(int id) {
  switch (id) {
    case 1: return "Answer the question. Given that {A} {pa}, is it true that {B} {pb}? Answer with Yes/No.\n";
    case 2: return "Answer the question. Given that {A} {pa}, is it true that {B} {pb}? Answer with Yes/No. The answer is:";
    case 3: return "Answer the question. Given that {A} {pa}, is it true that {B} {pb}?\nAnswer with Yes/No.\n";
    case 4: return "Given that {A} {pa}, is it true that {B} {pb}? Answer with Yes/No:";
  }
  fail(ErrorCode::kConfig, "template id must be 1-4, got " + std::to_string(id));
}

void replace_once(std::string& s, const std::string& key, const std::string& value) {
  const std::size_t at = s.find(key);
  s.replace(at, key.size(), value);
}

std::string escape_regex(const std::string& s) {
  static const std::string special = R"(\^$.|?*+()[]{}/)";
  std::string out;
  for (char c : s) {
    if (special.find(c) != std::string::npos) out += '\\';
    out += c;
  }
  return out;
}

const std::vector<std::regex>& template_patterns() {
  static const std::vector<std::regex> patterns = [] {
    std::vector<std::regex> v;
    for (int id = 1; id <= 4; ++id) {
      std::string pat = escape_regex(template_text(id));
      const std::string clause = "(.+?) (?:is|are|has|have) (\\S+)";
      replace_once(pat, escape_regex("{A} {pa}"), clause);
      replace_once(pat, escape_regex("{B} {pb}"), clause);
      v.emplace_back(pat);
    }
    return v;
  }();
  return patterns;
}

}  // namespace

std::string render_prompt(int template_id, const std::string& a_np, const std::string& a_pred,
                          const std::string& b_np, const std::string& b_pred) {
  std::string s = template_text(template_id);
  replace_once(s, "{A}", a_np);
  replace_once(s, "{pa}", a_pred);
  replace_once(s, "{B}", b_np);
  replace_once(s, "{pb}", b_pred);
  return s;
}

ParsedPrompt parse_prompt(const std::string& text) {
  const auto& pats = template_patterns();
  for (int id = 1; id <= 4; ++id) {
    std::smatch m;
    if (std::regex_match(text, m, pats[id - 1]))
      return {id, m[1].str(), m[2].str(), m[3].str(), m[4].str()};
  }
  fail(ErrorCode::kIngest, "text does not match any prompt template: " + text);
}

std::vector<Bin> median_bins(std::span<const double> s) {
  const std::size_t n = s.size();
  std::vector<Bin> bins(n, Bin::kLow);
  if (n == 0) return bins;
  std::vector<double> sorted(s.begin(), s.end());
  std::sort(sorted.begin(), sorted.end());
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::size_t high = 0, low = 0;
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < n; ++i) {
    if (s[i] > median) {
      bins[i] = Bin::kHigh;
      ++high;
    } else if (s[i] < median) {
      ++low;
    } else {
      ties.push_back(i);
    }
  }
  std::stable_sort(ties.begin(), ties.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  for (std::size_t i : ties) {
    if (high <= low) {
      bins[i] = Bin::kHigh;
      ++high;
    } else {
      bins[i] = Bin::kLow;
      ++low;
    }
  }
  return bins;
}

void bin_similarity(std::vector<CategoryPair>& pairs) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].premise].push_back(i);
  for (const auto& [premise, idx] : groups) {
    std::vector<double> sims;
    for (std::size_t i : idx) sims.push_back(pairs[i].similarity);
    const std::vector<Bin> bins = median_bins(sims);
    for (std::size_t j = 0; j < idx.size(); ++j) pairs[idx[j]].bin = bins[j];
  }
}

std::vector<CategoryPair> sample_pairs(const World& w, std::size_t space) {
  require(space < w.spaces.size(), "sample_pairs: space index out of range");
  const EmbeddingSpace& sp = w.spaces[space];
  const std::vector<std::string> subs = w.subordinates();
  std::vector<CategoryPair> out;
  for (const std::string& cat : w.superordinates) {
    const auto& members = w.taxonomy.at(cat);
    const std::size_t k = members.size();
    const auto& cv = sp.at(cat);
    for (const std::string& m : members) out.push_back({cat, m, true, cosine(cv, sp.at(m)), Bin::kLow});

    std::vector<std::pair<double, std::string>> neg;
    for (const std::string& m : subs)
      if (m != cat && !w.is_member(cat, m) && sp.has(m)) neg.emplace_back(cosine(cv, sp.at(m)), m);
    if (neg.size() < k)
      fail(ErrorCode::kIngest, "sample_pairs: category '" + cat + "' has " + std::to_string(neg.size()) +
                                   " non-member candidates, needs " + std::to_string(k));
    std::sort(neg.begin(), neg.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::size_t top = (k + 1) / 2, bottom = k / 2;
    for (std::size_t i = 0; i < top; ++i) out.push_back({cat, neg[i].second, false, neg[i].first, Bin::kLow});
    for (std::size_t i = neg.size() - bottom; i < neg.size(); ++i)
      out.push_back({cat, neg[i].second, false, neg[i].first, Bin::kLow});
  }
  bin_similarity(out);
  return out;
}

std::string expected_label(bool taxonomic, Direction d, const std::string& prop_premise,
                           const std::string& prop_conclusion, bool reversed_is_no) {
  const bool tax = taxonomic && (d == Direction::kForward || !reversed_is_no);
  return tax && prop_premise == prop_conclusion ? "Yes" : "No";
}

Stimulus render(const World& w, const CategoryPair& pair, const std::string& prop_premise,
                const std::string& prop_conclusion, Direction direction, int template_id,
                bool reversed_is_no) {
  if (pair.premise == pair.conclusion) fail(ErrorCode::kInvalidArgument, "render: premise equals conclusion");
  Stimulus s;
  s.premise = pair.premise;
  s.conclusion = pair.conclusion;
  s.taxonomic = pair.taxonomic;
  s.similarity = pair.similarity;
  s.bin = pair.bin;
  s.direction = direction;
  s.property_premise = prop_premise;
  s.property_conclusion = prop_conclusion;
  s.template_id = template_id;
  const Concept& a = w.find_concept(s.text_premise());
  const Concept& b = w.find_concept(s.text_conclusion());
  s.text = render_prompt(template_id, surface_form(a), held_out_property(prop_premise).predicate(is_singular(a)),
                         surface_form(b), held_out_property(prop_conclusion).predicate(is_singular(b)));
  s.expected_label = expected_label(s.taxonomic, direction, prop_premise, prop_conclusion, reversed_is_no);
  return s;
}

namespace {

std::string make_id(const std::string& set, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  return set + "-" + buf;
}

Stimulus rerender(const World& w, const Stimulus& base, const std::string& pp, const std::string& pc,
                  Direction d, const std::string& set, bool reversed_is_no) {
  CategoryPair pair{base.premise, base.conclusion, base.taxonomic, base.similarity, base.bin};
  Stimulus s = render(w, pair, pp, pc, d, base.template_id, reversed_is_no);
  s.pair_index = base.pair_index;
  s.space = base.space;
  s.set = set;
  s.id = make_id(set, base.pair_index);
  return s;
}

}  // namespace

std::vector<Stimulus> make_property_swap_set(const World& w, const std::vector<Stimulus>& base,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> tax, non;
  for (std::size_t i = 0; i < base.size(); ++i) (base[i].taxonomic ? tax : non).push_back(i);
  std::shuffle(tax.begin(), tax.end(), rng);
  std::shuffle(non.begin(), non.end(), rng);
  const std::size_t want = base.size() / 2;
  std::size_t nt = tax.size() / 2, nn = non.size() / 2;
  if (nt + nn < want) {
    // Both strata odd: one extra item from a seeded coin.
    const bool pick_tax = std::bernoulli_distribution(0.5)(rng);
    (pick_tax ? nt : nn) += 1;
  }
  std::vector<bool> swap(base.size(), false);
  for (std::size_t i = 0; i < nt; ++i) swap[tax[i]] = true;
  for (std::size_t i = 0; i < nn; ++i) swap[non[i]] = true;
  std::vector<Stimulus> out;
  out.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const std::string p = swap[i] ? kFeps : kDaxable;
    out.push_back(rerender(w, base[i], p, p, base[i].direction, "swap", true));
    out.back().expected_label = base[i].expected_label;
  }
  return out;
}

std::vector<Stimulus> make_mismatch_set(const World& w, const std::vector<Stimulus>& base,
                                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<Stimulus> out;
  out.reserve(base.size());
  for (const Stimulus& b : base) {
    const bool premise_side = coin(rng);
    out.push_back(rerender(w, b, premise_side ? kFeps : kDaxable, premise_side ? kDaxable : kFeps,
                           b.direction, "mismatch", true));
  }
  return out;
}

std::vector<Stimulus> make_reversed_set(const World& w, const std::vector<Stimulus>& base,
                                        bool reversed_is_no) {
  std::vector<Stimulus> out;
  out.reserve(base.size());
  for (const Stimulus& b : base)
    out.push_back(rerender(w, b, b.property_premise, b.property_conclusion, Direction::kReversed,
                           "reversed", reversed_is_no));
  return out;
}

StimulusSets build_stimuli(const World& w, std::size_t space, const StimuliConfig& cfg) {
  StimulusSets sets;
  sets.space = w.spaces.at(space).name;
  sets.pairs = sample_pairs(w, space);
  sets.base.reserve(sets.pairs.size());
  for (std::size_t i = 0; i < sets.pairs.size(); ++i) {
    Stimulus s = render(w, sets.pairs[i], kDaxable, kDaxable, Direction::kForward, cfg.template_id,
                        cfg.reversed_is_no);
    s.pair_index = i;
    s.space = sets.space;
    s.set = "base";
    s.id = make_id("base", i);
    sets.base.push_back(std::move(s));
  }
  sets.swap = make_property_swap_set(w, sets.base, cfg.seed);
  sets.mismatch = make_mismatch_set(w, sets.base, cfg.seed + 1);
  sets.reversed = make_reversed_set(w, sets.base, cfg.reversed_is_no);
  return sets;
}

void write_stimuli_jsonl(const std::vector<Stimulus>& items, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path);
  for (const Stimulus& s : items) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["set"] = s.set;
    j["space"] = s.space;
    j["pair_index"] = s.pair_index;
    j["premise"] = s.premise;
    j["conclusion"] = s.conclusion;
    j["taxonomic"] = s.taxonomic;
    j["similarity"] = s.similarity;
    j["bin"] = bin_name(s.bin);
    j["direction"] = direction_name(s.direction);
    j["property_premise"] = s.property_premise;
    j["property_conclusion"] = s.property_conclusion;
    j["template_id"] = s.template_id;
    j["text"] = s.text;
    j["expected_label"] = s.expected_label;
    os << j.dump() << '\n';
  }
}

std::vector<Stimulus> read_stimuli_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot open " + path);
  std::vector<Stimulus> out;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(is, line)) {
    ++ln;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Stimulus s;
      s.id = j.at("id").get<std::string>();
      s.set = j.at("set").get<std::string>();
      s.space = j.at("space").get<std::string>();
      s.pair_index = j.at("pair_index").get<std::size_t>();
      s.premise = j.at("premise").get<std::string>();
      s.conclusion = j.at("conclusion").get<std::string>();
      s.taxonomic = j.at("taxonomic").get<bool>();
      s.similarity = j.at("similarity").get<double>();
      s.bin = parse_bin(j.at("bin").get<std::string>());
      s.direction = parse_direction(j.at("direction").get<std::string>());
      s.property_premise = j.at("property_premise").get<std::string>();
      s.property_conclusion = j.at("property_conclusion").get<std::string>();
      s.template_id = j.at("template_id").get<int>();
      s.text = j.at("text").get<std::string>();
      s.expected_label = j.at("expected_label").get<std::string>();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kIngest, path + ":" + std::to_string(ln) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ilab
