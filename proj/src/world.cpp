#include "inheritlab/world.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "inheritlab/error.hpp"
#include "inheritlab/stimuli.hpp"
#include "inheritlab/tokenizer.hpp"

namespace ilab {

namespace fs = std::filesystem;

const char* space_tag_name(SpaceTag t) {
  switch (t) {
    case SpaceTag::kWordSense: return "word-sense";
    case SpaceTag::kSpose: return "spose";
    case SpaceTag::kSynthetic: return "synthetic";
  }
  return "?";
}

SpaceTag parse_space_tag(const std::string& s) {
  if (s == "word-sense") return SpaceTag::kWordSense;
  if (s == "spose") return SpaceTag::kSpose;
  if (s == "synthetic") return SpaceTag::kSynthetic;
  fail(ErrorCode::kConfig, "unknown embedding space tag '" + s + "'");
}

const std::vector<double>& EmbeddingSpace::at(const std::string& lemma) const {
  auto it = vectors.find(lemma);
  if (it == vectors.end()) fail(ErrorCode::kIngest, "no embedding for '" + lemma + "' in " + name);
  return it->second;
}

bool LabelRule::label(bool taxonomic, double similarity) const {
  switch (kind) {
    case LabelRuleKind::kTaxonomy: return taxonomic;
    case LabelRuleKind::kSimilarity: return similarity > threshold;
    case LabelRuleKind::kMixed:
      return beta * (taxonomic ? 1.0 : 0.0) + (1.0 - beta) * similarity > threshold;
  }
  return false;
}

std::string LabelRule::describe() const {
  std::ostringstream os;
  switch (kind) {
    case LabelRuleKind::kTaxonomy: os << "taxonomy"; break;
    case LabelRuleKind::kSimilarity: os << "similarity(" << threshold << ")"; break;
    case LabelRuleKind::kMixed: os << "mixed(" << beta << "," << threshold << ")"; break;
  }
  return os.str();
}

LabelRule parse_label_rule(const std::string& s) {
  LabelRule r;
  if (s == "taxonomy") return r;
  double a = 0.0, b = 0.0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "similarity(%lf)%c", &a, &tail) == 1) {
    r.kind = LabelRuleKind::kSimilarity;
    r.threshold = a;
    return r;
  }
  if (std::sscanf(s.c_str(), "mixed(%lf,%lf)%c", &a, &b, &tail) == 2) {
    r.kind = LabelRuleKind::kMixed;
    r.beta = a;
    r.threshold = b;
    if (a < 0.0 || a > 1.0) fail(ErrorCode::kConfig, "mixed label rule: beta must lie in [0, 1]");
    return r;
  }
  fail(ErrorCode::kConfig, "unknown label rule '" + s +
                               "' (expected taxonomy | similarity(t) | mixed(beta,t))");
}

void WorldSpec::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::kConfig, "world spec: " + m); };
  if (n_superordinates < 2) bad("need at least two superordinates");
  if (k < 2) bad("k must be at least 2");
  if (k % 2 != 0) bad("k must be even so that k/2 splits are exact (got " + std::to_string(k) + ")");
  if (n_superordinates > 200) bad("at most 200 superordinates");
  const std::size_t proto_dims = n_superordinates + (n_superordinates + 1) / 2;
  if (dim < proto_dims + 2)
    bad("dim must be at least " + std::to_string(proto_dims + 2) + " for " +
        std::to_string(n_superordinates) + " categories");
  if (!(noise >= 0.0 && noise <= 1.0)) bad("noise must lie in [0, 1]");
  if (!(sibling_overlap >= 0.0 && sibling_overlap <= 0.95)) bad("sibling_overlap must lie in [0, 0.95]");
  if (!(atypical_similarity > 0.0 && atypical_similarity < 1.0))
    bad("atypical_similarity must lie in (0, 1)");
  if (!(hyphenated_fraction >= 0.0 && hyphenated_fraction <= 1.0)) bad("hyphenated_fraction out of range");
  if (!(mass_fraction >= 0.0 && mass_fraction <= 0.5)) bad("mass_fraction must lie in [0, 0.5]");
}

const Concept& World::find_concept(const std::string& lemma) const {
  auto it = index.find(lemma);
  if (it == index.end()) fail(ErrorCode::kIngest, "unknown concept '" + lemma + "'");
  return concepts[it->second];
}

bool World::is_member(const std::string& category, const std::string& lemma) const {
  auto it = taxonomy.find(category);
  if (it == taxonomy.end()) return false;
  return std::find(it->second.begin(), it->second.end(), lemma) != it->second.end();
}

std::vector<std::string> World::subordinates() const {
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const std::string& c : superordinates)
    for (const std::string& m : taxonomy.at(c))
      if (seen.insert(m).second) out.push_back(m);
  return out;
}

std::size_t World::taxonomic_pair_count() const {
  std::size_t n = 0;
  for (const auto& [c, ms] : taxonomy) n += ms.size();
  return n;
}

std::size_t World::space_index(const std::string& name) const {
  for (std::size_t i = 0; i < spaces.size(); ++i)
    if (spaces[i].name == name) return i;
  fail(ErrorCode::kConfig, "unknown similarity space '" + name + "'");
}

WorldCounts count(const World& w) {
  return {w.superordinates.size(), w.subordinates().size(), w.taxonomic_pair_count(),
          w.spaces.size()};
}

double cosine(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "cosine: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) fail(ErrorCode::kInvalidArgument, "cosine: zero vector");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

namespace {

void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorCode::kNumerical, "cannot normalise a zero vector");
  for (double& x : v) x /= n;
}

// Deterministic pronounceable nonce words.
class NonceLexicon {
 public:
  NonceLexicon(std::uint64_t seed, std::set<std::string> reserved)
      : rng_(seed), used_(std::move(reserved)) {}

  std::string fresh(std::size_t syllables = 2) {
    static const char* onsets[] = {"b",  "bl", "br", "d",  "dr", "f",  "fl", "g",  "gl", "gr",
                                   "k",  "kl", "kr", "m",  "n",  "p",  "pl", "pr", "s",  "sk",
                                   "sl", "sn", "sp", "st", "t",  "tr", "v",  "w",  "z",  "j"};
    static const char* vowels[] = {"a", "e", "i", "o", "u", "oo", "ai", "ee"};
    static const char* codas[] = {"", "", "n", "m", "l", "r", "nd", "st", "t", "b", "d", "g"};
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += onsets[pick(std::size(onsets))];
        w += vowels[pick(std::size(vowels))];
        if (s + 1 == syllables) w += codas[pick(std::size(codas))];
      }
      if (w.back() == 's' || w.back() == 'x' || w.back() == 'z') continue;
      if (used_.insert(w).second && used_.insert(w + "s").second) return w;
    }
    fail(ErrorCode::kInternal, "nonce lexicon exhausted");
  }

  bool reserve(const std::string& w) { return used_.insert(w).second; }

 private:
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  std::mt19937_64 rng_;
  std::set<std::string> used_;
};

std::set<std::string> template_words() {
  std::set<std::string> words = {"daxable", "feps", "Yes", "No", "chart", "view", "is", "are",
                                 "has", "have", "a", "kind", "of"};
  for (int t = 1; t <= 4; ++t)
    for (const std::string& p : Tokenizer::split(render_prompt(t, "A", "is X", "B", "is X")))
      words.insert(p);
  // Keep generated nouns clear of the default training properties.
  const CorpusConfig defaults = CorpusConfig::defaults();
  for (const std::string& p : defaults.copular_properties) words.insert(p);
  for (const std::string& p : defaults.possessive_properties) words.insert(p);
  return words;
}

std::vector<std::vector<double>> orthonormal_basis(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < dim) {
    std::vector<double> v(dim);
    for (double& x : v) x = n(rng);
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
    }
    double nn = 0.0;
    for (double x : v) nn += x * x;
    if (nn < 1e-6) continue;
    normalize(v);
    basis.push_back(std::move(v));
  }
  return basis;
}

void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

EmbeddingSpace synth_space(const WorldSpec& spec, const World& w, const std::string& name,
                           SpaceTag tag, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t C = spec.n_superordinates, dim = spec.dim;
  const auto basis = orthonormal_basis(rng, dim);
  const std::size_t n_pairs = (C + 1) / 2;
  // basis[0..C) own components, basis[C..C+n_pairs) shared sibling
  // components, the rest is the complement used for atypical directions.
  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<double>> proto(C, std::vector<double>(dim, 0.0));
  const double rho = spec.sibling_overlap;
  for (std::size_t p = 0; p < C; p += 2) {
    const std::size_t a = order[p];
    if (p + 1 < C) {
      const std::size_t b = order[p + 1];
      for (std::size_t c : {a, b}) {
        axpy(proto[c], std::sqrt(rho), basis[C + p / 2]);
        axpy(proto[c], std::sqrt(1.0 - rho), basis[c]);
      }
    } else {
      proto[a] = basis[a];
    }
  }
  const std::size_t comp_begin = C + n_pairs;
  auto complement_dir = [&] {
    std::vector<double> v(dim, 0.0);
    for (std::size_t j = comp_begin; j < dim; ++j) axpy(v, normal(rng), basis[j]);
    normalize(v);
    return v;
  };
  auto noisy = [&](std::vector<double> v) {
    if (spec.noise > 0.0) {
      const double s = spec.noise / std::sqrt(static_cast<double>(dim));
      for (double& x : v) x += s * normal(rng);
    }
    normalize(v);
    return v;
  };

  EmbeddingSpace sp;
  sp.name = name;
  sp.tag = tag;
  sp.dim = dim;
  const double beta = spec.atypical_similarity;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::string> members = w.taxonomy.at(w.superordinates[c]);
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<double> mean(dim, 0.0);
    for (std::size_t i = 0; i < members.size(); ++i) {
      std::vector<double> v;
      if (i < members.size() / 2) {
        v = noisy(proto[c]);
      } else {
        v = proto[c];
        for (double& x : v) x *= beta;
        axpy(v, std::sqrt(1.0 - beta * beta), complement_dir());
        v = noisy(std::move(v));
      }
      axpy(mean, 1.0, v);
      sp.vectors[members[i]] = std::move(v);
    }
    if (tag == SpaceTag::kSpose) {
      normalize(mean);
      sp.vectors[w.superordinates[c]] = std::move(mean);
    } else {
      sp.vectors[w.superordinates[c]] = noisy(proto[c]);
    }
  }
  return sp;
}

void add_concept(World& w, Concept c) {
  if (w.index.count(c.lemma)) return;
  w.index.emplace(c.lemma, w.concepts.size());
  w.concepts.push_back(std::move(c));
}

std::string pluralize(const std::string& lemma) {
  const char last = lemma.back();
  if (last == 's' || last == 'x' || last == 'z' || lemma.ends_with("sh") || lemma.ends_with("ch"))
    return lemma + "es";
  return lemma + "s";
}

void check_generated(const World& w, const WorldSpec& spec) {
  for (std::size_t s = 0; s < w.spaces.size(); ++s) {
    double within = 0.0, across = 0.0;
    std::size_t nw = 0, na = 0;
    for (const auto& prof : similarity_profile(w, s)) {
      if (prof.max_nonmember >= 1.0 - 1e-9 || prof.max_nonmember > prof.min_member + 0.5)
        fail(ErrorCode::kConfig, "world spec infeasible: non-members of '" + prof.category +
                                     "' are as similar as its members in space " + w.spaces[s].name);
      if (spec.sibling_overlap > 0.0 && prof.nonmembers_above_median == 0)
        fail(ErrorCode::kConfig, "world spec infeasible: sibling_overlap " +
                                     std::to_string(spec.sibling_overlap) +
                                     " yields no high-similarity non-members for '" +
                                     prof.category + "' in space " + w.spaces[s].name);
    }
    const EmbeddingSpace& sp = w.spaces[s];
    for (const std::string& c : w.superordinates) {
      const auto& cv = sp.at(c);
      for (const std::string& m : w.subordinates()) {
        const double v = cosine(cv, sp.at(m));
        if (w.is_member(c, m)) {
          within += v;
          ++nw;
        } else {
          across += v;
          ++na;
        }
      }
    }
    if (!(within / static_cast<double>(nw) > across / static_cast<double>(na)))
      fail(ErrorCode::kConfig, "world spec infeasible: within-category similarity does not exceed "
                               "cross-category similarity in space " + sp.name);
  }
}

}  // namespace

World generate_world(const WorldSpec& spec) {
  spec.validate();
  World w;
  w.label_rule = spec.label_rule;
  std::mt19937_64 rng(spec.seed);
  NonceLexicon lex(spec.seed ^ 0x9e3779b97f4a7c15ULL, template_words());
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (std::size_t c = 0; c < spec.n_superordinates; ++c) {
    const std::string lemma = lex.fresh(2);
    add_concept(w, {lemma, pluralize(lemma), false, ""});
    w.superordinates.push_back(lemma);
    w.taxonomy[lemma] = {};
  }
  for (const std::string& cat : w.superordinates) {
    for (std::size_t i = 0; i < spec.k; ++i) {
      std::string lemma;
      if (unif(rng) < spec.hyphenated_fraction) {
        lemma = lex.fresh(1) + "-" + lex.fresh(2);
      } else {
        lemma = lex.fresh(2);
      }
      const bool mass = unif(rng) < spec.mass_fraction;
      add_concept(w, {lemma, mass ? "" : pluralize(lemma), mass, ""});
      w.taxonomy[cat].push_back(lemma);
    }
  }
  w.spaces.push_back(synth_space(spec, w, "word-sense", SpaceTag::kWordSense, spec.seed * 2 + 1));
  w.spaces.push_back(synth_space(spec, w, "spose", SpaceTag::kSpose, spec.seed * 2 + 2));
  if (w.label_rule.space >= w.spaces.size())
    fail(ErrorCode::kConfig, "label rule refers to a missing similarity space");
  check_generated(w, spec);
  return w;
}

std::vector<CategorySimilarity> similarity_profile(const World& w, std::size_t space) {
  require(space < w.spaces.size(), "similarity_profile: space out of range");
  const EmbeddingSpace& sp = w.spaces[space];
  const std::vector<std::string> subs = w.subordinates();
  std::vector<CategorySimilarity> out;
  for (const std::string& c : w.superordinates) {
    CategorySimilarity p;
    p.category = c;
    const auto& cv = sp.at(c);
    std::vector<double> mem, non;
    for (const std::string& m : subs) {
      if (m == c || !sp.has(m)) continue;
      (w.is_member(c, m) ? mem : non).push_back(cosine(cv, sp.at(m)));
    }
    if (mem.empty()) continue;
    std::sort(mem.begin(), mem.end());
    const std::size_t h = mem.size() / 2;
    p.median_member = mem.size() % 2 ? mem[h] : 0.5 * (mem[h - 1] + mem[h]);
    p.min_member = mem.front();
    p.max_nonmember = non.empty() ? *std::max_element(non.begin(), non.end()) : -1.0;
    p.nonmembers_above_median = static_cast<std::size_t>(
        std::count_if(non.begin(), non.end(), [&](double v) { return v > p.median_member; }));
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// TSV ingestion

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> f;
  std::size_t start = 0;
  while (true) {
    const std::size_t t = line.find('\t', start);
    f.push_back(line.substr(start, t == std::string::npos ? std::string::npos : t - start));
    if (t == std::string::npos) break;
    start = t + 1;
  }
  return f;
}

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

// Reads a headed TSV; calls `row(fields, line_number)` for each data line.
template <typename F>
void read_tsv(const std::string& path, std::size_t min_fields, F row) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) fail(ErrorCode::kIngest, path + ": missing header row");
  if (split_tabs(trim_cr(line)).size() < min_fields)
    fail(ErrorCode::kIngest, path + ":1: header has fewer than " + std::to_string(min_fields) + " columns");
  std::size_t ln = 1;
  while (std::getline(is, line)) {
    ++ln;
    line = trim_cr(line);
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() < min_fields)
      fail(ErrorCode::kIngest, path + ":" + std::to_string(ln) + ": expected at least " +
                                   std::to_string(min_fields) + " tab-separated fields, got " +
                                   std::to_string(f.size()));
    row(f, ln);
  }
}

double parse_double(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::kIngest, where + ": not a number '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) fail(ErrorCode::kIngest, where + ": not a finite number '" + s + "'");
  return v;
}

}  // namespace

World load_world(const LoadPaths& paths) {
  for (const std::string& p : {paths.concepts, paths.taxonomy})
    if (!fs::exists(p)) fail(ErrorCode::kConfig, "missing input file: " + p);
  if (paths.embeddings.empty()) fail(ErrorCode::kConfig, "at least one embeddings file is required");
  for (const auto& [p, tag] : paths.embeddings)
    if (!fs::exists(p)) fail(ErrorCode::kConfig, "missing embeddings file: " + p);

  World w;
  read_tsv(paths.concepts, 4, [&](const std::vector<std::string>& f, std::size_t ln) {
    const std::string where = paths.concepts + ":" + std::to_string(ln);
    if (f[0].empty()) fail(ErrorCode::kIngest, where + ": empty lemma");
    if (f[2] != "0" && f[2] != "1") fail(ErrorCode::kIngest, where + ": mass_flag must be 0 or 1");
    const bool mass = f[2] == "1";
    if (!mass && f[1].empty()) fail(ErrorCode::kIngest, where + ": plural required for count noun '" + f[0] + "'");
    if (w.index.count(f[0])) {
      w.warnings.push_back(where + ": duplicate concept '" + f[0] + "' ignored");
      return;
    }
    add_concept(w, {f[0], f[1], mass, f[3]});
  });

  std::vector<std::pair<std::string, std::string>> rows;
  std::set<std::pair<std::string, std::string>> seen;
  read_tsv(paths.taxonomy, 2, [&](const std::vector<std::string>& f, std::size_t ln) {
    const std::string where = paths.taxonomy + ":" + std::to_string(ln);
    if (f[0].empty() || f[1].empty()) fail(ErrorCode::kIngest, where + ": empty field");
    if (f[0] == f[1]) fail(ErrorCode::kIngest, where + ": concept '" + f[0] + "' listed as its own member");
    if (!seen.insert({f[0], f[1]}).second) {
      w.warnings.push_back(where + ": duplicate (" + f[1] + ", " + f[0] + ") deduplicated");
      return;
    }
    rows.emplace_back(f[0], f[1]);
  });
  if (rows.empty()) fail(ErrorCode::kIngest, paths.taxonomy + ": taxonomy is empty");

  for (const auto& [path, tag_name] : paths.embeddings) {
    EmbeddingSpace sp;
    sp.tag = parse_space_tag(tag_name);
    sp.name = tag_name;
    for (const EmbeddingSpace& other : w.spaces)
      if (other.name == sp.name) sp.name = tag_name + "-" + std::to_string(w.spaces.size());
    std::size_t unknown = 0;
    read_tsv(path, 2, [&](const std::vector<std::string>& f, std::size_t ln) {
      const std::string where = path + ":" + std::to_string(ln);
      std::vector<double> v;
      for (std::size_t i = 1; i < f.size(); ++i) v.push_back(parse_double(f[i], where));
      if (sp.dim == 0) sp.dim = v.size();
      if (v.size() != sp.dim)
        fail(ErrorCode::kIngest, where + ": expected " + std::to_string(sp.dim) + " values, got " +
                                     std::to_string(v.size()));
      if (!w.index.count(f[0])) {
        ++unknown;
        return;
      }
      double n = 0.0;
      for (double x : v) n += x * x;
      if (n == 0.0) fail(ErrorCode::kIngest, where + ": zero vector for '" + f[0] + "'");
      normalize(v);
      sp.vectors[f[0]] = std::move(v);
    });
    if (unknown)
      w.warnings.push_back(path + ": " + std::to_string(unknown) + " embeddings for unknown concepts ignored");
    w.spaces.push_back(std::move(sp));
  }

  // Keep taxonomy rows whose concepts are known and embedded in every space;
  // superordinates of spose-like spaces are derived from their members.
  std::size_t dropped = 0;
  for (const auto& [cat, mem] : rows) {
    bool ok = w.index.count(cat) && w.index.count(mem);
    for (const EmbeddingSpace& sp : w.spaces) {
      if (!ok) break;
      ok = sp.has(mem) && (sp.tag == SpaceTag::kSpose || sp.has(cat));
    }
    if (!ok) {
      ++dropped;
      continue;
    }
    if (!w.taxonomy.count(cat)) w.superordinates.push_back(cat);
    w.taxonomy[cat].push_back(mem);
  }
  if (dropped)
    w.warnings.push_back(std::to_string(dropped) + " taxonomy rows dropped (unknown concept or missing embedding)");
  if (w.taxonomy.empty()) fail(ErrorCode::kIngest, "no usable taxonomy rows after filtering");

  for (EmbeddingSpace& sp : w.spaces) {
    if (sp.tag != SpaceTag::kSpose) continue;
    for (const std::string& cat : w.superordinates) {
      std::vector<double> mean(sp.dim, 0.0);
      for (const std::string& m : w.taxonomy[cat]) axpy(mean, 1.0, sp.at(m));
      normalize(mean);
      if (sp.has(cat)) w.warnings.push_back(sp.name + ": vector for '" + cat + "' replaced by member mean");
      sp.vectors[cat] = std::move(mean);
    }
  }
  return w;
}

void save_world(const World& w, const std::string& dir) {
  fs::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream os(fs::path(dir) / name);
    if (!os) fail(ErrorCode::kIo, "cannot write " + (fs::path(dir) / name).string());
    return os;
  };
  {
    std::ofstream os = open("concepts.tsv");
    os << "lemma\tplural\tmass_flag\tsense_id\n";
    for (const Concept& c : w.concepts)
      os << c.lemma << '\t' << c.plural << '\t' << (c.mass ? 1 : 0) << '\t' << c.sense_id << '\n';
  }
  {
    std::ofstream os = open("taxonomy.tsv");
    os << "superordinate\tmember\n";
    for (const std::string& c : w.superordinates)
      for (const std::string& m : w.taxonomy.at(c)) os << c << '\t' << m << '\n';
  }
  for (const EmbeddingSpace& sp : w.spaces) {
    std::ofstream os = open("embeddings_" + sp.name + ".tsv");
    os << "lemma";
    for (std::size_t i = 0; i < sp.dim; ++i) os << "\td" << i;
    os << '\n';
    char buf[32];
    for (const Concept& c : w.concepts) {
      if (!sp.has(c.lemma)) continue;
      os << c.lemma;
      for (double x : sp.at(c.lemma)) {
        std::snprintf(buf, sizeof(buf), "%.17g", x);
        os << '\t' << buf;
      }
      os << '\n';
    }
  }
}

LoadPaths write_things_format_fixture(const std::string& dir, std::uint64_t seed) {
  static const std::vector<std::pair<const char*, std::size_t>> kCategories = {
      {"food", 291}, {"animal", 177}, {"tool", 142}, {"clothing", 107}, {"container", 105},
      {"mammal", 88}, {"electronic device", 74}, {"vehicle", 70}, {"weapon", 48}, {"plant", 47},
      {"home decor", 45}, {"vegetable", 42}, {"accessory", 37}, {"dessert", 36},
      {"furniture", 36}, {"breakfast", 35}, {"fruit", 34}, {"musical instrument", 33},
      {"toy", 33}, {"fastener", 31}, {"toiletry", 31}, {"auto part", 30}, {"sea animal", 30},
      {"bird", 28}, {"kitchen tool", 27}, {"medical equipment", 26}, {"school supply", 26},
      {"office supply", 24}, {"seafood", 24}, {"kitchen equipment", 20}, {"drink", 19},
      {"game", 19}, {"headwear", 19}, {"water vehicle", 19}, {"women's clothing", 19},
      {"livestock", 18}, {"garden tool", 17}, {"insect", 17}, {"outerwear", 16},
      {"protective clothing", 16}, {"candy", 15}, {"condiment", 15}, {"footwear", 15},
      {"jewelry", 15}};
  constexpr std::size_t kSubordinates = 1281;
  constexpr std::size_t kSposeDim = 49, kSenseDim = 32;

  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::string> subs;
  for (std::size_t i = 0; i < kSubordinates; ++i) subs.push_back("object" + std::to_string(i));

  // Categories take fresh objects while any remain, then overlap with
  // objects already used (mammals are also animals and so on).
  std::vector<std::pair<std::string, std::vector<std::string>>> tax;
  std::size_t next = 0;
  for (const auto& [name, k] : kCategories) {
    std::vector<std::string> members;
    const std::size_t fresh = std::min(k, kSubordinates - next);
    for (std::size_t i = 0; i < fresh; ++i) members.push_back(subs[next++]);
    std::vector<std::size_t> pool(next);
    std::iota(pool.begin(), pool.end(), 0);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; members.size() < k; ++i) {
      const std::string& cand = subs[pool[i]];
      if (std::find(members.begin(), members.end(), cand) == members.end()) members.push_back(cand);
    }
    tax.emplace_back(name, std::move(members));
  }

  const fs::path d(dir);
  {
    std::ofstream os(d / "concepts.tsv");
    os << "lemma\tplural\tmass_flag\tsense_id\n";
    for (const auto& [name, k] : kCategories) os << name << '\t' << pluralize(name) << "\t0\t" << name << ".n.01\n";
    for (const std::string& s : subs) os << s << '\t' << s << "s\t0\t" << s << ".n.01\n";
  }
  {
    std::ofstream os(d / "taxonomy.tsv");
    os << "superordinate\tmember\n";
    for (const auto& [name, members] : tax)
      for (const std::string& m : members) os << name << '\t' << m << '\n';
  }
  auto write_vectors = [&](const std::string& file, std::size_t dim, bool with_categories) {
    std::ofstream os(d / file);
    os << "lemma";
    for (std::size_t i = 0; i < dim; ++i) os << "\td" << i;
    os << '\n';
    auto row = [&](const std::string& lemma) {
      os << lemma;
      for (std::size_t i = 0; i < dim; ++i) os << '\t' << normal(rng);
      os << '\n';
    };
    if (with_categories)
      for (const auto& [name, k] : kCategories) row(name);
    for (const std::string& s : subs) row(s);
  };
  write_vectors("embeddings_word-sense.tsv", kSenseDim, true);
  write_vectors("embeddings_spose.tsv", kSposeDim, false);
  return {(d / "concepts.tsv").string(),
          (d / "taxonomy.tsv").string(),
          {{(d / "embeddings_word-sense.tsv").string(), "word-sense"},
           {(d / "embeddings_spose.tsv").string(), "spose"}}};
}

// ---------------------------------------------------------------------------
// Corpus

CorpusConfig CorpusConfig::defaults() {
  CorpusConfig c;
  static const char* copular[] = {"blickable", "wuggy",    "tovish",  "zorpable", "glimmish",
                                  "frabby",    "snorkable", "plentish", "quimmy",  "vornable",
                                  "drassish",  "klebby",   "mipable", "trunnish", "yarby",
                                  "gobbable",  "wembish",  "ploffy",  "ristable", "chonnish"};
  static const char* possessive[] = {"tomas",  "gleps", "vurns",  "krobs",  "snifs",
                                     "daffs",  "plims", "wuds",   "zeps",   "morks",
                                     "brenks", "fozes", "quills", "trebs",  "yoms",
                                     "hasks",  "nibs",  "joffs",  "vekks",  "lorps"};
  for (const char* p : copular) c.copular_properties.emplace_back(p);
  for (const char* p : possessive) c.possessive_properties.emplace_back(p);
  return c;
}

void CorpusConfig::validate() const {
  if (copular_properties.empty() && possessive_properties.empty())
    fail(ErrorCode::kConfig, "corpus: at least one training property is required");
  if (!(mismatch_fraction >= 0.0 && mismatch_fraction < 1.0))
    fail(ErrorCode::kConfig, "corpus: mismatch_fraction must lie in [0, 1)");
  if (!(reversed_fraction >= 0.0 && reversed_fraction < 1.0))
    fail(ErrorCode::kConfig, "corpus: reversed_fraction must lie in [0, 1)");
  if (template_id < 1 || template_id > 4) fail(ErrorCode::kConfig, "corpus: template id must be 1-4");
}

Corpus emit_corpus(const World& w, const CorpusConfig& cfg) {
  cfg.validate();
  Corpus out;
  out.heldout_properties = {kDaxable, kFeps};
  std::set<std::string> lexicon_words;
  for (const Concept& c : w.concepts) {
    for (const std::string& p : Tokenizer::split(c.lemma)) lexicon_words.insert(p);
    for (const std::string& p : Tokenizer::split(c.plural)) lexicon_words.insert(p);
  }
  std::vector<PropertyPhrase> props;
  for (const std::string& p : cfg.copular_properties) props.push_back({p, false});
  for (const std::string& p : cfg.possessive_properties) props.push_back({p, true});
  for (const PropertyPhrase& p : props) {
    if (p.word == kDaxable || p.word == kFeps)
      fail(ErrorCode::kConfig, "corpus: training property '" + p.word + "' collides with a held-out property");
    if (Tokenizer::split(p.word).size() != 1)
      fail(ErrorCode::kConfig, "corpus: property '" + p.word + "' must be a single word");
    if (lexicon_words.count(p.word))
      fail(ErrorCode::kConfig, "corpus: property '" + p.word + "' collides with a lexicon word");
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto pick_prop = [&](std::size_t exclude) {
    std::size_t i;
    do {
      i = std::uniform_int_distribution<std::size_t>(0, props.size() - 1)(rng);
    } while (props.size() > 1 && i == exclude);
    return i;
  };

  // Taxonomy statements, e.g. "robins are birds ."
  for (const std::string& cat : w.superordinates) {
    const Concept& cc = w.find_concept(cat);
    for (const std::string& m : w.taxonomy.at(cat)) {
      const Concept& mc = w.find_concept(m);
      CorpusItem it;
      it.text = surface_form(mc) + (is_singular(mc) ? " is " : " are ") + surface_form(cc) + " .";
      it.category = cat;
      it.member = m;
      out.items.push_back(std::move(it));
    }
  }

  // Labelled QA over the sampled evaluation pairs (training properties only)
  // plus optional random distractor pairs.
  const std::size_t space = w.label_rule.space;
  std::vector<CategoryPair> pairs = sample_pairs(w, space);
  const std::vector<std::string> subs = w.subordinates();
  for (const std::string& cat : w.superordinates) {
    for (std::size_t i = 0; i < cfg.distractor_pairs; ++i) {
      const std::string& m = subs[std::uniform_int_distribution<std::size_t>(0, subs.size() - 1)(rng)];
      if (m == cat) continue;
      pairs.push_back({cat, m, w.is_member(cat, m),
                       cosine(w.spaces[space].at(cat), w.spaces[space].at(m)), Bin::kLow});
    }
  }
  for (const CategoryPair& pr : pairs) {
    const Concept& a = w.find_concept(pr.premise);
    const Concept& b = w.find_concept(pr.conclusion);
    for (std::size_t r = 0; r < cfg.qa_per_pair; ++r) {
      const std::size_t pa = pick_prop(SIZE_MAX);
      std::size_t pb = pa;
      const bool mismatch = unif(rng) < cfg.mismatch_fraction;
      if (mismatch) pb = pick_prop(pa);
      const bool reversed = unif(rng) < cfg.reversed_fraction;
      const Concept& first = reversed ? b : a;
      const Concept& second = reversed ? a : b;
      // Similarity is symmetric; taxonomy only holds category -> member.
      const bool yes = !mismatch && w.label_rule.label(pr.taxonomic && !reversed, pr.similarity);
      CorpusItem it;
      it.qa = true;
      it.prompt = render_prompt(cfg.template_id, surface_form(first),
                                props[pa].predicate(is_singular(first)), surface_form(second),
                                props[pb].predicate(is_singular(second)));
      it.answer = yes ? "Yes" : "No";
      it.text = it.prompt + " " + it.answer;
      it.category = first.lemma;
      it.member = second.lemma;
      out.items.push_back(std::move(it));
    }
  }
  return out;
}

}  // namespace ilab
