#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "inheritlab/error.hpp"
#include "inheritlab/stimuli.hpp"
#include "inheritlab/tokenizer.hpp"
#include "inheritlab/world.hpp"

using namespace ilab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ilab_test_world_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInternal;
}

}  // namespace

TEST_CASE("cosine basics") {
  const std::vector<double> v{0.3, -1.2, 2.0}, e0{1, 0, 0}, e1{0, 1, 0}, z{0, 0, 0};
  CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine(e0, e1) == 0.0);
  CHECK(code_of([&] { cosine(v, z); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { cosine(v, std::vector<double>{1, 2}); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("label rules") {
  CHECK(parse_label_rule("taxonomy").kind == LabelRuleKind::kTaxonomy);
  const LabelRule s = parse_label_rule("similarity(0.4)");
  CHECK(s.kind == LabelRuleKind::kSimilarity);
  CHECK(s.label(false, 0.41));
  CHECK_FALSE(s.label(true, 0.4));
  const LabelRule m = parse_label_rule("mixed(0.5,0.6)");
  CHECK(m.label(true, 0.3));   // 0.5 + 0.15
  CHECK_FALSE(m.label(true, 0.1));
  CHECK(code_of([] { parse_label_rule("nearest"); }) == ErrorCode::kConfig);
}

TEST_CASE("world spec validation") {
  WorldSpec spec;
  spec.k = 7;
  CHECK(code_of([&] { generate_world(spec); }) == ErrorCode::kConfig);
  spec = {};
  spec.sibling_overlap = 0.99;
  CHECK(code_of([&] { spec.validate(); }) == ErrorCode::kConfig);
  spec = {};
  spec.dim = 10;
  CHECK(code_of([&] { spec.validate(); }) == ErrorCode::kConfig);
}

TEST_CASE("default world: structure and similarity layout") {
  const World w = generate_world(WorldSpec{});
  const WorldCounts c = count(w);
  CHECK(c.superordinates == 16);
  CHECK(c.subordinates == 128);
  CHECK(c.taxonomic_pairs == 128);
  CHECK(c.spaces == 2);

  for (std::size_t s = 0; s < w.spaces.size(); ++s) {
    const EmbeddingSpace& sp = w.spaces[s];
    for (const auto& [lemma, v] : sp.vectors) {
      double n = 0.0;
      for (double x : v) n += x * x;
      CHECK(std::abs(n - 1.0) < 1e-12);
    }
    // Brute-force check of property (b): some non-member beats the median member.
    for (const std::string& cat : w.superordinates) {
      std::vector<double> mem;
      double best_non = -2.0;
      for (const std::string& m : w.subordinates()) {
        const double v = cosine(sp.at(cat), sp.at(m));
        if (w.is_member(cat, m)) mem.push_back(v);
        else best_non = std::max(best_non, v);
      }
      std::sort(mem.begin(), mem.end());
      const double median = 0.5 * (mem[mem.size() / 2 - 1] + mem[mem.size() / 2]);
      CHECK_MESSAGE(best_non > median, "category " << cat << " in " << sp.name);
    }
  }
  // Spose superordinates are the renormalised member mean.
  const EmbeddingSpace& spose = w.spaces[w.space_index("spose")];
  CHECK(spose.tag == SpaceTag::kSpose);
  for (const std::string& cat : w.superordinates) {
    std::vector<double> mean(spose.dim, 0.0);
    for (const std::string& m : w.taxonomy.at(cat))
      for (std::size_t i = 0; i < spose.dim; ++i) mean[i] += spose.at(m)[i];
    CHECK(cosine(mean, spose.at(cat)) > 1.0 - 1e-12);
  }
}

TEST_CASE("zero overlap and zero noise separate members from non-members") {
  WorldSpec spec;
  spec.sibling_overlap = 0.0;
  spec.noise = 0.0;
  const World w = generate_world(spec);
  for (const auto& prof : similarity_profile(w, 0)) {
    CHECK(prof.max_nonmember < prof.min_member);
    CHECK(prof.nonmembers_above_median == 0);
  }
}

TEST_CASE("generation is seed-deterministic and lexicon is clean") {
  const World a = generate_world(WorldSpec{});
  const World b = generate_world(WorldSpec{});
  REQUIRE(a.concepts.size() == b.concepts.size());
  for (std::size_t i = 0; i < a.concepts.size(); ++i) CHECK(a.concepts[i].lemma == b.concepts[i].lemma);
  CHECK(a.spaces[0].at(a.superordinates[0]) == b.spaces[0].at(b.superordinates[0]));

  std::set<std::string> words;
  std::size_t mass = 0, hyphen = 0;
  for (const Concept& c : a.concepts) {
    CHECK(!c.lemma.empty());
    CHECK((c.mass || !c.plural.empty()));
    mass += c.mass;
    hyphen += c.lemma.find('-') != std::string::npos;
    CHECK(words.insert(c.lemma).second);
  }
  CHECK(mass > 0);
  CHECK(hyphen > 0);
  CHECK_FALSE(words.count("daxable"));
  CHECK_FALSE(words.count("feps"));
}

TEST_CASE("load_world: minimal world and error paths") {
  const fs::path d = scratch("minimal");
  write(d / "concepts.tsv", "lemma\tplural\tmass_flag\tsense_id\nbird\tbirds\t0\tbird.n.01\n"
                            "robin\trobins\t0\t\nhoney\t\t1\t\nsparrow\tsparrows\t0\t\n");
  write(d / "taxonomy.tsv", "superordinate\tmember\nbird\trobin\nbird\tsparrow\nbird\trobin\n");
  write(d / "emb.tsv", "lemma\td0\td1\nbird\t1\t0\nrobin\t0.9\t0.1\nsparrow\t0.8\t0.3\n"
                       "honey\t0\t1\nzebra\t0.5\t0.5\n");
  const LoadPaths paths{(d / "concepts.tsv").string(), (d / "taxonomy.tsv").string(),
                        {{(d / "emb.tsv").string(), "word-sense"}}};
  const World w = load_world(paths);
  CHECK(count(w).superordinates == 1);
  CHECK(w.taxonomy.at("bird").size() == 2);
  CHECK(w.find_concept("honey").mass);
  const auto has_warning = [&](const std::string& needle) {
    return std::any_of(w.warnings.begin(), w.warnings.end(),
                       [&](const std::string& s) { return s.find(needle) != std::string::npos; });
  };
  CHECK(has_warning("deduplicated"));
  CHECK(has_warning("unknown concepts ignored"));
  CHECK(std::abs(cosine(w.spaces[0].at("robin"), w.spaces[0].at("robin")) - 1.0) < 1e-15);

  write(d / "empty_tax.tsv", "superordinate\tmember\n");
  LoadPaths empty = paths;
  empty.taxonomy = (d / "empty_tax.tsv").string();
  CHECK(code_of([&] { load_world(empty); }) == ErrorCode::kIngest);

  write(d / "bad.tsv", "lemma\td0\td1\nbird\t1\t0\nrobin\tx\t0\n");
  LoadPaths bad = paths;
  bad.embeddings = {{(d / "bad.tsv").string(), "word-sense"}};
  try {
    load_world(bad);
    FAIL("expected an ingestion error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kIngest);
    CHECK(std::string(e.what()).find("bad.tsv:3") != std::string::npos);
  }

  LoadPaths missing = paths;
  missing.embeddings = {{(d / "nope.tsv").string(), "spose"}};
  CHECK(code_of([&] { load_world(missing); }) == ErrorCode::kConfig);
}

TEST_CASE("load_world drops taxonomy rows lacking embeddings and recomputes spose means") {
  const fs::path d = scratch("drop");
  write(d / "concepts.tsv", "lemma\tplural\tmass_flag\tsense_id\nbird\tbirds\t0\t\n"
                            "robin\trobins\t0\t\nowl\towls\t0\t\nwren\twrens\t0\t\n");
  write(d / "taxonomy.tsv", "superordinate\tmember\nbird\trobin\nbird\towl\nbird\twren\n");
  write(d / "emb.tsv", "lemma\td0\td1\td2\nbird\t9\t9\t9\nrobin\t1\t0\t0\nowl\t0\t1\t0\n");
  const World w = load_world({(d / "concepts.tsv").string(), (d / "taxonomy.tsv").string(),
                              {{(d / "emb.tsv").string(), "spose"}}});
  CHECK(w.taxonomy.at("bird").size() == 2);
  const auto& v = w.spaces[0].at("bird");
  CHECK(v[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(v[1] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(v[2] == 0.0);
}

TEST_CASE("save then load reproduces a generated world") {
  const World w = generate_world(WorldSpec{});
  const fs::path d = scratch("roundtrip");
  save_world(w, d.string());
  const World r = load_world({(d / "concepts.tsv").string(), (d / "taxonomy.tsv").string(),
                              {{(d / "embeddings_word-sense.tsv").string(), "word-sense"},
                               {(d / "embeddings_spose.tsv").string(), "spose"}}});
  CHECK(r.superordinates == w.superordinates);
  CHECK(r.taxonomy == w.taxonomy);
  for (std::size_t s = 0; s < 2; ++s)
    for (const auto& [lemma, v] : w.spaces[s].vectors) {
      const auto& u = r.spaces[s].at(lemma);
      for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(u[i] - v[i]) < 1e-12);
    }
}

TEST_CASE("THINGS-format export: 44 categories, 1281 subordinates, 2016 and 4032 pairs") {
  const fs::path d = scratch("things");
  const LoadPaths paths = write_things_format_fixture(d.string(), 3);
  const World w = load_world(paths);
  const WorldCounts c = count(w);
  CHECK(c.superordinates == 44);
  CHECK(c.subordinates == 1281);
  CHECK(c.taxonomic_pairs == 2016);
  for (std::size_t s = 0; s < w.spaces.size(); ++s) CHECK(sample_pairs(w, s).size() == 4032);
}

TEST_CASE("corpus: labels, hygiene and collisions") {
  const World w = generate_world(WorldSpec{});
  const CorpusConfig cfg = CorpusConfig::defaults();
  const Corpus corpus = emit_corpus(w, cfg);
  std::size_t qa = 0, statements = 0;
  for (const CorpusItem& it : corpus.items) {
    for (const std::string& tok : Tokenizer::split(it.text)) {
      CHECK(tok != "daxable");
      CHECK(tok != "feps");
    }
    if (!it.qa) {
      ++statements;
      continue;
    }
    ++qa;
    const ParsedPrompt p = parse_prompt(it.prompt);
    CHECK(p.template_id == 2);
    const bool match = p.premise_property == p.conclusion_property;
    // Taxonomy rule: Yes exactly for matching properties on a true category -> member pair.
    CHECK((it.answer == "Yes") == (match && w.is_member(it.category, it.member)));
  }
  CHECK(statements == w.taxonomic_pair_count());
  CHECK(qa > 0);

  CorpusConfig bad = cfg;
  bad.copular_properties.push_back("daxable");
  CHECK(code_of([&] { emit_corpus(w, bad); }) == ErrorCode::kConfig);
  bad = cfg;
  bad.possessive_properties.push_back(w.find_concept(w.superordinates[0]).plural);
  CHECK(code_of([&] { emit_corpus(w, bad); }) == ErrorCode::kConfig);
}

TEST_CASE("corpus: similarity rule labels follow cosine") {
  WorldSpec spec;
  spec.label_rule = parse_label_rule("similarity(0.55)");
  const World w = generate_world(spec);
  CorpusConfig cfg = CorpusConfig::defaults();
  cfg.mismatch_fraction = 0.0;
  cfg.reversed_fraction = 0.0;
  const Corpus corpus = emit_corpus(w, cfg);
  const EmbeddingSpace& sp = w.spaces[0];
  std::size_t yes = 0, n = 0;
  for (const CorpusItem& it : corpus.items) {
    if (!it.qa) continue;
    ++n;
    const double sim = cosine(sp.at(it.category), sp.at(it.member));
    CHECK((it.answer == "Yes") == (sim > 0.55));
    yes += it.answer == "Yes";
  }
  CHECK(yes > 0);
  CHECK(yes < n);
}
