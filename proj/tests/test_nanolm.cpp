#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "inheritlab/error.hpp"
#include "inheritlab/nanolm.hpp"

using namespace ilab;

namespace {

std::string prompt2(const std::string& premise, const std::string& conclusion) {
  return "Answer the question. Given that " + premise + " are daxable, is it true that " +
         conclusion + " are daxable? Answer with Yes/No. The answer is:";
}

TransformerModel small_random_model(std::uint64_t seed) {
  Tokenizer tok;
  tok.add_text(prompt2("birds", "robins"));
  tok.add_text("fish sparrows");
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.max_context = 40;
  c.seed = seed;
  return init_model(c, tok);
}

struct Planted {
  TransformerModel model;
  PlantedSpec spec;
};

// Two categories with two single-token members each.
Planted planted(bool order_sensitive) {
  Tokenizer tok;
  const std::vector<std::pair<std::string, std::vector<std::string>>> cats = {
      {"birds", {"robins", "sparrows"}}, {"fish", {"trouts", "salmons"}}, {"tools", {"hammers"}}};
  tok.add_text(prompt2("birds", "robins"));
  PlantedSpec spec;
  for (std::size_t c = 0; c < cats.size(); ++c) {
    spec.category_tokens.emplace_back(tok.add_word(cats[c].first), static_cast<int>(c));
    for (const auto& mem : cats[c].second)
      spec.member_tokens.emplace_back(tok.add_word(mem), static_cast<int>(c));
  }
  const auto words = Tokenizer::split(prompt2("birds", "robins"));
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "birds") spec.premise_position = i + 1;
    if (words[i] == "robins") spec.conclusion_position = i + 1;
  }
  spec.final_position = words.size();
  spec.order_sensitive = order_sensitive;
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 64;
  c.n_heads = 2;
  c.max_context = 40;
  return {build_planted_model(c, tok, spec), spec};
}

// 1 for Yes, 0 for No, -1 when another token wins.
int argmax_yes_no(const TransformerModel& m, const Tensor& dist_or_logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < dist_or_logits.size(); ++i)
    if (dist_or_logits[i] > dist_or_logits[best]) best = i;
  if (best == static_cast<std::size_t>(m.tokenizer.id("Yes"))) return 1;
  if (best == static_cast<std::size_t>(m.tokenizer.id("No"))) return 0;
  return -1;
}

}  // namespace

TEST_CASE("tokenizer splits punctuation and round-trips normalised text") {
  Tokenizer tok;
  const std::string s = "Given that sea-gulls are daxable,  is it true?\nAnswer:";
  tok.add_text(s);
  const auto ids = tok.encode(s);
  CHECK(tok.decode(ids) == Tokenizer::normalize(s));
  CHECK(Tokenizer::split("sea-gull") == std::vector<std::string>{"sea", "-", "gull"});
  CHECK(tok.id("Yes") != tok.id("No"));
  CHECK_THROWS_AS(tok.id("zebra"), Error);
  try {
    tok.encode("zebra");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("zebra") != std::string::npos);
    CHECK(e.code() == ErrorCode::kIngest);
  }
}

TEST_CASE("traced and untraced logits are bit-identical and trace has the right shape") {
  const TransformerModel m = small_random_model(3);
  const auto ids = encode_prompt(m, prompt2("birds", "robins"));
  const Tensor plain = forward_logits(m, ids);
  const TraceBundle tb = forward_with_trace(m, ids);
  CHECK(plain.identical(tb.logits));
  REQUIRE(tb.resid.size() == m.config.n_layers);
  for (const Tensor& r : tb.resid) {
    CHECK(r.rows() == ids.size());
    CHECK(r.cols() == m.config.d_model);
  }
}

TEST_CASE("context overflow is reported with lengths") {
  TransformerModel m = small_random_model(3);
  std::vector<int> ids(m.config.max_context + 1, m.tokenizer.bos());
  try {
    forward_logits(m, ids);
    FAIL("expected overflow");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("41") != std::string::npos);
  }
}

TEST_CASE("zero-weight blocks pass the embedding stream through unchanged") {
  TransformerModel m = small_random_model(4);
  zero_blocks(m);
  const auto ids = encode_prompt(m, prompt2("fish", "sparrows"));
  const TraceBundle tb = forward_with_trace(m, ids);
  Tensor expected = Tensor::matrix(ids.size(), m.config.d_model);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t c = 0; c < m.config.d_model; ++c)
      expected.at(i, c) = m.tok_emb.at(static_cast<std::size_t>(ids[i]), c) + m.pos_emb.at(i, c);
  for (const Tensor& r : tb.resid) CHECK(r.identical(expected));
}

TEST_CASE("patched forward contracts") {
  const TransformerModel m = small_random_model(5);
  const auto ids = encode_prompt(m, prompt2("birds", "robins"));
  const Tensor plain = forward_logits(m, ids);
  const Tensor none = patched_logits(m, ids, {});
  CHECK(none.identical(kernels::slice_rows(plain, plain.rows() - 1, 1)));
  CHECK_THROWS_AS(patched_logits(m, ids, {{0, 1, std::vector<double>(3, 0.0)}}), Error);
  CHECK_THROWS_AS(patched_logits(m, ids, {{9, 1, std::vector<double>(16, 0.0)}}), Error);
  std::vector<Patch> dup = {{1, 2, std::vector<double>(16, 0.0)}, {1, 2, std::vector<double>(16, 1.0)}};
  CHECK_THROWS_AS(patched_logits(m, ids, dup), Error);
}

TEST_CASE("patching leaves earlier activations untouched") {
  const TransformerModel m = small_random_model(6);
  const auto ids = encode_prompt(m, prompt2("birds", "robins"));
  const TraceBundle base = forward_with_trace(m, ids);
  const std::size_t layer = 1, pos = 9, d = m.config.d_model;
  const std::vector<double> v(d, 0.3);
  const TraceBundle pt = forward_with_trace(m, ids, {{layer, pos, v}}, Stream::kResidual);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const bool earlier = l < layer || (l == layer && i < pos) || i < pos;
      const auto a = base.resid[l].row(i);
      const auto b = pt.resid[l].row(i);
      const bool same = std::equal(a.begin(), a.end(), b.begin());
      if (earlier) CHECK(same);
      if (l == layer && i == pos) CHECK(std::equal(v.begin(), v.end(), b.begin()));
      if (l > layer && i >= pos) CHECK_FALSE(same);
    }
  }
}

TEST_CASE("suffix recomputation matches the full patched pass bit-for-bit") {
  const TransformerModel m = small_random_model(7);
  const auto ids = encode_prompt(m, prompt2("fish", "robins"));
  const TraceBundle base = forward_with_trace(m, ids);
  const TraceBundle src = forward_with_trace(m, encode_prompt(m, prompt2("birds", "sparrows")));
  for (Stream s : {Stream::kResidual, Stream::kMlpOutput}) {
    for (std::size_t layer = 0; layer < m.config.n_layers; ++layer) {
      for (std::size_t pos : {std::size_t{0}, std::size_t{7}, ids.size() - 1}) {
        const auto v = src.site(layer, pos, s);
        const Tensor full = patched_logits(m, ids, {{layer, pos, v}}, s);
        Tape tape;
        Var val = tape.leaf(Tensor({v.size()}, v), false);
        const Tensor suf = tape.value(suffix_logits(tape, m, base, layer, pos, val, s));
        CHECK(suf.identical(full));
      }
    }
  }
  // Patching a site with its own value reproduces the plain forward.
  const auto own = base.site(1, 5, Stream::kResidual);
  CHECK(patched_logits(m, ids, {{1, 5, own}})
            .identical(kernels::slice_rows(base.logits, ids.size() - 1, 1)));
}

TEST_CASE("checkpoint round-trips exactly") {
  const TransformerModel m = small_random_model(8);
  const std::string path = (std::filesystem::temp_directory_path() / "ilab_ckpt_test.bin").string();
  save_model(m, path);
  const TransformerModel r = load_model(path);
  std::filesystem::remove(path);
  CHECK(r.tokenizer.words() == m.tokenizer.words());
  const auto a = m.parameters();
  const auto b = r.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->identical(*b[i]));
}

TEST_CASE("training memorises a repeated sentence and is seed-deterministic") {
  const std::vector<std::string> corpus = {"a robin is a bird ."};
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.max_context = 16;
  c.seed = 9;
  TrainConfig tc;
  tc.steps = 200;
  tc.batch = 1;
  tc.lr = 1e-2;
  tc.warmup = 10;
  tc.tail = 1;
  tc.seed = 9;
  TrainReport rep;
  const TransformerModel m = train_lm(corpus, c, tc, &rep);
  // Per-token loss on the sentence, excluding the unpredictable first token.
  const auto ids = encode_prompt(m, corpus[0]);
  const Tensor lp = kernels::log_softmax_rows(forward_logits(m, ids));
  double nll = 0.0;
  for (std::size_t i = 1; i + 1 < ids.size(); ++i)
    nll -= lp.at(i, static_cast<std::size_t>(ids[i + 1]));
  nll /= static_cast<double>(ids.size() - 2);
  CHECK(nll < 0.05);
  CHECK(rep.losses.size() == 200);

  const TransformerModel again = train_lm(corpus, c, tc);
  const auto a = m.parameters();
  const auto b = again.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->identical(*b[i]));
}

TEST_CASE("empty corpus is an ingestion error") {
  try {
    train_lm(std::vector<std::string>{}, ModelConfig{}, TrainConfig{});
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kIngest);
  }
}

TEST_CASE("planted model answers by taxonomy and is controlled by coordinate 0") {
  for (bool sensitive : {true, false}) {
    const Planted p = planted(sensitive);
    const TransformerModel& m = p.model;
    const PlantedSite site = planted_site(m, p.spec);
    const std::vector<std::tuple<std::string, std::string, int>> items = {
        {"birds", "robins", 1}, {"birds", "sparrows", 1}, {"fish", "trouts", 1},
        {"fish", "robins", 0},  {"birds", "salmons", 0},  {"tools", "hammers", 1},
        {"tools", "trouts", 0}};
    for (const auto& [a, b, label] : items) {
      INFO(a << " / " << b << " sensitive=" << sensitive);
      const auto ids = encode_prompt(m, prompt2(a, b));
      REQUIRE(ids.size() == p.spec.final_position + 1);
      const TraceBundle tb = forward_with_trace(m, ids);
      const Tensor last = kernels::slice_rows(tb.logits, ids.size() - 1, 1);
      CHECK(argmax_yes_no(m, last) == label);
      auto v = tb.site(site.layer, site.position, Stream::kResidual);
      for (std::size_t c = 0; c < v.size(); ++c) {
        auto w = v;
        w[c] = -w[c];
        const int got = argmax_yes_no(m, patched_logits(m, ids, {{site.layer, site.position, w}}));
        if (c == site.coordinate)
          CHECK(got == 1 - label);
        else
          CHECK(got == label);
      }
      const auto rev = encode_prompt(m, prompt2(b, a));
      const int rev_label = argmax_yes_no(m, patched_logits(m, rev, {}));
      CHECK(rev_label == (sensitive ? 0 : label));
    }
  }
}

TEST_CASE("patching the planted site with another prompt's vector reproduces that prompt") {
  const Planted p = planted(true);
  const TransformerModel& m = p.model;
  const PlantedSite site = planted_site(m, p.spec);
  const auto base = encode_prompt(m, prompt2("fish", "robins"));
  const auto src = encode_prompt(m, prompt2("birds", "robins"));
  const TraceBundle ts = forward_with_trace(m, src);
  const Tensor got = patched_forward(m, base, {{site.layer, site.position,
                                                ts.site(site.layer, site.position, Stream::kResidual)}});
  const Tensor want = kernels::softmax_rows(kernels::slice_rows(ts.logits, src.size() - 1, 1));
  CHECK(got.identical(want));
}
