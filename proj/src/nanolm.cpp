#include "inheritlab/nanolm.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "inheritlab/error.hpp"
#include "inheritlab/optim.hpp"

namespace ilab {

namespace k = kernels;

const char* stream_name(Stream s) { return s == Stream::kResidual ? "residual" : "mlp_output"; }

Stream parse_stream(const std::string& s) {
  if (s == "residual") return Stream::kResidual;
  if (s == "mlp_output") return Stream::kMlpOutput;
  fail(ErrorCode::kConfig, "unknown activation stream '" + s + "' (expected residual|mlp_output)");
}

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || max_context == 0)
    fail(ErrorCode::kConfig, "model config: layers, width, heads and context must be positive");
  if (d_model % n_heads != 0)
    fail(ErrorCode::kConfig, "model config: d_model must be divisible by n_heads");
  if (vocab_size == 0) fail(ErrorCode::kConfig, "model config: empty vocabulary");
}

std::vector<Tensor*> TransformerModel::parameters() {
  std::vector<Tensor*> ps = {&tok_emb, &pos_emb};
  for (Block& b : blocks) {
    for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b,
                      &b.w1, &b.b1, &b.w2, &b.b2})
      ps.push_back(t);
  }
  for (Tensor* t : {&lnf_g, &lnf_b, &w_out, &b_out}) ps.push_back(t);
  return ps;
}

std::vector<const Tensor*> TransformerModel::parameters() const {
  auto ps = const_cast<TransformerModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

TransformerModel init_model(const ModelConfig& config_in, Tokenizer tokenizer) {
  TransformerModel m;
  m.config = config_in;
  m.config.vocab_size = tokenizer.size();
  m.config.validate();
  m.tokenizer = std::move(tokenizer);
  const ModelConfig& c = m.config;
  const std::size_t d = c.d_model, ff = c.ff(), v = c.vocab_size;

  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto randn = [&](std::size_t r, std::size_t cols) {
    Tensor t = Tensor::matrix(r, cols);
    for (double& x : t.values()) x = normal(rng);
    return t;
  };
  m.tok_emb = randn(v, d);
  m.pos_emb = randn(c.max_context, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Block b;
    b.ln1_g = Tensor({d}, 1.0);
    b.ln1_b = Tensor({d}, 0.0);
    b.w_qkv = randn(d, 3 * d);
    b.b_qkv = Tensor({3 * d}, 0.0);
    b.w_o = randn(d, d);
    b.b_o = Tensor({d}, 0.0);
    b.ln2_g = Tensor({d}, 1.0);
    b.ln2_b = Tensor({d}, 0.0);
    b.w1 = randn(d, ff);
    b.b1 = Tensor({ff}, 0.0);
    b.w2 = randn(ff, d);
    b.b2 = Tensor({d}, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_g = Tensor({d}, 1.0);
  m.lnf_b = Tensor({d}, 0.0);
  m.w_out = randn(d, v);
  m.b_out = Tensor({v}, 0.0);
  return m;
}

void zero_blocks(TransformerModel& m) {
  for (Block& b : m.blocks)
    for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b,
                      &b.w1, &b.b1, &b.w2, &b.b2})
      std::fill(t->values().begin(), t->values().end(), 0.0);
}

std::vector<double> TraceBundle::site(std::size_t layer, std::size_t position, Stream s) const {
  require(layer < resid.size(), "trace: layer out of range");
  require(position < tokens.size(), "trace: position out of range");
  const Tensor& src = s == Stream::kResidual ? resid[layer] : mlp_out[layer];
  auto r = src.row(position);
  return {r.begin(), r.end()};
}

std::vector<Var> BoundParams::all() const {
  std::vector<Var> v = {tok_emb, pos_emb};
  for (const BlockVars& b : blocks)
    for (Var x : {b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w1, b.b1,
                  b.w2, b.b2})
      v.push_back(x);
  for (Var x : {lnf_g, lnf_b, w_out, b_out}) v.push_back(x);
  return v;
}

BoundParams bind_parameters(Tape& t, const TransformerModel& m, bool trainable) {
  BoundParams p;
  p.tok_emb = t.borrow(m.tok_emb, trainable);
  p.pos_emb = t.borrow(m.pos_emb, trainable);
  for (const Block& b : m.blocks) {
    BoundParams::BlockVars v;
    v.ln1_g = t.borrow(b.ln1_g, trainable);
    v.ln1_b = t.borrow(b.ln1_b, trainable);
    v.w_qkv = t.borrow(b.w_qkv, trainable);
    v.b_qkv = t.borrow(b.b_qkv, trainable);
    v.w_o = t.borrow(b.w_o, trainable);
    v.b_o = t.borrow(b.b_o, trainable);
    v.ln2_g = t.borrow(b.ln2_g, trainable);
    v.ln2_b = t.borrow(b.ln2_b, trainable);
    v.w1 = t.borrow(b.w1, trainable);
    v.b1 = t.borrow(b.b1, trainable);
    v.w2 = t.borrow(b.w2, trainable);
    v.b2 = t.borrow(b.b2, trainable);
    p.blocks.push_back(v);
  }
  p.lnf_g = t.borrow(m.lnf_g, trainable);
  p.lnf_b = t.borrow(m.lnf_b, trainable);
  p.w_out = t.borrow(m.w_out, trainable);
  p.b_out = t.borrow(m.b_out, trainable);
  return p;
}

namespace {

struct BlockVarsOut {
  Var qkv, mid, mlp, out;
};

using RowHook = std::function<Var(Var)>;

// One pre-norm block over rows offset..offset+n-1. `prefix_qkv` holds the
// packed attention inputs of rows 0..offset-1 when offset > 0.
BlockVarsOut block_forward(Tape& t, const BoundParams::BlockVars& b, Var x, std::size_t heads,
                           std::size_t offset, Var prefix_qkv, const RowHook& mlp_hook,
                           const RowHook& out_hook) {
  BlockVarsOut o;
  Var h = t.layer_norm(x, b.ln1_g, b.ln1_b);
  o.qkv = t.add_rowvec(t.matmul(h, b.w_qkv), b.b_qkv);
  Var kv = prefix_qkv.valid() ? t.concat_rows(prefix_qkv, o.qkv) : o.qkv;
  Var att = t.attention(o.qkv, kv, heads, offset);
  o.mid = t.add(x, t.add_rowvec(t.matmul(att, b.w_o), b.b_o));
  Var h2 = t.layer_norm(o.mid, b.ln2_g, b.ln2_b);
  Var f = t.gelu(t.add_rowvec(t.matmul(h2, b.w1), b.b1));
  o.mlp = t.add_rowvec(t.matmul(f, b.w2), b.b2);
  if (mlp_hook) o.mlp = mlp_hook(o.mlp);
  o.out = t.add(o.mid, o.mlp);
  if (out_hook) o.out = out_hook(o.out);
  return o;
}

Var head_logits(Tape& t, const BoundParams& p, Var x) {
  return t.add_rowvec(t.matmul(t.layer_norm(x, p.lnf_g, p.lnf_b), p.w_out), p.b_out);
}

void check_tokens(const TransformerModel& m, const std::vector<int>& tokens) {
  require(!tokens.empty(), "forward: empty token sequence");
  if (tokens.size() > m.config.max_context)
    fail(ErrorCode::kInvalidArgument, "forward: context overflow, " + std::to_string(tokens.size()) +
                                          " tokens > max_context " +
                                          std::to_string(m.config.max_context));
  for (int id : tokens)
    require(id >= 0 && static_cast<std::size_t>(id) < m.config.vocab_size,
            "forward: token id out of range");
}

// Full forward pass, optionally patched, optionally recording a trace.
Var run_full(Tape& t, const TransformerModel& m, const BoundParams& p,
             const std::vector<int>& tokens, const std::vector<Patch>* patches, Stream stream,
             TraceBundle* rec) {
  check_tokens(m, tokens);
  const std::size_t n = tokens.size(), d = m.config.d_model, L = m.config.n_layers;
  std::vector<std::vector<const Patch*>> by_layer(L);
  if (patches) {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const Patch& pt : *patches) {
      require(pt.layer < L, "patch: layer " + std::to_string(pt.layer) + " out of range");
      require(pt.position < n, "patch: position " + std::to_string(pt.position) + " out of range");
      require(pt.vector.size() == d, "patch: vector length " + std::to_string(pt.vector.size()) +
                                         " != d_model " + std::to_string(d));
      require(seen.insert({pt.layer, pt.position}).second,
              "patch: duplicate (layer, position) is ambiguous");
      by_layer[pt.layer].push_back(&pt);
    }
  }
  std::vector<int> pos_ids(n);
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  Var x = t.add(t.embedding(p.tok_emb, tokens), t.embedding(p.pos_emb, pos_ids));
  if (rec) {
    rec->tokens = tokens;
    rec->embed = t.value(x);
  }
  for (std::size_t l = 0; l < L; ++l) {
    RowHook hook;
    if (!by_layer[l].empty()) {
      hook = [&t, &by_layer, l](Var v) {
        for (const Patch* pt : by_layer[l])
          v = t.set_row(v, pt->position, t.leaf(Tensor({pt->vector.size()}, pt->vector), false));
        return v;
      };
    }
    const BlockVarsOut o = block_forward(t, p.blocks[l], x, m.config.n_heads, 0, Var{},
                                         stream == Stream::kMlpOutput ? hook : RowHook{},
                                         stream == Stream::kResidual ? hook : RowHook{});
    x = o.out;
    if (rec) {
      rec->qkv.push_back(t.value(o.qkv));
      rec->mid.push_back(t.value(o.mid));
      rec->mlp_out.push_back(t.value(o.mlp));
      rec->resid.push_back(t.value(o.out));
    }
  }
  Var logits = head_logits(t, p, x);
  if (rec) rec->logits = t.value(logits);
  return logits;
}

}  // namespace

Var forward_on_tape(Tape& tape, const TransformerModel& m, const BoundParams& p,
                    const std::vector<int>& tokens) {
  return run_full(tape, m, p, tokens, nullptr, Stream::kResidual, nullptr);
}

std::vector<int> encode_prompt(const TransformerModel& m, const std::string& text) {
  std::vector<int> ids = {m.tokenizer.bos()};
  for (int id : m.tokenizer.encode(text)) ids.push_back(id);
  return ids;
}

Tensor forward_logits(const TransformerModel& m, const std::vector<int>& tokens) {
  Tape t;
  const BoundParams p = bind_parameters(t, m, false);
  return t.value(run_full(t, m, p, tokens, nullptr, Stream::kResidual, nullptr));
}

TraceBundle forward_with_trace(const TransformerModel& m, const std::vector<int>& tokens) {
  Tape t;
  const BoundParams p = bind_parameters(t, m, false);
  TraceBundle tb;
  run_full(t, m, p, tokens, nullptr, Stream::kResidual, &tb);
  return tb;
}

TraceBundle forward_with_trace(const TransformerModel& m, const std::vector<int>& tokens,
                               const std::vector<Patch>& patches, Stream stream) {
  Tape t;
  const BoundParams p = bind_parameters(t, m, false);
  TraceBundle tb;
  run_full(t, m, p, tokens, &patches, stream, &tb);
  return tb;
}

Tensor patched_logits(const TransformerModel& m, const std::vector<int>& tokens,
                      const std::vector<Patch>& patches, Stream stream) {
  Tape t;
  const BoundParams p = bind_parameters(t, m, false);
  const Tensor& all = t.value(run_full(t, m, p, tokens, &patches, stream, nullptr));
  return k::slice_rows(all, all.rows() - 1, 1);
}

Tensor patched_forward(const TransformerModel& m, const std::vector<int>& tokens,
                       const std::vector<Patch>& patches, Stream stream) {
  return k::softmax_rows(patched_logits(m, tokens, patches, stream));
}

Var suffix_logits(Tape& t, const TransformerModel& m, const TraceBundle& base, std::size_t layer,
                  std::size_t position, Var value, Stream stream) {
  const std::size_t L = m.config.n_layers, n_all = base.length();
  require(layer < L && base.resid.size() == L, "suffix: layer out of range");
  require(position < n_all, "suffix: position out of range");
  require(t.value(value).size() == m.config.d_model, "suffix: patch vector has wrong length");
  const std::size_t n = n_all - position;
  Var x;
  if (stream == Stream::kResidual) {
    x = t.set_row(t.leaf(k::slice_rows(base.resid[layer], position, n), false), 0, value);
  } else {
    Var mid = t.leaf(k::slice_rows(base.mid[layer], position, n), false);
    Var mlp = t.set_row(t.leaf(k::slice_rows(base.mlp_out[layer], position, n), false), 0, value);
    x = t.add(mid, mlp);
  }
  BoundParams p;
  p.lnf_g = t.borrow(m.lnf_g);
  p.lnf_b = t.borrow(m.lnf_b);
  p.w_out = t.borrow(m.w_out);
  p.b_out = t.borrow(m.b_out);
  for (std::size_t l = layer + 1; l < L; ++l) {
    const Block& b = m.blocks[l];
    BoundParams::BlockVars v{t.borrow(b.ln1_g), t.borrow(b.ln1_b), t.borrow(b.w_qkv),
                             t.borrow(b.b_qkv), t.borrow(b.w_o),   t.borrow(b.b_o),
                             t.borrow(b.ln2_g), t.borrow(b.ln2_b), t.borrow(b.w1),
                             t.borrow(b.b1),    t.borrow(b.w2),    t.borrow(b.b2)};
    Var prefix = position > 0 ? t.leaf(k::slice_rows(base.qkv[l], 0, position), false) : Var{};
    x = block_forward(t, v, x, m.config.n_heads, position, prefix, {}, {}).out;
  }
  return head_logits(t, p, t.slice_rows(x, n - 1, 1));
}

// ---------------------------------------------------------------------------
// Training

TrainReport train_lm(TransformerModel& model, const std::vector<Sequence>& corpus,
                     const TrainConfig& cfg) {
  if (corpus.empty()) fail(ErrorCode::kIngest, "train_lm: empty corpus");
  require(cfg.steps > 0 && cfg.batch > 0 && cfg.lr > 0.0, "train_lm: invalid hyperparameters");
  for (const Sequence& s : corpus) {
    if (s.ids.size() < 2) fail(ErrorCode::kIngest, "train_lm: sequence shorter than two tokens");
    check_tokens(model, s.ids);
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  Adam opt(AdamConfig{cfg.lr, 0.9, 0.98, 1e-9, cfg.weight_decay});
  std::vector<Tensor*> params = model.parameters();
  TrainReport rep;
  rep.losses.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> acc;
    for (Tensor* p : params) acc.push_back(Tensor::zeros_like(*p));
    double loss_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const Sequence& s = corpus[pick(rng)];
      std::vector<int> targets(s.ids.size(), -1);
      for (std::size_t i = 0; i + 1 < s.ids.size(); ++i)
        if (i + 1 >= s.score_from) targets[i] = s.ids[i + 1];
      if (std::all_of(targets.begin(), targets.end(), [](int x) { return x < 0; })) continue;
      Tape t;
      const BoundParams bp = bind_parameters(t, model, true);
      Var logits = run_full(t, model, bp, s.ids, nullptr, Stream::kResidual, nullptr);
      Var loss = t.cross_entropy(logits, targets);
      const double lv = t.value(loss).item();
      if (!std::isfinite(lv))
        fail(ErrorCode::kTraining, "train_lm: non-finite loss at step " + std::to_string(step));
      const std::vector<Var> vars = bp.all();
      GradResult g = t.grad(loss, vars);
      for (std::size_t i = 0; i < acc.size(); ++i)
        for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += g.grads[i][j];
      loss_sum += lv;
      ++used;
    }
    if (used == 0) fail(ErrorCode::kIngest, "train_lm: batch contained no scored targets");
    const double inv = 1.0 / static_cast<double>(used);
    for (Tensor& g : acc)
      for (double& x : g.values()) x *= inv;
    const double loss = loss_sum * inv;
    if (!std::isfinite(loss))
      fail(ErrorCode::kTraining, "train_lm: divergence at step " + std::to_string(step));
    rep.losses.push_back(loss);
    if (cfg.clip_norm > 0.0) clip_global_norm(acc, cfg.clip_norm);

    double factor;
    if (step < cfg.warmup) {
      factor = static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    } else {
      const double prog = static_cast<double>(step - cfg.warmup) /
                          static_cast<double>(std::max<std::size_t>(1, cfg.steps - cfg.warmup));
      factor = cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * prog));
    }
    const std::vector<double> scale(params.size(), factor);
    opt.step(params, acc, scale);
    for (const Tensor* p : params)
      if (!p->all_finite())
        fail(ErrorCode::kTraining, "train_lm: non-finite parameters at step " + std::to_string(step));
    if (cfg.log_every && cfg.on_log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      cfg.on_log(step, loss);
  }
  const std::size_t tail = std::min<std::size_t>(std::max<std::size_t>(cfg.tail, 1), rep.losses.size());
  rep.final_loss = std::accumulate(rep.losses.end() - static_cast<std::ptrdiff_t>(tail),
                                   rep.losses.end(), 0.0) / static_cast<double>(tail);
  if (cfg.loss_threshold > 0.0 && !(rep.final_loss < cfg.loss_threshold))
    fail(ErrorCode::kTraining, "train_lm: final loss " + std::to_string(rep.final_loss) +
                                   " did not reach threshold " + std::to_string(cfg.loss_threshold));
  return rep;
}

TransformerModel train_lm(const std::vector<std::string>& texts, ModelConfig config,
                          const TrainConfig& cfg, TrainReport* report) {
  if (texts.empty()) fail(ErrorCode::kIngest, "train_lm: empty corpus");
  Tokenizer tok;
  for (const std::string& s : texts) tok.add_text(s);
  TransformerModel m = init_model(config, std::move(tok));
  std::vector<Sequence> seqs;
  for (const std::string& s : texts) seqs.push_back({encode_prompt(m, s), 0});
  TrainReport r = train_lm(m, seqs, cfg);
  if (report) *report = std::move(r);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, config, vocabulary, then every parameter as
// rank, extents and raw little-endian doubles.

namespace {

constexpr char kMagic[8] = {'I', 'L', 'A', 'B', 'L', 'M', '0', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorCode::kIo, "checkpoint truncated: " + path);
  return v;
}

}  // namespace

void save_model(const TransformerModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write checkpoint: " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  const ModelConfig& c = m.config;
  for (std::uint64_t v : {c.n_layers, c.d_model, c.n_heads, c.ff(), c.vocab_size, c.max_context,
                          c.seed})
    put<std::uint64_t>(os, v);
  put<std::uint64_t>(os, m.tokenizer.size());
  for (const std::string& w : m.tokenizer.words()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(w.size()));
    os.write(w.data(), static_cast<std::streamsize>(w.size()));
  }
  for (const Tensor* t : m.parameters()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t e : t->shape()) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t->data().data()),
             static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!os) fail(ErrorCode::kIo, "failed writing checkpoint: " + path);
}

TransformerModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(ErrorCode::kIngest, "not a model checkpoint: " + path);
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion)
    fail(ErrorCode::kIngest, "unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = get<std::uint64_t>(is, path);
  c.d_model = get<std::uint64_t>(is, path);
  c.n_heads = get<std::uint64_t>(is, path);
  c.d_ff = get<std::uint64_t>(is, path);
  c.vocab_size = get<std::uint64_t>(is, path);
  c.max_context = get<std::uint64_t>(is, path);
  c.seed = get<std::uint64_t>(is, path);
  const auto nwords = get<std::uint64_t>(is, path);
  if (nwords != c.vocab_size) fail(ErrorCode::kIngest, "checkpoint vocabulary size mismatch");
  Tokenizer tok;
  for (std::uint64_t i = 0; i < nwords; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string w(len, '\0');
    is.read(w.data(), len);
    if (!is) fail(ErrorCode::kIo, "checkpoint truncated: " + path);
    if (tok.add_word(w) != static_cast<int>(i))
      fail(ErrorCode::kIngest, "checkpoint vocabulary is inconsistent at entry " + std::to_string(i));
  }
  TransformerModel m = init_model(c, std::move(tok));
  for (Tensor* t : m.parameters()) {
    const auto rank = get<std::uint32_t>(is, path);
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = get<std::uint64_t>(is, path);
    if (shape != t->shape()) fail(ErrorCode::kIngest, "checkpoint parameter shape mismatch");
    is.read(reinterpret_cast<char*>(t->values().data()),
            static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!is) fail(ErrorCode::kIo, "checkpoint truncated: " + path);
  }
  return m;
}

}  // namespace ilab
