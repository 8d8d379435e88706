#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "inheritlab/tape.hpp"
#include "inheritlab/tokenizer.hpp"

namespace ilab {

// Which activation an intervention reads and writes.
enum class Stream { kResidual, kMlpOutput };
const char* stream_name(Stream s);
Stream parse_stream(const std::string& s);

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 0;  // 0 means 4 * d_model
  std::size_t vocab_size = 0;
  std::size_t max_context = 48;
  std::uint64_t seed = 1;

  std::size_t ff() const { return d_ff ? d_ff : 4 * d_model; }
  void validate() const;
};

struct Block {
  Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
  Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

struct TransformerModel {
  ModelConfig config;
  Tokenizer tokenizer;
  Tensor tok_emb, pos_emb;
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b, w_out, b_out;

  // Every parameter tensor in a fixed order (used by the optimizer and I/O).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;
};

// Random initialisation: N(0, 0.02) weights, unit LayerNorm gains, zero biases.
TransformerModel init_model(const ModelConfig& config, Tokenizer tokenizer);
// All weights zero, LayerNorm gains included; embeddings left as given.
void zero_blocks(TransformerModel& model);

// Per-layer activations of one forward pass. All per-layer tensors are
// [len(tokens) x width]; `resid[l]` is the post-block residual stream.
struct TraceBundle {
  std::vector<int> tokens;
  Tensor embed;                 // token + positional embeddings
  std::vector<Tensor> qkv;      // packed attention inputs per block
  std::vector<Tensor> mid;      // residual after the attention sublayer
  std::vector<Tensor> mlp_out;  // MLP sublayer output
  std::vector<Tensor> resid;    // residual after the block
  Tensor logits;                // [len(tokens) x vocab]

  std::size_t length() const { return tokens.size(); }
  // Activation at (layer, position) on the chosen stream.
  std::vector<double> site(std::size_t layer, std::size_t position, Stream s) const;
};

struct Patch {
  std::size_t layer = 0;
  std::size_t position = 0;
  std::vector<double> vector;
};

// Token ids including the leading <bos>.
std::vector<int> encode_prompt(const TransformerModel& m, const std::string& text);

Tensor forward_logits(const TransformerModel& m, const std::vector<int>& tokens);
TraceBundle forward_with_trace(const TransformerModel& m, const std::vector<int>& tokens);
// Trace of a patched pass; patched sites hold the written vectors.
TraceBundle forward_with_trace(const TransformerModel& m, const std::vector<int>& tokens,
                               const std::vector<Patch>& patches, Stream stream);
// Next-token distribution at the final position after applying `patches`.
Tensor patched_forward(const TransformerModel& m, const std::vector<int>& tokens,
                       const std::vector<Patch>& patches, Stream stream = Stream::kResidual);
Tensor patched_logits(const TransformerModel& m, const std::vector<int>& tokens,
                      const std::vector<Patch>& patches, Stream stream = Stream::kResidual);

// Records the model's computation on `tape` for positions >= `position`,
// starting from the activation at (layer, position) replaced by `value`.
// Earlier positions are read from `base`. Returns the final-position logits
// [1 x vocab]. Parameters enter the tape as constants.
Var suffix_logits(Tape& tape, const TransformerModel& m, const TraceBundle& base,
                  std::size_t layer, std::size_t position, Var value,
                  Stream stream = Stream::kResidual);

// Full forward on `tape` with parameters bound to `params` (from bind_parameters).
struct BoundParams {
  Var tok_emb, pos_emb;
  struct BlockVars {
    Var ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<BlockVars> blocks;
  Var lnf_g, lnf_b, w_out, b_out;
  std::vector<Var> all() const;
};
BoundParams bind_parameters(Tape& tape, const TransformerModel& m, bool trainable);
Var forward_on_tape(Tape& tape, const TransformerModel& m, const BoundParams& p,
                    const std::vector<int>& tokens);

struct TrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 16;
  double lr = 3e-3;
  double min_lr_fraction = 0.1;  // cosine decay floor
  std::size_t warmup = 50;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  // Mean loss over the last `tail` steps must fall below this (<= 0 disables).
  double loss_threshold = 0.0;
  std::size_t tail = 50;
  std::uint64_t seed = 1;
  std::size_t log_every = 0;
  std::function<void(std::size_t step, double loss)> on_log;
};

struct TrainReport {
  std::vector<double> losses;
  double final_loss = 0.0;  // mean of the last `tail` steps
};

// Sequences are token ids starting with <bos>. Each may carry a first scored
// target index; targets before it are ignored.
struct Sequence {
  std::vector<int> ids;
  std::size_t score_from = 0;
};

TrainReport train_lm(TransformerModel& model, const std::vector<Sequence>& corpus,
                     const TrainConfig& cfg);
// Builds a vocabulary from `texts`, initialises and trains a model.
TransformerModel train_lm(const std::vector<std::string>& texts, ModelConfig config,
                          const TrainConfig& cfg, TrainReport* report = nullptr);

void save_model(const TransformerModel& m, const std::string& path);
TransformerModel load_model(const std::string& path);

// A hand-wired model whose answer is decided by residual coordinate 0 at
// the final position of the last layer.
struct PlantedSpec {
  // Token id -> category index for nouns naming a category and for members.
  std::vector<std::pair<int, int>> category_tokens;
  std::vector<std::pair<int, int>> member_tokens;
  std::size_t premise_position = 0;
  std::size_t conclusion_position = 0;
  std::size_t final_position = 0;
  bool order_sensitive = true;
};

struct PlantedSite {
  std::size_t layer = 0;
  std::size_t position = 0;
  std::size_t coordinate = 0;
};

TransformerModel build_planted_model(const ModelConfig& config, Tokenizer tokenizer,
                                     const PlantedSpec& spec);
PlantedSite planted_site(const TransformerModel& m, const PlantedSpec& spec);

}  // namespace ilab
